import os
from pathlib import Path

from sqlmodel import create_engine


DATABASE_URL = os.getenv(
    "MERGECL_DATABASE_URL", f"sqlite:///{Path(__file__).parent / 'ledger.db'}"
).replace("postgres://", "postgresql+psycopg://", 1)
engine = create_engine(DATABASE_URL)
