from fastapi import APIRouter

from mergecl.routes import runs

api_router = APIRouter()

api_router.include_router(runs.router)
