from fastapi import FastAPI

from mergecl import __version__
from mergecl.routes.main import api_router


app = FastAPI(title="mergecl run ledger", version=__version__)

app.include_router(api_router)


@app.get("/")
async def root():
    return {"message": "mergecl run ledger", "version": __version__}
