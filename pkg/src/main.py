import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from src import config
from src.routes import federation

logging.basicConfig(level=config.LOG_LEVEL)
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    if config.CONFIG_PATH and federation.coordinator is None:
        logger.info(f"loading experiment from {config.CONFIG_PATH}")
        federation.configure(config.load_experiment_config(config.CONFIG_PATH))
    yield


app = FastAPI(
    title="MoE Federation Exchange",
    description="Round coordinator for federated mixture-of-experts fine-tuning",
    version="0.1.0",
    openapi_version="3.1.0",
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.get("/health")
def health_check():
    """Return application health status."""
    return {"status": "ok"}


@app.get("/healthz")
def healthz_check():
    """Return application health status (alternative endpoint)."""
    return {"status": "ok"}


app.include_router(federation.router, tags=["federation"])
