"""
STAND Logit Server - Main Entry Point
Serves a local target model's next-token distributions for the remote client
"""

from fastapi import FastAPI, Request, status
from fastapi.responses import JSONResponse
from fastapi.exceptions import RequestValidationError
from starlette.exceptions import HTTPException as StarletteHTTPException
from typing import Optional
import time
import logging
from contextlib import asynccontextmanager

from app.core.config import settings
from app.core.exceptions import InputError, StandError
from app.models.base import TargetModel
from app.api.v1.router import api_router

logger = logging.getLogger(__name__)


def _default_target() -> TargetModel:
    from app.services.target_loader import load_target

    return load_target(settings.MODEL_SPEC_PATH or "synthetic:reasoning")


def create_app(target: Optional[TargetModel] = None) -> FastAPI:
    """Build the logit server around `target` (defaults to MODEL_SPEC_PATH or the synthetic reasoning task)"""

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        """Lifespan events for startup and shutdown"""
        logger.info(f"Starting logit server (vocab {app.state.target.vocab_size}, T={app.state.target.temperature})")
        yield
        logger.info("Shutting down logit server")

    app = FastAPI(
        title=f"{settings.PROJECT_NAME} logit server",
        version=settings.VERSION,
        description="Next-token distributions of a local target model",
        lifespan=lifespan,
    )
    app.state.target = target if target is not None else _default_target()

    # ========================================================================
    # MIDDLEWARE
    # ========================================================================

    @app.middleware("http")
    async def add_process_time_header(request: Request, call_next):
        """Add X-Process-Time header to all responses"""
        start_time = time.time()
        response = await call_next(request)
        response.headers["X-Process-Time"] = str(time.time() - start_time)
        return response

    @app.middleware("http")
    async def log_requests(request: Request, call_next):
        response = await call_next(request)
        logger.debug(f"{request.method} {request.url.path} -> {response.status_code}")
        return response

    # ========================================================================
    # EXCEPTION HANDLERS
    # ========================================================================

    @app.exception_handler(StarletteHTTPException)
    async def http_exception_handler(request: Request, exc: StarletteHTTPException):
        """Handle HTTP exceptions"""
        return JSONResponse(
            status_code=exc.status_code,
            content={"error": exc.detail, "status_code": exc.status_code},
        )

    @app.exception_handler(RequestValidationError)
    async def validation_exception_handler(request: Request, exc: RequestValidationError):
        """Handle validation errors"""
        return JSONResponse(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            content={"error": "Validation error", "details": exc.errors(), "status_code": 422},
        )

    @app.exception_handler(InputError)
    async def input_exception_handler(request: Request, exc: InputError):
        return JSONResponse(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
            content={"error": str(exc), "status_code": 422},
        )

    @app.exception_handler(StandError)
    async def stand_exception_handler(request: Request, exc: StandError):
        logger.error(f"Target model error: {exc}", exc_info=True)
        return JSONResponse(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            content={"error": str(exc), "status_code": 500},
        )

    # ========================================================================
    # ROUTES
    # ========================================================================

    @app.get("/health", tags=["Health"])
    async def health_check():
        """Health check endpoint; vocab_size lets clients configure themselves"""
        return {
            "status": "healthy",
            "version": settings.VERSION,
            "vocab_size": app.state.target.vocab_size,
            "temperature": app.state.target.temperature,
        }

    app.include_router(api_router, prefix="/v1")
    return app


# ============================================================================
# STARTUP
# ============================================================================

if __name__ == "__main__":
    import uvicorn

    logging.basicConfig(
        level=settings.LOG_LEVEL,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    uvicorn.run(create_app(), host=settings.SERVER_HOST, port=settings.SERVER_PORT, log_level="info")
