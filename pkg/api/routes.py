"""
API routes for liftmesh inference.
"""

import asyncio
import logging

from fastapi import APIRouter, HTTPException
from fastapi.responses import JSONResponse

from .models import LiftRequest, LiftResponse, MeshRequest, MeshResponse
from .services import PipelineService
from liftmesh.exceptions import (ContractViolation, IngestionError,
                                 TopologyError, TopologyNotFoundError)

logger = logging.getLogger(__name__)

router = APIRouter()

_CLIENT_ERRORS = (ContractViolation, IngestionError, TopologyError, TopologyNotFoundError)


@router.post(
    "/lift",
    response_model=LiftResponse,
    response_model_exclude_none=True,
    summary="Lift a 2D skeleton",
    description="Returns root-relative 3D joints, shape coefficients and camera",
)
async def lift(request: LiftRequest) -> LiftResponse:
    """
    Endpoint running the lifter on one pose.

    Raises:
        HTTPException: 422 for malformed poses, 500 otherwise
    """
    try:
        out = await asyncio.to_thread(PipelineService.lift, request.joints, request.topology)
        return LiftResponse(**out.to_dict(include_features=request.include_features))

    except _CLIENT_ERRORS as e:
        logger.warning(f"Rejected lift request: {e}")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Unexpected error in lift endpoint: {e}")
        raise HTTPException(status_code=500, detail=f"Internal server error: {str(e)}")


@router.post(
    "/mesh",
    response_model=MeshResponse,
    response_model_exclude_none=True,
    summary="Recover a body mesh",
    description="Runs lifter, pose-and-shape estimator and forward kinematics",
)
async def mesh(request: MeshRequest) -> MeshResponse:
    """Endpoint running the full pipeline on one pose."""
    try:
        result = await asyncio.to_thread(PipelineService.mesh, request.joints, request.topology)
        return MeshResponse(**result.to_dict(include_vertices=request.include_vertices))

    except _CLIENT_ERRORS as e:
        logger.warning(f"Rejected mesh request: {e}")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Unexpected error in mesh endpoint: {e}")
        raise HTTPException(status_code=500, detail=f"Internal server error: {str(e)}")


@router.get(
    "/health",
    summary="Health check",
    description="Endpoint to verify the API is up",
)
async def health_check():
    """Health check endpoint."""
    return JSONResponse(content={"status": "healthy"})
