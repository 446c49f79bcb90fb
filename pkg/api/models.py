"""
Pydantic models for API request/response validation.
"""

from typing import List, Optional

from pydantic import BaseModel, Field


class LiftRequest(BaseModel):
    """Request model for lifting one 2D skeleton."""

    joints: List[List[float]] = Field(
        ..., description="J×2 joint coordinates in normalized image units"
    )
    topology: str = Field(default="h36m17", description="Skeleton topology name")
    include_features: bool = Field(
        default=False, description="Return the per-joint lifter features"
    )


class LiftResponse(BaseModel):
    """Lifter outputs for one pose."""

    joints3d: List[List[float]] = Field(..., description="Root-relative 3D joints (mm)")
    shape: List[float] = Field(..., description="Body shape coefficients")
    camera: List[float] = Field(..., description="Weak-perspective camera (s, tx, ty)")
    features: Optional[List[List[float]]] = Field(None, description="Per-joint features")


class MeshRequest(BaseModel):
    """Request model for full mesh recovery."""

    joints: List[List[float]] = Field(
        ..., description="J×2 joint coordinates in normalized image units"
    )
    topology: str = Field(default="h36m17", description="Skeleton topology name")
    include_vertices: bool = Field(default=True, description="Return mesh vertices")


class MeshResponse(BaseModel):
    """Full pipeline outputs for one pose."""

    theta: List[float] = Field(..., description="72 axis-angle pose parameters (rad)")
    beta: List[float] = Field(..., description="Body shape coefficients")
    camera: List[float] = Field(..., description="Weak-perspective camera (s, tx, ty)")
    joints3d: List[List[float]] = Field(..., description="Root-relative 3D joints (mm)")
    vertices: Optional[List[List[float]]] = Field(None, description="Mesh vertices (mm)")
