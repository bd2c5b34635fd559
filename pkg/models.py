from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Any, Dict, List, Literal, Optional, Tuple
from datetime import datetime
from enum import Enum
from pathlib import Path
import numpy as np
import os

# Rotation blocks are checked against this tolerance on construction
ORTHONORMAL_TOL = 1e-5


class CameraView(BaseModel):
    """Pinhole camera: +x right, +y down, +z forward, w2c maps world to camera."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    width: int = Field(ge=1)
    height: int = Field(ge=1)
    fx: float = Field(gt=0)
    fy: float = Field(gt=0)
    cx: float
    cy: float
    w2c: np.ndarray

    @field_validator("w2c", mode="before")
    @classmethod
    def _as_matrix(cls, value: Any) -> np.ndarray:
        matrix = np.asarray(value, dtype=np.float64)
        if matrix.size != 16:
            raise ValueError(f"w2c needs 16 values, got {matrix.size}")
        matrix = matrix.reshape(4, 4).copy()
        if not np.all(np.isfinite(matrix)):
            raise ValueError("w2c contains non-finite values")
        matrix.setflags(write=False)
        return matrix

    @model_validator(mode="after")
    def _check_rigid(self) -> "CameraView":
        rot = self.w2c[:3, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > ORTHONORMAL_TOL:
            raise ValueError("w2c rotation block is not orthonormal")
        if np.linalg.det(rot) <= 0:
            raise ValueError("w2c rotation block has negative determinant")
        if np.abs(self.w2c[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > ORTHONORMAL_TOL:
            raise ValueError("w2c last row must be (0, 0, 0, 1)")
        return self

    @property
    def rotation(self) -> np.ndarray:
        return self.w2c[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.w2c[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates"""
        return -self.rotation.T @ self.translation

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def with_pose(self, w2c: np.ndarray) -> "CameraView":
        return CameraView(
            width=self.width, height=self.height,
            fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, w2c=w2c,
        )

    def to_json(self) -> Dict[str, Any]:
        return {
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "w2c": [float(v) for v in self.w2c.reshape(-1)],
        }


class DegradeMode(str, Enum):
    LOW_LIGHT = "low_light"
    OVER_EXPOSURE = "over_exposure"


class DegradeParams(BaseModel):
    exposure: float = Field(gt=0)
    gamma: float = Field(gt=0)
    mode: DegradeMode = DegradeMode.LOW_LIGHT


class DegradeConfig(BaseModel):
    """Uniform sampling bounds for one scene's degradation draw"""

    exposure_min: float = Field(default=0.05, gt=0)
    exposure_max: float = Field(default=0.1, gt=0)
    gamma_min: float = Field(default=1.3, gt=0)
    gamma_max: float = Field(default=1.4, gt=0)
    seed: int = 0
    mode: DegradeMode = DegradeMode.LOW_LIGHT

    @model_validator(mode="after")
    def _check_bounds(self) -> "DegradeConfig":
        if self.exposure_min > self.exposure_max:
            raise ValueError("exposure_min must not exceed exposure_max")
        if self.gamma_min > self.gamma_max:
            raise ValueError("gamma_min must not exceed gamma_max")
        return self

    @classmethod
    def over_exposure(cls, seed: int = 0) -> "DegradeConfig":
        return cls(
            exposure_min=3.0, exposure_max=5.0,
            gamma_min=0.7, gamma_max=0.8,
            seed=seed, mode=DegradeMode.OVER_EXPOSURE,
        )


class RenderOptions(BaseModel):
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    near: float = Field(default=0.01, gt=0)
    far: float = Field(default=1000.0, gt=0)
    lowpass: float = Field(default=0.3, ge=0)
    alpha_cutoff: float = Field(default=1.0 / 255.0, ge=0, lt=1)
    alpha_max: float = Field(default=0.999, gt=0, lt=1)
    transmittance_floor: float = Field(default=1e-4, ge=0, lt=1)
    tile_size: int = Field(default=16, ge=1)
    tile_culling: bool = True

    @field_validator("background")
    @classmethod
    def _check_background(cls, value: Tuple[float, float, float]) -> Tuple[float, float, float]:
        if any(not 0.0 <= c <= 1.0 for c in value):
            raise ValueError("background components must lie in [0, 1]")
        return value

    @model_validator(mode="after")
    def _check_clip(self) -> "RenderOptions":
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")
        return self


class ExtractorSpec(BaseModel):
    kind: Literal["fixed_pyramid", "external_weights"] = "fixed_pyramid"
    weight_path: Optional[Path] = None

    @model_validator(mode="after")
    def _check_weights(self) -> "ExtractorSpec":
        if self.kind == "external_weights":
            if self.weight_path is None:
                raise ValueError("external_weights requires weight_path")
            if not self.weight_path.is_file() or not os.access(self.weight_path, os.R_OK):
                raise ValueError(f"weight manifest not readable: {self.weight_path}")
        return self


class LumosWeights(BaseModel):
    lambda_c: float = Field(default=0.1, ge=0)
    lambda_i: float = Field(default=1.0, ge=0)
    lambda_v: float = Field(default=0.01, ge=0)


class ObjectiveWeights(BaseModel):
    omega_rec: float = Field(default=1.0, ge=0)
    omega_distill: float = Field(default=1.0, ge=0)
    omega_lumos: float = Field(default=1.0, ge=0)


PARAM_NAMES = ("centers", "opacities", "rotations", "scales", "sh")


class TrainableParams(BaseModel):
    center: bool = True
    opacity: bool = True
    rotation: bool = True
    scale: bool = True
    sh: bool = True

    def enabled(self) -> List[str]:
        flags = (self.center, self.opacity, self.rotation, self.scale, self.sh)
        return [name for name, on in zip(PARAM_NAMES, flags) if on]


class ParamScales(BaseModel):
    center: float = Field(default=1.0, ge=0)
    opacity: float = Field(default=1.0, ge=0)
    rotation: float = Field(default=1.0, ge=0)
    scale: float = Field(default=1.0, ge=0)
    sh: float = Field(default=1.0, ge=0)

    def for_param(self, name: str) -> float:
        return dict(zip(PARAM_NAMES, (self.center, self.opacity, self.rotation, self.scale, self.sh)))[name]


class FitConfig(BaseModel):
    iters: int = Field(default=1000, ge=0)
    lr_max: float = Field(default=2e-4, gt=0)
    warmup: Optional[int] = Field(default=None, ge=0)
    lr_min: float = Field(default=0.0, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    lumos: LumosWeights = Field(default_factory=LumosWeights)
    objective: ObjectiveWeights = Field(default_factory=ObjectiveWeights)
    trainable: TrainableParams = Field(default_factory=TrainableParams)
    lr_scale: ParamScales = Field(default_factory=ParamScales)
    rec_kind: Literal["mse", "l1"] = "mse"
    distill_source: Literal["gt", "low"] = "gt"
    content_weights: Tuple[float, float] = (0.5, 0.5)
    voxel_weights: Tuple[float, float, float, float, float] = (0.2, 0.2, 0.2, 0.2, 0.2)
    voxel_base_size: Optional[float] = Field(default=None, gt=0)
    depth_valid_alpha: float = Field(default=0.5, gt=0, le=1)
    views_per_step: Optional[int] = Field(default=None, ge=1)
    threads: int = Field(default=1, ge=1)
    seed: int = 0
    render: RenderOptions = Field(default_factory=RenderOptions)
    extractor: ExtractorSpec = Field(default_factory=ExtractorSpec)

    @model_validator(mode="after")
    def _check_schedule(self) -> "FitConfig":
        if self.warmup is not None and self.warmup > self.iters:
            raise ValueError("warmup must not exceed iters")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        return self

    @property
    def effective_warmup(self) -> int:
        """1K warm-up steps out of a 30K run, shrunk proportionally for shorter runs"""
        if self.warmup is not None:
            return self.warmup
        return min(1000, int(round(self.iters / 30.0)))


class LossReport(BaseModel):
    step: int = 0
    lr: float = 0.0
    rec: float
    distill: float
    content: float
    image: float
    voxel: float
    lumos: float
    total: float

    def is_finite(self) -> bool:
        values = (self.rec, self.distill, self.content, self.image, self.voxel, self.lumos, self.total)
        return all(np.isfinite(v) for v in values)

    def is_consistent(self, lumos: LumosWeights, objective: ObjectiveWeights, tol: float = 1e-6) -> bool:
        lumos_sum = lumos.lambda_c * self.content + lumos.lambda_i * self.image + lumos.lambda_v * self.voxel
        total_sum = (
            objective.omega_rec * self.rec
            + objective.omega_distill * self.distill
            + objective.omega_lumos * self.lumos
        )
        return abs(self.lumos - lumos_sum) <= tol and abs(self.total - total_sum) <= tol


class ViewMetrics(BaseModel):
    name: str
    psnr: float = Field(le=99.0)
    ssim: float = Field(ge=-1.0, le=1.0)


class MetricReport(BaseModel):
    views: List[ViewMetrics]
    mean_psnr: float
    mean_ssim: float

    @classmethod
    def from_views(cls, views: List[ViewMetrics]) -> "MetricReport":
        if not views:
            raise ValueError("metric report needs at least one view")
        return cls(
            views=views,
            mean_psnr=float(np.mean([v.psnr for v in views])),
            mean_ssim=float(np.mean([v.ssim for v in views])),
        )


class RunManifest(BaseModel):
    command: str
    config: Dict[str, Any] = {}
    input_hashes: Dict[str, str] = {}
    outputs: List[str] = []
    started_at: datetime
    wall_time: float = 0.0
    exit_code: int = 0
