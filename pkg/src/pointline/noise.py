"""Robust cost kernels and the sensor noise models behind every covariance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidDepthError

# 95% chi-square quantiles, used as default robust thresholds per residual size.
CHI2_95_2D = np.sqrt(5.991)
CHI2_95_3D = np.sqrt(7.815)


@dataclass(frozen=True)
class RobustKernel:
    """Robust cost on the squared Mahalanobis distance s.

    huber:  rho(s) = s for s <= tau^2, else 2 tau sqrt(s) - tau^2
    cauchy: rho(s) = tau^2 log(1 + s / tau^2)
    none:   rho(s) = s
    """

    kind: str = "none"
    threshold: float = 1.0

    def __post_init__(self):
        if self.kind not in ("huber", "cauchy", "none"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind != "none" and self.threshold <= 0:
            raise ValueError("kernel threshold must be positive")


def robust_weight(kernel: RobustKernel, squared_mahalanobis: float) -> tuple[float, float]:
    """Return (cost, IRLS weight) where the weight is d rho / d s."""
    s = float(squared_mahalanobis)
    if s < 0:
        raise ValueError("squared Mahalanobis distance must be non-negative")
    if kernel.kind == "none":
        return s, 1.0
    tau2 = kernel.threshold * kernel.threshold
    if kernel.kind == "huber":
        if s <= tau2:
            return s, 1.0
        root = np.sqrt(s)
        return 2.0 * kernel.threshold * root - tau2, kernel.threshold / root
    # cauchy
    ratio = s / tau2
    return tau2 * np.log1p(ratio), 1.0 / (1.0 + ratio)


def robust_weight_batch(kernel: RobustKernel, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``robust_weight`` over an array of squared distances."""
    s = np.asarray(s, dtype=float)
    if kernel.kind == "none":
        return s.copy(), np.ones_like(s)
    tau2 = kernel.threshold * kernel.threshold
    if kernel.kind == "huber":
        root = np.sqrt(np.maximum(s, tau2))
        outlier = s > tau2
        cost = np.where(outlier, 2.0 * kernel.threshold * root - tau2, s)
        weight = np.where(outlier, kernel.threshold / root, 1.0)
        return cost, weight
    ratio = s / tau2
    return tau2 * np.log1p(ratio), 1.0 / (1.0 + ratio)


@dataclass(frozen=True)
class DepthNoiseModel:
    """Axial depth noise ``sigma_z(d) = c0 + c1 (d - z_ref)^2`` (meters).

    Defaults follow the common quadratic axial model for structured-light
    RGB-D sensors; they are configurable, not measured values of this
    library.
    """

    c0: float = 0.0012
    c1: float = 0.0019
    z_ref: float = 0.4

    def __post_init__(self):
        if self.c0 <= 0 or self.c1 < 0:
            raise ValueError("need c0 > 0 and c1 >= 0")


def sigma_z(model: DepthNoiseModel, depth: float) -> float:
    """Axial depth standard deviation at the given depth."""
    if not (np.isfinite(depth) and depth > 0):
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    offset = depth - model.z_ref
    return model.c0 + model.c1 * offset * offset


@dataclass(frozen=True)
class PyramidNoiseTable:
    """Per-pyramid-level detection noise: sigma at level l is sigma_base * scale_factor**l."""

    sigma_base: float = 1.0
    scale_factor: float = 1.2
    levels: int = 8

    def __post_init__(self):
        if self.sigma_base <= 0:
            raise ValueError("sigma_base must be positive")
        if self.scale_factor < 1.0:
            raise ValueError("scale_factor must be >= 1")
        if self.levels < 1:
            raise ValueError("need at least one pyramid level")


def sigma_pixel(table: PyramidNoiseTable, level: int) -> float:
    """Detection noise standard deviation at a pyramid level."""
    if not 0 <= level < table.levels:
        raise IndexError(f"level {level} out of range [0, {table.levels})")
    return table.sigma_base * table.scale_factor ** level
