"""Flat key=value experiment configuration (see README for the key table)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from ..errors import ConfigError


@dataclass
class HarnessConfig:
    # scene
    seed: int = 0
    keyframes: int = 20
    points: int = 300
    lines: int = 50
    trajectory: str = "orbit"  # orbit | corridor
    extent: float = 4.0  # workspace cube side (m)
    # camera
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    image_width: int = 640
    image_height: int = 480
    baseline: float = 0.08
    sensor: str = "rgbd"  # rgbd | stereo
    # noise models
    pixel_sigma: float = 1.0  # level-0 detection noise (px)
    pyramid_factor: float = 1.2
    pyramid_levels: int = 1
    depth_c0: float = 0.0012
    depth_c1: float = 0.0019
    depth_zref: float = 0.4
    noise_scale: float = 1.0  # multiplies every measurement noise draw
    # observation structure
    mono_fraction_points: float = 0.2
    mono_fraction_lines: float = 0.2
    min_line_views: int = 2  # lines seen from fewer keyframes are dropped
    line_shrink: float = 0.0  # max inward endpoint slide (fraction of length)
    descriptor_bits: int = 256
    descriptor_flip_rate: float = 0.0
    # initialization perturbation
    perturb_translation: float = 0.02  # m, pose offset magnitude
    perturb_rotation_deg: float = 1.0
    perturb_points: float = 0.02  # m, landmark offset magnitude
    perturb_lines: float = 0.02
    # solver
    mu: float = 0.5
    kernel: str = "huber"  # huber | cauchy | none
    kernel_tau_2d: float = 0.0  # 0 -> 95% chi-square default
    kernel_tau_3d: float = 0.0
    cov_mode: str = "identity_cov"  # identity_cov | propagated_cov
    point_residual: str = "virtual_baseline"  # virtual_baseline | depth
    max_iters: int = 30
    min_mono_line_obs: int = 3
    # volumetric mapping
    voma_resolution: float = 0.05
    voma_image_width: int = 64
    voma_image_height: int = 48
    voma_fx: float = 60.0
    voma_fy: float = 60.0
    voma_batch: int = 1
    room_size: float = 12.0  # synthetic room cube side (m)

    def __post_init__(self):
        if self.keyframes < 2 or self.points < 1 or self.lines < 0:
            raise ConfigError("need at least 2 keyframes, 1 point, 0 lines")
        for name in ("mono_fraction_points", "mono_fraction_lines", "descriptor_flip_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        if self.trajectory not in ("orbit", "corridor"):
            raise ConfigError(f"unknown trajectory {self.trajectory!r}")
        if self.sensor not in ("rgbd", "stereo"):
            raise ConfigError(f"unknown sensor {self.sensor!r}")
        if self.noise_scale < 0 or self.line_shrink < 0 or self.line_shrink >= 0.5:
            raise ConfigError("noise_scale >= 0 and line_shrink in [0, 0.5) required")


_FIELDS = {f.name: f for f in dataclasses.fields(HarnessConfig)}


def parse_config(path: str | Path | None, overrides: dict | None = None) -> HarnessConfig:
    """Read ``key=value`` lines (# comments allowed) into a HarnessConfig."""
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        for lineno, raw in enumerate(p.read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{p}:{lineno}: expected key=value, got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in _FIELDS:
                raise ConfigError(f"{p}:{lineno}: unknown key {key!r}")
            ftype = _FIELDS[key].type
            try:
                if ftype in ("int", int):
                    values[key] = int(val)
                elif ftype in ("float", float):
                    values[key] = float(val)
                else:
                    values[key] = val
            except ValueError as e:
                raise ConfigError(f"{p}:{lineno}: bad value for {key}: {e}") from e
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return HarnessConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from e
