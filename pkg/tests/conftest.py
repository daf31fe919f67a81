"""Shared test utilities: series oracles, finite differences, scene shortcuts."""

from __future__ import annotations

import numpy as np

from pointline.geometry import Se3Pose, hat3, se3_exp


def matrix_exp_series(m: np.ndarray, terms: int = 30) -> np.ndarray:
    """Truncated power-series matrix exponential, independent of the library path."""
    out = np.eye(m.shape[0])
    acc = np.eye(m.shape[0])
    for k in range(1, terms):
        acc = acc @ m / k
        out = out + acc
    return out


def twist_matrix(xi: np.ndarray) -> np.ndarray:
    m = np.zeros((4, 4))
    m[:3, :3] = hat3(xi[:3])
    m[:3, 3] = xi[3:]
    return m


def fd_pose(f, pose: Se3Pose, step: float = 1e-6) -> np.ndarray:
    """Central difference of f over the six left-perturbation directions."""
    cols = []
    for j in range(6):
        e = np.zeros(6)
        e[j] = step
        plus = np.asarray(f(se3_exp(e).compose(pose)), dtype=float)
        minus = np.asarray(f(se3_exp(-e).compose(pose)), dtype=float)
        cols.append((plus - minus) / (2.0 * step))
    return np.stack(cols, axis=-1)


def fd_vector(f, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros(x.size)
        e[j] = step
        plus = np.asarray(f(x + e), dtype=float)
        minus = np.asarray(f(x - e), dtype=float)
        cols.append((plus - minus) / (2.0 * step))
    return np.stack(cols, axis=-1)


def rel_err(analytic, numeric, floor: float = 1e-6) -> float:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    return float(np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), floor))


def random_pose(rng: np.random.Generator, scale: float = 0.3) -> Se3Pose:
    return se3_exp(rng.normal(size=6) * scale)
