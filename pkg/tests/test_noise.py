import numpy as np
import pytest

from pointline.errors import InvalidDepthError
from pointline.noise import (
    DepthNoiseModel,
    PyramidNoiseTable,
    RobustKernel,
    robust_weight,
    robust_weight_batch,
    sigma_pixel,
    sigma_z,
)


def test_huber_quadratic_region():
    cost, weight = robust_weight(RobustKernel("huber", 1.0), 0.25)
    assert cost == 0.25 and weight == 1.0


def test_huber_linear_region():
    cost, weight = robust_weight(RobustKernel("huber", 1.0), 4.0)
    assert np.isclose(cost, 3.0)  # 2*1*2 - 1
    assert np.isclose(weight, 0.5)


def test_identity_kernel():
    assert robust_weight(RobustKernel("none"), 7.0) == (7.0, 1.0)


def test_huber_continuity_at_threshold():
    tau = 1.7
    kernel = RobustKernel("huber", tau)
    s = tau * tau
    below_c, below_w = robust_weight(kernel, s - 1e-12)
    above_c, above_w = robust_weight(kernel, s + 1e-12)
    assert abs(below_c - above_c) < 1e-10
    assert abs(below_w - above_w) < 1e-10
    at_c, at_w = robust_weight(kernel, s)
    assert abs(at_c - s) < 1e-12 and abs(at_w - 1.0) < 1e-12


def test_cauchy_form():
    tau = 2.0
    cost, weight = robust_weight(RobustKernel("cauchy", tau), 4.0)
    assert np.isclose(cost, 4.0 * np.log(2.0))
    assert np.isclose(weight, 0.5)


def test_weights_bounded():
    rng = np.random.default_rng(0)
    for kind in ("huber", "cauchy", "none"):
        kernel = RobustKernel(kind, 1.3)
        s = rng.uniform(0, 50, 500)
        _, w = robust_weight_batch(kernel, s)
        assert np.all(w > 0) and np.all(w <= 1.0)


def test_batch_matches_scalar():
    rng = np.random.default_rng(1)
    s = rng.uniform(0, 20, 100)
    for kind in ("huber", "cauchy", "none"):
        kernel = RobustKernel(kind, 1.1)
        costs, weights = robust_weight_batch(kernel, s)
        for i in range(len(s)):
            c, w = robust_weight(kernel, s[i])
            assert np.isclose(costs[i], c) and np.isclose(weights[i], w)


def test_kernel_validation():
    with pytest.raises(ValueError):
        RobustKernel("box", 1.0)
    with pytest.raises(ValueError):
        RobustKernel("huber", 0.0)
    with pytest.raises(ValueError):
        robust_weight(RobustKernel("none"), -1.0)


def test_sigma_z_defaults():
    model = DepthNoiseModel()
    assert np.isclose(sigma_z(model, 0.4), 0.0012)
    assert np.isclose(sigma_z(model, 1.4), 0.0031)


def test_sigma_z_degenerate_and_symmetry():
    flat = DepthNoiseModel(c0=0.002, c1=0.0)
    for d in (0.1, 1.0, 7.0):
        assert sigma_z(flat, d) == 0.002
    model = DepthNoiseModel()
    assert np.isclose(sigma_z(model, 0.4 + 0.3), sigma_z(model, 0.4 - 0.3))
    assert sigma_z(model, 0.4) <= sigma_z(model, 0.9)
    with pytest.raises(InvalidDepthError):
        sigma_z(model, 0.0)


def test_sigma_pixel_table():
    table = PyramidNoiseTable(1.0, 1.2, 4)
    assert sigma_pixel(table, 0) == 1.0
    assert np.isclose(sigma_pixel(table, 2), 1.44)
    with pytest.raises(IndexError):
        sigma_pixel(table, 4)
    # monotone across levels
    sigmas = [sigma_pixel(table, level) for level in range(4)]
    assert all(b >= a for a, b in zip(sigmas, sigmas[1:]))


def test_model_validation():
    with pytest.raises(ValueError):
        DepthNoiseModel(c0=0.0)
    with pytest.raises(ValueError):
        PyramidNoiseTable(sigma_base=0.0)
    with pytest.raises(ValueError):
        PyramidNoiseTable(scale_factor=0.9)
