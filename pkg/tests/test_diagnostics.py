import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from tervit.data import synthetic_blobs
from tervit.diagnostics import (
    cam,
    dead_channels,
    diagnose,
    hessian_by_layer,
    hessian_top_eigenvalue,
    landscape_grid,
    loss_landscape_2d,
    parameter_digest,
    power_iteration,
    sdam,
)
from tervit.exceptions import DimensionError
from tervit.model import VisionTransformer
from tervit.quantization import QuantizationPolicy, ternarize


def test_cam_examples():
    assert cam(np.array([[3.0], [-3.0]])).tolist() == [3.0]
    assert cam(np.zeros((4, 2))).tolist() == [0.0, 0.0]
    np.testing.assert_allclose(cam(np.array([[1.0, -2.0], [3.0, 0.0]])), [2.0, 1.0])
    with pytest.raises(DimensionError):
        cam(np.ones(3))


def test_cam_equals_ternary_scale(rng):
    W = rng.standard_normal((12, 5)).astype(np.float32)
    np.testing.assert_allclose(cam(W), ternarize(W).alpha, rtol=1e-6)


def test_sdam_examples():
    # CAM vector [0, 2] has population std 1
    assert sdam(np.array([[0.0, 2.0], [0.0, -2.0]])) == pytest.approx(1.0)
    assert sdam(np.ones((3, 4))) == 0.0


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)),
                  elements=st.floats(-100, 100)), st.randoms())
def test_sdam_matches_recount_and_ignores_row_order(W, r):
    brute = [sum(abs(W[i, j]) for i in range(W.shape[0])) / W.shape[0]
             for j in range(W.shape[1])]
    mu = sum(brute) / len(brute)
    ref = (sum((c - mu) ** 2 for c in brute) / len(brute)) ** 0.5
    assert abs(sdam(W) - ref) <= 1e-7 * max(1.0, ref)
    perm = list(range(W.shape[0]))
    r.shuffle(perm)
    assert sdam(W[perm]) == pytest.approx(sdam(W), rel=1e-12, abs=1e-12)


def test_dead_channel_thresholds(rng):
    W = rng.standard_normal((6, 10))
    assert dead_channels(W, 0.0).count == 0
    assert dead_channels(W, np.inf).count == 10
    ref = float(np.median(cam(W)))
    dead = dead_channels(W, ref)
    assert dead.fraction == sum(c < ref for c in cam(W)) / 10
    assert all(cam(W)[j] < ref for j in dead.channels)
    with pytest.raises(ValueError):
        dead_channels(W, -1.0)


# -- power iteration -------------------------------------------------------------------------


def test_power_iteration_diagonal_quadratic():
    H = np.diag([5.0, 1.0])
    res = power_iteration(lambda t: H @ t, np.array([0.3, -0.2]), iters=200, tol=1e-10)
    assert abs(res.value - 5.0) / 5.0 < 0.01
    assert res.converged


def test_power_iteration_identity():
    res = power_iteration(lambda t: t, np.ones(4), iters=20)
    assert res.value == pytest.approx(1.0, rel=1e-6)


def test_rayleigh_sequence_non_decreasing(rng):
    A = rng.standard_normal((8, 8))
    H = A @ A.T  # positive semi-definite
    res = power_iteration(lambda t: H @ t, rng.standard_normal(8), iters=40, tol=0.0)
    hist = np.array(res.history)
    assert np.all(np.diff(hist) >= -1e-3 * abs(hist[-1]))
    assert res.value == pytest.approx(np.linalg.eigvalsh(H)[-1], rel=0.01)


def test_zero_gradient_flags_degenerate():
    res = power_iteration(lambda t: np.zeros_like(t), np.ones(3))
    assert res.degenerate and res.value == 0.0


def test_hessian_restores_parameters(toy_config):
    model = VisionTransformer(toy_config, seed=0)
    data = synthetic_blobs(16, toy_config.num_classes, toy_config.image_size, seed=0)
    before = parameter_digest(model)
    res = hessian_top_eigenvalue(model, "patch_embed", data.images, data.labels, iters=5)
    assert np.isfinite(res.value)
    assert parameter_digest(model) == before


def test_hessian_by_layer_covers_every_linear(toy_config):
    model = VisionTransformer(toy_config, seed=0)
    data = synthetic_blobs(16, toy_config.num_classes, toy_config.image_size, seed=0)
    eig = hessian_by_layer(model, data.images, data.labels, iters=3)
    assert set(eig) == set(model.linears)
    assert all(np.isfinite(v) for v in eig.values())


# -- landscape ----------------------------------------------------------------------------


def _quadratic_setup():
    params = {"w": np.array([0.5, -1.0, 2.0]), "m": np.array([[1.0, 2.0], [0.0, -1.0]])}
    d1 = {"w": np.array([1.0, 0.0, 0.5]), "m": np.array([[0.2, 0.0], [1.0, 0.0]])}
    d2 = {"w": np.array([0.0, 1.0, 0.0]), "m": np.array([[0.0, 0.3], [0.0, 1.0]])}

    def loss(p):
        return float(np.sum(p["w"] ** 2) + 0.5 * np.sum(p["m"] ** 2))
    return params, (d1, d2), loss


def test_landscape_quadratic_has_constant_second_differences():
    params, dirs, loss = _quadratic_setup()
    grid = landscape_grid(params, loss, resolution=9, span=1.0, directions=dirs)
    L = grid.loss
    assert L[4, 4] == loss(params)
    d2a = L[2:] - 2 * L[1:-1] + L[:-2]
    d2b = L[:, 2:] - 2 * L[:, 1:-1] + L[:, :-2]
    assert np.ptp(d2a) < 1e-4 and np.ptp(d2b) < 1e-4


def test_landscape_rejects_even_resolution_and_bad_span():
    params, dirs, loss = _quadratic_setup()
    with pytest.raises(ValueError):
        landscape_grid(params, loss, resolution=4)
    with pytest.raises(ValueError):
        landscape_grid(params, loss, span=0.0)


def test_model_landscape_center_and_restore(toy_config):
    model = VisionTransformer(toy_config, seed=0)
    data = synthetic_blobs(16, toy_config.num_classes, toy_config.image_size, seed=0)
    policy = QuantizationPolicy.ternary()
    before = parameter_digest(model)
    from tervit import autodiff as ad
    base = float(ad.cross_entropy(model.forward(data.images, policy), data.labels).data)
    grid = loss_landscape_2d(model, data.images, data.labels, policy, resolution=3, span=0.5)
    assert grid.loss[1, 1] == base
    assert parameter_digest(model) == before
    lines = grid.to_csv().splitlines()
    assert len(lines) == 4 and lines[0].startswith("a\\b,")


def test_report_csvs(toy_config):
    model = VisionTransformer(toy_config, seed=0)
    ref = VisionTransformer(toy_config, seed=1)
    report = diagnose(model, ref)
    assert set(report.dead) == set(model.linears)
    cam_lines = report.cam_csv().splitlines()
    assert cam_lines[0] == "layer,channel,cam"
    n_channels = sum(lin.weight.shape[1] for lin in model.linears.values())
    assert len(cam_lines) == 1 + n_channels
    assert report.sdam_csv().splitlines()[0] == "layer,sdam,min_cam,hessian_top_eigenvalue"
