import numpy as np
import pytest

from fbmebe.flow import RealNVP, Whitener, coupling_masks, density_grid
from fbmebe.nn import grad_check

LOG_2PI = np.log(2 * np.pi)


def random_flow(seed=0, n_layers=10, hidden=(64, 64), scale=0.1):
    """A float64 flow far from the identity."""
    rng = np.random.default_rng(seed)
    flow = RealNVP(2, n_layers, hidden, dtype=np.float64).init(rng)
    flow.flat[...] += rng.normal(0, scale, flow.flat.shape)
    return flow


def ring_flow():
    """A flow fitted to a thin ring, i.e. a strongly non-Gaussian target."""
    rng = np.random.default_rng(0)
    theta = rng.uniform(0, 2 * np.pi, 2000)
    r = 1.5 + 0.1 * rng.normal(size=2000)
    flow = RealNVP(dtype=np.float64)
    flow.fit(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1), epochs=5, seed=0)
    return flow


def numeric_jacobian(fn, x, h=1e-6):
    jac = np.zeros((len(x), 2, 2))
    for j in range(2):
        up, down = x.copy(), x.copy()
        up[:, j] += h
        down[:, j] -= h
        jac[:, :, j] = (fn(up) - fn(down)) / (2 * h)
    return jac


def test_masks_alternate():
    masks = coupling_masks(2, 4)
    assert [list(t) for _, t in masks] == [[1], [0], [1], [0]]
    with pytest.raises(ValueError):
        coupling_masks(1, 2)


def test_identity_initialization(rng):
    flow = RealNVP(dtype=np.float64).init(rng)
    x = rng.normal(size=(50, 2))
    u, logdet = flow.forward(x)
    assert np.array_equal(u, x)
    assert np.all(logdet == 0.0)
    assert np.array_equal(flow.inverse(x), x)


def test_identity_log_density_examples(rng):
    flow = RealNVP(dtype=np.float64).init(rng)
    out = flow.log_density(np.array([[0.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_allclose(out, [-LOG_2PI, -LOG_2PI - 0.5], rtol=0, atol=1e-12)
    assert out[0] == pytest.approx(-1.83788, abs=1e-5)
    assert out[1] == pytest.approx(-2.33788, abs=1e-5)


def test_single_layer_logdet_is_scale_output(rng):
    flow = random_flow(1, n_layers=1)
    x = rng.normal(size=(20, 2))
    _, logdet = flow.forward(x)
    scale_net = flow.subnet(0, 0)
    np.testing.assert_allclose(logdet, scale_net.forward(x[:, [0]])[:, 0], rtol=1e-12)


def test_subnets_match_stacked_evaluation(rng):
    flow = random_flow(2, n_layers=2)
    x = rng.normal(size=(10, 2))
    s, t, _ = flow._conditioner(1, x[:, [1]], keep=False)
    np.testing.assert_allclose(s, flow.subnet(1, 0).forward(x[:, [1]]), rtol=1e-12)
    np.testing.assert_allclose(t, flow.subnet(1, 1).forward(x[:, [1]]), rtol=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_round_trip(seed):
    flow = ring_flow() if seed == 3 else random_flow(seed)
    x = np.random.default_rng(seed + 10).uniform(-3, 3, (1000, 2))
    u, _ = flow.forward(x)
    assert not np.allclose(u, x)
    assert np.max(np.abs(flow.inverse(u) - x)) < 1e-9
    assert np.max(np.abs(flow.forward(flow.inverse(x))[0] - x)) < 1e-9


@pytest.mark.parametrize("seed", range(4))
def test_logdet_matches_numeric_jacobian(seed):
    flow = ring_flow() if seed == 3 else random_flow(seed)
    x = np.random.default_rng(seed + 20).normal(size=(20, 2))
    _, logdet = flow.forward(x)
    jac = numeric_jacobian(lambda p: flow.forward(p)[0], x)
    numeric = np.log(np.abs(np.linalg.det(jac)))
    assert np.all(np.abs(logdet - numeric) <= 1e-5 * np.maximum(np.abs(numeric), 1.0))


def test_inverse_logdet_negates_forward(rng):
    flow = random_flow(4)
    x = rng.normal(size=(200, 2))
    u, logdet = flow.forward(x)
    np.testing.assert_allclose(flow.inverse_logdet(u), -logdet, rtol=0, atol=1e-10)
    # the inverse map's own numeric Jacobian agrees too
    jac = numeric_jacobian(flow.inverse, u[:10])
    np.testing.assert_allclose(np.log(np.abs(np.linalg.det(jac))), -logdet[:10], rtol=1e-5, atol=1e-7)


def test_whitening_correction(rng):
    flow = RealNVP(dtype=np.float64).init(rng)
    flow.whitener = Whitener(np.array([1.0, -1.0]), np.array([2.0, 0.5]))
    x = np.array([[1.0, -1.0], [3.0, -1.5]])
    # identity flow on whitened input is N(mean, diag(scale^2))
    expected = -LOG_2PI - np.log(2.0 * 0.5) - 0.5 * np.array([0.0, 1.0 + 1.0])
    np.testing.assert_allclose(flow.log_density(x), expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_nll_gradient_check(seed):
    rng = np.random.default_rng(seed)
    flow = random_flow(seed, n_layers=4, hidden=(8, 8), scale=0.5)
    w = rng.normal(size=(4, 2))
    _, grad = flow.nll_and_grad(w)
    report = grad_check(lambda: flow.nll_and_grad(w)[0], {"flow": flow.flat}, {"flow": grad})
    assert report.passed, report.worst


def test_non_finite_input_raises():
    with pytest.raises(FloatingPointError):
        RealNVP().forward(np.array([[np.nan, 0.0]]))


@pytest.fixture(scope="module")
def gaussian_fit():
    rng = np.random.default_rng(5)
    flow = RealNVP(dtype=np.float64)
    trace = flow.fit(rng.normal(size=(4000, 2)), epochs=30, seed=0)
    return flow, trace


def test_gaussian_fit_held_out_likelihood(gaussian_fit):
    flow, trace = gaussian_fit
    held_out = np.random.default_rng(6).normal(size=(20_000, 2))
    true_ll = -(1.0 + LOG_2PI)  # minus the entropy of N(0, I) in 2-D
    assert abs(flow.log_density(held_out).mean() - true_ll) < 0.15
    assert trace[-1] < trace[0]


def test_gaussian_fit_quadrature(gaussian_fit):
    flow, _ = gaussian_fit
    grid = density_grid(flow, -8.0, 8.0, 321)
    cell = (16.0 / 320) ** 2
    mass = np.exp(grid[:, 2]).sum() * cell
    assert 0.98 <= mass <= 1.02


def test_density_grid_layout(rng):
    flow = RealNVP(dtype=np.float64).init(rng)
    grid = density_grid(flow, -1.0, 1.0, 3)
    assert grid.shape == (9, 3)
    assert list(grid[:3, 0]) == [-1.0, 0.0, 1.0]
    assert grid[4, 2] == pytest.approx(-LOG_2PI)


def test_single_point_density_increases():
    point = np.array([[0.7, -0.3]])
    samples = np.repeat(point, 256, axis=0)
    values = []
    for epochs in range(1, 7):
        flow = RealNVP(dtype=np.float64)
        flow.fit(samples, epochs=epochs, seed=3)
        values.append(float(flow.log_density(point)[0]))
    assert np.all(np.diff(values) > 0)


def test_fit_deterministic():
    x = np.random.default_rng(8).normal(size=(600, 2))
    a, b = RealNVP(), RealNVP()
    assert a.fit(x, epochs=3, seed=1) == b.fit(x, epochs=3, seed=1)
    assert np.array_equal(a.flat, b.flat)


def test_fit_needs_samples():
    with pytest.raises(ValueError):
        RealNVP().fit(np.zeros((0, 2)))


def test_fit_restarts_from_scratch():
    x = np.random.default_rng(9).normal(size=(300, 2))
    flow = RealNVP()
    first = flow.fit(x, epochs=2, seed=0)
    flow.fit(x * 3 + 1, epochs=2, seed=0)
    assert flow.fit(x, epochs=2, seed=0) == first
