import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from treeball import geometry as geo


def mobius_add(x, y, c):
    xy = np.sum(x * y, -1)[..., None]
    xx = np.sum(x * x, -1)[..., None]
    yy = np.sum(y * y, -1)[..., None]
    num = (1 + 2 * c * xy + c * yy) * x + (1 - c * xx) * y
    return num / (1 + 2 * c * xy + c * c * xx * yy)


def mobius_distance(x, y, c):
    # independent route: (2/sqrt c) artanh(sqrt c |(-x) (+) y|)
    return 2 / np.sqrt(c) * np.arctanh(np.sqrt(c) * np.linalg.norm(mobius_add(-x, y, c), axis=-1))


def random_ball(rng, m, n, c, scale=0.9):
    v = rng.normal(size=(m, n))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    r = rng.uniform(0, scale, size=(m, 1)) / np.sqrt(c)
    return v * r


@pytest.mark.parametrize("c", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("n", [2, 8, 128])
def test_distance_matches_mobius_form(c, n):
    rng = np.random.default_rng(1)
    x, y = random_ball(rng, 200, n, c), random_ball(rng, 200, n, c)
    np.testing.assert_allclose(geo.geodesic_distance(x, y, c), mobius_distance(x, y, c), rtol=1e-8, atol=1e-10)


@pytest.mark.parametrize("c", [0.5, 1.0, 2.0])
def test_origin_distance_closed_form(c):
    rng = np.random.default_rng(2)
    x = random_ball(rng, 500, 8, c)
    np.testing.assert_allclose(geo.distance_to_origin(x, c), geo.geodesic_distance(np.zeros_like(x), x, c), rtol=1e-9, atol=1e-12)


def test_known_values():
    assert geo.distance_to_origin(np.zeros(3), 1.0) == 0.0
    x = np.array([0.5, 0.0])
    assert geo.distance_to_origin(x, 1.0) == pytest.approx(2 * np.arctanh(0.5))
    assert geo.distance_to_origin(x, 1.0) == pytest.approx(np.log(3.0))


def test_exp_log_round_trip():
    rng = np.random.default_rng(3)
    for c in (0.5, 1.0, 2.0):
        v = rng.normal(size=(300, 8)) * 0.7
        back = geo.log_map_origin(geo.exp_map_origin(v, c), c)
        np.testing.assert_allclose(back, v, atol=1e-9)


def test_exp_map_distance_is_twice_norm():
    rng = np.random.default_rng(4)
    v = rng.normal(size=(100, 5))
    for c in (0.5, 1.0, 2.0):
        np.testing.assert_allclose(geo.distance_to_origin(geo.exp_map_origin(v, c), c), 2 * np.linalg.norm(v, axis=-1), rtol=1e-8)


def test_exp_origin_distance_matches_composite():
    rng = np.random.default_rng(5)
    v = rng.normal(size=(400, 6)) * rng.uniform(0, 10, size=(400, 1))
    for c in (0.5, 1.0, 2.0):
        z = geo.project_to_ball(geo.exp_map_origin(v, c), c)
        np.testing.assert_allclose(geo.exp_origin_distance(v, c), geo.distance_to_origin(z, c), rtol=1e-6)
    big = np.array([[30.0, 0], [0, 50.0], [40.0, 40.0]])
    d = geo.exp_origin_distance(big, 1.0)
    assert np.all(d == geo.max_origin_distance(1.0))


def test_projection_contract():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1000, 4)) * 3
    for c in (0.5, 1.0, 2.0):
        p = geo.project_to_ball(x, c)
        assert np.all(c * np.sum(p * p, -1) <= (1 - geo.BALL_EPS) ** 2 * (1 + 1e-12))
        inside = np.linalg.norm(x, axis=-1) < geo.max_norm(c)
        np.testing.assert_array_equal(p[inside], x[inside])


def test_domain_errors():
    with pytest.raises(geo.BallDomainError):
        geo.distance_to_origin(np.array([1.0, 0.0]), 1.0)
    with pytest.raises(ValueError):
        geo.exp_map_origin(np.ones(2), -1.0)
    with pytest.raises(geo.BallDomainError):
        geo.geodesic_distance(np.array([np.nan, 0.0]), np.zeros(2), 1.0)


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    for c in (0.5, 1.0, 2.0):
        x, y = random_ball(rng, 1, 5, c, 0.8)[0], random_ball(rng, 1, 5, c, 0.8)[0]
        v, gx, gy, gc = geo.geodesic_distance_grad(x, y, c)
        np.testing.assert_allclose(gx, _fd(lambda a: geo.geodesic_distance(a, y, c), x), rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(gy, _fd(lambda a: geo.geodesic_distance(x, a, c), y), rtol=1e-5, atol=1e-7)
        gc_fd = (geo.geodesic_distance(x, y, c + 1e-6) - geo.geodesic_distance(x, y, c - 1e-6)) / 2e-6
        assert gc == pytest.approx(gc_fd, rel=1e-5)
        _, dx, dc = geo.distance_to_origin_grad(x, c)
        np.testing.assert_allclose(dx, _fd(lambda a: geo.distance_to_origin(a, c), x), rtol=1e-5)
        dc_fd = (geo.distance_to_origin(x, c + 1e-6) - geo.distance_to_origin(x, c - 1e-6)) / 2e-6
        assert dc == pytest.approx(dc_fd, rel=1e-5)


def test_exp_and_projection_vjp():
    rng = np.random.default_rng(8)
    w = rng.normal(size=4)
    for c in (0.5, 1.0, 2.0):
        v = rng.normal(size=4) * 0.8
        gv, gc = geo.exp_map_origin_vjp(v, c, w)
        np.testing.assert_allclose(gv, _fd(lambda a: w @ geo.exp_map_origin(a, c), v), rtol=1e-6, atol=1e-8)
        gc_fd = (w @ geo.exp_map_origin(v, c + 1e-6) - w @ geo.exp_map_origin(v, c - 1e-6)) / 2e-6
        assert gc == pytest.approx(gc_fd, rel=1e-5, abs=1e-8)
        x = rng.normal(size=4) * 3  # outside: clamped branch
        gx, gcp = geo.project_to_ball_vjp(x, c, w)
        np.testing.assert_allclose(gx, _fd(lambda a: w @ geo.project_to_ball(a, c), x), rtol=1e-6, atol=1e-8)
        gcp_fd = (w @ geo.project_to_ball(x, c + 1e-6) - w @ geo.project_to_ball(x, c - 1e-6)) / 2e-6
        assert gcp == pytest.approx(gcp_fd, rel=1e-5)


points = st.lists(st.floats(-1, 1, allow_nan=False), min_size=3, max_size=3).map(np.array)


@settings(max_examples=200, deadline=None)
@given(points, points, points, st.sampled_from([0.5, 1.0, 2.0]))
def test_metric_axioms(a, b, d, c):
    a, b, d = (geo.project_to_ball(p * 0.95 / np.sqrt(c), c) for p in (a, b, d))
    ab = geo.geodesic_distance(a, b, c)
    assert ab >= 0
    assert geo.geodesic_distance(a, a, c) == pytest.approx(0, abs=1e-6)
    assert ab == pytest.approx(geo.geodesic_distance(b, a, c), rel=1e-9, abs=1e-12)
    assert ab <= geo.geodesic_distance(a, d, c) + geo.geodesic_distance(d, b, c) + 1e-7
