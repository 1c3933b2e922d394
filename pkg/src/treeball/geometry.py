"""Poincare ball primitives with analytic gradients.

All functions work on the last axis, so a single point has shape ``(n,)`` and a
batch has shape ``(..., n)``. Everything is evaluated in float64.
"""

import numpy as np

# Safety margin: points are kept at c * |x|^2 < 1 - BALL_EPS ... in practice we
# clamp the norm to (1 - BALL_EPS) / sqrt(c).
BALL_EPS = 1e-5
# Below this tangent norm exp/log maps use their first-order limit.
SMALL_NORM = 1e-12


class BallDomainError(ValueError):
    """A point lies on or outside the admissible part of the ball."""


def _check_c(c):
    c = float(c)
    if not np.isfinite(c) or c <= 0:
        raise ValueError(f"curvature must be positive and finite, got {c}")
    return c


def _sqnorm(x):
    return np.sum(x * x, axis=-1)


def max_norm(c):
    return (1.0 - BALL_EPS) / np.sqrt(_check_c(c))


def check_in_ball(x, c):
    """Raise :class:`BallDomainError` unless every point is inside the clamped ball."""
    x = np.asarray(x, dtype=np.float64)
    c = _check_c(c)
    # tolerate the rounding of an exactly clamped point
    limit = (1.0 - BALL_EPS) ** 2 * (1.0 + 1e-12)
    if not np.all(np.isfinite(x)) or np.any(c * _sqnorm(x) > limit):
        raise BallDomainError("point violates c*|x|^2 < 1 (after safety margin)")
    return x


def project_to_ball(x, c):
    """Rescale points whose norm exceeds ``(1 - BALL_EPS)/sqrt(c)``; others pass through."""
    x = np.asarray(x, dtype=np.float64)
    c = _check_c(c)
    r_max = (1.0 - BALL_EPS) / np.sqrt(c)
    norm = np.sqrt(_sqnorm(x))[..., None]
    scale = np.where(norm > r_max, r_max / np.maximum(norm, SMALL_NORM), 1.0)
    return x * scale


def exp_map_origin(v, c):
    """Exponential map at the origin: tanh(sqrt(c)|v|) v / (sqrt(c)|v|)."""
    v = np.asarray(v, dtype=np.float64)
    c = _check_c(c)
    sc = np.sqrt(c)
    norm = np.sqrt(_sqnorm(v))[..., None]
    safe = np.maximum(norm, SMALL_NORM)
    factor = np.where(norm < SMALL_NORM, 1.0, np.tanh(sc * safe) / (sc * safe))
    return v * factor


def log_map_origin(x, c):
    """Inverse of :func:`exp_map_origin`."""
    x = check_in_ball(x, c)
    sc = np.sqrt(c)
    norm = np.sqrt(_sqnorm(x))[..., None]
    safe = np.maximum(norm, SMALL_NORM)
    factor = np.where(norm < SMALL_NORM, 1.0, np.arctanh(sc * safe) / (sc * safe))
    return x * factor


def distance_to_origin(x, c):
    """Hyperbolic distance from the origin, (2/sqrt(c)) artanh(sqrt(c)|x|)."""
    x = check_in_ball(x, c)
    sc = np.sqrt(c)
    return 2.0 / sc * np.arctanh(sc * np.sqrt(_sqnorm(x)))


def max_origin_distance(c):
    """Origin distance of a point sitting exactly on the clamp radius."""
    c = _check_c(c)
    return 2.0 / np.sqrt(c) * np.arctanh(1.0 - BALL_EPS)


def exp_origin_distance(v, c):
    """``distance_to_origin(project_to_ball(exp_map_origin(v)))`` in closed form.

    The exp map sends a tangent vector of norm r to origin distance 2r, and the
    projection caps it. Near the boundary the composite route amplifies float
    rounding by ~1/BALL_EPS; this form does not, so clamped points tie exactly.
    """
    v = np.asarray(v, dtype=np.float64)
    return np.minimum(2.0 * np.sqrt(_sqnorm(v)), max_origin_distance(c))


def geodesic_distance(x, y, c):
    """Poincare geodesic distance via the arccosh cross-ratio form."""
    x = check_in_ball(x, c)
    y = check_in_ball(y, c)
    c = float(c)
    diff2 = _sqnorm(x - y)
    denom = (1.0 - c * _sqnorm(x)) * (1.0 - c * _sqnorm(y))
    arg = 1.0 + 2.0 * c * diff2 / denom
    return np.arccosh(np.maximum(arg, 1.0)) / np.sqrt(c)


# ---------------------------------------------------------------------------
# gradients


def distance_to_origin_grad(x, c):
    """Gradients of :func:`distance_to_origin` w.r.t. ``x`` and ``c``.

    Returns ``(value, d_dx, d_dc)``. At ``x = 0`` the gradient is not defined
    (the distance is a cone there); we return the zero subgradient. Its
    directional derivative along any unit vector is 2.
    """
    x = check_in_ball(x, c)
    c = float(c)
    sc = np.sqrt(c)
    r = np.sqrt(_sqnorm(x))
    u = sc * r
    value = 2.0 / sc * np.arctanh(u)
    one_minus = 1.0 - u * u
    d_dr = 2.0 / one_minus
    unit = x / np.maximum(r, SMALL_NORM)[..., None]
    d_dx = d_dr[..., None] * unit
    # d/dc of (2/sqrt c) artanh(sqrt c r)
    d_dc = -value / (2.0 * c) + r / (sc * one_minus) / sc
    return value, d_dx, d_dc


def geodesic_distance_grad(x, y, c):
    """Gradients of :func:`geodesic_distance`.

    Returns ``(value, d_dx, d_dy, d_dc)``. Coincident points have no gradient
    (arccosh' diverges at 1); those rows come back as zeros and callers that
    need them must avoid coincidence.
    """
    x = check_in_ball(x, c)
    y = check_in_ball(y, c)
    c = float(c)
    sc = np.sqrt(c)
    xx = _sqnorm(x)
    yy = _sqnorm(y)
    diff = x - y
    dd = _sqnorm(diff)
    a = 1.0 - c * xx
    b = 1.0 - c * yy
    q = 2.0 * c * dd / (a * b)
    arg = 1.0 + q
    acosh = np.arccosh(np.maximum(arg, 1.0))
    value = acosh / sc
    # d acosh(arg)/d arg = 1 / sqrt(arg^2 - 1) = 1 / sqrt(q (q + 2))
    s = np.sqrt(np.maximum(q * (q + 2.0), 0.0))
    ok = s > 1e-300
    inv = np.where(ok, 1.0 / np.where(ok, s, 1.0), 0.0) / sc
    # dq/dx = 2c [2 diff / (a b) + dd * 2c x / (a^2 b)]
    dq_dx = 2.0 * c * (2.0 * diff / (a * b)[..., None] + (2.0 * c * dd / (a * a * b))[..., None] * x)
    dq_dy = 2.0 * c * (-2.0 * diff / (a * b)[..., None] + (2.0 * c * dd / (a * b * b))[..., None] * y)
    d_dx = inv[..., None] * dq_dx
    d_dy = inv[..., None] * dq_dy
    # dq/dc = 2 dd/(ab) + 2c dd * (xx/(a^2 b) + yy/(a b^2))
    dq_dc = 2.0 * dd / (a * b) + 2.0 * c * dd * (xx / (a * a * b) + yy / (a * b * b))
    d_dc = inv * dq_dc - value / (2.0 * c)
    return value, d_dx, d_dy, d_dc


def exp_map_origin_vjp(v, c, g_out):
    """Vector-Jacobian product of the exp map.

    Given the upstream gradient ``g_out`` on the output, returns
    ``(g_v, g_c)`` where ``g_c`` is summed over the batch.
    """
    v = np.asarray(v, dtype=np.float64)
    c = float(c)
    sc = np.sqrt(c)
    r = np.sqrt(_sqnorm(v))
    small = r < 1e-8
    rs = np.where(small, 1.0, r)
    t = sc * rs
    th = np.tanh(t)
    f = np.where(small, 1.0, th / t)
    # f = tanh(u)/u with u = sc r:  df/du = (sech^2(u) - f) / u
    sech2 = 1.0 - th * th
    df_du = (sech2 - f) / t
    df_dr = np.where(small, 0.0, df_du * sc)
    df_dc = np.where(small, 0.0, df_du * rs / (2.0 * sc))
    proj = np.sum(g_out * v, axis=-1)
    unit = v / rs[..., None]
    g_v = f[..., None] * g_out + (df_dr * proj)[..., None] * unit
    g_c = np.sum(df_dc * proj)
    return g_v, g_c


def project_to_ball_vjp(x, c, g_out):
    """Vector-Jacobian product of :func:`project_to_ball`; returns ``(g_x, g_c)``."""
    x = np.asarray(x, dtype=np.float64)
    c = float(c)
    r_max = (1.0 - BALL_EPS) / np.sqrt(c)
    norm = np.sqrt(_sqnorm(x))
    clamped = norm > r_max
    safe = np.where(clamped, norm, 1.0)
    unit = x / safe[..., None]
    radial = np.sum(g_out * unit, axis=-1)
    g_clamped = (r_max / safe)[..., None] * (g_out - radial[..., None] * unit)
    g_x = np.where(clamped[..., None], g_clamped, g_out)
    # output = r_max(c) * unit when clamped; d r_max/dc = -r_max / (2c)
    g_c = np.sum(np.where(clamped, radial * (-r_max / (2.0 * c)), 0.0))
    return g_x, g_c
