"""Pinhole projection and the radial/tangential lens distortion model.

Points are numpy arrays whose last axis holds the (x, y) pair, so every
function here works equally on a single point, a (J, 2) pose or a
(T, J, 2) trajectory.  Pixel coordinates are ``(a, b)``; normalized
image-plane coordinates are ``(an, bn)``.
"""

from __future__ import annotations

from dataclasses import dataclass, astuple

import numpy as np

from .errors import DegenerateDepthError, InvalidInputError, NoConvergenceError

DEFAULT_Z_MIN = 1.0  # mm


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        vals = astuple(self)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidInputError(f"intrinsics must be finite, got {vals}")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @classmethod
    def default(cls):
        """1000x1000 synthetic frame with a 1000 px focal length."""
        return cls(fx=1000.0, fy=1000.0, cx=500.0, cy=500.0)

    def as_array(self):
        return np.array(astuple(self), dtype=np.float64)


@dataclass(frozen=True)
class DistortionParams:
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        if not all(np.isfinite(v) for v in astuple(self)):
            raise InvalidInputError(f"distortion parameters must be finite, got {astuple(self)}")

    @classmethod
    def zeros(cls):
        return cls()

    @classmethod
    def from_sequence(cls, values):
        values = [float(v) for v in values]
        if len(values) != 5:
            raise InvalidInputError(f"expected 5 distortion coefficients (k1,k2,k3,p1,p2), got {len(values)}")
        return cls(*values)

    def as_array(self):
        return np.array(astuple(self), dtype=np.float64)

    @property
    def is_zero(self):
        return not any(astuple(self))


# d1/d2 are the heavy (barrel/pincushion + tangential) settings, d3/d4 the
# moderate ones. The published table gives d1/d2 with -/+ signs; barrel
# (negative k1) is assigned to d1.
PRESETS = {
    "d1": DistortionParams(-4.142, 4.956, -0.062, -0.488, -0.712),
    "d2": DistortionParams(4.142, -4.956, 0.062, -0.488, -0.712),
    "d3": DistortionParams(-2.071, 2.478, -0.031, -0.010, -0.014),
    "d4": DistortionParams(2.071, -2.478, 0.031, -0.010, -0.014),
    "h36m": DistortionParams(-0.207, 0.248, -0.003, -0.001, -0.001),
    "none": DistortionParams(),
}
HEAVY_PRESETS = ("d1", "d2")
MODERATE_PRESETS = ("d3", "d4")


def preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidInputError(f"unknown distortion preset {name!r}; known: {sorted(PRESETS)}") from None


def _as_points(p, dim=2, what="points"):
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1:] != (dim,):
        raise InvalidInputError(f"{what} must have a trailing axis of size {dim}, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidInputError(f"{what} contain non-finite values")
    return p


def radius(n):
    """Distance of normalized points from the optical center."""
    n = np.asarray(n, dtype=np.float64)
    return np.sqrt(n[..., 0] ** 2 + n[..., 1] ** 2)


def normalize(p, K: Intrinsics):
    p = _as_points(p, what="pixel points")
    out = np.empty_like(p)
    out[..., 0] = (p[..., 0] - K.cx) / K.fx
    out[..., 1] = (p[..., 1] - K.cy) / K.fy
    return out


def unnormalize(n, K: Intrinsics):
    n = _as_points(n, what="normalized points")
    out = np.empty_like(n)
    out[..., 0] = n[..., 0] * K.fx + K.cx
    out[..., 1] = n[..., 1] * K.fy + K.cy
    return out


def distort_normalized(n, d: DistortionParams):
    """Apply the lens model to normalized coordinates.

    The tangential term ``dt`` is added to the radial multiplier and the
    ``p * r**2`` offsets are applied on top, exactly as the method defines
    it. This is *not* the Brown-Conrady/OpenCV form and must not be
    "corrected" towards it.
    """
    n = _as_points(n, what="normalized points")
    return _distort(n, d.k1, d.k2, d.k3, d.p1, d.p2)


def _distort(n, k1, k2, k3, p1, p2):
    an, bn = n[..., 0], n[..., 1]
    r2 = an * an + bn * bn
    # explicit products: ** 3 goes through pow() and can differ in the last bit
    dr = 1.0 + k1 * r2 + k2 * r2 * r2 + k3 * r2 * r2 * r2
    dt = 2.0 * p1 * an + 2.0 * p2 * bn
    out = np.empty_like(n)
    out[..., 0] = an * (dr + dt) + p1 * r2
    out[..., 1] = bn * (dr + dt) + p2 * r2
    return out


def distort_pixel(p, K: Intrinsics, d: DistortionParams):
    if d.is_zero:
        # the normalize/unnormalize round trip is not bit-exact
        return _as_points(p).copy()
    return unnormalize(distort_normalized(normalize(p, K), d), K)


def distort_pixel_rows(p, intrinsics, params):
    """Row-wise distortion: point ``i`` uses intrinsics row ``i`` (fx, fy, cx, cy)
    and parameter row ``i`` (k1, k2, k3, p1, p2). Shapes (N, 2), (N, 4), (N, 5)."""
    p = _as_points(p, what="pixel points")
    K = np.asarray(intrinsics, dtype=np.float64)
    D = np.asarray(params, dtype=np.float64)
    if p.ndim != 2 or K.shape != (len(p), 4) or D.shape != (len(p), 5):
        raise InvalidInputError(f"expected (N, 2), (N, 4), (N, 5) arrays, got {p.shape}, {K.shape}, {D.shape}")
    if not (np.all(np.isfinite(K)) and np.all(np.isfinite(D))):
        raise InvalidInputError("intrinsics and distortion parameters must be finite")
    if np.any(K[:, :2] <= 0):
        raise InvalidInputError("focal lengths must be positive")
    fx, fy, cx, cy = K.T
    n = np.column_stack([(p[:, 0] - cx) / fx, (p[:, 1] - cy) / fy])
    q = _distort(n, *D.T)
    out = np.column_stack([q[:, 0] * fx + cx, q[:, 1] * fy + cy])
    zero = ~np.any(D, axis=1)
    out[zero] = p[zero]  # same exact-identity rule as distort_pixel
    return out


def project(joints, K: Intrinsics, z_min=DEFAULT_Z_MIN):
    """Pinhole projection of camera-frame points (mm) to pixels."""
    j = _as_points(joints, dim=3, what="3D points")
    z = j[..., 2]
    if np.any(z <= z_min):
        raise DegenerateDepthError(f"point depth {z.min():.6g} mm is not beyond z_min={z_min} mm")
    out = np.empty(j.shape[:-1] + (2,), dtype=np.float64)
    out[..., 0] = K.fx * j[..., 0] / z + K.cx
    out[..., 1] = K.fy * j[..., 1] / z + K.cy
    return out


def _distortion_jacobian(n, d: DistortionParams):
    an, bn = n[..., 0], n[..., 1]
    s = an * an + bn * bn
    dr = 1.0 + d.k1 * s + d.k2 * s ** 2 + d.k3 * s ** 3
    m = dr + 2.0 * d.p1 * an + 2.0 * d.p2 * bn
    drds = d.k1 + 2.0 * d.k2 * s + 3.0 * d.k3 * s ** 2
    dm_da = 2.0 * an * drds + 2.0 * d.p1
    dm_db = 2.0 * bn * drds + 2.0 * d.p2
    jac = np.empty(n.shape[:-1] + (2, 2))
    jac[..., 0, 0] = m + an * dm_da + 2.0 * d.p1 * an
    jac[..., 0, 1] = an * dm_db + 2.0 * d.p1 * bn
    jac[..., 1, 0] = bn * dm_da + 2.0 * d.p2 * an
    jac[..., 1, 1] = m + bn * dm_db + 2.0 * d.p2 * bn
    return jac


def invert_distortion(q, d: DistortionParams, tol=1e-12, max_iter=100):
    """Find n with distort_normalized(n, d) == q by damped Newton iteration.

    Intended for round-trip testing only. The step length of each point is
    halved whenever a full step would increase its residual. Heavy presets
    far from the center fold the image plane onto itself and generally fail
    with NoConvergenceError.
    """
    q = _as_points(q, what="normalized points")
    flat_q = q.reshape(-1, 2)
    n = flat_q.copy()
    if d.is_zero:
        return n.reshape(q.shape)
    res = distort_normalized(n, d) - flat_q
    err = np.linalg.norm(res, axis=-1)
    for _ in range(max_iter):
        active = err >= tol
        if not active.any():
            return n.reshape(q.shape)
        jac = _distortion_jacobian(n[active], d)
        try:
            step = np.linalg.solve(jac, res[active][..., None])[..., 0]
        except np.linalg.LinAlgError:
            raise NoConvergenceError("singular distortion Jacobian during inversion") from None
        lam = np.ones(step.shape[0])
        idx = np.flatnonzero(active)
        for _halving in range(30):
            trial = n[idx] - lam[:, None] * step
            trial_res = distort_normalized(trial, d) - flat_q[idx]
            trial_err = np.linalg.norm(trial_res, axis=-1)
            worse = trial_err > err[idx]
            if not worse.any():
                break
            lam[worse] *= 0.5
        n[idx] = trial
        res[idx] = trial_res
        err[idx] = trial_err
    if np.any(err >= tol):
        raise NoConvergenceError(
            f"distortion inversion did not reach tol={tol} after {max_iter} iterations "
            f"(worst residual {err.max():.3g})"
        )
    return n.reshape(q.shape)
