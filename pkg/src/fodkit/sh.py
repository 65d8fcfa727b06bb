"""Real even-order spherical harmonics: basis evaluation, rotation, metrics.

Basis convention (fixed repo-wide). For a unit direction with polar angle
theta (from +z) and azimuth phi, the real basis function of degree l and
order m is

    m = 0:   Y_l0                    = N(l,0) P_l(cos theta)
    m > 0:   sqrt(2) N(l,m)  P_l^m(cos theta) cos(m phi)
    m < 0:   sqrt(2) N(l,|m|) P_l^|m|(cos theta) sin(|m| phi)

with N(l,m) = sqrt((2l+1)/(4 pi) * (l-m)!/(l+m)!) and P_l^m the associated
Legendre functions including the Condon-Shortley phase (scipy.special.lpmv).
Coefficients are ordered by even degree l in {0, 2, ..., l_max}, then order
m in {-l, ..., l}, giving R(l_max) = (l_max+1)(l_max+2)/2 values.

Rotations use z-y-z Euler angles (alpha, beta, gamma) whose matrix is
M = Rz(alpha) @ Ry(beta) @ Rz(gamma).  ``rotate_sh(c, r)`` returns the
coefficients of the composed function f o M, so that

    evaluate(rotate_sh(c, r), d) == evaluate(c, M @ d)

holds for every direction d.  Per-degree blocks are orthogonal (real
Wigner-D matrices), so per-degree coefficient norms are preserved.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import lpmv

_UNIT_TOL = 1e-9


def n_coeffs(l_max):
    """Number of real even-order SH coefficients up to l_max."""
    _check_l_max(l_max)
    return (l_max + 1) * (l_max + 2) // 2


def _check_l_max(l_max):
    if l_max < 0 or l_max % 2 != 0:
        raise ValueError(f"l_max must be a non-negative even integer, got {l_max}")


def even_degrees(l_max):
    _check_l_max(l_max)
    return list(range(0, l_max + 1, 2))


def l_max_for(n):
    """Inverse of n_coeffs: the even order with exactly n coefficients."""
    for l_max in range(0, 32, 2):
        if n_coeffs(l_max) == n:
            return l_max
    raise ValueError(f"{n} is not an even-order SH coefficient count")


def degree_order_table(l_max):
    """Arrays (l, m) giving degree and order of each coefficient index."""
    ls, ms = [], []
    for l in even_degrees(l_max):
        for m in range(-l, l + 1):
            ls.append(l)
            ms.append(m)
    return np.asarray(ls), np.asarray(ms)


def degree_slice(l):
    """Index slice of degree l within the coefficient vector."""
    base = l * (l - 1) // 2
    return slice(base, base + 2 * l + 1)


@dataclass(frozen=True)
class SHCoeffs:
    """Even-order real SH coefficient vector."""

    l_max: int
    values: np.ndarray

    def __post_init__(self):
        _check_l_max(self.l_max)
        values = np.asarray(self.values, dtype=np.float64)
        expected = n_coeffs(self.l_max)
        if values.shape != (expected,):
            raise ValueError(
                f"coefficient vector for l_max={self.l_max} must have length "
                f"{expected}, got shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("coefficient vector contains non-finite values")
        object.__setattr__(self, "values", values)


def _check_unit(dirs):
    norms2 = np.sum(dirs * dirs, axis=-1)
    bad = np.abs(norms2 - 1.0) > _UNIT_TOL
    if np.any(bad):
        i = int(np.argmax(bad))
        raise ValueError(f"direction {i} is not unit-norm (|v|^2 = {norms2.flat[i]:.6g})")


def sh_basis(dirs, l_max):
    """Real even-order SH basis matrix, one row per direction.

    dirs: (n, 3) array of unit vectors. Returns (n, R(l_max)) float64.
    """
    _check_l_max(l_max)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if dirs.size == 0:
        raise ValueError("dirs must be non-empty")
    _check_unit(dirs)
    ct = np.clip(dirs[:, 2], -1.0, 1.0)
    phi = np.arctan2(dirs[:, 1], dirs[:, 0])
    ls, ms = degree_order_table(l_max)
    out = np.empty((dirs.shape[0], ls.size))
    sqrt2 = math.sqrt(2.0)
    for j in range(ls.size):
        l, m = int(ls[j]), int(ms[j])
        am = abs(m)
        norm = math.sqrt(
            (2 * l + 1) / (4.0 * math.pi) * math.factorial(l - am) / math.factorial(l + am)
        )
        p = lpmv(am, l, ct)
        if m == 0:
            out[:, j] = norm * p
        elif m > 0:
            out[:, j] = sqrt2 * norm * p * np.cos(m * phi)
        else:
            out[:, j] = sqrt2 * norm * p * np.sin(am * phi)
    return out


def evaluate(coeffs, dirs):
    """Amplitudes of the SH function at the given unit directions."""
    return sh_basis(dirs, coeffs.l_max) @ coeffs.values


# ---------------------------------------------------------------------------
# rotation


@dataclass(frozen=True)
class RotationSpec:
    """z-y-z Euler angles in radians."""

    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"Euler angle {name} must be finite")

    @property
    def matrix(self):
        """3x3 rotation matrix Rz(alpha) @ Ry(beta) @ Rz(gamma)."""
        return _rot_z(self.alpha) @ _rot_y(self.beta) @ _rot_z(self.gamma)

    def inverse(self):
        return RotationSpec(-self.gamma, -self.beta, -self.alpha)

    def compose(self, other):
        """Rotation whose matrix is self.matrix @ other.matrix."""
        return rotation_from_matrix(self.matrix @ other.matrix)


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_y(b):
    c, s = math.cos(b), math.sin(b)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_from_matrix(m):
    """Extract z-y-z Euler angles from a rotation matrix."""
    beta = math.acos(min(1.0, max(-1.0, m[2, 2])))
    if abs(math.sin(beta)) > 1e-12:
        alpha = math.atan2(m[1, 2], m[0, 2])
        gamma = math.atan2(m[2, 1], -m[2, 0])
    else:
        # beta ~ 0 or pi: only alpha +/- gamma is determined
        gamma = 0.0
        if m[2, 2] > 0:
            alpha = math.atan2(m[1, 0], m[0, 0])
        else:
            alpha = math.atan2(-m[1, 0], -m[0, 0])
    return RotationSpec(alpha, beta, gamma)


def rotation_aligning_z(u):
    """Rotation r such that rotate_sh moves a zonal (z-axis) peak onto u."""
    u = np.asarray(u, dtype=np.float64)
    _check_unit(u[None, :])
    theta = math.acos(min(1.0, max(-1.0, u[2])))
    phi = math.atan2(u[1], u[0])
    return RotationSpec(0.0, -theta, -phi)


def _wigner_d_small(l, beta):
    """Wigner small-d matrix d^l_{mn}(beta) by the closed-form sum."""
    d = np.zeros((2 * l + 1, 2 * l + 1))
    c, s = math.cos(beta / 2.0), math.sin(beta / 2.0)
    for mi, m in enumerate(range(-l, l + 1)):
        for ni, n in enumerate(range(-l, l + 1)):
            lo, hi = max(0, n - m), min(l + n, l - m)
            val = 0.0
            for k in range(lo, hi + 1):
                num = math.sqrt(
                    math.factorial(l + n) * math.factorial(l - n)
                    * math.factorial(l + m) * math.factorial(l - m)
                )
                den = (
                    math.factorial(l + n - k) * math.factorial(k)
                    * math.factorial(l - m - k) * math.factorial(k + m - n)
                )
                val += (-1.0) ** (k + m - n) * num / den \
                    * c ** (2 * l + n - m - 2 * k) * s ** (2 * k + m - n)
            d[mi, ni] = val
    return d


def _real_complex_transform(l):
    """Unitary map A with S_mu = sum_m A[mu, m] Y_l^m (complex to real basis)."""
    a = np.zeros((2 * l + 1, 2 * l + 1), dtype=complex)
    a[l, l] = 1.0
    rs2 = 1.0 / math.sqrt(2.0)
    for m in range(1, l + 1):
        sign = (-1.0) ** m
        a[l + m, l + m] = rs2
        a[l + m, l - m] = sign * rs2
        a[l - m, l + m] = -1j * rs2
        a[l - m, l - m] = 1j * sign * rs2
    return a


def wigner_real(l, rot):
    """Real Wigner-D block of degree l for ``rotate_sh``'s convention."""
    # rotate_sh composes with M (not M^-1), hence the reversed, negated angles
    alpha, beta, gamma = -rot.gamma, -rot.beta, -rot.alpha
    d = _wigner_d_small(l, beta)
    m = np.arange(-l, l + 1)
    dc = np.exp(-1j * m[:, None] * alpha) * d * np.exp(-1j * m[None, :] * gamma)
    a = _real_complex_transform(l)
    dr = np.conj(a) @ dc @ a.T
    assert np.abs(dr.imag).max() < 1e-10
    return dr.real


def rotation_blockdiag(l_max, rot):
    """Block-diagonal (R x R) rotation matrix over all even degrees."""
    r = n_coeffs(l_max)
    out = np.zeros((r, r))
    for l in even_degrees(l_max):
        sl = degree_slice(l)
        out[sl, sl] = wigner_real(l, rot)
    return out


def rotate_sh(coeffs, rot):
    """Rotate SH coefficients; see module docstring for the convention."""
    out = np.empty_like(coeffs.values)
    for l in even_degrees(coeffs.l_max):
        sl = degree_slice(l)
        out[sl] = wigner_real(l, rot) @ coeffs.values[sl]
    return SHCoeffs(coeffs.l_max, out)


# ---------------------------------------------------------------------------
# coefficient metrics


def acc(u, v, alpha=1e-8):
    """Angular correlation coefficient over degrees >= 1 (DC term excluded)."""
    if u.l_max != v.l_max:
        raise ValueError(f"l_max mismatch: {u.l_max} vs {v.l_max}")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    a, b = u.values[1:], v.values[1:]
    num = float(a @ b)
    den = float(np.linalg.norm(a) * np.linalg.norm(b)) + alpha
    return num / den


def acc_map(u, v, alpha=1e-8):
    """Vectorized ACC over the last axis of two (..., R) coefficient arrays."""
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    a = np.asarray(u, dtype=np.float64)[..., 1:]
    b = np.asarray(v, dtype=np.float64)[..., 1:]
    num = np.sum(a * b, axis=-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1) + alpha
    return num / den


def mae(u, v, mask):
    """Mean over masked voxels of the per-voxel mean absolute difference.

    u, v: (..., R) coefficient rasters with identical shape; mask: boolean
    array matching the leading (voxel) axes.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != u.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} does not match volume {u.shape[:-1]}")
    if not mask.any():
        raise ValueError("mask is empty")
    per_voxel = np.mean(np.abs(u[mask] - v[mask]), axis=-1)
    return float(per_voxel.mean())
