"""Gradient tables: shell detection, half-sphere reordering, subsampling.

Gradient tables use the two-file text layout: a 3xN whitespace-separated
direction file (rows x, y, z) and a 1xN b-value file. b=0 entries carry a
zero direction vector.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

DEFAULT_SHELL_TOLERANCE = 70.0  # s/mm^2, covers scanner b-value jitter
_B0_MAX = 50.0

STANDARD_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


@dataclass(frozen=True)
class GradientScheme:
    """Per-volume b-values (s/mm^2) and unit directions."""

    bvals: np.ndarray
    bvecs: np.ndarray  # (n, 3), zero rows for b=0 entries
    shell_tolerance: float = DEFAULT_SHELL_TOLERANCE

    def __post_init__(self):
        bvals = np.asarray(self.bvals, dtype=np.float64)
        bvecs = np.asarray(self.bvecs, dtype=np.float64)
        if bvals.ndim != 1 or bvecs.shape != (bvals.size, 3):
            raise ValueError(f"inconsistent table: bvals {bvals.shape}, bvecs {bvecs.shape}")
        if np.any(bvals < 0):
            raise ValueError("negative b-value in gradient table")
        dw = bvals > _B0_MAX
        norms = np.linalg.norm(bvecs[dw], axis=1)
        if dw.any() and np.any(np.abs(norms - 1.0) > 1e-6):
            i = int(np.argmax(np.abs(norms - 1.0)))
            raise ValueError(f"diffusion direction {np.nonzero(dw)[0][i]} is not unit-norm")
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    def __len__(self):
        return self.bvals.size

    @property
    def b0_indices(self):
        return np.nonzero(self.bvals <= _B0_MAX)[0]

    @property
    def dw_indices(self):
        return np.nonzero(self.bvals > _B0_MAX)[0]

    def take(self, indices):
        indices = np.asarray(indices, dtype=int)
        return GradientScheme(self.bvals[indices], self.bvecs[indices], self.shell_tolerance)


@dataclass(frozen=True)
class Shell:
    nominal_b: float
    member_indices: list = field(default_factory=list)

    @property
    def is_b0(self):
        return self.nominal_b <= _B0_MAX

    def __len__(self):
        return len(self.member_indices)


def detect_shells(scheme):
    """Greedy 1D clustering of b-values within the scheme tolerance.

    Returns shells sorted ascending by nominal b; every entry lands in
    exactly one shell.
    """
    if len(scheme) == 0:
        raise ValueError("empty gradient scheme")
    order = np.argsort(scheme.bvals, kind="stable")
    tol = scheme.shell_tolerance
    clusters = []  # (sum_b, [indices])
    for i in order:
        b = scheme.bvals[i]
        if clusters and b - clusters[-1][0] / len(clusters[-1][1]) <= tol:
            clusters[-1] = (clusters[-1][0] + b, clusters[-1][1] + [int(i)])
        else:
            clusters.append((b, [int(i)]))
    return [Shell(total / len(idx), idx) for total, idx in clusters]


def _find_shell(shells, b, tolerance):
    for shell in shells:
        if abs(shell.nominal_b - b) <= tolerance:
            return shell
    raise ValueError(
        f"no shell at b={b:g}; available: {[round(s.nominal_b) for s in shells]}"
    )


def extract_single_shell(scheme, b):
    """All b=0 entries plus the entries of shell b, in original order."""
    shells = detect_shells(scheme)
    shell = _find_shell(shells, b, scheme.shell_tolerance)
    if shell.is_b0:
        raise ValueError(f"b={b:g} selects the b=0 shell; pick a diffusion shell")
    keep = sorted(set(scheme.b0_indices.tolist()) | set(shell.member_indices))
    return scheme.take(keep)


def _min_sym_angle_to(candidates, chosen):
    """Per-candidate minimum antipodally-symmetrized angle to the chosen set."""
    dots = np.abs(candidates @ chosen.T)
    return np.arccos(np.clip(dots, -1.0, 1.0)).min(axis=1)


def reorder_permutation(scheme):
    """Greedy max-min-angle permutation of the diffusion directions.

    Starting from the first diffusion direction, repeatedly appends the
    candidate maximizing the minimum symmetrized angular distance to all
    already-chosen directions; ties break on the lowest original index.
    b=0 entries stay at their original positions.
    """
    dw = scheme.dw_indices
    perm = np.arange(len(scheme))
    if dw.size == 0:
        return perm
    dirs = scheme.bvecs[dw]
    remaining = list(range(dw.size))
    chosen = [remaining.pop(0)]
    while remaining:
        angles = _min_sym_angle_to(dirs[remaining], dirs[chosen])
        best = int(np.argmax(angles))
        # argmax already takes the lowest position on ties; positions follow
        # original index order because `remaining` stays sorted
        chosen.append(remaining.pop(best))
    perm[dw] = dw[chosen]
    return perm


def reorder_halfsphere(scheme):
    """Reorder so every prefix of diffusion directions is near-uniform on
    the half-sphere; permutation of the input."""
    return scheme.take(reorder_permutation(scheme))


def subsample_indices(scheme, keep_fraction):
    """Indices kept by truncation: the first ceil(fraction * n) of both the
    b=0 and diffusion entries. At least one b=0 entry is always retained."""
    if not (0.0 < keep_fraction <= 1.0):
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if not any(math.isclose(keep_fraction, f) for f in STANDARD_FRACTIONS):
        warnings.warn(
            f"keep_fraction {keep_fraction} is not one of {STANDARD_FRACTIONS}",
            stacklevel=2,
        )
    b0, dw = scheme.b0_indices, scheme.dw_indices
    n_dw = math.ceil(keep_fraction * dw.size)
    if dw.size and n_dw == 0:
        raise ValueError("subsampling would drop every diffusion direction")
    n_b0 = max(1, math.ceil(keep_fraction * b0.size)) if b0.size else 0
    return np.sort(np.concatenate([b0[:n_b0], dw[:n_dw]]).astype(int))


def subsample(scheme, keep_fraction):
    """Keep the first ceil(fraction * n) of both b=0 and diffusion entries.

    Assumes the scheme was reordered so truncation drops the tail.
    """
    return scheme.take(subsample_indices(scheme, keep_fraction))


# ---------------------------------------------------------------------------
# file IO


def read_gradient_table(bvecs_path, bvals_path, shell_tolerance=DEFAULT_SHELL_TOLERANCE):
    bvecs = np.loadtxt(bvecs_path, ndmin=2)
    bvals = np.loadtxt(bvals_path, ndmin=2).ravel()
    if bvecs.shape[0] != 3:
        raise ValueError(f"{bvecs_path}: expected 3 rows (x, y, z), got {bvecs.shape[0]}")
    if bvecs.shape[1] != bvals.size:
        raise ValueError(
            f"direction count {bvecs.shape[1]} does not match b-value count {bvals.size}"
        )
    vecs = bvecs.T.copy()
    dw = bvals > _B0_MAX
    norms = np.linalg.norm(vecs[dw], axis=1)
    if np.any(norms == 0):
        raise ValueError("zero direction vector on a diffusion-weighted entry")
    vecs[dw] /= norms[:, None]
    vecs[~dw] = 0.0
    return GradientScheme(bvals, vecs, shell_tolerance)


def write_gradient_table(scheme, bvecs_path, bvals_path):
    np.savetxt(bvecs_path, scheme.bvecs.T, fmt="%.10f")
    np.savetxt(bvals_path, scheme.bvals[None, :], fmt="%g")


# ---------------------------------------------------------------------------
# direction-set synthesis (used by phantom protocols and the CSD constraint set)


def halfsphere_points(n, iters=80, step=0.05):
    """n well-spread unit vectors on the upper half-sphere.

    Golden-angle spiral start followed by a fixed number of antipodally
    symmetrized electrostatic-repulsion steps. Deterministic.
    """
    if n < 1:
        raise ValueError("n must be positive")
    i = np.arange(n) + 0.5
    z = i / n
    phi = i * math.pi * (3.0 - math.sqrt(5.0))
    r = np.sqrt(1.0 - z * z)
    p = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    if n == 1:
        return p
    for _ in range(iters):
        d1 = p[:, None, :] - p[None, :, :]
        d2 = p[:, None, :] + p[None, :, :]
        r1 = np.linalg.norm(d1, axis=2)
        np.fill_diagonal(r1, np.inf)
        r2 = np.linalg.norm(d2, axis=2)
        r2[r2 < 1e-9] = np.inf
        f = (d1 / r1[..., None] ** 3).sum(axis=1) + (d2 / r2[..., None] ** 3).sum(axis=1)
        f -= (f * p).sum(axis=1, keepdims=True) * p
        p = p + step * f / n
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        p[p[:, 2] < 0] *= -1.0
    return p


def min_symmetrized_angle(dirs):
    """Smallest pairwise antipodally-symmetrized angle (radians)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    g = np.abs(dirs @ dirs.T)
    np.fill_diagonal(g, -1.0)
    return float(np.arccos(np.clip(g.max(), -1.0, 1.0)))
