"""Constrained spherical deconvolution: convolution matrices and solvers.

The convolution kernel of each tissue is a zonal (m=0) response per shell.
A response row stores the zonal SH coefficients r_l of the single-fiber
signal profile, so the measured coefficient of degree l is
sqrt(4 pi / (2l+1)) * r_l times the FOD coefficient (spherical convolution
theorem). Isotropic tissues (GM, CSF) carry degree 0 only and contribute a
constant per shell.

The constrained fit solves, per voxel,

    min ||C x - d||^2   subject to   A x >= 0,

where A stacks the WM FOD amplitudes at a fixed set of 300 symmetrized
constraint directions (shipped as a data asset) plus one row per isotropic
tissue scalar. The solver iterates an active set of amplitude constraints,
solving each equality-restricted least-squares subproblem exactly through
its KKT system and adding/removing constraints until primal feasibility
and non-negative multipliers hold, i.e. until the QP optimum is reached.
"""

import importlib.resources
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dposv as lapack_dposv

from . import sh
from .gradients import detect_shells
from .volume import CoeffVolume

TISSUES = ("wm", "gm", "csf")

_FEAS_TOL = 1e-10
_CHUNK = 2048  # fixed voxel chunk so results do not depend on worker count


@dataclass(frozen=True)
class ResponseSet:
    """Per-tissue, per-shell zonal convolution kernels.

    shells_b: nominal b-value per row, ascending, b=0 first.
    wm: (n_shells, l_max//2 + 1) zonal coefficients for degrees 0, 2, ...
    gm, csf: (n_shells, 1) degree-0 coefficients. gm may be None for
    two-tissue response sets.
    """

    shells_b: np.ndarray
    wm: np.ndarray
    csf: np.ndarray
    gm: np.ndarray = None

    def __post_init__(self):
        shells = np.asarray(self.shells_b, dtype=np.float64)
        object.__setattr__(self, "shells_b", shells)
        for name in ("wm", "gm", "csf"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.atleast_2d(np.asarray(arr, dtype=np.float64))
            if arr.shape[0] != shells.size:
                raise ValueError(
                    f"{name} response has {arr.shape[0]} rows for {shells.size} shells"
                )
            if np.any(arr[:, 0] <= 0):
                raise ValueError(f"{name} response degree-0 terms must be positive")
            object.__setattr__(self, name, arr)
        mags = np.abs(self.wm)
        if np.any(np.diff(mags, axis=1) > 1e-12):
            raise ValueError("WM response magnitudes must be non-increasing with degree")

    @property
    def l_max(self):
        return 2 * (self.wm.shape[1] - 1)

    def row_for(self, tissue, b, tolerance):
        arr = getattr(self, tissue)
        if arr is None:
            raise KeyError(f"response set has no {tissue} tissue")
        hits = np.nonzero(np.abs(self.shells_b - b) <= tolerance)[0]
        if hits.size == 0:
            raise ValueError(
                f"no {tissue} response for shell b={b:g}; response shells: "
                f"{[round(x) for x in self.shells_b]}"
            )
        return arr[hits[0]]


def write_response(path, resp):
    lines = ["# fodkit response set (rows = shells, columns = zonal coefficients)"]
    lines.append("shells: " + " ".join(f"{b:g}" for b in resp.shells_b))
    for name in TISSUES:
        arr = getattr(resp, name)
        if arr is None:
            continue
        lines.append(f"[{name}]")
        for row in arr:
            lines.append(" ".join(f"{v:.12e}" for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_response(path):
    shells = None
    sections = {}
    current = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("shells:"):
                shells = [float(v) for v in line.split(":", 1)[1].split()]
            elif line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip().lower()
                sections[current] = []
            elif current is not None:
                try:
                    sections[current].append([float(v) for v in line.split()])
                except ValueError as exc:
                    raise ValueError(f"{path}: line {lineno}: {exc}") from exc
            else:
                raise ValueError(f"{path}: line {lineno}: content before any [tissue] section")
    if shells is None:
        raise ValueError(f"{path}: missing 'shells:' line")
    for required in ("wm", "csf"):
        if required not in sections:
            raise ValueError(f"{path}: missing [{required}] section")
    return ResponseSet(
        shells_b=np.asarray(shells),
        wm=np.asarray(sections["wm"]),
        csf=np.asarray(sections["csf"]),
        gm=np.asarray(sections["gm"]) if "gm" in sections else None,
    )


def constraint_directions():
    """The shipped 300-point symmetrized constraint direction set."""
    ref = importlib.resources.files("fodkit.data").joinpath("constraint300.txt")
    with importlib.resources.as_file(ref) as path:
        return np.loadtxt(path)


# ---------------------------------------------------------------------------
# convolution matrix


def _convolution_factors(response_row, l_max):
    """Per-degree multipliers sqrt(4 pi / (2l+1)) r_l, padded/truncated to l_max."""
    degrees = sh.even_degrees(l_max)
    out = np.zeros(len(degrees))
    for i, l in enumerate(degrees):
        if i < response_row.size:
            out[i] = np.sqrt(4.0 * np.pi / (2 * l + 1)) * response_row[i]
    return out


def _wm_block(dirs, response_row, l_max):
    basis = sh.sh_basis(dirs, l_max)
    factors = _convolution_factors(response_row, l_max)
    ls, _ = sh.degree_order_table(l_max)
    return basis * factors[(ls // 2)][None, :]


@dataclass(frozen=True)
class ConvolutionMatrix:
    """Dense measurement matrix mapping tissue coefficients to signals.

    Rows follow ``row_order`` (scheme entries grouped by shell, ascending
    b); columns follow ``tissues`` = [(name, n_columns), ...] with WM first.
    """

    matrix: np.ndarray
    row_order: np.ndarray
    tissues: list
    l_max: int

    @property
    def n_cols(self):
        return self.matrix.shape[1]


def build_convolution(scheme, resp, l_max, tissues=TISSUES):
    """Assemble the block convolution matrix for a gradient scheme."""
    shells = detect_shells(scheme)
    tol = scheme.shell_tolerance
    blocks, row_order = [], []
    iso = [t for t in tissues if t != "wm"]
    for shell in shells:
        idx = np.asarray(shell.member_indices)
        row_order.append(idx)
        if shell.is_b0:
            # b0 rows are direction independent: degree-0 columns only
            wm_row = resp.row_for("wm", 0.0, tol)
            wm = np.zeros((idx.size, sh.n_coeffs(l_max)))
            wm[:, 0] = np.sqrt(4.0 * np.pi) * wm_row[0] * sh.sh_basis([[0, 0, 1.0]], 0)[0, 0]
            cols = [wm]
            for t in iso:
                cols.append(np.full((idx.size, 1), resp.row_for(t, 0.0, tol)[0]))
        else:
            dirs = scheme.bvecs[idx]
            cols = [_wm_block(dirs, resp.row_for("wm", shell.nominal_b, tol), l_max)]
            for t in iso:
                cols.append(np.full((idx.size, 1), resp.row_for(t, shell.nominal_b, tol)[0]))
        blocks.append(np.hstack(cols))
    matrix = np.vstack(blocks)
    layout = [("wm", sh.n_coeffs(l_max))] + [(t, 1) for t in iso]
    return ConvolutionMatrix(
        matrix=matrix,
        row_order=np.concatenate(row_order),
        tissues=layout,
        l_max=l_max,
    )


def amplitude_constraints(l_max, n_iso, dirs=None):
    """Constraint matrix A: WM amplitudes at fixed directions + isotropic scalars."""
    if dirs is None:
        dirs = constraint_directions()
    wm = sh.sh_basis(dirs, l_max)
    n = wm.shape[1] + n_iso
    a = np.zeros((wm.shape[0] + n_iso, n))
    a[: wm.shape[0], : wm.shape[1]] = wm
    for i in range(n_iso):
        a[wm.shape[0] + i, wm.shape[1] + i] = 1.0
    return a


# ---------------------------------------------------------------------------
# constrained least-squares solver


def _solve_passive(gram, rhs, idx):
    sub = gram[np.ix_(idx, idx)]
    _, x, info = lapack_dposv(sub, rhs[idx], lower=1)
    if info != 0:
        x, *_ = np.linalg.lstsq(sub, rhs[idx], rcond=None)
    return x


def _lawson_hanson(gram, rhs, max_iter=500):
    """min_{mu >= 0} ||M mu - b||^2 given gram = M'M and rhs = M'b.

    Lawson-Hanson active-set iteration; the passive-set solves run on the
    small gram submatrix. Termination requires the exact KKT conditions
    (non-positive gradient outside the support, positive solution on it),
    so a converged result is the NNLS optimum. Returns (mu, converged).
    """
    p = rhs.size
    mu = np.zeros(p)
    passive = np.zeros(p, dtype=bool)
    tol = 1e-11 * max(1.0, float(np.abs(rhs).max()))
    for _ in range(max_iter):
        # settle mu on the current passive set (solve + clip until feasible)
        for _ in range(2 * p + 2):
            idx = np.nonzero(passive)[0]
            if idx.size == 0:
                mu[:] = 0.0
                break
            s = _solve_passive(gram, rhs, idx)
            if np.all(s > 0.0):
                mu[:] = 0.0
                mu[idx] = s
                break
            cur = mu[idx]
            neg = s <= 0.0
            at_zero = neg & (cur <= 0.0)
            if at_zero.any():
                passive[idx[at_zero]] = False
                continue
            # line search toward s until the first coordinate hits zero
            ratios = cur[neg] / (cur[neg] - s[neg])
            neg_pos = np.nonzero(neg)[0]
            k = int(neg_pos[np.argmin(ratios)])
            vals = cur + float(np.min(ratios)) * (s - cur)
            vals[vals < 0.0] = 0.0
            vals[k] = 0.0
            mu[:] = 0.0
            mu[idx] = vals
            passive[idx] = vals > 0.0
        else:
            return mu, False
        idx = np.nonzero(passive)[0]
        grad = rhs - gram[:, idx] @ mu[idx] if idx.size else rhs.copy()
        grad[passive] = -np.inf
        jbest = int(np.argmax(grad))
        if grad[jbest] <= tol:
            return mu, True
        passive[jbest] = True
    return mu, False


class ConstrainedSolver:
    """min ||Cx - d||^2 s.t. Ax >= 0 through its non-negative dual.

    With G = C'C = LL' (Cholesky), the dual of the QP is the plain NNLS
    problem min_{mu >= 0} ||M mu + 2w||^2 with M = L^-1 A' and w = L^-1 C'd,
    and the primal solution is x = x_ls + (1/2) L^-T (M mu). The NNLS KKT
    conditions give A x = (1/2) M'(M mu + 2w) >= 0, so the recovered x is
    feasible to machine precision and optimal. The factorization depends
    only on (C, A) and is shared across voxels.
    """

    def __init__(self, c, a):
        c = np.asarray(c, dtype=np.float64)
        a = np.asarray(a, dtype=np.float64)
        gram = c.T @ c
        try:
            self._chol = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                "normal matrix is not positive definite; the convolution "
                "matrix is rank deficient"
            ) from exc
        self._ct = c.T
        self._m = solve_triangular(self._chol, a.T, lower=True)
        self._gram = self._m.T @ self._m

    def solve(self, d):
        """Returns (x, converged) for one right-hand side."""
        out, failed = self.solve_batch(np.asarray(d, dtype=np.float64)[None, :])
        return out[0], failed == 0

    def solve_batch(self, signals):
        """Fit a (n_voxels, n_meas) signal block; returns (coeffs, n_failed).

        The dual reduction is batched; voxels whose unconstrained solution
        is already feasible skip the active-set loop, the rest run it
        sequentially through the exact active-set iteration.
        """
        w = solve_triangular(self._chol, self._ct @ signals.T, lower=True)
        x_ls = solve_triangular(self._chol.T, w, lower=False)  # (n_cols, n_vox)
        rhs_all = self._m.T @ (-2.0 * w)                       # (p, n_vox)
        amps = -0.5 * rhs_all                                  # equals A @ x_ls
        out = np.ascontiguousarray(x_ls.T)
        failed = 0
        for i in np.nonzero(amps.min(axis=0) < -_FEAS_TOL)[0]:
            mu, ok = _lawson_hanson(self._gram, rhs_all[:, i])
            if ok and np.all(np.isfinite(mu)):
                out[i] += 0.5 * solve_triangular(self._chol.T, self._m @ mu, lower=False)
            else:
                out[i] = 0.0
                failed += 1
        return out, failed


def solve_constrained_ls(c, d, a):
    """One-shot constrained solve; see ConstrainedSolver."""
    return ConstrainedSolver(c, a).solve(np.asarray(d, dtype=np.float64))


def _nullspace_ls(c, d, a_eq):
    """min ||Cx - d||^2 s.t. A_eq x = 0, solved through the nullspace of A_eq."""
    n = c.shape[1]
    if a_eq.shape[0] == 0:
        x, *_ = np.linalg.lstsq(c, d, rcond=None)
        return x
    _, s, vt = np.linalg.svd(a_eq, full_matrices=True)
    rank = int(np.sum(s > max(a_eq.shape) * np.finfo(float).eps * (s[0] if s.size else 1.0)))
    z = vt[rank:].T
    if z.shape[1] == 0:
        return np.zeros(n)
    y, *_ = np.linalg.lstsq(c @ z, d, rcond=None)
    return z @ y


def qp_bruteforce(c, d, a, feas_tol=1e-9):
    """Exhaustive active-set enumeration oracle for tiny instances.

    Tries every subset of constraints as equalities (nullspace solves,
    independent of the production dual path) and returns (x, objective) of
    the best feasible candidate. Exponential in the number of constraints:
    keep instances tiny.
    """
    c = np.asarray(c, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    p, n = a.shape
    best_x, best_obj = None, np.inf
    for r in range(0, min(p, n) + 1):
        for subset in combinations(range(p), r):
            x = _nullspace_ls(c, d, a[list(subset)])
            if not np.all(np.isfinite(x)):
                continue
            if np.min(a @ x) >= -feas_tol:
                obj = float(np.sum((c @ x - d) ** 2))
                if obj < best_obj - 1e-15:
                    best_obj, best_x = obj, x
    return best_x, best_obj


# ---------------------------------------------------------------------------
# volume fits


def _check_rank(conv, scheme):
    matrix = conv.matrix
    rank = np.linalg.matrix_rank(matrix)
    if rank < conv.n_cols:
        shells = detect_shells(scheme)
        sizes = {round(s.nominal_b): len(s) for s in shells}
        raise ValueError(
            f"convolution matrix is rank deficient in the WM block: rank {rank} "
            f"< {conv.n_cols} columns for l_max={conv.l_max} "
            f"(R={sh.n_coeffs(conv.l_max)}); shell direction counts: {sizes}"
        )


def _default_mask(dwi):
    b0 = dwi.scheme.b0_indices
    mean_b0 = dwi.data[..., b0].mean(axis=-1) if b0.size else dwi.data.mean(axis=-1)
    return mean_b0 > 0


def _fit_volume(data, scheme, voxel_size, conv, mask, threads):
    _check_rank(conv, scheme)
    n_iso = len(conv.tissues) - 1
    a = amplitude_constraints(conv.l_max, n_iso)
    solver = ConstrainedSolver(conv.matrix, a)

    dims = data.shape[:3]
    mask = np.asarray(mask, dtype=bool)
    voxels = np.nonzero(mask.ravel())[0]
    signals = data.reshape(-1, data.shape[-1])[voxels][:, conv.row_order]
    signals = signals.astype(np.float64)

    chunks = [slice(i, min(i + _CHUNK, voxels.size)) for i in range(0, voxels.size, _CHUNK)]
    results = [None] * len(chunks)

    def run(k):
        results[k] = solver.solve_batch(signals[chunks[k]])

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, range(len(chunks))))
    else:
        for k in range(len(chunks)):
            run(k)

    coeffs = np.zeros((int(np.prod(dims)), conv.n_cols))
    failed = 0
    for k, sl in enumerate(chunks):
        coeffs[voxels[sl]] = results[k][0]
        failed += results[k][1]
    vol = CoeffVolume(
        data=coeffs.reshape(tuple(dims) + (conv.n_cols,)),
        l_max=conv.l_max,
        tissues=conv.tissues,
        voxel_size=voxel_size,
        provenance={
            "fit": "constrained-ls",
            "qc_failed_voxels": failed,
            "n_masked_voxels": int(voxels.size),
        },
    )
    return vol


def fit_mcsd(dwi, resp, l_max=4, mask=None, threads=1):
    """Multi-shell multi-tissue (WM + GM + CSF) constrained fit."""
    shells = detect_shells(dwi.scheme)
    nonzero = [s for s in shells if not s.is_b0]
    if len(nonzero) < 2:
        raise ValueError(
            f"multi-tissue fit needs at least 2 diffusion shells, found {len(nonzero)}"
        )
    if not any(s.is_b0 for s in shells):
        raise ValueError("multi-tissue fit needs b=0 volumes")
    if resp.gm is None:
        raise ValueError("response set lacks a GM response required for the 3-tissue fit")
    conv = build_convolution(dwi.scheme, resp, l_max, tissues=("wm", "gm", "csf"))
    if mask is None:
        mask = _default_mask(dwi)
    vol = _fit_volume(dwi.data, dwi.scheme, dwi.voxel_size, conv, mask, threads)
    vol.provenance["model"] = "mcsd"
    return vol


def fit_2ts_csd(dwi, resp, l_max=4, mask=None, threads=1):
    """Single-shell 2-tissue (WM + CSF) fit using the mean b0 as a second shell."""
    shells = detect_shells(dwi.scheme)
    nonzero = [s for s in shells if not s.is_b0]
    b0s = [s for s in shells if s.is_b0]
    if len(nonzero) != 1:
        raise ValueError(
            f"two-tissue fit needs exactly 1 diffusion shell, found {len(nonzero)}"
        )
    if not b0s:
        raise ValueError("two-tissue fit needs b=0 volumes")
    shell = nonzero[0]
    tol = dwi.scheme.shell_tolerance

    # one averaged b0 pseudo-row + the shell block
    r = sh.n_coeffs(l_max)
    b0_wm = np.zeros((1, r))
    b0_wm[0, 0] = np.sqrt(4.0 * np.pi) * resp.row_for("wm", 0.0, tol)[0] \
        * sh.sh_basis([[0, 0, 1.0]], 0)[0, 0]
    b0_row = np.hstack([b0_wm, [[resp.row_for("csf", 0.0, tol)[0]]]])
    dirs = dwi.scheme.bvecs[np.asarray(shell.member_indices)]
    shell_wm = _wm_block(dirs, resp.row_for("wm", shell.nominal_b, tol), l_max)
    shell_rows = np.hstack([
        shell_wm,
        np.full((len(shell), 1), resp.row_for("csf", shell.nominal_b, tol)[0]),
    ])
    matrix = np.vstack([b0_row, shell_rows])

    # prepend the averaged b0 as an extra signal column so the first matrix
    # row lines up with it
    b0_idx = np.concatenate([np.asarray(s.member_indices) for s in b0s])
    mean_b0 = dwi.data[..., b0_idx].mean(axis=-1, dtype=np.float64)
    data = np.concatenate([mean_b0[..., None].astype(np.float32), dwi.data], axis=-1)
    conv = ConvolutionMatrix(
        matrix=matrix,
        row_order=np.concatenate([[0], np.asarray(shell.member_indices) + 1]),
        tissues=[("wm", r), ("csf", 1)],
        l_max=l_max,
    )
    if mask is None:
        mask = _default_mask(dwi)
    vol = _fit_volume(data, dwi.scheme, dwi.voxel_size, conv, mask, threads)
    vol.provenance["model"] = "2ts"
    return vol


def normalize_volume(vol, mask):
    """Scale all coefficients so the masked median summed DC term equals 1.

    A single global positive scale (no spatial field); recorded in the
    volume's ``norm_scale`` metadata.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask is empty")
    dc = np.zeros(vol.dims, dtype=np.float64)
    for name, _ in vol.tissues:
        block = vol.tissue(name)
        dc += block[..., 0].astype(np.float64)
    med = float(np.median(dc[mask]))
    if med <= 0:
        raise ValueError(f"masked median DC term is non-positive ({med:g})")
    scale = 1.0 / med
    return CoeffVolume(
        data=vol.data * scale,
        l_max=vol.l_max,
        tissues=list(vol.tissues),
        voxel_size=vol.voxel_size,
        norm_scale=scale,
        provenance={**vol.provenance, "normalized": True},
    )
