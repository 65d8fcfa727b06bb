"""Synthetic multi-shell diffusion phantoms with known ground truth.

A scene is a brain-shaped ellipsoid filled with GM/CSF plus a set of fiber
bundles (straight cylinders or circular-arc tubes). Every voxel gets
ground-truth tissue coefficients; the signal is the forward spherical
convolution of those coefficients under a tensor-derived response set,
plus seeded Gaussian noise scaled as mean(b0)/SNR inside the brain mask.

The single-fiber FOD is an apodized delta: a zonal template with fixed
per-degree attenuation weights chosen so the truncated series stays
non-negative on the sphere, oriented along the local bundle tangent. For a
zonal template with per-degree weights w_l, the coefficients pointed along
u reduce to w_l * Y_lm(u).
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import config as cfgmod
from . import sh
from .csd import ResponseSet, build_convolution
from .gradients import GradientScheme, halfsphere_points
from .volume import CoeffVolume, DwiVolume

# per-degree attenuation of the apodized delta; sharpest table keeping the
# sphere amplitude >= 0 with a small safety margin
APOD_WEIGHTS = {
    0: (1.0,),
    2: (1.0, 0.392),
    4: (1.0, 0.5993, 0.1902),
    8: (1.0, 0.6862, 0.2988, 0.0809, 0.0136),
}

WM_MASK_THRESHOLD = 0.3
DEFAULT_SNR = 30.0

# tensor model behind the ground-truth responses (mm^2/s, b0 signal units)
WM_DIFFUSIVITY = (1.7e-3, 0.2e-3)  # parallel, perpendicular
GM_DIFFUSIVITY = 0.8e-3
CSF_DIFFUSIVITY = 3.0e-3
B0_AMPLITUDE = {"wm": 1.0, "gm": 1.0, "csf": 2.0}

PROTOCOLS = {
    "A": ((0.0, 6), (700.0, 32), (2500.0, 64)),
    "B": ((0.0, 6), (1000.0, 90), (2000.0, 90), (3000.0, 90)),
}

SCENE_NAMES = ("crossing-X", "kissing-C", "three-way")


def apodized_weights(l_max):
    if l_max not in APOD_WEIGHTS:
        raise ValueError(f"no apodized-delta table for l_max={l_max}; have {sorted(APOD_WEIGHTS)}")
    return np.asarray(APOD_WEIGHTS[l_max])


def single_fiber_fod(u, l_max):
    """Unit-integral apodized-delta FOD peaked along +/- u."""
    w = apodized_weights(l_max)
    ls, _ = sh.degree_order_table(l_max)
    values = w[ls // 2] * sh.sh_basis(np.asarray(u, dtype=np.float64)[None, :], l_max)[0]
    return sh.SHCoeffs(l_max, values)


def _fiber_coeff_rows(dirs, l_max):
    """Apodized-delta coefficients for many directions at once, (n, R)."""
    w = apodized_weights(l_max)
    ls, _ = sh.degree_order_table(l_max)
    return w[ls // 2][None, :] * sh.sh_basis(dirs, l_max)


# ---------------------------------------------------------------------------
# scene geometry


@dataclass(frozen=True)
class Bundle:
    """One fiber bundle: a straight cylinder or a circular-arc tube."""

    kind: str                 # "straight" | "arc"
    center: tuple
    radius: float             # tube radius, voxels
    wm_fraction: float
    axis: tuple = (1.0, 0.0, 0.0)      # straight only
    arc_radius: float = 0.0             # arc only, voxels
    arc_angles: tuple = (0.0, math.pi)  # arc only, radians in the xy plane

    def weights_and_dirs(self, grid):
        """Membership weight in [0, 1] and unit tangent per voxel."""
        v = grid - np.asarray(self.center)
        if self.kind == "straight":
            a = np.asarray(self.axis, dtype=np.float64)
            a = a / np.linalg.norm(a)
            proj = v @ a
            perp = v - proj[..., None] * a
            dist = np.linalg.norm(perp, axis=-1)
            w = np.clip(self.radius + 0.5 - dist, 0.0, 1.0)
            dirs = np.broadcast_to(a, grid.shape).copy()
            return w, dirs
        if self.kind == "arc":
            phi = np.arctan2(v[..., 1], v[..., 0])
            a0, a1 = self.arc_angles
            # unwrap into [a0, a0 + 2pi) before clamping to the arc span
            phi = a0 + np.mod(phi - a0, 2.0 * math.pi)
            phi = np.clip(phi, a0, a1)
            nearest = np.stack(
                [self.arc_radius * np.cos(phi), self.arc_radius * np.sin(phi),
                 np.zeros_like(phi)], axis=-1)
            dist = np.linalg.norm(v - nearest, axis=-1)
            w = np.clip(self.radius + 0.5 - dist, 0.0, 1.0)
            dirs = np.stack([-np.sin(phi), np.cos(phi), np.zeros_like(phi)], axis=-1)
            return w, dirs
        raise ValueError(f"unknown bundle kind {self.kind!r}")


@dataclass(frozen=True)
class PhantomSpec:
    """Full description of a synthetic scene."""

    name: str
    dims: tuple
    bundles: tuple
    scheme: GradientScheme
    response: ResponseSet
    snr: float = DEFAULT_SNR          # mean b0 / noise sigma; inf disables noise
    seed: int = 0
    l_max: int = 4
    brain_axes_frac: tuple = (0.46, 0.46, 0.46)
    cortex_rho: float = 0.8           # normalized radius where the GM band starts
    gm_share_cortex: float = 0.9
    gm_share_interior: float = 0.35
    protocol: str = ""

    def __post_init__(self):
        if not (self.snr > 0):
            raise ValueError("snr must be positive (math.inf disables noise)")


@dataclass
class PhantomTruth:
    """Generating coefficients plus masks and synthetic region labels."""

    coeffs: CoeffVolume
    brain_mask: np.ndarray
    wm_mask: np.ndarray
    labels: np.ndarray
    fractions: dict = field(default_factory=dict)


def _grid(dims):
    ax = [np.arange(d, dtype=np.float64) for d in dims]
    return np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)


def generate(spec):
    """Render a scene: returns (DwiVolume, PhantomTruth). Seeded, reproducible."""
    dims = tuple(spec.dims)
    grid = _grid(dims)
    center = (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0
    axes = np.asarray(spec.brain_axes_frac) * np.asarray(dims, dtype=np.float64)
    rho = np.linalg.norm((grid - center) / axes, axis=-1)
    brain = rho <= 1.0

    r = sh.n_coeffs(spec.l_max)
    wm_coeffs = np.zeros(dims + (r,))
    f_wm = np.zeros(dims)
    overlap_count = np.zeros(dims, dtype=np.int32)
    for bundle in spec.bundles:
        w, dirs = bundle.weights_and_dirs(grid)
        w = w * brain
        inside = w > 0
        if not inside.any():
            continue
        rows = _fiber_coeff_rows(dirs[inside], spec.l_max)
        contrib = bundle.wm_fraction * w[inside]
        wm_coeffs[inside] += contrib[:, None] * rows
        f_wm += bundle.wm_fraction * w
        overlap_count += (w > 0.25).astype(np.int32)

    over = f_wm > 1.0 + 1e-9
    if over.any():
        voxel = tuple(int(i) for i in np.argwhere(over)[0])
        raise ValueError(
            f"tissue fractions exceed 1 at voxel {voxel} (wm={f_wm[voxel]:.3f}); "
            "reduce bundle wm_fraction values"
        )

    remaining = np.where(brain, 1.0 - f_wm, 0.0)
    gm_share = np.where(rho > spec.cortex_rho, spec.gm_share_cortex, spec.gm_share_interior)
    f_gm = remaining * gm_share
    f_csf = remaining - f_gm

    data = np.concatenate([wm_coeffs, f_gm[..., None], f_csf[..., None]], axis=-1)
    truth_vol = CoeffVolume(
        data=data,
        l_max=spec.l_max,
        tissues=[("wm", r), ("gm", 1), ("csf", 1)],
        provenance={"scene": spec.name, "seed": spec.seed, "snr": spec.snr},
    )

    wm_mask = f_wm >= WM_MASK_THRESHOLD
    labels = _region_labels(wm_mask, overlap_count, grid, center)
    truth = PhantomTruth(
        coeffs=truth_vol,
        brain_mask=brain,
        wm_mask=wm_mask,
        labels=labels,
        fractions={"wm": f_wm, "gm": f_gm, "csf": f_csf},
    )

    conv = build_convolution(spec.scheme, spec.response, spec.l_max)
    flat = data.reshape(-1, data.shape[-1])
    raw = flat @ conv.matrix.T
    signal = np.empty_like(raw)
    signal[:, conv.row_order] = raw
    signal = signal.reshape(dims + (len(spec.scheme),))

    if math.isfinite(spec.snr):
        b0_idx = spec.scheme.b0_indices
        mean_b0 = float(signal[brain][:, b0_idx].mean()) if b0_idx.size else 1.0
        sigma = mean_b0 / spec.snr
        rng = np.random.default_rng(spec.seed)
        noise = rng.normal(0.0, sigma, size=(int(brain.sum()), len(spec.scheme)))
        signal[brain] += noise
        np.clip(signal, 0.0, None, out=signal)

    dwi = DwiVolume(
        data=signal.astype(np.float32),
        scheme=spec.scheme,
        provenance={"scene": spec.name, "seed": spec.seed, "snr": spec.snr},
    )
    return dwi, truth


def _region_labels(wm_mask, overlap_count, grid, center):
    """Partition the WM mask into 5 labels: crossing core + 4 quadrants."""
    labels = np.zeros(wm_mask.shape, dtype=np.int32)
    crossing = wm_mask & (overlap_count >= 2)
    labels[crossing] = 1
    rest = wm_mask & ~crossing
    x_hi = grid[..., 0] >= center[0]
    y_hi = grid[..., 1] >= center[1]
    labels[rest & ~x_hi & ~y_hi] = 2
    labels[rest & x_hi & ~y_hi] = 3
    labels[rest & ~x_hi & y_hi] = 4
    labels[rest & x_hi & y_hi] = 5
    return labels


# ---------------------------------------------------------------------------
# responses and protocols


def _zonal_projection(profile, l_max, n_quad=96):
    """Zonal SH coefficients of an axially symmetric profile S(cos theta)."""
    x, w = np.polynomial.legendre.leggauss(n_quad)
    values = profile(x)
    out = []
    for l in sh.even_degrees(l_max):
        leg = np.polynomial.legendre.Legendre.basis(l)(x)
        y_l0 = math.sqrt((2 * l + 1) / (4.0 * math.pi)) * leg
        out.append(2.0 * math.pi * float(np.sum(w * values * y_l0)))
    return np.asarray(out)


def make_response(shells_b, l_max=4):
    """Ground-truth tensor-model response set for the given shells."""
    shells_b = np.asarray(sorted(shells_b), dtype=np.float64)
    d_par, d_perp = WM_DIFFUSIVITY
    wm_rows, gm_rows, csf_rows = [], [], []
    for b in shells_b:
        wm_rows.append(_zonal_projection(
            lambda x: B0_AMPLITUDE["wm"] * np.exp(-b * (d_perp + (d_par - d_perp) * x * x)),
            l_max))
        gm_rows.append([B0_AMPLITUDE["gm"] * math.exp(-b * GM_DIFFUSIVITY) * math.sqrt(4 * math.pi)])
        csf_rows.append([B0_AMPLITUDE["csf"] * math.exp(-b * CSF_DIFFUSIVITY) * math.sqrt(4 * math.pi)])
    wm = np.asarray(wm_rows)
    # quadrature leaves degree > 0 residuals at b=0; zero them explicitly
    wm[shells_b <= 50.0, 1:] = 0.0
    return ResponseSet(shells_b=shells_b, wm=wm, gm=np.asarray(gm_rows),
                       csf=np.asarray(csf_rows))


def protocol_scheme(protocol):
    """Gradient scheme for a named protocol (b0 block first, shells ascending)."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; have {sorted(PROTOCOLS)}")
    bvals, bvecs = [], []
    for b, n in PROTOCOLS[protocol]:
        bvals.extend([b] * n)
        if b == 0.0:
            bvecs.extend([[0.0, 0.0, 0.0]] * n)
        else:
            bvecs.extend(halfsphere_points(n).tolist())
    return GradientScheme(np.asarray(bvals), np.asarray(bvecs))


# ---------------------------------------------------------------------------
# shipped scenes


def _scene_bundles(name, dims, rng=None):
    d = float(min(dims))
    c = tuple((np.asarray(dims, dtype=np.float64) - 1.0) / 2.0)
    jitter = (lambda s: float(rng.uniform(-s, s))) if rng is not None else (lambda s: 0.0)

    def jdir(base):
        v = np.asarray(base, dtype=np.float64)
        if rng is not None:
            v = v + rng.uniform(-0.25, 0.25, size=3)
        return tuple(v / np.linalg.norm(v))

    if name == "crossing-X":
        radius = 0.14 * d
        return (
            Bundle("straight", c, radius + jitter(0.01 * d), 0.45, axis=jdir((1, 0, 0))),
            Bundle("straight", c, radius + jitter(0.01 * d), 0.45, axis=jdir((0, 1, 0))),
        )
    if name == "kissing-C":
        radius = 0.12 * d
        arc_r = 0.30 * d
        off = 0.40 * d + jitter(0.02 * d)
        left = (c[0] - off, c[1], c[2])
        right = (c[0] + off, c[1], c[2])
        return (
            Bundle("arc", left, radius, 0.45, arc_radius=arc_r,
                   arc_angles=(-0.45 * math.pi, 0.45 * math.pi)),
            Bundle("arc", right, radius, 0.45, arc_radius=arc_r,
                   arc_angles=(0.55 * math.pi, 1.45 * math.pi)),
        )
    if name == "three-way":
        radius = 0.11 * d
        bundles = []
        base = jitter(0.2)
        for k in range(3):
            ang = base + k * math.pi / 3.0
            bundles.append(Bundle("straight", c, radius, 0.31,
                                  axis=(math.cos(ang), math.sin(ang), 0.0)))
        return tuple(bundles)
    raise ValueError(f"unknown scene {name!r}; have {SCENE_NAMES}")


def make_scene(name, protocol="B", seed=0, snr=DEFAULT_SNR, dims=(48, 48, 48),
               l_max=4, variant_rng=None):
    scheme = protocol_scheme(protocol)
    shells = sorted({0.0} | {b for b, _ in PROTOCOLS[protocol] if b > 0})
    response = make_response(shells, l_max=l_max)
    bundles = _scene_bundles(name, dims, rng=variant_rng)
    return PhantomSpec(
        name=name, dims=tuple(dims), bundles=bundles, scheme=scheme,
        response=response, snr=snr, seed=seed, l_max=l_max, protocol=protocol,
    )


def scene_variant(name, protocol, seed, snr=DEFAULT_SNR, dims=(48, 48, 48), l_max=4):
    """Geometry-jittered variant of a named scene (a synthetic 'subject')."""
    rng = np.random.default_rng(seed)
    spec = make_scene(name, protocol, seed=seed, snr=snr, dims=dims, l_max=l_max,
                      variant_rng=rng)
    return replace(spec, name=f"{name}#v{seed}")


def standard_scenes(snr=DEFAULT_SNR, dims=(48, 48, 48), l_max=4):
    """The shipped named scenes under both protocol variants."""
    scenes = []
    for protocol in ("A", "B"):
        for k, name in enumerate(SCENE_NAMES):
            scenes.append(make_scene(name, protocol, seed=k, snr=snr, dims=dims,
                                     l_max=l_max))
    return scenes


# ---------------------------------------------------------------------------
# scene spec config files


def spec_to_config(spec, path):
    sections = {
        "scene": {
            "name": spec.name,
            "dims": " ".join(str(d) for d in spec.dims),
            "protocol": spec.protocol or "B",
            "snr": "inf" if math.isinf(spec.snr) else f"{spec.snr:g}",
            "seed": spec.seed,
            "l_max": spec.l_max,
        },
    }
    for i, b in enumerate(spec.bundles):
        sec = {
            "kind": b.kind,
            "center": " ".join(f"{v:g}" for v in b.center),
            "radius": f"{b.radius:g}",
            "wm_fraction": f"{b.wm_fraction:g}",
        }
        if b.kind == "straight":
            sec["axis"] = " ".join(f"{v:g}" for v in b.axis)
        else:
            sec["arc_radius"] = f"{b.arc_radius:g}"
            sec["arc_angles"] = " ".join(f"{v:g}" for v in b.arc_angles)
        sections[f"bundle.{i}"] = sec
    cfgmod.dump_config(path, sections)


def spec_from_config(path):
    sections = cfgmod.load_config(path)
    if "scene" not in sections:
        raise ValueError(f"{path}: missing [scene] section")
    sc = sections["scene"]
    dims = tuple(cfgmod.parse_ints(sc.get("dims", "48 48 48")))
    protocol = sc.get("protocol", "B")
    snr = float(sc.get("snr", DEFAULT_SNR))
    seed = int(sc.get("seed", 0))
    l_max = int(sc.get("l_max", 4))
    bundles = []
    for key in sorted(k for k in sections if k.startswith("bundle.")):
        b = sections[key]
        kind = b["kind"]
        common = dict(
            kind=kind,
            center=tuple(cfgmod.parse_floats(b["center"])),
            radius=float(b["radius"]),
            wm_fraction=float(b["wm_fraction"]),
        )
        if kind == "straight":
            common["axis"] = tuple(cfgmod.parse_floats(b["axis"]))
        else:
            common["arc_radius"] = float(b["arc_radius"])
            common["arc_angles"] = tuple(cfgmod.parse_floats(b["arc_angles"]))
        bundles.append(Bundle(**common))
    scheme = protocol_scheme(protocol)
    shells = sorted({0.0} | {b for b, _ in PROTOCOLS[protocol] if b > 0})
    response = make_response(shells, l_max=l_max)
    return PhantomSpec(
        name=sc.get("name", "custom"), dims=dims, bundles=tuple(bundles),
        scheme=scheme, response=response, snr=snr, seed=seed, l_max=l_max,
        protocol=protocol,
    )
