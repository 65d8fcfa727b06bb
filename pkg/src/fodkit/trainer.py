"""Patch sampling, coefficient-domain rotation augmentation, the training
loop, and sliding-window full-volume inference.

An epoch visits every training subject once in random order. Per subject
iteration, one rotation is drawn (each z-y-z Euler angle uniform in the
configured range) and applied voxel-wise to both the input and target
coefficients of a fresh batch of patches; the raster itself is never
resampled. One optimizer step runs per subject batch on the loss
0.5 * mean((y - yhat)^2) over all batch voxel-coefficients.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import sh
from .net import RMSprop, build, save_checkpoint


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, snapshot_path):
        self.epoch = epoch
        self.snapshot_path = snapshot_path
        super().__init__(
            f"training loss became non-finite at epoch {epoch}; "
            f"diagnostic snapshot: {snapshot_path}"
        )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 400
    base_lr: float = 3e-2
    lr_halving_period: int = 50
    weight_decay: float = 1e-6
    patches_per_subject: int = 40
    patch_size: int = 32
    rotation_range_deg: float = 25.0
    seed: int = 0
    val_cadence: int = 10
    val_patches: int = 20
    rho: float = 0.9
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("epochs", "base_lr", "lr_halving_period", "weight_decay",
                     "patches_per_subject", "patch_size", "val_cadence", "val_patches"):
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.rotation_range_deg < 0:
            raise ValueError("rotation_range_deg must be non-negative")

    def lr_at(self, epoch):
        return self.base_lr * 0.5 ** (epoch // self.lr_halving_period)


@dataclass(frozen=True)
class TrainScene:
    """One training subject: aligned input/target coefficient rasters."""

    name: str
    input: np.ndarray   # (X, Y, Z, C)
    target: np.ndarray  # (X, Y, Z, C)
    mask: np.ndarray    # (X, Y, Z) bool sampling mask


@dataclass(frozen=True)
class PatchPair:
    input: np.ndarray   # (C, P, P, P)
    target: np.ndarray
    origin: tuple       # center voxel the patch was drawn around


def _valid_origins(mask, dims, patch_size):
    """Mask voxels that can serve as patch centers with the patch in-bounds."""
    valid = np.asarray(mask, dtype=bool).copy()
    lo = patch_size // 2
    for ax, dim in enumerate(dims):
        if dim < patch_size:
            raise ValueError(f"patch size {patch_size} exceeds volume dim {dim}")
        hi = dim - (patch_size - lo) + 1
        sl = [slice(None)] * 3
        sl[ax] = slice(0, lo)
        valid[tuple(sl)] = False
        sl[ax] = slice(hi, None)
        valid[tuple(sl)] = False
    origins = np.argwhere(valid)
    if origins.shape[0] == 0:
        raise ValueError("no valid patch origin: mask is empty after bounds erosion")
    return origins


def sample_patches(input_vol, target_vol, mask, n, patch_size, rng):
    """n patch pairs whose center voxels are uniform over the in-bounds mask."""
    input_vol = np.asarray(input_vol)
    target_vol = np.asarray(target_vol)
    if input_vol.shape[:3] != target_vol.shape[:3]:
        raise ValueError("input and target volumes are not aligned")
    origins = _valid_origins(mask, input_vol.shape[:3], patch_size)
    picks = rng.integers(0, origins.shape[0], size=n)
    lo = patch_size // 2
    pairs = []
    for k in picks:
        ox, oy, oz = (int(v) for v in origins[k])
        sl = (slice(ox - lo, ox - lo + patch_size), slice(oy - lo, oy - lo + patch_size),
              slice(oz - lo, oz - lo + patch_size))
        pairs.append(PatchPair(
            input=np.ascontiguousarray(np.moveaxis(input_vol[sl], -1, 0), dtype=np.float32),
            target=np.ascontiguousarray(np.moveaxis(target_vol[sl], -1, 0), dtype=np.float32),
            origin=(ox, oy, oz),
        ))
    return pairs


def draw_rotation(rng, range_deg):
    lim = math.radians(range_deg)
    a, b, g = rng.uniform(-lim, lim, size=3)
    return sh.RotationSpec(a, b, g)


def _rotate_patch(patch, block):
    c = patch.shape[0]
    flat = block @ patch.reshape(c, -1).astype(np.float64)
    return flat.astype(np.float32).reshape(patch.shape)


def apply_rotation(pair, rot):
    """Rotate input and target coefficients of a pair by the same rotation."""
    l_max = sh.l_max_for(pair.input.shape[0])
    block = sh.rotation_blockdiag(l_max, rot)
    return PatchPair(
        input=_rotate_patch(pair.input, block),
        target=_rotate_patch(pair.target, block),
        origin=pair.origin,
    )


def augment_rotation(pair, rng, range_deg):
    """One random rotation applied jointly to input and target."""
    if range_deg == 0:
        return pair
    return apply_rotation(pair, draw_rotation(rng, range_deg))


@dataclass
class TrainResult:
    history: list                 # (epoch, train_loss, val_loss or nan, lr)
    best_epoch: int
    best_val_loss: float
    final_path: str
    best_path: str
    net: object = field(repr=False, default=None)


def _batch_step(net, optimizer, pairs, rot, lr):
    net.zero_grads()
    optimizer.lr = lr
    total = 0.0
    n = len(pairs)
    for pair in pairs:
        if rot is not None:
            pair = apply_rotation(pair, rot)
        pred = net.forward(pair.input, train=True)
        diff = (pred - pair.target).astype(np.float64)
        total += 0.5 * float(np.mean(diff * diff)) / n
        net.backward((diff / (diff.size * n)).astype(np.float32))
    optimizer.step(net.gradients())
    return total


def _eval_loss(net, batches):
    total, count = 0.0, 0
    for pairs in batches:
        for pair in pairs:
            pred = net.forward(pair.input, train=False)
            diff = (pred - pair.target).astype(np.float64)
            total += 0.5 * float(np.mean(diff * diff))
            count += 1
    return total / max(count, 1)


def train(cfg, train_scenes, val_scenes, arch, workdir, provenance=None,
          init_from=None):
    """Run the full loop; writes best/final checkpoints and a loss CSV.

    ``init_from`` resumes parameters, normalization statistics and
    optimizer accumulators from an existing checkpoint (the architecture
    must match). Returns a TrainResult whose ``net`` is the final-state
    network.
    """
    import os

    if not train_scenes:
        raise ValueError("need at least one training scene")
    if not val_scenes:
        raise ValueError("need at least one validation scene")
    os.makedirs(workdir, exist_ok=True)

    n_coef = train_scenes[0].input.shape[-1]
    l_max = sh.l_max_for(n_coef)
    from .net import he_uniform_init, load_checkpoint

    resume_acc = None
    if init_from is not None:
        net, header = load_checkpoint(init_from)
        if net.arch != arch:
            raise ValueError(f"checkpoint architecture {net.arch!r} does not match {arch!r}")
        resume_acc = header.get("_opt_acc") or None
    else:
        net = build(arch, l_max=l_max)
        he_uniform_init(net, cfg.seed)
    optimizer = RMSprop(net.parameters(), lr=cfg.base_lr, rho=cfg.rho, eps=cfg.eps,
                        weight_decay=cfg.weight_decay)
    if resume_acc:
        for key in optimizer.acc:
            if key in resume_acc:
                optimizer.acc[key] = resume_acc[key].astype(np.float64)
    rng = np.random.default_rng([cfg.seed, 0])
    val_rng = np.random.default_rng([cfg.seed, 1])
    val_batches = [
        sample_patches(s.input, s.target, s.mask, cfg.val_patches, cfg.patch_size, val_rng)
        for s in val_scenes
    ]
    prov = dict(provenance or {})
    prov.update({"arch": arch, "seed": cfg.seed, "epochs": cfg.epochs})

    best_val, best_epoch = math.inf, -1
    best_path = os.path.join(workdir, "best.ckpt")
    final_path = os.path.join(workdir, "final.ckpt")
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(train_scenes))
        losses = []
        for si in order:
            scene = train_scenes[int(si)]
            rot = draw_rotation(rng, cfg.rotation_range_deg) \
                if cfg.rotation_range_deg > 0 else None
            pairs = sample_patches(scene.input, scene.target, scene.mask,
                                   cfg.patches_per_subject, cfg.patch_size, rng)
            losses.append(_batch_step(net, optimizer, pairs, rot, lr))
        train_loss = float(np.mean(losses))
        if not math.isfinite(train_loss):
            snap = os.path.join(workdir, "diverged.ckpt")
            save_checkpoint(snap, net, optimizer=optimizer,
                            rng_state=rng.bit_generator.state,
                            provenance={**prov, "diverged_epoch": epoch})
            raise TrainingDivergedError(epoch, snap)

        val_loss = math.nan
        if (epoch + 1) % cfg.val_cadence == 0 or epoch == cfg.epochs - 1:
            val_loss = _eval_loss(net, val_batches)
            if val_loss < best_val:
                best_val, best_epoch = val_loss, epoch
                save_checkpoint(best_path, net, optimizer=optimizer,
                                rng_state=rng.bit_generator.state,
                                provenance={**prov, "epoch": epoch, "val_loss": val_loss})
        history.append((epoch, train_loss, val_loss, lr))

    save_checkpoint(final_path, net, optimizer=optimizer,
                    rng_state=rng.bit_generator.state,
                    provenance={**prov, "epoch": cfg.epochs - 1})
    write_history(os.path.join(workdir, "loss_history.csv"), history, prov)
    return TrainResult(history=history, best_epoch=best_epoch, best_val_loss=best_val,
                       final_path=final_path, best_path=best_path, net=net)


def write_history(path, history, provenance=None):
    with open(path, "w", newline="") as fh:
        for key, value in sorted((provenance or {}).items()):
            fh.write(f"# {key}={value}\n")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for epoch, tr, va, lr in history:
            writer.writerow([epoch, f"{tr:.9e}", "" if math.isnan(va) else f"{va:.9e}",
                             f"{lr:.9e}"])


def read_history(path):
    history = []
    with open(path) as fh:
        for row in csv.reader(line for line in fh if not line.startswith("#")):
            if row[0] == "epoch":
                continue
            history.append((int(row[0]), float(row[1]),
                            float(row[2]) if row[2] else math.nan, float(row[3])))
    return history


def infer_volume(net, input_vol, mask, patch_size=32, stride=16):
    """Sliding-window inference with uniform averaging of overlaps.

    Volumes smaller than the window are reflect-padded and cropped back.
    Voxels outside the mask are zeroed. Accumulation runs in float64 so the
    stitching is exact for constant overlap counts.
    """
    input_vol = np.asarray(input_vol, dtype=np.float32)
    dims = input_vol.shape[:3]
    pad = [max(0, patch_size - d) for d in dims]
    if any(pad):
        input_vol = np.pad(
            input_vol,
            [(0, pad[0]), (0, pad[1]), (0, pad[2]), (0, 0)],
            mode="reflect",
        )
    pdims = input_vol.shape[:3]

    def starts(dim):
        s = list(range(0, dim - patch_size + 1, stride))
        if s[-1] != dim - patch_size:
            s.append(dim - patch_size)
        return s

    acc = np.zeros(pdims + (net.in_channels,), dtype=np.float64)
    count = np.zeros(pdims, dtype=np.float64)
    for ox in starts(pdims[0]):
        for oy in starts(pdims[1]):
            for oz in starts(pdims[2]):
                sl = (slice(ox, ox + patch_size), slice(oy, oy + patch_size),
                      slice(oz, oz + patch_size))
                window = np.moveaxis(input_vol[sl], -1, 0)
                pred = net.forward(window, train=False)
                acc[sl] += np.moveaxis(pred.astype(np.float64), 0, -1)
                count[sl] += 1.0
    out = acc / count[..., None]
    out = out[: dims[0], : dims[1], : dims[2]]
    out[~np.asarray(mask, dtype=bool)] = 0.0
    return out.astype(np.float32)
