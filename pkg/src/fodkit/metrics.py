"""Evaluation reports and the four phantom-scale experiment drivers.

Experiment 1 trains and tests within one acquisition protocol with k-fold
splits over scenes; Experiment 2 reuses a trained checkpoint on scenes from
a different protocol; Experiment 3 re-fits the single-shell model on
reordered, truncated gradient subsets and reuses the Experiment-1
checkpoint; Experiment 4 summarizes accuracy per synthetic region label.

The "ground truth" throughout is the generating coefficient volume of the
phantom. Angular metrics run over WM coefficients of degree >= 1; MAE runs
over all WM coefficients after every volume (truth included) has passed
through the same median normalization.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import sh
from .csd import fit_2ts_csd, fit_mcsd, normalize_volume
from .gradients import extract_single_shell, reorder_permutation, subsample_indices
from .phantom import generate
from .trainer import TrainConfig, TrainScene, infer_volume, train
from .volume import CoeffVolume, load_mask, save_mask, save_labels, load_labels

CDF_BINS = 256


@dataclass
class EvalReport:
    """Summary metrics plus the per-voxel ACC map they derive from."""

    acc_mean: float
    acc_std: float
    acc_median: float
    mae_mean: float
    mae_std: float
    n_voxels: int
    cdf: np.ndarray                    # cumulative fraction at 256 right bin edges on [-1, 1]
    region_stats: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    acc_map: np.ndarray = field(default=None, repr=False)

    def to_dict(self):
        return {
            "acc_mean": self.acc_mean,
            "acc_std": self.acc_std,
            "acc_median": self.acc_median,
            "mae_mean": self.mae_mean,
            "mae_std": self.mae_std,
            "n_voxels": self.n_voxels,
            "cdf_bins": CDF_BINS,
            "cdf": [float(v) for v in self.cdf],
            "region_stats": self.region_stats,
            "provenance": self.provenance,
        }

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)

    def save_cdf_csv(self, path):
        edges = cdf_bin_edges()
        with open(path, "w") as fh:
            fh.write("acc_bin_right_edge,cumulative_fraction\n")
            for e, v in zip(edges, self.cdf):
                fh.write(f"{e:.8f},{v:.8f}\n")


def cdf_bin_edges():
    return np.linspace(-1.0, 1.0, CDF_BINS + 1)[1:]


def _region_summary(values):
    q = np.percentile(values, [0, 25, 50, 75, 100])
    return {
        "min": float(q[0]), "q1": float(q[1]), "median": float(q[2]),
        "q3": float(q[3]), "max": float(q[4]), "n_voxels": int(values.size),
    }


def evaluate(pred_wm, truth_wm, wm_mask, regions=None, alpha=1e-8, provenance=None):
    """Per-voxel ACC map + MAE over the WM mask, with optional region stats."""
    pred_wm = np.asarray(pred_wm)
    truth_wm = np.asarray(truth_wm)
    wm_mask = np.asarray(wm_mask, dtype=bool)
    if pred_wm.shape != truth_wm.shape:
        raise ValueError(f"volume shapes differ: {pred_wm.shape} vs {truth_wm.shape}")
    if not wm_mask.any():
        raise ValueError("WM mask is empty")
    acc_vals = sh.acc_map(pred_wm[wm_mask], truth_wm[wm_mask], alpha=alpha)
    abs_diff = np.abs(pred_wm[wm_mask].astype(np.float64) - truth_wm[wm_mask])
    mae_per_voxel = abs_diff.mean(axis=-1)

    clipped = np.clip(acc_vals, -1.0, 1.0)
    hist, _ = np.histogram(clipped, bins=CDF_BINS, range=(-1.0, 1.0))
    cdf = np.cumsum(hist) / acc_vals.size

    region_stats = {}
    if regions is not None:
        regions = np.asarray(regions)
        labels = regions[wm_mask]
        for label in sorted(int(v) for v in np.unique(labels) if v != 0):
            region_stats[str(label)] = _region_summary(acc_vals[labels == label])

    acc_full = np.zeros(wm_mask.shape, dtype=np.float32)
    acc_full[wm_mask] = acc_vals.astype(np.float32)
    return EvalReport(
        acc_mean=float(acc_vals.mean()),
        acc_std=float(acc_vals.std()),
        acc_median=float(np.median(acc_vals)),
        mae_mean=float(mae_per_voxel.mean()),
        mae_std=float(mae_per_voxel.std()),
        n_voxels=int(acc_vals.size),
        cdf=cdf,
        region_stats=region_stats,
        provenance=provenance or {},
        acc_map=acc_full,
    )


def summarize_reports(reports):
    """Across-scene aggregate; the per-report std is across voxels, the
    aggregate std here is across scenes (both reported, labeled)."""
    means = [r.acc_mean for r in reports]
    maes = [r.mae_mean for r in reports]
    return {
        "n_scenes": len(reports),
        "acc_mean_of_scene_means": float(np.mean(means)),
        "acc_std_across_scenes": float(np.std(means)),
        "acc_median_of_scene_medians": float(np.median([r.acc_median for r in reports])),
        "mae_mean_of_scene_means": float(np.mean(maes)),
        "mae_std_across_scenes": float(np.std(maes)),
    }


# ---------------------------------------------------------------------------
# scene preparation (generate -> fit -> normalize), cached on disk


def prepare_scene(spec, shell_b, workdir, threads=1, force=False):
    """Generate a scene, fit the 2TS input and M-CSD target, normalize all.

    Volumes are cached under ``workdir/<scene-name>``; cached results are
    reloaded so repeated calls return bitwise-identical float32 arrays.
    Returns a dict with input/target/truth WM arrays, masks and labels.
    """
    key = f"{spec.name}_{spec.protocol}_b{int(shell_b)}_snr{spec.snr:g}_seed{spec.seed}"
    key = key.replace("#", "v").replace("/", "-")
    scene_dir = os.path.join(workdir, key)
    paths = {name: os.path.join(scene_dir, f"{name}.fodv")
             for name in ("input", "target", "truth", "brain_mask", "wm_mask", "regions")}
    if force or not all(os.path.exists(p) for p in paths.values()):
        os.makedirs(scene_dir, exist_ok=True)
        dwi, truth = generate(spec)
        single = extract_single_shell(dwi.scheme, shell_b)
        keep = [i for i in range(len(dwi.scheme))
                if dwi.scheme.bvals[i] <= 50.0
                or abs(dwi.scheme.bvals[i] - shell_b) <= dwi.scheme.shell_tolerance]
        dwi_ss = dwi.take_volumes(keep)
        assert len(dwi_ss.scheme) == len(single)

        target = fit_mcsd(dwi, spec.response, l_max=spec.l_max,
                          mask=truth.brain_mask, threads=threads)
        inp = fit_2ts_csd(dwi_ss, spec.response, l_max=spec.l_max,
                          mask=truth.brain_mask, threads=threads)
        normalize_volume(target, truth.brain_mask).save(paths["target"])
        normalize_volume(inp, truth.brain_mask).save(paths["input"])
        norm_truth = normalize_volume(truth.coeffs, truth.brain_mask)
        norm_truth.save(paths["truth"])
        save_mask(paths["brain_mask"], truth.brain_mask)
        save_mask(paths["wm_mask"], truth.wm_mask)
        save_labels(paths["regions"], truth.labels)
    return load_prepared_scene(scene_dir)


def load_prepared_scene(scene_dir):
    inp = CoeffVolume.load(os.path.join(scene_dir, "input.fodv"))
    target = CoeffVolume.load(os.path.join(scene_dir, "target.fodv"))
    truth = CoeffVolume.load(os.path.join(scene_dir, "truth.fodv"))
    return {
        "dir": scene_dir,
        "input": inp.wm,
        "target": target.wm,
        "truth": truth.wm,
        "brain_mask": load_mask(os.path.join(scene_dir, "brain_mask.fodv")),
        "wm_mask": load_mask(os.path.join(scene_dir, "wm_mask.fodv")),
        "regions": load_labels(os.path.join(scene_dir, "regions.fodv")),
    }


def _train_scenes(prepared, names):
    return [TrainScene(n, p["input"], p["target"], p["brain_mask"])
            for n, p in zip(names, prepared)]


# ---------------------------------------------------------------------------
# experiments


def _train_stages(cfgs, train_scenes, val_scenes, arch, workdir, provenance):
    """Run one or more training stages, each resuming from the last."""
    if isinstance(cfgs, TrainConfig):
        cfgs = [cfgs]
    result = None
    init = None
    for i, cfg in enumerate(cfgs):
        stage_dir = os.path.join(workdir, f"stage{i}") if len(cfgs) > 1 else workdir
        result = train(cfg, train_scenes, val_scenes, arch, stage_dir,
                       provenance={**provenance, "stage": i}, init_from=init)
        init = result.final_path
    return result


def run_experiment1(scene_specs, arch, cfg, shell_b, workdir, folds=None, threads=1):
    """Same-protocol k-fold evaluation of CNN vs the 2TS baseline.

    ``cfg`` may be one TrainConfig or a list of stage configs (each stage
    resumes the previous stage's checkpoint). Returns a list of fold dicts
    with 'cnn' and 'baseline' EvalReports plus the checkpoint path. Fold i
    tests on scene i, validates on the next scene, trains on the rest
    (leave-one-out proportions match 5-fold when 5 scenes are given).
    """
    n = len(scene_specs)
    if n < 3:
        raise ValueError("experiment 1 needs at least 3 scenes (train/val/test)")
    prepared = [prepare_scene(s, shell_b, os.path.join(workdir, "scenes"), threads)
                for s in scene_specs]
    names = [s.name for s in scene_specs]
    results = []
    fold_ids = list(range(n)) if folds is None else list(folds)
    for f in fold_ids:
        test_i = f
        val_i = (f + 1) % n
        train_is = [i for i in range(n) if i not in (test_i, val_i)]
        fold_dir = os.path.join(workdir, f"fold{f}")
        result = _train_stages(cfg, _train_scenes([prepared[i] for i in train_is],
                                                  [names[i] for i in train_is]),
                               _train_scenes([prepared[val_i]], [names[val_i]]),
                               arch, fold_dir,
                               provenance={"experiment": 1, "fold": f, "shell_b": shell_b})
        test = prepared[test_i]
        pred = infer_volume(result.net, test["input"], test["brain_mask"])
        prov = {"experiment": 1, "fold": f, "test_scene": names[test_i],
                "checkpoint": result.final_path, "shell_b": shell_b,
                "subsample_fraction": 1.0}
        cnn_rep = evaluate(pred, test["truth"], test["wm_mask"], regions=test["regions"],
                           provenance={**prov, "method": "cnn"})
        base_rep = evaluate(test["input"], test["truth"], test["wm_mask"],
                            regions=test["regions"],
                            provenance={**prov, "method": "2ts-baseline"})
        results.append({"fold": f, "cnn": cnn_rep, "baseline": base_rep,
                        "checkpoint": result.final_path, "train_result": result,
                        "test_scene": names[test_i], "prediction": pred,
                        "test_data": test})
    return results


def run_experiment2(checkpoint_path, test_specs, shell_b, workdir, threads=1):
    """Cross-protocol transfer: evaluate a trained checkpoint, untuned, on
    scenes from a different acquisition protocol."""
    from .net import load_checkpoint

    net, header = load_checkpoint(checkpoint_path)
    out = []
    for spec in test_specs:
        data = prepare_scene(spec, shell_b, os.path.join(workdir, "scenes"), threads)
        pred = infer_volume(net, data["input"], data["brain_mask"])
        prov = {"experiment": 2, "test_scene": spec.name, "shell_b": shell_b,
                "checkpoint": checkpoint_path,
                "train_provenance": header.get("provenance", {})}
        out.append({
            "scene": spec.name,
            "cnn": evaluate(pred, data["truth"], data["wm_mask"], regions=data["regions"],
                            provenance={**prov, "method": "cnn"}),
            "baseline": evaluate(data["input"], data["truth"], data["wm_mask"],
                                 regions=data["regions"],
                                 provenance={**prov, "method": "2ts-baseline"}),
        })
    return out


def run_experiment3(checkpoint_path, test_spec, shell_b, workdir,
                    fractions=(1.0, 0.75, 0.5, 0.25), threads=1):
    """Gradient-direction truncation robustness.

    For each fraction the single-shell scheme is reordered for half-sphere
    prefix uniformity, truncated, and the 2TS input re-fit; the unmodified
    checkpoint then infers from the degraded input. Fraction 1.0 reuses the
    untruncated prepared input, so its report equals the Experiment-1 one.
    """
    from .net import load_checkpoint

    net, _ = load_checkpoint(checkpoint_path)
    base = prepare_scene(test_spec, shell_b, os.path.join(workdir, "scenes"), threads)
    dwi, truth = generate(test_spec)
    keep = [i for i in range(len(dwi.scheme))
            if dwi.scheme.bvals[i] <= 50.0
            or abs(dwi.scheme.bvals[i] - shell_b) <= dwi.scheme.shell_tolerance]
    dwi_ss = dwi.take_volumes(keep)

    results = {}
    for fraction in fractions:
        prov = {"experiment": 3, "test_scene": test_spec.name, "shell_b": shell_b,
                "subsample_fraction": fraction, "checkpoint": checkpoint_path}
        if fraction == 1.0:
            input_wm = base["input"]
        else:
            dwi_r = dwi_ss.take_volumes(reorder_permutation(dwi_ss.scheme))
            dwi_sub = dwi_r.take_volumes(subsample_indices(dwi_r.scheme, fraction))
            fit = fit_2ts_csd(dwi_sub, test_spec.response, l_max=test_spec.l_max,
                              mask=truth.brain_mask, threads=threads)
            input_wm = normalize_volume(fit, truth.brain_mask).wm.astype(np.float32)
        pred = infer_volume(net, input_wm, base["brain_mask"])
        results[fraction] = {
            "cnn": evaluate(pred, base["truth"], base["wm_mask"], regions=base["regions"],
                            provenance={**prov, "method": "cnn"}),
            "baseline": evaluate(input_wm, base["truth"], base["wm_mask"],
                                 regions=base["regions"],
                                 provenance={**prov, "method": "2ts-baseline"}),
        }
    return results


def run_experiment4(checkpoint_path, test_spec, shell_b, workdir, threads=1):
    """Per-region accuracy of CNN vs baseline on one scene."""
    from .net import load_checkpoint

    net, _ = load_checkpoint(checkpoint_path)
    data = prepare_scene(test_spec, shell_b, os.path.join(workdir, "scenes"), threads)
    pred = infer_volume(net, data["input"], data["brain_mask"])
    prov = {"experiment": 4, "test_scene": test_spec.name, "shell_b": shell_b,
            "checkpoint": checkpoint_path}
    return {
        "cnn": evaluate(pred, data["truth"], data["wm_mask"], regions=data["regions"],
                        provenance={**prov, "method": "cnn"}),
        "baseline": evaluate(data["input"], data["truth"], data["wm_mask"],
                             regions=data["regions"],
                             provenance={**prov, "method": "2ts-baseline"}),
    }
