"""Acceptance suite: one test per criterion, at the stated tolerances.

The heavy fixtures (the experiment-1 analog and the overfit run) are
session-scoped and shared across criteria. Runtime bounds are stated for 8
CPU cores; they are asserted as core-time budgets, i.e. prorated by
8 / cpu_count on this machine. A PASS/FAIL line per criterion is printed
in the terminal summary (see conftest).
"""

import itertools
import math
import os
import time

import numpy as np
import pytest

from fodkit import csd, gradients, metrics, net as fnet, phantom, sh, trainer

CORES = os.cpu_count() or 1
BUDGET_SCALE = 8.0 / CORES

SHELL_B = 2000.0


def _record(record_property, name, value):
    record_property(name, value)


# ---------------------------------------------------------------------------
# shared fixtures


@pytest.fixture(scope="session")
def exp1_analog(tmp_path_factory):
    """Experiment-1 analog: train on 4 scenes (48^3, SNR 30, protocol B),
    test on 1 held-out scene; two-stage schedule within one fold."""
    workdir = str(tmp_path_factory.mktemp("exp1"))
    names = ["crossing-X", "kissing-C", "three-way", "crossing-X", "kissing-C"]
    specs = [phantom.scene_variant(n, "B", seed, snr=30.0, dims=(48, 48, 48))
             for n, seed in zip(names, (1, 2, 3, 4, 5))]
    stages = [
        trainer.TrainConfig(epochs=600, base_lr=3e-3, lr_halving_period=250,
                            weight_decay=1e-6, patches_per_subject=1, patch_size=16,
                            rotation_range_deg=25.0, seed=3, val_cadence=150,
                            val_patches=6),
        trainer.TrainConfig(epochs=60, base_lr=1e-3, lr_halving_period=40,
                            weight_decay=1e-6, patches_per_subject=1, patch_size=32,
                            rotation_range_deg=25.0, seed=3, val_cadence=20,
                            val_patches=4),
    ]
    t0 = time.time()
    folds = metrics.run_experiment1(specs, "highresnet_lite", stages, SHELL_B,
                                    workdir, folds=[0])
    elapsed = time.time() - t0
    return {"fold": folds[0], "specs": specs, "workdir": workdir, "seconds": elapsed}


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """Criterion-10 fixture: 200 epochs (170 @ patch 16 + 30 @ patch 32) on a
    single noiseless scene, rotation augmentation off."""
    workdir = str(tmp_path_factory.mktemp("overfit"))
    spec = phantom.make_scene("crossing-X", "B", seed=11, snr=math.inf,
                              dims=(48, 48, 48))
    t0 = time.time()
    data = metrics.prepare_scene(spec, SHELL_B, os.path.join(workdir, "scenes"))
    scene = trainer.TrainScene("overfit", data["input"], data["target"],
                               data["brain_mask"])
    cfg1 = trainer.TrainConfig(epochs=170, base_lr=6e-3, lr_halving_period=60,
                               weight_decay=1e-6, patches_per_subject=12,
                               patch_size=16, rotation_range_deg=0.0, seed=7,
                               val_cadence=50, val_patches=8)
    r1 = trainer.train(cfg1, [scene], [scene], "highresnet_lite",
                       os.path.join(workdir, "stage0"))
    cfg2 = trainer.TrainConfig(epochs=30, base_lr=1e-3, lr_halving_period=15,
                               weight_decay=1e-6, patches_per_subject=3,
                               patch_size=32, rotation_range_deg=0.0, seed=8,
                               val_cadence=10, val_patches=4)
    r2 = trainer.train(cfg2, [scene], [scene], "highresnet_lite",
                       os.path.join(workdir, "stage1"), init_from=r1.final_path)
    pred = trainer.infer_volume(r2.net, data["input"], data["brain_mask"])
    elapsed = time.time() - t0
    return {"data": data, "initial_loss": r1.history[0][1],
            "final_loss": r2.history[-1][1], "prediction": pred,
            "seconds": elapsed, "total_epochs": cfg1.epochs + cfg2.epochs}


# ---------------------------------------------------------------------------
# criteria


def test_criterion_01_paper_scale_disclaimer(exp1_analog, record_property):
    """Absolute Table-1/2 values need the clinical datasets; the phantom
    analog substitutes and must reproduce the direction of improvement."""
    fold = exp1_analog["fold"]
    assert fold["cnn"].provenance["test_scene"].startswith(tuple(phantom.SCENE_NAMES))
    assert fold["cnn"].acc_mean > fold["baseline"].acc_mean
    _record(record_property, "note",
            "paper-scale MAE/ACC not reproduced (no HCP/QS data); phantom analog "
            f"reproduces the ordering: CNN {fold['cnn'].acc_mean:.4f} > "
            f"baseline {fold['baseline'].acc_mean:.4f}")


def test_criterion_02_experiment1_analog(exp1_analog, record_property):
    fold = exp1_analog["fold"]
    cnn, base = fold["cnn"], fold["baseline"]
    _record(record_property, "summary",
            f"ACC cnn {cnn.acc_mean:.4f} vs 2TS {base.acc_mean:.4f} "
            f"(margin {cnn.acc_mean - base.acc_mean:+.4f}); "
            f"MAE cnn {cnn.mae_mean:.5f} vs 2TS {base.mae_mean:.5f}; "
            f"{exp1_analog['seconds'] / 60:.1f} min on {CORES} core(s)")
    assert cnn.acc_mean >= base.acc_mean + 0.02
    assert cnn.mae_mean < base.mae_mean
    assert exp1_analog["seconds"] <= 45 * 60 * BUDGET_SCALE


@pytest.fixture(scope="session")
def exp3_reports(exp1_analog, tmp_path_factory):
    fold = exp1_analog["fold"]
    test_spec = exp1_analog["specs"][0]
    workdir = exp1_analog["workdir"]
    return metrics.run_experiment3(fold["checkpoint"], test_spec, SHELL_B, workdir,
                                   fractions=(1.0, 0.75, 0.5, 0.25))


def test_criterion_03_experiment3_analog(exp3_reports, record_property):
    med = {f: (r["cnn"].acc_median, r["baseline"].acc_median)
           for f, r in exp3_reports.items()}
    _record(record_property, "medians",
            "; ".join(f"f={f:g}: cnn {c:.4f} 2ts {b:.4f}" for f, (c, b) in sorted(med.items())))
    assert med[0.25][0] > med[0.25][1]
    fractions = sorted(med)  # ascending
    for smaller, larger in zip(fractions, fractions[1:]):
        assert med[smaller][1] <= med[larger][1] + 0.005, (
            f"baseline median at {smaller} exceeds {larger} beyond slack")


def test_criterion_04_solver_vs_qp_oracle(record_property):
    rng = np.random.default_rng(7)
    worst_obj, worst_feas = 0.0, 0.0
    for _ in range(20):
        m = int(rng.integers(8, 13))
        n = int(rng.integers(2, 7))
        p = int(rng.integers(1, 7))
        c = rng.standard_normal((m, n))
        d = rng.standard_normal(m)
        a = rng.standard_normal((p, n))
        x, ok = csd.solve_constrained_ls(c, d, a)
        assert ok
        _, best = csd.qp_bruteforce(c, d, a)
        obj = float(np.sum((c @ x - d) ** 2))
        worst_obj = max(worst_obj, abs(obj - best) / max(best, 1e-12))
        worst_feas = max(worst_feas, -float(np.min(a @ x)))
    _record(record_property, "worst", f"objective rel {worst_obj:.2e}, feasibility {worst_feas:.2e}")
    assert worst_obj <= 1e-5
    assert worst_feas <= 1e-6


@pytest.fixture(scope="session")
def noiseless_roundtrip():
    spec = phantom.make_scene("crossing-X", "B", seed=21, snr=math.inf,
                              dims=(48, 48, 48))
    dwi, truth = phantom.generate(spec)
    fit = csd.fit_mcsd(dwi, spec.response, l_max=4, mask=truth.brain_mask)
    return spec, truth, fit


def test_criterion_05_roundtrip_recovery(noiseless_roundtrip, record_property):
    _, truth, fit = noiseless_roundtrip
    acc = sh.acc_map(fit.wm[truth.wm_mask], truth.coeffs.wm[truth.wm_mask])
    mae = sh.mae(fit.wm, truth.coeffs.wm, truth.wm_mask)
    peak = float(np.abs(truth.coeffs.wm).max())
    _record(record_property, "values", f"mean ACC {acc.mean():.6f}, MAE/peak {mae / peak:.2e}")
    assert float(acc.mean()) >= 0.99
    assert mae <= 1e-3 * peak


def test_criterion_06_gradient_checks(record_property):
    from test_net import _gradcheck, _randomize

    cases = {
        "conv3": lambda: _randomize(fnet.Conv3d(3, 4, 3, 1, dtype=np.float64)),
        "conv3_dilated": lambda: _randomize(fnet.Conv3d(3, 4, 3, 2, dtype=np.float64)),
        "conv1_head": lambda: _randomize(fnet.Conv3d(3, 4, 1, 1, dtype=np.float64)),
        "batchnorm": lambda: _randomize(fnet.BatchNorm(3, dtype=np.float64)),
        "prelu": lambda: _randomize(fnet.PReLU(3, dtype=np.float64)),
        "maxpool2": fnet.MaxPool2,
        "upsample2": fnet.Upsample2,
    }
    worst = {}
    for name, builder in cases.items():
        worst[name] = _gradcheck(builder(), cin=3)
    worst["residual_add"] = _gradcheck(fnet.Add(), cin=3, n_inputs=2)
    worst["concat"] = _gradcheck(fnet.Concat(), cin=3, n_inputs=2)
    _record(record_property, "worst", f"{max(worst.values()):.2e} ({max(worst, key=worst.get)})")
    assert max(worst.values()) < 1e-4, worst


def test_criterion_07_parameter_counts_and_erf(record_property):
    hr = fnet.highresnet_lite()
    un = fnet.unet_lite()
    _record(record_property, "counts",
            f"highresnet_lite {hr.n_parameters()} (target 160k), "
            f"unet_lite {un.n_parameters()} (target 3.93M); "
            f"ERF {hr.receptive_field()}/{un.receptive_field()}")
    assert abs(hr.n_parameters() - 160_000) <= 16_000
    assert abs(un.n_parameters() - 3_930_000) <= 393_000
    assert hr.receptive_field() <= 32
    assert un.receptive_field() <= 32


def test_criterion_08_rotation_correctness(record_property):
    rng = np.random.default_rng(42)
    worst_eval, worst_norm = 0.0, 0.0
    for _ in range(100):
        c = sh.SHCoeffs(4, rng.standard_normal(15))
        rot = sh.RotationSpec(*rng.uniform(-math.pi, math.pi, 3))
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        lhs = sh.evaluate(c, (rot.matrix @ d)[None, :])[0]
        rotated = sh.rotate_sh(c, rot)
        rhs = sh.evaluate(rotated, d[None, :])[0]
        worst_eval = max(worst_eval, abs(lhs - rhs))
        for l in sh.even_degrees(4):
            sl = sh.degree_slice(l)
            worst_norm = max(worst_norm, abs(
                np.linalg.norm(rotated.values[sl]) - np.linalg.norm(c.values[sl])))
    _record(record_property, "worst", f"evaluation {worst_eval:.2e}, norm {worst_norm:.2e}")
    assert worst_eval < 1e-9
    assert worst_norm < 1e-10


def test_criterion_09_determinism(tmp_path, record_property):
    # phantom volumes, bitwise, twice
    spec = phantom.make_scene("three-way", "A", seed=13, snr=25.0, dims=(20, 20, 20))
    dwi1, truth1 = phantom.generate(spec)
    dwi2, truth2 = phantom.generate(spec)
    assert dwi1.data.tobytes() == dwi2.data.tobytes()
    assert truth1.coeffs.data.tobytes() == truth2.coeffs.data.tobytes()

    # fits, bitwise, across thread counts
    fit1 = csd.fit_2ts_csd(dwi1.take_volumes(
        [i for i, b in enumerate(dwi1.scheme.bvals) if b <= 50 or abs(b - 700) <= 70]),
        spec.response, mask=truth1.brain_mask, threads=1)
    fit4 = csd.fit_2ts_csd(dwi1.take_volumes(
        [i for i, b in enumerate(dwi1.scheme.bvals) if b <= 50 or abs(b - 700) <= 70]),
        spec.response, mask=truth1.brain_mask, threads=4)
    assert fit1.data.tobytes() == fit4.data.tobytes()

    # training checkpoints + loss history, bitwise, twice
    rng = np.random.default_rng(5)
    vol = rng.standard_normal((24, 24, 24, 15)).astype(np.float32) * 0.2
    mask = np.zeros((24, 24, 24), bool)
    mask[4:20, 4:20, 4:20] = True
    scene = trainer.TrainScene("d", vol + 0.01, vol, mask)
    cfg = trainer.TrainConfig(epochs=2, base_lr=1e-3, lr_halving_period=1,
                              patches_per_subject=2, patch_size=16, seed=6,
                              val_cadence=1, val_patches=2)
    ra = trainer.train(cfg, [scene], [scene], "highresnet_lite", tmp_path / "a")
    rb = trainer.train(cfg, [scene], [scene], "highresnet_lite", tmp_path / "b")
    assert ra.history == rb.history
    assert (tmp_path / "a/final.ckpt").read_bytes() == (tmp_path / "b/final.ckpt").read_bytes()

    # evaluation reports, bitwise, twice
    rep1 = metrics.evaluate(vol, vol + 0.01, mask, provenance={"seed": 6})
    rep2 = metrics.evaluate(vol, vol + 0.01, mask, provenance={"seed": 6})
    rep1.save_json(tmp_path / "r1.json")
    rep2.save_json(tmp_path / "r2.json")
    assert (tmp_path / "r1.json").read_bytes() == (tmp_path / "r2.json").read_bytes()
    _record(record_property, "note", "phantoms, fits (threads 1 vs 4), checkpoints, reports bitwise-identical")


def test_criterion_10_overfit_smoke(overfit_run, record_property):
    data = overfit_run["data"]
    ratio = overfit_run["final_loss"] / overfit_run["initial_loss"]
    acc = sh.acc_map(overfit_run["prediction"][data["wm_mask"]],
                     data["target"][data["wm_mask"]])
    _record(record_property, "summary",
            f"loss {overfit_run['initial_loss']:.4f} -> {overfit_run['final_loss']:.6f} "
            f"(ratio {ratio:.5f}); infer ACC vs target {acc.mean():.4f}; "
            f"{overfit_run['total_epochs']} epochs in "
            f"{overfit_run['seconds'] / 60:.1f} min on {CORES} core(s)")
    assert overfit_run["total_epochs"] == 200
    assert ratio < 0.05
    assert float(acc.mean()) >= 0.95
    assert overfit_run["seconds"] <= 15 * 60 * BUDGET_SCALE
