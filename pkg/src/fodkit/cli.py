"""Command-line interface.

Every subcommand is deterministic given its flags and seeds, embeds full
provenance (command line, seeds, input hashes) in the files it writes, and
exits 0 on success or 1 with a machine-readable JSON error on stderr.
Report-producing commands render their figures next to the delimited
output.
"""

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import __version__, config as cfgmod
from . import csd, gradients, metrics, phantom, trainer
from .volume import CoeffVolume, load_dwi, load_labels, load_mask, save_labels, save_mask

ARCH_NAMES = {"highresnet": "highresnet_lite", "unet": "unet_lite"}


def _hash_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _provenance(args, inputs=()):
    return {
        "tool": f"fodkit {__version__}",
        "command": " ".join(sys.argv[1:]) if sys.argv[1:] else "",
        "seed": getattr(args, "seed", None),
        "input_hashes": {os.path.basename(p): _hash_file(p) for p in inputs if p},
    }


def _threads(args):
    if args.threads is not None:
        return args.threads
    return int(os.environ.get("FODKIT_THREADS", "1"))


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args):
    if args.scene in phantom.SCENE_NAMES:
        dims = tuple(cfgmod.parse_ints(args.dims))
        spec = phantom.make_scene(args.scene, args.protocol, seed=args.seed,
                                  snr=math.inf if args.snr == "inf" else float(args.snr),
                                  dims=dims, l_max=args.lmax)
    else:
        spec = phantom.spec_from_config(args.scene)
    os.makedirs(args.out, exist_ok=True)
    dwi, truth = phantom.generate(spec)
    prov = _provenance(args)
    prov["scene"] = spec.name
    dwi.provenance.update(prov)
    dwi.save(os.path.join(args.out, "dwi.fodv"))
    gradients.write_gradient_table(spec.scheme,
                                   os.path.join(args.out, "bvecs.txt"),
                                   os.path.join(args.out, "bvals.txt"))
    csd.write_response(os.path.join(args.out, "response.txt"), spec.response)
    truth.coeffs.provenance.update(prov)
    truth.coeffs.save(os.path.join(args.out, "truth.fodv"))
    save_mask(os.path.join(args.out, "brain_mask.fodv"), truth.brain_mask, provenance=prov)
    save_mask(os.path.join(args.out, "wm_mask.fodv"), truth.wm_mask, provenance=prov)
    save_labels(os.path.join(args.out, "regions.fodv"), truth.labels, provenance=prov)
    phantom.spec_to_config(spec, os.path.join(args.out, "scene.cfg"))
    print(f"wrote {len(spec.scheme)}-volume DWI and ground truth to {args.out}")
    return 0


def cmd_fit(args):
    scheme = gradients.read_gradient_table(args.grad_bvecs, args.grad_bvals,
                                           shell_tolerance=args.shell_tolerance)
    dwi = load_dwi(args.dwi, scheme)
    resp = csd.read_response(args.response)
    mask = load_mask(args.mask) if args.mask else None
    threads = _threads(args)
    if args.model == "mcsd":
        vol = csd.fit_mcsd(dwi, resp, l_max=args.lmax, mask=mask, threads=threads)
    else:
        vol = csd.fit_2ts_csd(dwi, resp, l_max=args.lmax, mask=mask, threads=threads)
    if not args.no_normalize:
        norm_mask = mask if mask is not None else csd._default_mask(dwi)
        vol = csd.normalize_volume(vol, norm_mask)
    vol.provenance.update(_provenance(
        args, [args.dwi, args.grad_bvecs, args.grad_bvals, args.response]))
    vol.save(args.out)
    print(f"fit {args.model} (l_max={args.lmax}, {vol.n_coeffs} coefficients/voxel, "
          f"{vol.provenance['qc_failed_voxels']} failed voxels) -> {args.out}")
    return 0


def _table_command(args, transform):
    scheme = gradients.read_gradient_table(args.grad_bvecs, args.grad_bvals,
                                           shell_tolerance=args.shell_tolerance)
    indices = transform(scheme)
    out = scheme.take(indices)
    gradients.write_gradient_table(out, args.out_bvecs, args.out_bvals)
    if args.dwi:
        if not args.out_dwi:
            raise ValueError("--dwi given without --out-dwi")
        dwi = load_dwi(args.dwi, scheme)
        sub = dwi.take_volumes(indices)
        sub.provenance.update(_provenance(args, [args.dwi, args.grad_bvecs, args.grad_bvals]))
        sub.save(args.out_dwi)
    print(f"kept {len(out)} of {len(scheme)} volumes")
    return 0


def cmd_extract_shell(args):
    def transform(scheme):
        sub = gradients.extract_single_shell(scheme, args.b)
        return [i for i in range(len(scheme))
                if scheme.bvals[i] <= 50.0
                or abs(scheme.bvals[i] - args.b) <= scheme.shell_tolerance]
    return _table_command(args, transform)


def cmd_reorder(args):
    return _table_command(args, gradients.reorder_permutation)


def cmd_subsample(args):
    return _table_command(args, lambda s: gradients.subsample_indices(s, args.fraction))


def _train_config_from_section(sec):
    kwargs = {}
    for f in ("epochs", "lr_halving_period", "patches_per_subject", "patch_size",
              "seed", "val_cadence", "val_patches"):
        if f in sec:
            kwargs[f] = int(sec[f])
    for f in ("base_lr", "weight_decay", "rotation_range_deg", "rho", "eps"):
        if f in sec:
            kwargs[f] = float(sec[f])
    return trainer.TrainConfig(**kwargs)


def _train_config_from_file(path):
    sections = cfgmod.load_config(path) if path else {}
    return _train_config_from_section(sections.get("train", {}))


def _train_stages_from_file(path):
    """[train] plus optional [train.finetune] give a list of stage configs."""
    sections = cfgmod.load_config(path) if path else {}
    stages = [_train_config_from_section(sections.get("train", {}))]
    if "train.finetune" in sections:
        stages.append(_train_config_from_section(sections["train.finetune"]))
    return stages


def _load_scene_dir(path):
    inp = CoeffVolume.load(os.path.join(path, "input.fodv"))
    tgt = CoeffVolume.load(os.path.join(path, "target.fodv"))
    mask = load_mask(os.path.join(path, "brain_mask.fodv"))
    return trainer.TrainScene(os.path.basename(path.rstrip("/")), inp.wm, tgt.wm, mask)


def cmd_train(args):
    stages = _train_stages_from_file(args.config)
    train_scenes = [_load_scene_dir(d) for d in args.train_scenes]
    val_scenes = [_load_scene_dir(d) for d in args.val_scenes]
    prov = _provenance(args, [args.config] if args.config else [])
    result, init = None, None
    for i, cfg in enumerate(stages):
        workdir = args.out + (".work" if len(stages) == 1 else f".work/stage{i}")
        result = trainer.train(cfg, train_scenes, val_scenes, ARCH_NAMES[args.arch],
                               workdir, provenance={**prov, "stage": i}, init_from=init)
        init = result.final_path
    import shutil

    shutil.copyfile(result.final_path, args.out)
    shutil.copyfile(result.best_path, args.out + ".best")
    shutil.copyfile(os.path.join(os.path.dirname(result.final_path), "loss_history.csv"),
                    args.out + ".history.csv")
    from . import plots

    plots.loss_history_figure(result.history, args.out + ".loss.png")
    total = sum(c.epochs for c in stages)
    print(f"trained {args.arch} for {total} epochs in {len(stages)} stage(s); "
          f"best val loss {result.best_val_loss:.6g} at epoch {result.best_epoch}; "
          f"final -> {args.out}")
    return 0


def cmd_infer(args):
    from .net import load_checkpoint

    net, header = load_checkpoint(args.checkpoint)
    vol = CoeffVolume.load(args.input)
    mask = load_mask(args.mask)
    pred = trainer.infer_volume(net, vol.wm, mask, patch_size=args.window,
                                stride=args.stride)
    out = CoeffVolume(
        data=pred, l_max=vol.l_max, tissues=[("wm", pred.shape[-1])],
        voxel_size=vol.voxel_size, norm_scale=vol.norm_scale,
        provenance={**_provenance(args, [args.checkpoint, args.input, args.mask]),
                    "checkpoint_provenance": header.get("provenance", {})},
    )
    out.save(args.out)
    print(f"inferred {pred.shape} -> {args.out}")
    return 0


def cmd_evaluate(args):
    pred = CoeffVolume.load(args.pred)
    truth = CoeffVolume.load(args.truth)
    wm_mask = load_mask(args.wm_mask)
    regions = load_labels(args.regions) if args.regions else None
    report = metrics.evaluate(
        pred.wm, truth.wm, wm_mask, regions=regions,
        provenance=_provenance(args, [args.pred, args.truth, args.wm_mask,
                                      args.regions or ""]))
    report.save_json(args.report)
    base = os.path.splitext(args.report)[0]
    report.save_cdf_csv(base + "_cdf.csv")
    if args.acc_csv:
        idx = np.argwhere(wm_mask)
        with open(args.acc_csv, "w") as fh:
            fh.write("x,y,z,acc\n")
            for x, y, z in idx:
                fh.write(f"{x},{y},{z},{report.acc_map[x, y, z]:.8f}\n")
    if not args.no_figures:
        from . import plots

        plots.acc_cdf_figure({"prediction": report}, base + "_cdf.png")
        plots.acc_hist_figure(report, base + "_hist.png")
    print(f"ACC mean {report.acc_mean:.4f} median {report.acc_median:.4f} "
          f"MAE {report.mae_mean:.5f} over {report.n_voxels} WM voxels -> {args.report}")
    return 0


def _experiment_specs(sec):
    names = sec.get("scenes", "crossing-X kissing-C three-way crossing-X kissing-C").split()
    seeds = cfgmod.parse_ints(sec.get("seeds", " ".join(str(i + 1) for i in range(len(names)))))
    if len(seeds) != len(names):
        raise ValueError("scenes and seeds lists differ in length")
    protocol = sec.get("protocol", "B")
    snr = float(sec.get("snr", phantom.DEFAULT_SNR))
    dims = tuple(cfgmod.parse_ints(sec.get("dims", "48 48 48")))
    l_max = int(sec.get("l_max", 4))
    return [phantom.scene_variant(n, protocol, s, snr=snr, dims=dims, l_max=l_max)
            for n, s in zip(names, seeds)]


def _write_pair_reports(outdir, tag, cnn, baseline):
    from . import plots

    cnn.save_json(os.path.join(outdir, f"{tag}_cnn.json"))
    baseline.save_json(os.path.join(outdir, f"{tag}_baseline.json"))
    cnn.save_cdf_csv(os.path.join(outdir, f"{tag}_cnn_cdf.csv"))
    baseline.save_cdf_csv(os.path.join(outdir, f"{tag}_baseline_cdf.csv"))
    plots.acc_cdf_figure({"CNN": cnn, "2TS baseline": baseline},
                         os.path.join(outdir, f"{tag}_cdf.png"))


def cmd_experiment(args):
    from . import plots

    sections = cfgmod.load_config(args.config)
    sec = sections.get("experiment", {})
    specs = _experiment_specs(sec)
    shell_b = float(sec.get("shell", 2000.0))
    arch = ARCH_NAMES[sec.get("arch", "highresnet")]
    cfg = _train_stages_from_file(args.config)
    threads = _threads(args)
    os.makedirs(args.out, exist_ok=True)
    workdir = sec.get("workdir", os.path.join(args.out, "work"))

    if args.number == 1:
        folds = cfgmod.parse_ints(sec["folds"]) if "folds" in sec else None
        results = metrics.run_experiment1(specs, arch, cfg, shell_b, workdir,
                                          folds=folds, threads=threads)
        for r in results:
            tag = f"fold{r['fold']}"
            _write_pair_reports(args.out, tag, r["cnn"], r["baseline"])
            plots.loss_history_figure(r["train_result"].history,
                                      os.path.join(args.out, f"{tag}_loss.png"))
        summary = {
            "cnn": metrics.summarize_reports([r["cnn"] for r in results]),
            "baseline": metrics.summarize_reports([r["baseline"] for r in results]),
            "checkpoints": [r["checkpoint"] for r in results],
        }
    else:
        checkpoint = sec.get("checkpoint")
        if not checkpoint:
            fold0 = metrics.run_experiment1(specs, arch, cfg, shell_b, workdir,
                                            folds=[0], threads=threads)
            checkpoint = fold0[0]["checkpoint"]
        if args.number == 2:
            other = dict(sec)
            other["protocol"] = sec.get("test_protocol", "A")
            other_specs = _experiment_specs(other)
            results = metrics.run_experiment2(checkpoint, other_specs, shell_b=float(
                sec.get("test_shell", 2500.0)), workdir=workdir, threads=threads)
            for r in results:
                _write_pair_reports(args.out, f"scene_{r['scene'].replace('#', 'v')}",
                                    r["cnn"], r["baseline"])
            summary = {
                "cnn": metrics.summarize_reports([r["cnn"] for r in results]),
                "baseline": metrics.summarize_reports([r["baseline"] for r in results]),
                "checkpoint": checkpoint,
            }
        elif args.number == 3:
            fractions = [float(v) for v in cfgmod.parse_floats(
                sec.get("fractions", "1.0 0.75 0.5 0.25"))]
            per = metrics.run_experiment3(checkpoint, specs[-1], shell_b, workdir,
                                          fractions=fractions, threads=threads)
            for frac, pair in per.items():
                _write_pair_reports(args.out, f"fraction{frac:g}".replace(".", "p"),
                                    pair["cnn"], pair["baseline"])
            plots.subsample_trend_figure(
                {f: {"CNN": p["cnn"], "2TS baseline": p["baseline"]} for f, p in per.items()},
                os.path.join(args.out, "subsample_trend.png"))
            summary = {
                f"{f:g}": {"cnn_median": p["cnn"].acc_median,
                           "baseline_median": p["baseline"].acc_median}
                for f, p in per.items()
            }
            summary["checkpoint"] = checkpoint
        else:
            pair = metrics.run_experiment4(checkpoint, specs[-1], shell_b, workdir,
                                           threads=threads)
            _write_pair_reports(args.out, "regions", pair["cnn"], pair["baseline"])
            plots.region_summary_figure({"CNN": pair["cnn"], "2TS baseline": pair["baseline"]},
                                        os.path.join(args.out, "region_summary.png"))
            summary = {"cnn": pair["cnn"].region_stats,
                       "baseline": pair["baseline"].region_stats,
                       "checkpoint": checkpoint}
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
    print(f"experiment {args.number} reports in {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="fodkit",
                                description="CSD fitting, phantoms, and CNN "
                                            "coefficient regression")
    p.add_argument("--version", action="version", version=f"fodkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a synthetic phantom scene")
    s.add_argument("--scene", required=True,
                   help=f"scene name ({', '.join(phantom.SCENE_NAMES)}) or config file")
    s.add_argument("--protocol", choices=("A", "B"), default="B",
                   help="acquisition protocol for named scenes")
    s.add_argument("--seed", type=int, default=0, help="noise / geometry RNG seed")
    s.add_argument("--snr", default="30", help="b0 SNR; 'inf' disables noise")
    s.add_argument("--dims", default="48 48 48", help="grid size in voxels")
    s.add_argument("--lmax", type=int, choices=(4, 8), default=4,
                   help="spherical-harmonic order of the ground truth")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="fit a constrained spherical deconvolution model")
    s.add_argument("--model", choices=("mcsd", "2ts"), required=True,
                   help="multi-shell 3-tissue or single-shell 2-tissue fit")
    s.add_argument("--dwi", required=True, help="input DWI volume file")
    s.add_argument("--grad-bvecs", required=True, help="3xN direction table")
    s.add_argument("--grad-bvals", required=True, help="1xN b-value table")
    s.add_argument("--response", required=True, help="per-tissue response file")
    s.add_argument("--lmax", type=int, choices=(4, 8), default=4, help="SH order")
    s.add_argument("--mask", help="fit mask volume (default: mean b0 > 0)")
    s.add_argument("--no-normalize", action="store_true",
                   help="skip the global median intensity normalization")
    s.add_argument("--shell-tolerance", type=float, default=gradients.DEFAULT_SHELL_TOLERANCE,
                   help="b-value clustering tolerance, s/mm^2")
    s.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: FODKIT_THREADS or 1)")
    s.add_argument("--out", required=True, help="output coefficient volume")
    s.set_defaults(func=cmd_fit)

    for name, extra, fn, hlp in (
        ("extract-shell", [("--b", dict(type=float, required=True,
                                        help="shell b-value to keep, s/mm^2"))],
         cmd_extract_shell, "keep b=0 entries plus one diffusion shell"),
        ("reorder", [], cmd_reorder,
         "reorder diffusion directions for half-sphere prefix uniformity"),
        ("subsample", [("--fraction", dict(type=float, required=True,
                                           help="fraction of volumes to keep"))],
         cmd_subsample, "truncate a reordered gradient table"),
    ):
        s = sub.add_parser(name, help=hlp)
        for flag, kw in extra:
            s.add_argument(flag, **kw)
        s.add_argument("--grad-bvecs", required=True, help="3xN direction table")
        s.add_argument("--grad-bvals", required=True, help="1xN b-value table")
        s.add_argument("--out-bvecs", required=True, help="output direction table")
        s.add_argument("--out-bvals", required=True, help="output b-value table")
        s.add_argument("--dwi", help="optional DWI to subset consistently")
        s.add_argument("--out-dwi", help="output DWI (required with --dwi)")
        s.add_argument("--shell-tolerance", type=float,
                       default=gradients.DEFAULT_SHELL_TOLERANCE,
                       help="b-value clustering tolerance, s/mm^2")
        s.set_defaults(func=fn)

    s = sub.add_parser("train", help="train a coefficient-regression CNN")
    s.add_argument("--arch", choices=tuple(ARCH_NAMES), required=True,
                   help="network architecture")
    s.add_argument("--config", help="training config file ([train] section)")
    s.add_argument("--train-scenes", nargs="+", required=True,
                   help="scene directories with input/target/brain_mask volumes")
    s.add_argument("--val-scenes", nargs="+", required=True,
                   help="validation scene directories")
    s.add_argument("--out", required=True, help="output checkpoint path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="full-volume sliding-window inference")
    s.add_argument("--checkpoint", required=True, help="trained checkpoint")
    s.add_argument("--input", required=True, help="input coefficient volume")
    s.add_argument("--mask", required=True, help="mask volume; outside voxels are zeroed")
    s.add_argument("--window", type=int, default=32, help="sliding window size")
    s.add_argument("--stride", type=int, default=16, help="sliding window stride")
    s.add_argument("--out", required=True, help="output coefficient volume")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", help="ACC/MAE report between two coefficient volumes")
    s.add_argument("--pred", required=True, help="predicted coefficient volume")
    s.add_argument("--truth", required=True, help="reference coefficient volume")
    s.add_argument("--wm-mask", required=True, help="white-matter mask volume")
    s.add_argument("--regions", help="region label volume for per-region stats")
    s.add_argument("--report", required=True, help="output JSON report")
    s.add_argument("--acc-csv", help="optional per-voxel ACC CSV export")
    s.add_argument("--no-figures", action="store_true",
                   help="skip rendering the CDF/histogram figures")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("experiment", help="run one of the four evaluation protocols")
    s.add_argument("number", type=int, choices=(1, 2, 3, 4),
                   help="experiment number")
    s.add_argument("--config", required=True, help="experiment config file")
    s.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: FODKIT_THREADS or 1)")
    s.add_argument("--out", required=True, help="output report directory")
    s.set_defaults(func=cmd_experiment)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single reporting point for the CLI
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
