"""Command-line entry points: ``tpnet <command> --config cfg.yaml [--out DIR] [--seed N] [--force]``.

Exit codes: 0 success, 2 invalid configuration or usage, 3 runtime / numeric
failure, 4 I/O failure.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import tempo_analysis as ta
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .errors import ConfigError, TPNError
from .model import build_model
from .tpn import FlowKind, PyramidConfig
from .trainer import evaluate, gradcheck_report, train
from .videodata import SampleScheme, generate_synthetic, load_dataset, save_dataset

log = logging.getLogger("tpnet")

AXES = ("sources", "components", "flows", "frames")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4


class Refused(TPNError, OSError):
    """Refusing to overwrite existing outputs without --force."""


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _guard(paths, force):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise Refused(f"{existing[0]} already exists (use --force to overwrite)")


def _lock(cfg: ExperimentConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.lock").write_text(cfg.dump())


def _datasets(cfg: ExperimentConfig):
    if cfg.data.root is not None:
        root = Path(cfg.data.root)
        tr, va = load_dataset(root, "train"), load_dataset(root, "val")
        if tr.num_classes != cfg.data.num_classes:
            raise ConfigError("data.num_classes", f"config says {cfg.data.num_classes}, "
                              f"dataset at {root} has {tr.num_classes}")
        return tr, va
    spec = cfg.data.synthetic
    return generate_synthetic(spec, "train"), generate_synthetic(spec, "val")


def _evaluate(model, dataset, cfg: ExperimentConfig, scheme=None):
    e = cfg.eval
    return evaluate(model, dataset, scheme or cfg.data.sampling, e.crop_protocol,
                    e.clips_per_video, e.crop_size, e.resize, e.batch_size)


def _fit(cfg: ExperimentConfig, tr, va, tpn_cfg=None, backbone=None, sampling=None):
    backbone = backbone or cfg.backbone
    sampling = sampling or cfg.data.sampling
    model = build_model(backbone, tr.num_classes, tpn_cfg, seed=cfg.train.seed,
                        dropout=cfg.train.dropout)
    train(model, tr, cfg.train, sampling)
    return model, _evaluate(model, va, cfg, sampling)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: ExperimentConfig, args):
    if not cfg.data.seed_given and args.seed is None:
        raise ConfigError("data.seed", "required by gen-data (set it in the config or pass --seed)")
    out = Path(args.out or cfg.data.root or Path(cfg.out_dir) / "data")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise Refused(f"{out} is not empty (use --force to overwrite)")
    spec = cfg.data.synthetic
    for split in ("train", "val"):
        save_dataset(generate_synthetic(spec, split), out, spec)
    _lock(cfg, out)
    print(f"wrote {spec.num_classes} classes x ({spec.videos_per_class} train + "
          f"{spec.val_videos_per_class} val) videos to {out}")


def cmd_train(cfg: ExperimentConfig, args):
    out = Path(cfg.out_dir)
    ckpt = out / "checkpoint"
    start, opt_state, history = 0, None, []
    if args.resume:
        model, payload = load_checkpoint(args.resume)
        expected = {"backbone": cfg.backbone.to_dict(), "num_classes": cfg.data.num_classes,
                    "tpn": None if cfg.tpn is None else cfg.tpn.to_dict(),
                    "dropout": cfg.train.dropout}
        if model.config_dict() != expected:
            raise ConfigError("train", f"checkpoint {args.resume} was trained with a different model config")
        start, opt_state, history = payload["epoch"], payload["optimizer"], payload["history"]
    else:
        _guard([ckpt], args.force)
        model = build_model(cfg.backbone, cfg.data.num_classes, cfg.tpn, seed=cfg.train.seed,
                            dropout=cfg.train.dropout)
    tr, va = _datasets(cfg)
    _lock(cfg, out)

    def on_epoch(record, optimizer):
        history.append(record)
        save_checkpoint(ckpt, model, optimizer, record["epoch"] + 1, history)

    optimizer, _ = train(model, tr, cfg.train, cfg.data.sampling, start_epoch=start,
                         optimizer_state=opt_state, on_epoch=on_epoch)
    save_checkpoint(ckpt, model, optimizer, max(cfg.train.epochs, start), history)
    with open(out / "history.jsonl", "w") as fh:
        fh.writelines(json.dumps(r, sort_keys=True) + "\n" for r in history)
    report = _evaluate(model, va, cfg)
    report.save(out / "eval.json")
    kind = "baseline" if cfg.tpn is None else f"TPN ({cfg.tpn.flow.value})"
    print(f"trained {kind} for epochs {start}..{cfg.train.epochs - 1}: "
          f"val top1 {report.top1:.4f} top5 {report.top5:.4f}")


def cmd_eval(cfg: ExperimentConfig, args):
    model, _ = load_checkpoint(args.checkpoint)
    _, va = _datasets(cfg)
    out = Path(cfg.out_dir)
    report = _evaluate(model, va, cfg)
    _lock(cfg, out)
    report.save(out / "eval.json")
    print(f"top1 {report.top1:.4f} top5 {report.top5:.4f} ({report.num_samples} videos, "
          f"{cfg.eval.crop_protocol})")


def ablation_rows(axis, cfg: ExperimentConfig):
    """``[(label, backbone, tpn_cfg, sampling)]`` for one ablation axis."""
    bb, samp = cfg.backbone, cfg.data.sampling
    base_tpn = cfg.tpn or PyramidConfig()
    if axis == "sources":
        rows = [("None", None)]
        for stages in ((2, 3, 4, 5), (3, 4, 5), (4, 5), (5,)):
            label = "res{" + ",".join(map(str, stages)) + "}"
            tpn = base_tpn.replace(source_mode="multi_depth", stages=stages, alphas=None,
                                   lambdas=None, rates=())
            rows.append((label, tpn))
        return [(label, bb, tpn, samp) for label, tpn in rows]
    if axis == "components":
        # (aux head, spatial convs, temporal modulation, flow)
        grid = [(False, False, False, False), (True, False, False, False),
                (True, True, False, False), (True, True, True, False), (True, True, True, True),
                (False, True, True, True), (False, False, True, True)]
        rows = []
        for head, spatial, temporal, flow in grid:
            if not any((head, spatial, temporal, flow)):
                rows.append(("baseline", bb, None, samp))
                continue
            label = "+".join(n for n, on in zip(("Head", "Spatial", "Temporal", "Flow"),
                                                (head, spatial, temporal, flow)) if on)
            # rows without a flow keep the levels isolated
            with_flow = base_tpn.flow if base_tpn.flow != FlowKind.ISOLATION else FlowKind.PARALLEL
            tpn = base_tpn.replace(aux_head=head, spatial_convs=spatial, temporal_modulation=temporal,
                                   flow=with_flow if flow else FlowKind.ISOLATION)
            rows.append((label, bb, tpn, samp))
        return rows
    if axis == "flows":
        return [(f.title, bb, base_tpn.replace(flow=f), samp) for f in FlowKind]
    if axis == "frames":
        rows = []
        for t in (8, 16, 32):
            if samp.mode == "windowed":
                s = SampleScheme("windowed", T=t, tau=max(samp.window // t, 1), window=samp.window)
                label = f"{t}x{s.tau}"
            else:
                s = SampleScheme("segments", num_segments=t)
                label = f"{t} segments"
            b = type(bb)(**{**bb.to_dict(), "input_frames": t})
            rows.append((label + " w/o TPN", b, None, s))
            rows.append((label + " w/ TPN", b, base_tpn, s))
        return rows
    raise ConfigError("axis", f"unknown ablation axis {axis!r}; expected one of {AXES}")


def cmd_ablate(cfg: ExperimentConfig, args):
    rows = ablation_rows(args.axis, cfg)
    for _, b, tpn, s in rows:     # fail fast before any training
        ExperimentConfig(b, tpn, type(cfg.data)(cfg.data.synthetic, s, cfg.data.root),
                         cfg.train, cfg.eval, cfg.analysis, cfg.out_dir).validate()
    out = Path(cfg.out_dir)
    table = out / f"ablation_{args.axis}.csv"
    _guard([table], args.force)
    tr, va = _datasets(cfg)
    _lock(cfg, out)
    results = []
    for label, b, tpn, s in rows:
        _, report = _fit(cfg, tr, va, tpn, b, s)
        results.append((label, report.top1, report.top5))
        print(f"{label:<28} top1 {report.top1:.4f}  top5 {report.top5:.4f}", flush=True)
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "top1", "top5"])
        w.writerows((label, repr(t1), repr(t5)) for label, t1, t5 in results)


def cmd_analyze(cfg: ExperimentConfig, args):
    base, _ = load_checkpoint(args.base)
    tpn, _ = load_checkpoint(args.tpn)
    if base.tpn is not None:
        raise ConfigError("analyze.base", "frame probabilities need a baseline (TPN-free) model")
    if base.num_classes != tpn.num_classes:
        raise ConfigError("analyze.tpn", "base and TPN checkpoints disagree on the class count")
    out = Path(cfg.out_dir)
    names = ["tempo_records.csv", "class_variance.csv", "gain_vs_variance.csv", "fit.json",
             "robustness.csv"]
    _guard([out / n for n in names], args.force)
    _, va = _datasets(cfg)
    _lock(cfg, out)

    records = ta.tempo_records(base, va)
    ta.write_tempo_records(out / "tempo_records.csv", records)
    stats = ta.class_tempo_variance(records)
    ta.write_class_variance(out / "class_variance.csv", stats)

    base_rep = _evaluate(base, va, cfg)
    tpn_rep = _evaluate(tpn, va, cfg)
    base_rep.save(out / "base_eval.json")
    tpn_rep.save(out / "tpn_eval.json")
    failure = None
    try:
        fit = ta.gain_vs_variance(stats, base_rep, tpn_rep, cfg.analysis.bin_width,
                                  cfg.analysis.per_class_fit)
    except ta.CorrelationUndefined as exc:
        # keep going so the sweep still gets written, then report the failure
        failure = str(exc)
        fit = ta.GainFit(exc.bins, float("nan"), float("nan"), float("nan"))
    ta.write_gain_fit(out / "gain_vs_variance.csv", out / "fit.json", fit, failure)

    strides = set(cfg.analysis.strides)
    if cfg.data.sampling.mode == "windowed":
        strides.add(cfg.data.sampling.tau)
    sweeps = {}
    for label, model in (("base", base), ("tpn", tpn)):
        sweeps[label] = ta.robustness_sweep(model, va, sorted(strides), model.spec.input_frames,
                                            crop_size=cfg.eval.crop_size)
    ta.write_robustness(out / "robustness.csv", sweeps)
    if failure is not None:
        raise ta.CorrelationUndefined(failure)
    r = "undefined" if np.isnan(fit.pearson_r) else f"{fit.pearson_r:.3f}"
    print(f"{len(fit.bins)} variance bins, slope {fit.slope:.5f}, pearson r {r}; "
          f"spread base {ta.spread(sweeps['base']):.3f} tpn {ta.spread(sweeps['tpn']):.3f}")


def cmd_gradcheck(cfg: ExperimentConfig, args):
    model = build_model(cfg.backbone, cfg.data.num_classes, cfg.tpn, seed=cfg.train.seed,
                        dropout=cfg.train.dropout)
    model.train()
    gen = torch.Generator().manual_seed(cfg.train.seed)
    bb = cfg.backbone
    x = torch.randn(args.batch, bb.input_frames, bb.in_channels, bb.input_size, bb.input_size,
                    generator=gen)
    y = torch.randint(0, cfg.data.num_classes, (args.batch,), generator=gen)
    report = gradcheck_report(model, (x, y), step=args.step, max_coords=args.max_coords,
                              seed=cfg.train.seed, skip_kinks=not args.keep_kinks)
    errors, worst = report.errors, report.max_error
    out = Path(cfg.out_dir)
    _lock(cfg, out)
    _write_json(out / "gradcheck.json", {"max_rel_error": worst, "tolerance": args.tol,
                                         "step": args.step, "checked": report.checked,
                                         "kinks_skipped": report.skipped,
                                         "per_parameter": errors})
    ok = worst < args.tol
    print(f"max relative error {worst:.3e} over {len(errors)} tensors "
          f"({report.skipped} kink crossings skipped): {'PASS' if ok else 'FAIL'}")
    if not ok:
        raise ArithmeticError(f"gradient check failed: {worst:.3e} >= {args.tol:g}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "analyze": cmd_analyze, "gradcheck": cmd_gradcheck}


def build_parser():
    parser = argparse.ArgumentParser(prog="tpnet", description="Temporal pyramid experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment YAML")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("--seed", type=int, help="overrides train.seed and data.seed")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    sub.add_parser("gen-data", parents=[common], help="generate and save a synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train a baseline or TPN model")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("ablate", parents=[common], help="run one ablation axis")
    p.add_argument("--axis", required=True, choices=AXES)
    p = sub.add_parser("analyze", parents=[common], help="tempo analysis of two checkpoints")
    p.add_argument("--base", required=True, help="baseline checkpoint")
    p.add_argument("--tpn", required=True, help="TPN checkpoint")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--max-coords", type=int, default=None)
    p.add_argument("--keep-kinks", action="store_true",
                   help="also compare coordinates whose perturbation crosses a max or relu kink")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.command == "gen-data":
            # --out names the dataset directory here, not the run directory
            cfg = cfg.with_overrides(seed=args.seed)
        else:
            cfg = cfg.with_overrides(out=args.out, seed=args.seed)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TPNError, ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
