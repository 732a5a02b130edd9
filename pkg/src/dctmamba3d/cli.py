"""``dctmamba3d`` command line: convert, synth, train, eval, ablate, heatmap, complexity.

Exit codes: 0 ok, 1 runtime error, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_run_config
from .data import (BandStats, ContainerError, HsiCube, decode_container, encode_container,
                   extract_patches, load_container, normalize, normalize_patches, save_container,
                   stratified_split, write_label_map_csv)
from .matfile import MatFormatError, mat_to_cube, parse_mat_v5
from .metrics import pct, report
from .model import ABLATIONS, ModelConfig, count_flops_params
from .ssdm import channels_last_samples, mean_abs_offdiag, spearman_matrix, write_heatmap_csv
from .synth import generate_scene
from .tensor import NonFiniteError, Tensor, no_grad
from .train import (TrainingDivergedError, evaluate, prepare_splits, restore, run_experiment,
                    train, write_loss_curve)

log = logging.getLogger("dctmamba3d")


class UsageError(Exception):
    pass


def _with_data_shape(config: ModelConfig, cube: HsiCube) -> ModelConfig:
    return ModelConfig.from_dict({**config.to_dict(), "bands": cube.bands, "num_classes": cube.num_classes})


# -- commands ------------------------------------------------------------------------
def cmd_convert(args) -> int:
    raw = Path(args.input).read_bytes()
    fmt = args.format
    if fmt == "auto":
        fmt = "hsic" if raw[:4] == b"HSIC" else "mat"
    if fmt == "hsic":
        cube = decode_container(raw)
    else:
        if not args.cube_var or not args.label_var:
            raise UsageError("MAT input needs --cube-var and --label-var")
        cube = mat_to_cube(parse_mat_v5(raw), args.cube_var, args.label_var)
    out = encode_container(cube)
    Path(args.output).write_bytes(out)
    print(f"wrote {args.output}: H={cube.height} W={cube.width} C={cube.bands} K={cube.num_classes}")
    return 0


def cmd_synth(args) -> int:
    h, w = args.size
    if not 0 <= args.band_correlation < 1:
        raise UsageError(f"--band-correlation must lie in [0, 1), got {args.band_correlation}")
    if args.classes < 2:
        raise UsageError(f"--classes must be >= 2, got {args.classes}")
    cube = generate_scene(args.classes, args.bands, h, w, args.band_correlation, seed=args.seed,
                          noise_std=args.noise_std)
    save_container(cube, args.output)
    print(f"wrote {args.output}: H={h} W={w} C={args.bands} K={args.classes} rho={args.band_correlation}")
    return 0


def _load_run(path) -> tuple[RunConfig, HsiCube, ModelConfig]:
    run = load_run_config(path)
    cube = load_container(run.data)
    return run, cube, _with_data_shape(run.model, cube)


def cmd_train(args) -> int:
    run, cube, config = _load_run(args.config)
    out = Path(args.output or run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr, _, stats = prepare_splits(cube, config.ssdm.patch_spatial, run.train_fraction, run.seed)
    ckpt_dir = out / "checkpoints" if config.optim.checkpoint_every else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(exist_ok=True)
    res = train(config, tr, stats, ckpt_dir)
    ckpt_io.save(res.checkpoint, out / "checkpoint.dcm3")
    write_loss_curve(res.curve, out / "loss.csv")
    final = f"; final loss {res.curve[-1]:.4f}" if res.curve else ""
    print(f"trained {len(res.curve)} steps on {len(tr)} patches{final}")
    print(f"wrote {out / 'checkpoint.dcm3'} and {out / 'loss.csv'}")
    return 0


def cmd_eval(args) -> int:
    model, _, stats = restore(ckpt_io.load(args.checkpoint))
    cube = load_container(args.data)
    config = model.config
    if cube.bands != config.bands or cube.num_classes != config.num_classes:
        raise ValueError(f"data has C={cube.bands}, K={cube.num_classes}; checkpoint expects "
                         f"C={config.bands}, K={config.num_classes}")
    ps = extract_patches(cube, config.ssdm.patch_spatial)
    if args.split == "test":
        seed = config.optim.seed if args.seed is None else args.seed
        _, ps = stratified_split(ps, args.train_fraction, seed, cube.num_classes)
    if stats is not None:
        ps = normalize_patches(ps, stats)
    sc, cm, preds = evaluate(model, ps)
    out = Path(args.output)
    report(sc, cube.class_names, out)
    write_label_map_csv(ps.coords, preds + 1, out / "predictions.csv", {"truth": ps.labels + 1})
    print(f"OA {pct(sc.oa)}  AA {pct(sc.aa)}  Kappa {pct(sc.kappa)}  n={sc.n}")
    return 0


def cmd_ablate(args) -> int:
    run, cube, config = _load_run(args.config)
    modes = ABLATIONS if args.mode == "all" else (args.mode,)
    seeds = args.seeds if args.seeds else [run.seed]
    out = Path(args.output or run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for mode in modes:
        accs = []
        for seed in seeds:
            d = config.to_dict()
            d["ablation"] = mode
            d["optim"]["seed"] = seed
            exp = run_experiment(cube, ModelConfig.from_dict(d), run.train_fraction, seed)
            accs.append((exp.scores.oa, exp.scores.aa, exp.scores.kappa))
        oa, aa, kappa = np.mean(accs, axis=0)
        rows.append((mode, oa, aa, kappa))
        print(f"{mode:<11} OA {pct(oa)}  AA {pct(aa)}  Kappa {pct(kappa)}")
    path = out / "ablation.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "oa", "aa", "kappa"])
        for mode, oa, aa, kappa in rows:
            w.writerow([mode, pct(oa), pct(aa), pct(kappa)])
    print(f"wrote {path}")
    return 0


def ssdm_channel_samples(model, cube: HsiCube, stats: BandStats | None) -> np.ndarray:
    """Whole scene through the stem and DCT bank; ``(C*H*W, 27)`` samples."""
    x = cube.reflectance if stats is None else normalize(cube.reflectance, stats)
    vol = np.transpose(x, (2, 0, 1))[None, None]  # (1, 1, C, H, W)
    with no_grad():
        freq = model.x_freq(Tensor(vol, dtype=model.config.np_dtype))
    return channels_last_samples(freq, 1)


def cmd_heatmap(args) -> int:
    if args.stage == "ssdm" and not args.checkpoint:
        raise UsageError("--stage ssdm needs --checkpoint")
    cube = load_container(args.data)
    if args.stage == "raw":
        matrix = spearman_matrix(channels_last_samples(cube.reflectance, -1))
    else:
        model, _, stats = restore(ckpt_io.load(args.checkpoint))
        if model.config.bands != cube.bands:
            raise ValueError(f"checkpoint expects {model.config.bands} bands, data has {cube.bands}")
        matrix = spearman_matrix(ssdm_channel_samples(model, cube, stats))
    write_heatmap_csv(matrix, args.out)
    print(f"mean |off-diagonal| {mean_abs_offdiag(matrix):.6f}")
    return 0


def complexity_rows(config: ModelConfig) -> list[tuple[str, int, int]]:
    counts = count_flops_params(config)
    return [(name, v["flops"], v["params"]) for name, v in counts.items()]


def cmd_complexity(args) -> int:
    run = load_run_config(args.config)
    config = run.model
    if config.bands < 2:
        config = _with_data_shape(config, load_container(run.data))
    rows = complexity_rows(config)
    print(f"{'module':<10}{'flops':>16}{'params':>12}")
    for name, fl, pa in rows:
        print(f"{name:<10}{fl:>16d}{pa:>12d}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["module", "flops", "params"])
            w.writerows(rows)
    return 0


# -- wiring --------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dctmamba3d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("convert", help="MAT-v5 or HSIC file -> HSIC container")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--format", choices=("auto", "mat", "hsic"), default="auto")
    s.add_argument("--cube-var")
    s.add_argument("--label-var")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("synth", help="generate a synthetic labelled scene")
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--bands", type=int, required=True)
    s.add_argument("--size", type=int, nargs=2, metavar=("H", "W"), required=True)
    s.add_argument("--band-correlation", type=float, required=True)
    s.add_argument("--noise-std", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train on a run config; writes checkpoint.dcm3 and loss.csv")
    s.add_argument("--config", required=True)
    s.add_argument("--output", help="output directory (default: config output_dir)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint; writes metrics.csv, summary.json, predictions.csv")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--split", choices=("all", "test"), default="all")
    s.add_argument("--train-fraction", type=float, default=0.10)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and score each ablation mode; writes ablation.csv")
    s.add_argument("--config", required=True)
    s.add_argument("--mode", choices=("all",) + ABLATIONS, default="all")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--output")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("heatmap", help="band Spearman correlation CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--stage", choices=("raw", "ssdm"), default="raw")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("complexity", help="per-module FLOP and parameter counts")
    s.add_argument("--config", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_complexity)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ContainerError, MatFormatError, CheckpointError, TrainingDivergedError, NonFiniteError,
            OSError, KeyError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
