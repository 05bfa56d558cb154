"""Command-line experiment runner.

Subcommands: gen-data, solve-labels, train, continual, sft, eval, report.
Every run writes a manifest with the effective settings and seeds so
artifacts can be regenerated bit-exactly.  The PNCL_LOG environment variable
(error | info | debug) controls verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, checkpoint, continual, data, losses, report, solver
from .config import ConfigError, ExperimentConfig, load_config
from .continual import (default_forcing, evaluate_groups, run_sequence,
                        score_dataset, sft_train, split_group, train_baseline,
                        write_error_matrix)
from .model import Transolver

log = logging.getLogger("pincl")

FILES = {
    "dataset": "dataset.pnds",
    "dataset_manifest": "dataset_manifest.json",
    "labeled": "dataset_labeled.pnds",
    "model": "model.pncl",
    "model_sft": "model_sft.pncl",
    "matrix": "matrix.csv",
    "scores": "scores.csv",
    "eval": "eval.csv",
}


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("PNCL_LOG", "info"), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _check_outputs(paths: list[Path], overwrite: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not overwrite:
        raise ConfigError("refusing to overwrite existing outputs "
                          f"{existing}; pass --overwrite")


def _write_manifest(path: Path, payload: dict) -> None:
    payload = dict(payload)
    payload["pincl_version"] = __version__
    payload["formats"] = {"dataset": data.DATASET_VERSION,
                          "checkpoint": checkpoint.FORMAT_VERSION}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _load_labeled(out: Path) -> data.Dataset:
    path = out / FILES["labeled"]
    if not path.exists():
        raise ConfigError(f"labeled dataset not found at {path}; "
                          "run gen-data and solve-labels first")
    return data.read_dataset(path)


def cmd_gen_data(cfg: ExperimentConfig, args) -> None:
    out = Path(cfg.out)
    targets = [out / FILES["dataset"], out / FILES["dataset_manifest"]]
    _check_outputs(targets, args.overwrite)
    d = cfg.dataset
    ds = data.generate_groups(schedule=[tuple(p) for p in d.schedule],
                              samples_per_group=d.samples_per_group, nx=d.nx,
                              length_scale=d.length_scale, seed=d.seed,
                              workers=args.workers)
    data.write_dataset(targets[0], ds)
    _write_manifest(targets[1], data.dataset_manifest(ds, d.samples_per_group))
    log.info("wrote %s (%d groups x %d samples at %dx%d)", targets[0],
             len(ds.groups), d.samples_per_group, d.nx, d.nx)


def _solve_one(sample_k: np.ndarray) -> np.ndarray:
    t, _ = solver.solve_darcy(sample_k, default_forcing(*sample_k.shape))
    return t


def cmd_solve_labels(cfg: ExperimentConfig, args) -> None:
    out = Path(cfg.out)
    target = out / FILES["labeled"]
    _check_outputs([target], args.overwrite)
    source = out / FILES["dataset"]
    if not source.exists():
        raise ConfigError(f"dataset not found at {source}; run gen-data first")
    ds = data.read_dataset(source)
    samples = [s for g in ds.groups for s in g.samples]
    started = time.perf_counter()
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            labels = list(pool.map(_solve_one, [s.k for s in samples], chunksize=4))
    else:
        labels = [_solve_one(s.k) for s in samples]
    for s, t in zip(samples, labels):
        s.label = t
    data.write_dataset(target, ds)
    log.info("labeled %d samples in %.1fs -> %s", len(samples),
             time.perf_counter() - started, target)


def _eval_rows(model: Transolver, ds: data.Dataset, boundary_mode: str):
    for g in ds.groups:
        for s in g.samples:
            pred = losses.apply_dirichlet(model.forward(s.k), boundary_mode)
            l2, h1 = losses.relative_errors(pred, s.label)
            yield g.group_id, s.sample_index, l2, h1


def cmd_train(cfg: ExperimentConfig, args, seed: int) -> None:
    out = Path(cfg.out)
    targets = [out / FILES["model"], out / "train_manifest.json"]
    _check_outputs(targets, args.overwrite)
    ds = _load_labeled(out)
    cl = cfg.cl_config()
    groups = [ds.group(gid) for gid in cfg.strategy.train_groups]
    pools = [split_group(g.samples, cfg.dataset.eval_fraction) for g in groups]
    train_pool = [s for t, _ in pools for s in t]
    eval_sets = [e for _, e in pools]
    started = time.perf_counter()
    model = train_baseline(Transolver(cfg.model_config(), seed=cfg.model.seed),
                           train_pool, "joint", cl, seed=seed)
    elapsed = time.perf_counter() - started
    l2, h1 = evaluate_groups(model, eval_sets, cl.loss.boundary_mode)
    model.save(targets[0])
    _write_manifest(targets[1], {
        "command": "train", "seed": seed, "config": cfg.to_dict(),
        "trained_groups": cfg.strategy.train_groups,
        "train_samples": len(train_pool),
        "wall_clock_seconds": elapsed,
        "held_out_rel_L2": list(map(float, l2)),
        "held_out_rel_H1": list(map(float, h1)),
    })
    log.info("trained on %d samples in %.1fs; held-out rel_L2 %s",
             len(train_pool), elapsed, np.round(l2, 4).tolist())


def cmd_continual(cfg: ExperimentConfig, args, seed: int) -> None:
    out = Path(cfg.out)
    targets = [out / FILES["matrix"], out / "run_manifest.json",
               out / FILES["model"], out / FILES["scores"]]
    _check_outputs(targets, args.overwrite)
    ds = _load_labeled(out)
    strategy = cfg.strategy.name
    if strategy == "sft":
        raise ConfigError("strategy.name: sft runs via the 'sft' subcommand")
    result = run_sequence(ds, strategy, cfg.cl_config(), cfg.model_config(),
                          seed=seed, eval_fraction=cfg.dataset.eval_fraction)
    write_error_matrix(targets[0], result.matrix)
    _write_manifest(targets[1], dict(result.manifest, command="continual",
                                     config=cfg.to_dict()))
    result.model.save(targets[2])
    losses.write_scores(targets[3], result.scores)
    log.info("sequence complete; final-row rel_L2 %s",
             np.round(result.matrix.rel_l2[-1], 4).tolist())


def cmd_sft(cfg: ExperimentConfig, args, seed: int) -> None:
    out = Path(cfg.out)
    targets = [out / FILES["model_sft"], out / "sft_manifest.json"]
    _check_outputs(targets, args.overwrite)
    ckpt = Path(cfg.strategy.checkpoint) if cfg.strategy.checkpoint else out / FILES["model"]
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found at {ckpt}")
    model = Transolver.load(ckpt)
    ds = _load_labeled(out)
    cl = cfg.cl_config()
    pool = [s for g in ds.groups for s in g.samples]
    errs = {(s.group_id, s.sample_index):
            losses.relative_errors(
                losses.apply_dirichlet(model.forward(s.k), cl.loss.boundary_mode),
                s.label)[0]
            for s in pool}
    ranked = sorted(pool, key=lambda s: (-errs[(s.group_id, s.sample_index)],
                                         s.group_id, s.sample_index))
    n_sft = max(1, int(round(cfg.strategy.sft_decile * len(pool))))
    d_sft, d_left = ranked[:n_sft], ranked[n_sft:]
    before_sft = float(np.mean([errs[(s.group_id, s.sample_index)] for s in d_sft]))
    before_left = float(np.mean([errs[(s.group_id, s.sample_index)] for s in d_left]))
    tuned = sft_train(model, d_sft, d_left, cl, seed=seed)

    def mean_err(samples):
        vals = [losses.relative_errors(
            losses.apply_dirichlet(tuned.forward(s.k), cl.loss.boundary_mode),
            s.label)[0] for s in samples]
        return float(np.mean(vals))

    after_sft, after_left = mean_err(d_sft), mean_err(d_left)
    tuned.save(targets[0])
    _write_manifest(targets[1], {
        "command": "sft", "seed": seed, "config": cfg.to_dict(),
        "checkpoint": str(ckpt), "sft_samples": len(d_sft),
        "distill_samples": len(d_left),
        "worst_decile_rel_L2": {"before": before_sft, "after": after_sft},
        "distilled_rel_L2": {"before": before_left, "after": after_left},
    })
    log.info("SFT: worst decile %.4f -> %.4f; distilled set %.4f -> %.4f",
             before_sft, after_sft, before_left, after_left)


def cmd_eval(cfg: ExperimentConfig, args, seed: int) -> None:
    out = Path(cfg.out)
    target = out / FILES["eval"]
    _check_outputs([target], args.overwrite)
    ckpt = Path(cfg.strategy.checkpoint) if cfg.strategy.checkpoint else out / FILES["model"]
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found at {ckpt}")
    model = Transolver.load(ckpt)
    ds = _load_labeled(out)
    mode = cfg.loss_config().boundary_mode
    with open(target, "w") as fh:
        fh.write("group_id,sample_index,rel_L2,rel_H1\n")
        for gid, idx, l2, h1 in _eval_rows(model, ds, mode):
            fh.write(f"{gid},{idx},{l2!r},{h1!r}\n")
    log.info("wrote %s", target)


def cmd_report(cfg: ExperimentConfig, args) -> None:
    out = Path(cfg.out)
    matrix_path = out / FILES["matrix"]
    if not matrix_path.exists():
        raise ConfigError(f"matrix export not found at {matrix_path}; "
                          "run the continual subcommand first")
    produced = [out / "error_matrix_rel_l2.png", out / "error_matrix_rel_h1.png"]
    scores_path = out / FILES["scores"]
    eval_path = out / FILES["eval"]
    use_scatter = scores_path.exists() and eval_path.exists()
    if use_scatter:
        produced.append(out / "score_scatter.png")
    _check_outputs(produced, args.overwrite)
    errors_by_id = None
    if use_scatter:
        errors_by_id = {}
        with open(eval_path) as fh:
            next(fh)
            for line in fh:
                gid, idx, l2, _ = line.strip().split(",")
                errors_by_id[(int(gid), int(idx))] = float(l2)
    made = report.render_report(matrix_path, out,
                                scores_path=scores_path if use_scatter else None,
                                errors_by_id=errors_by_id)
    log.info("rendered %s", [str(p) for p in made])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pincl",
        description="Physics-informed Transolver training and replay-based "
                    "continual learning for Darcy flow.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
            ("gen-data", "generate the permeability dataset"),
            ("solve-labels", "solve reference labels for a dataset"),
            ("train", "train one model on configured groups"),
            ("continual", "run a sequential joint/naive/replay experiment"),
            ("sft", "supervised fine-tune a checkpoint on its worst decile"),
            ("eval", "evaluate a checkpoint against oracle labels"),
            ("report", "render figures from exported tables")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None,
                       help="JSON config path (defaults used when omitted)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", type=Path, default=None,
                       help="override the output directory")
        p.add_argument("--workers", type=int, default=1,
                       help="worker processes for sample-parallel phases")
        p.add_argument("--overwrite", action="store_true",
                       help="allow replacing existing outputs")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.out is not None:
            cfg.out = str(args.out)
        if args.seed is not None:
            cfg.dataset.seed = args.seed
            cfg.model.seed = args.seed
        seed = cfg.dataset.seed
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "gen-data":
            cmd_gen_data(cfg, args)
        elif args.command == "solve-labels":
            cmd_solve_labels(cfg, args)
        elif args.command == "train":
            cmd_train(cfg, args, seed)
        elif args.command == "continual":
            cmd_continual(cfg, args, seed)
        elif args.command == "sft":
            cmd_sft(cfg, args, seed)
        elif args.command == "eval":
            cmd_eval(cfg, args, seed)
        elif args.command == "report":
            cmd_report(cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # mid-run failure: leave a record beside artifacts
        failure = Path(cfg.out) / "failure.json"
        failure.write_text(json.dumps(
            {"command": args.command, "error": f"{type(exc).__name__}: {exc}"},
            indent=2) + "\n")
        log.error("%s failed: %s (failure record at %s)", args.command, exc, failure)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
