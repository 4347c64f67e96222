"""Command-line interface.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes its resolved configuration and seeds next to its
outputs; wall-clock timings go to ``timing.log`` only, so CSV and JSON files
are byte-identical across re-runs.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import analysis
from .analysis import COST_COLUMNS, CostReport, write_csv, write_json
from .config import ConfigError, RunConfig
from .conv import ConvDictionary
from .errors import DimensionError, FormatError, HSCError, ParameterError, SpecError
from .learner import TrainingAborted, init_state, load_checkpoint, save_checkpoint, train
from .network import Mode
from .preprocess import (
    Dataset,
    SyntheticSpec,
    generate_synthetic,
    lcn_dataset,
    load_dataset,
    load_idx,
    load_image_dir,
    load_mnist,
    save_dataset,
    whiten,
)
from .solver import InferenceConfig, evaluate

log = logging.getLogger("hsc")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
USAGE_ERRORS = (SpecError, ParameterError, DimensionError, FormatError, FileNotFoundError)


# ---------------------------------------------------------------------------
# Data


def check_data_path(cfg: RunConfig) -> None:
    d = cfg.section("data")
    for key in ("path", "test_path"):
        if d.get(key) and not Path(d[key]).exists():
            raise ConfigError(f"data.{key}: {d[key]} does not exist")


def load_source(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.section("data")
    src, path = d["source"], Path(d["path"])
    if src == "idx":
        if path.is_dir():
            train_ds, test_ds = load_mnist(path)
        else:
            train_ds = load_idx(path, "train")
            if not d.get("test_path"):
                raise ConfigError("data.test_path: required when data.path is a single IDX file")
            test_ds = load_idx(d["test_path"], "test")
    elif src == "image_dir":
        if not d.get("target_hw"):
            raise ConfigError("data.target_hw: required for image folders")
        train_ds, test_ds = load_image_dir(path, d["target_hw"], d["channels"], d["split_ratio"], cfg.seed)
    else:
        train_ds = load_dataset(path)
        if not d.get("test_path"):
            raise ConfigError("data.test_path: required for cached datasets")
        test_ds = load_dataset(d["test_path"])
    if d.get("n_train") is not None:
        train_ds = train_ds.subset(d["n_train"])
    if d.get("n_test") is not None:
        test_ds = test_ds.subset(d["n_test"])
    return train_ds, test_ds


def apply_preprocessing(cfg: RunConfig, train_ds: Dataset, test_ds: Dataset) -> tuple[Dataset, Dataset]:
    p = cfg.section("preprocess")
    if p["lcn"]:
        train_ds = lcn_dataset(train_ds, p["lcn_window"], p["lcn_epsilon"])
        if len(test_ds):
            test_ds = lcn_dataset(test_ds, p["lcn_window"], p["lcn_epsilon"])
    if p["whiten"] != "none":
        train_ds, wh = whiten(train_ds, method=p["whiten"])
        if len(test_ds):
            test_ds, _ = whiten(test_ds, wh)
    return train_ds, test_ds


def prepare_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    train_ds, test_ds = load_source(cfg)
    train_ds, test_ds = apply_preprocessing(cfg, train_ds, test_ds)
    if len(train_ds) == 0:
        raise ConfigError("data: training split is empty")
    if len(test_ds) == 0:
        raise ConfigError("data: test split is empty")
    return train_ds, test_ds


# ---------------------------------------------------------------------------
# Output helpers


def prepare_output(out_dir: Path, cfg: RunConfig | None = None, extra: dict | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        cfg.dump(out_dir / "config.yaml")
    if extra is not None:
        (out_dir / "run.yaml").write_text(yaml.safe_dump(extra, sort_keys=True))
    return out_dir


def log_timing(out_dir: Path, label: str, seconds: float) -> None:
    with (Path(out_dir) / "timing.log").open("a") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {label} {seconds:.3f}s\n")


def per_image_rows(ev):
    for n in range(ev.n_images):
        row = {"image": n, "iterations": int(ev.iterations[n]),
               "converged": int(ev.converged[n])}
        for i in range(ev.quadratic.shape[1]):
            row[f"layer{i + 1}_quadratic"] = float(ev.quadratic[n, i])
            row[f"layer{i + 1}_l1"] = float(ev.l1[n, i])
        yield row


def load_images(path: Path) -> Dataset:
    """A dataset cache or a single IDX image file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset {path} does not exist")
    with path.open("rb") as fh:
        head = fh.read(4)
    if head == b"HSD1":
        return load_dataset(path)
    return load_idx(path, "test")


# ---------------------------------------------------------------------------
# Commands


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, args.set, {
        "training.epochs": args.epochs, "seed": args.seed, "inference.mode": args.mode,
        "output_dir": args.output_dir})
    check_data_path(cfg)
    train_ds, test_ds = prepare_data(cfg)
    spec = cfg.network_spec(train_ds.image_shape)
    out = prepare_output(cfg.output_dir, cfg, {"seed": cfg.seed, "data_fingerprint": train_ds.fingerprint,
                                                "n_train": len(train_ds), "n_test": len(test_ds)})
    state0 = init_state(spec)
    save_checkpoint(state0, out / "init.hsc")
    tic = time.perf_counter()
    try:
        state, tlog = train(spec, train_ds, test_ds, state=state0.copy(),
                            sweep=cfg.section("inference")["sweep"])
    except TrainingAborted as exc:
        snap = save_checkpoint(exc.state, out / "abort_snapshot.hsc")
        print(f"error: training aborted at epoch {exc.epoch}: {exc}; last good state in {snap}",
              file=sys.stderr)
        return EXIT_RUNTIME
    log_timing(out, "train", time.perf_counter() - tic)
    save_checkpoint(state, out / "checkpoint.hsc")
    write_csv(out / "train_log.csv", COST_COLUMNS,
              analysis.learning_curve_rows(tlog, spec.mode.value, spec.seed, spec.lambdas))
    lams = list(spec.lambdas) + ["", ""]
    write_csv(out / "cost.csv", COST_COLUMNS, (
        {"mode": spec.mode.value, "seed": spec.seed, "lambda1": lams[0], "lambda2": lams[1], "layer": "all",
         "quadratic": sum(q for q, _ in r.layer_costs), "l1": sum(l for _, l in r.layer_costs),
         "iterations": r.mean_iterations, "epoch": r.epoch} for r in tlog.records))
    last = tlog.records[-1]
    report = CostReport(last.layer_costs, spec.lambdas, spec.mode.value, spec.seed, last.epoch,
                        len(test_ds), last.mean_iterations, last.unconverged)
    write_json(out / "report.json", report.to_dict())
    print(f"trained {spec.epochs} epoch(s); test cost {report.total:.6g}; outputs in {out}")
    return EXIT_OK


def cmd_infer(args) -> int:
    state = load_checkpoint(args.checkpoint)
    ds = load_images(args.dataset)
    if ds.image_shape != state.image_shape:
        raise DimensionError(f"layer 1 expects images {state.image_shape}, dataset has {ds.image_shape}")
    images = ds.images if args.n is None else ds.images[:args.n]
    cfg = InferenceConfig(mode=Mode.parse(args.mode), t_stab=args.t_stab, max_iters=args.max_iters,
                          sweep=args.sweep)
    out = prepare_output(Path(args.output_dir), extra={
        "command": "infer", "checkpoint": str(args.checkpoint), "dataset": str(args.dataset),
        "dataset_fingerprint": ds.fingerprint, "mode": cfg.mode.value, "t_stab": cfg.t_stab,
        "max_iters": cfg.max_iters, "sweep": cfg.sweep, "seed": state.seed})
    tic = time.perf_counter()
    ev = evaluate(state, images, cfg, args.batch_size)
    log_timing(out, "infer", time.perf_counter() - tic)
    cols = ["image", "iterations", "converged"]
    for i in range(state.n_layers):
        cols += [f"layer{i + 1}_quadratic", f"layer{i + 1}_l1"]
    write_csv(out / "per_image.csv", cols, per_image_rows(ev))
    report = CostReport(ev.mean_terms(), list(state.lambdas), cfg.mode.value, state.seed, state.epoch,
                        ev.n_images, float(ev.iterations.mean()), int((~ev.converged).sum()))
    write_json(out / "report.json", report.to_dict())
    print(f"{ev.n_images} images, mean {report.mean_iterations:.1f} iterations, "
          f"{report.unconverged} unconverged, cost {report.total:.6g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = RunConfig.load(args.config, args.set, {
        "training.epochs": args.epochs, "output_dir": args.output_dir, "workers": args.workers})
    s = cfg.section("sweep")
    if not s.get("lambda1") or not s.get("lambda2"):
        raise ConfigError("sweep.lambda1/lambda2: both axes are required")
    seeds = s.get("seeds") or [cfg.seed]
    check_data_path(cfg)
    train_ds, test_ds = prepare_data(cfg)
    template = cfg.network_spec(train_ds.image_shape)
    out = prepare_output(cfg.output_dir, cfg, {"seeds": seeds, "data_fingerprint": train_ds.fingerprint})
    tic = time.perf_counter()
    grid = analysis.sweep(template, s["lambda1"], s["lambda2"], seeds, train_ds, test_ds,
                          modes=[Mode.parse(m) for m in s["modes"]], workers=cfg.raw["workers"],
                          out_dir=out, resume=args.resume, sweep_order=cfg.section("inference")["sweep"])
    log_timing(out, "sweep", time.perf_counter() - tic)
    grid.export(out)
    rows = []
    for (l1, l2), cell in sorted(grid.runs.items()):
        for mode in sorted(cell):
            for r in cell[mode]:
                for e, (tot, it) in enumerate(zip(r.epoch_totals, r.epoch_iterations), start=1):
                    rows.append({"lambda1": l1, "lambda2": l2, "mode": mode, "seed": r.seed,
                                 "epoch": e, "total": tot, "iterations": it})
    write_csv(out / "learning_curves.csv",
              ["mode", "seed", "lambda1", "lambda2", "epoch", "total", "iterations"], rows)
    reports = [r.report for cell in grid.runs.values() for runs in cell.values() for r in runs if r.valid]
    write_json(out / "iteration_curves.json",
               {f"lambda{axis}": {m: [vars(p) for p in pts]
                                  for m, pts in analysis.iteration_curve(reports, axis).items()}
                for axis in (1, 2)})
    n_valid = sum(grid.cell_valid(a, b) for a in grid.lambda1 for b in grid.lambda2)
    n_cells = len(grid.lambda1) * len(grid.lambda2)
    print(f"{n_valid}/{n_cells} cells valid; outputs in {out}")
    return EXIT_OK if n_valid else EXIT_RUNTIME


def cmd_export_rf(args) -> int:
    state = load_checkpoint(args.checkpoint)
    hists = None
    out = prepare_output(Path(args.output_dir), extra={
        "command": "export-rf", "checkpoint": str(args.checkpoint),
        "dataset": str(args.dataset) if args.dataset else None, "mode": args.mode,
        "exclude_top": bool(args.exclude_top), "seed": state.seed})
    if args.dataset:
        ds = load_images(args.dataset)
        if ds.image_shape != state.image_shape:
            raise DimensionError(f"layer 1 expects images {state.image_shape}, dataset has {ds.image_shape}")
        images = ds.images if args.n is None else ds.images[:args.n]
        hists = analysis.activation_probability(state, images, InferenceConfig(mode=Mode.parse(args.mode)))
        write_json(out / "activation.json", {"histograms": [h.to_dict() for h in hists]})
    info = analysis.layer_mosaics(state, out, hists, args.exclude_top, png=not args.no_png)
    write_json(out / "mosaics.json", {"layers": info, "sorted_by_activation": hists is not None})
    for i in info:
        print(f"layer {i['layer']}: {i['n_tiles']} tiles of {i['tile_hw'][0]}x{i['tile_hw'][1]}")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint)
        dicts, shape = state.dicts, state.image_shape
    else:
        rng = np.random.default_rng(args.dict_seed)
        w = rng.standard_normal((args.n_features, args.channels, args.kernel, args.kernel))
        w /= np.linalg.norm(w.reshape(args.n_features, -1), axis=1)[:, None, None, None]
        dicts = [ConvDictionary(torch.from_numpy(w).float(), args.stride)]
        shape = (args.channels, args.size, args.size)
    out = prepare_output(Path(args.output_dir), extra={k: v for k, v in vars(args).items() if k != "func"})
    for split, n, offset in (("train", args.n_train, 0), ("test", args.n_test, 1)):
        spec = SyntheticSpec(dicts, shape, n, args.n_active, args.noise_std, args.seed + offset)
        ds, codes = generate_synthetic(spec, split)
        save_dataset(ds, out / f"{split}.hsd")
        np.save(out / f"{split}_codes.npy", codes.numpy())
    if not args.checkpoint:
        save_checkpoint(_dict_state(dicts, shape), out / "true_dictionary.hsc")
    print(f"wrote {args.n_train}/{args.n_test} synthetic images to {out}")
    return EXIT_OK


def _dict_state(dicts, shape):
    from .network import NetworkState

    return NetworkState(dicts, [torch.zeros_like(d.weights) for d in dicts], [0.0] * len(dicts), shape)


def cmd_preprocess(args) -> int:
    cfg = RunConfig.load(args.config, args.set, {"output_dir": args.output_dir}, need_network=False)
    check_data_path(cfg)
    train_ds, test_ds = prepare_data(cfg)
    out = prepare_output(cfg.output_dir, cfg)
    save_dataset(train_ds, out / "train.hsd")
    save_dataset(test_ds, out / "test.hsd")
    print(f"train {len(train_ds)} / test {len(test_ds)} images, steps {train_ds.steps}, "
          f"fingerprint {train_ds.fingerprint}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hsc", description="Hierarchical convolutional sparse coding.")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)

    def config_args(p, output=True):
        p.add_argument("config", type=Path, help="YAML run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. network.layers.0.lambda=0.2")
        if output:
            p.add_argument("-o", "--output-dir", help="output directory (config key output_dir)")

    def infer_args(p):
        p.add_argument("--mode", default="spc", help="hila or spc (default spc)")
        p.add_argument("-n", type=int, default=None, help="use only the first N images")

    p = sub.add_parser("train", help="train a network from a config file")
    config_args(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run inference with a trained checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("dataset", type=Path, help="dataset cache (.hsd) or IDX image file")
    p.add_argument("-o", "--output-dir", required=True)
    infer_args(p)
    p.add_argument("--t-stab", type=float, default=5e-4)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--sweep", default="synchronous", choices=["synchronous", "in-place"])
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("sweep", help="train both modes over a lambda grid")
    config_args(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int, help="parallel jobs (HSC_WORKERS overrides)")
    p.add_argument("--resume", action="store_true", help="skip jobs whose results already exist")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export-rf", help="draw receptive-field mosaics of a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("dataset", type=Path, nargs="?", help="images used to rank atoms by activity")
    p.add_argument("-o", "--output-dir", required=True)
    infer_args(p)
    p.add_argument("--exclude-top", action="store_true", help="drop the most active atom")
    p.add_argument("--no-png", action="store_true", help="write only PGM/PPM files")
    p.set_defaults(func=cmd_export_rf)

    p = sub.add_parser("gen-synthetic", help="generate images from a known sparse model")
    p.add_argument("-o", "--output-dir", required=True)
    p.add_argument("--checkpoint", type=Path, help="use these dictionaries as ground truth")
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--n-active", type=int, default=1)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dict-seed", type=int, default=0)
    p.add_argument("--n-features", type=int, default=8)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--kernel", type=int, default=5)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--size", type=int, default=16)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("preprocess", help="load, normalize and cache a dataset")
    config_args(p)
    p.set_defaults(func=cmd_preprocess)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (HSCError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
