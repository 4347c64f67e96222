"""Cost decomposition, λ sweeps, multi-seed statistics and dictionary mosaics.

Every export is a pure function of its inputs: floats are written with nine
significant digits and wall-clock times never reach the CSV or JSON files.
"""

from __future__ import annotations

import concurrent.futures
import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .conv import effective_dictionary
from .errors import HSCError, ParameterError
from .learner import TrainLog, train
from .network import Mode, NetworkSpec, NetworkState
from .solver import InferenceConfig, evaluate

log = logging.getLogger(__name__)

COST_COLUMNS = ["mode", "seed", "lambda1", "lambda2", "layer", "quadratic", "l1", "iterations", "epoch"]
GRID_COLUMNS = ["lambda1", "lambda2", "valid", "hila_median_total", "hila_mad_total",
                "spc_median_total", "spc_mad_total", "relative_difference",
                "hila_median_iterations", "spc_median_iterations", "unconverged"]
ACTIVATION_DEFINITION = "fraction of images in which the atom has at least one strictly positive coefficient"


def fmt(value) -> str:
    """Nine significant digits for floats, plain text for everything else."""
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".9g")
    return str(value)


def _num(value):
    return float(fmt(value)) if isinstance(value, (float, np.floating)) else value


def _canon(obj):
    """Round floats to nine significant digits, recursively, for JSON export."""
    if isinstance(obj, dict):
        return {str(k): _canon(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canon(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _canon(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if not np.isfinite(v) else _num(v)
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_canon(obj), indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path, columns: Sequence[str], rows: Iterable[Mapping]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row.get(c, "")) for c in columns])
    return path


# ---------------------------------------------------------------------------
# Costs


@dataclass
class CostReport:
    """Dataset-mean Lasso terms of every layer after inference."""

    layers: list[tuple[float, float]]
    lambdas: list[float]
    mode: str
    seed: int = 0
    epoch: int = 0
    n_images: int = 0
    mean_iterations: float = 0.0
    unconverged: int = 0

    @property
    def total(self) -> float:
        return float(sum(q + l for q, l in self.layers))

    def rows(self, lambda_cols: Sequence[float] | None = None):
        lams = list(self.lambdas if lambda_cols is None else lambda_cols) + [""] * 2
        for i, (q, l) in enumerate(self.layers, start=1):
            yield {"mode": self.mode, "seed": self.seed, "lambda1": lams[0], "lambda2": lams[1],
                   "layer": i, "quadratic": q, "l1": l, "iterations": self.mean_iterations,
                   "epoch": self.epoch}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CostReport":
        d = dict(d)
        d.pop("total", None)
        d["layers"] = [tuple(p) for p in d["layers"]]
        return cls(**d)


def cost_report(state: NetworkState, images, mode=Mode.SPC, t_stab: float = 5e-4,
                max_iters: int = 500, batch_size: int = 32, seed: int | None = None,
                sweep: str = "synchronous") -> CostReport:
    """Infer the whole set with frozen dictionaries and average the Lasso terms."""
    images = getattr(images, "images", images)
    cfg = InferenceConfig(mode=Mode.parse(mode), t_stab=t_stab, max_iters=max_iters, sweep=sweep)
    ev = evaluate(state, images, cfg, batch_size)
    return CostReport(ev.mean_terms(), list(state.lambdas), cfg.mode.value,
                      state.seed if seed is None else seed, state.epoch, ev.n_images,
                      float(ev.iterations.mean()), int((~ev.converged).sum()))


# ---------------------------------------------------------------------------
# Statistics


def median_mad(samples: Sequence[float]) -> tuple[float, float]:
    """Median and median absolute deviation (even length: midpoint of the central pair)."""
    x = np.asarray(list(samples), dtype=np.float64)
    if x.size == 0:
        raise ParameterError("median_mad needs at least one sample")
    med = float(np.median(x))
    return med, float(np.median(np.abs(x - med)))


@dataclass
class ActivationHistogram:
    """Per-atom activation probabilities of one layer, most active first."""

    layer: int
    probabilities: np.ndarray
    order: np.ndarray
    n_images: int
    definition: str = ACTIVATION_DEFINITION

    def to_dict(self) -> dict:
        return {"layer": self.layer, "probabilities": self.probabilities, "order": self.order,
                "n_images": self.n_images, "definition": self.definition}


def histogram_from_activity(active: np.ndarray, layer: int) -> ActivationHistogram:
    """``active`` is ``[N, F]`` boolean: atom ``f`` fired somewhere in image ``n``."""
    active = np.asarray(active, dtype=bool)
    p = active.mean(axis=0) if active.shape[0] else np.zeros(active.shape[1])
    order = np.argsort(-p, kind="stable")
    return ActivationHistogram(layer, p[order], order, active.shape[0])


def activation_from_codes(codes: Sequence[torch.Tensor]) -> list[ActivationHistogram]:
    """Histograms from inferred codes ``[N, F, h, w]`` (one tensor per layer)."""
    return [histogram_from_activity((g > 0).flatten(2).any(dim=2).numpy(), i)
            for i, g in enumerate(codes, start=1)]


def activation_probability(state: NetworkState, images, cfg: InferenceConfig | None = None,
                           batch_size: int = 32) -> list[ActivationHistogram]:
    images = getattr(images, "images", images)
    ev = evaluate(state, images, cfg or InferenceConfig(), batch_size, collect_activity=True)
    return [histogram_from_activity(a, i) for i, a in enumerate(ev.active, start=1)]


@dataclass
class CurvePoint:
    mode: str
    x: float
    median: float
    mad: float
    n_seeds: int
    unconverged: int


def iteration_curve(reports: Iterable[CostReport], axis: int = 1) -> dict[str, list[CurvePoint]]:
    """Median/MAD over seeds of the mean iteration count, per mode and λ value.

    ``axis`` selects which λ (1-based) is the abscissa.  Unconverged images
    already count at ``max_iters``; their number is carried along.
    """
    groups: dict[tuple[str, float], list[CostReport]] = {}
    for r in reports:
        groups.setdefault((r.mode, float(r.lambdas[axis - 1])), []).append(r)
    out: dict[str, list[CurvePoint]] = {}
    for (mode, x), rs in sorted(groups.items()):
        med, mad = median_mad([r.mean_iterations for r in rs])
        out.setdefault(mode, []).append(
            CurvePoint(mode, x, med, mad, len(rs), sum(r.unconverged for r in rs)))
    return out


def learning_curve_rows(tlog: TrainLog, mode: str, seed: int, lambdas: Sequence[float]):
    """Per-epoch CSV rows (fixed cost columns) from a training log."""
    lams = list(lambdas) + [""] * 2
    for rec in tlog.records:
        for i, (q, l) in enumerate(rec.layer_costs, start=1):
            yield {"mode": mode, "seed": seed, "lambda1": lams[0], "lambda2": lams[1], "layer": i,
                   "quadratic": q, "l1": l, "iterations": rec.mean_iterations, "epoch": rec.epoch}


# ---------------------------------------------------------------------------
# Sweeps


@dataclass
class RunRecord:
    """One trained network of a sweep cell: final test report plus per-epoch totals."""

    mode: str
    seed: int
    lambdas: list[float]
    report: CostReport | None
    epoch_totals: list[float] = field(default_factory=list)
    epoch_iterations: list[float] = field(default_factory=list)
    error: str | None = None

    @property
    def valid(self) -> bool:
        return self.error is None and self.report is not None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["report"] = self.report.to_dict() if self.report else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["report"] = CostReport.from_dict(d["report"]) if d.get("report") else None
        return cls(**d)


def _spec_dict(spec: NetworkSpec) -> dict:
    return {"layers": [asdict(l) for l in spec.layers], "image_shape": list(spec.image_shape),
            "t_stab": spec.t_stab, "epochs": spec.epochs, "batch_size": spec.batch_size,
            "mode": Mode.parse(spec.mode).value, "seed": spec.seed, "max_iters": spec.max_iters,
            "momentum": spec.momentum}


def job_fingerprint(spec: NetworkSpec, data_key: str, sweep: str = "synchronous") -> str:
    blob = json.dumps({"spec": _spec_dict(spec), "data": data_key, "sweep": sweep}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def cell_spec(template: NetworkSpec, lambdas: Sequence[float], mode, seed: int) -> NetworkSpec:
    layers = [type(l)(**{**asdict(l), "lam": float(lam)}) for l, lam in zip(template.layers, lambdas)]
    layers += template.layers[len(lambdas):]
    kw = _spec_dict(template)
    kw.update(layers=layers, mode=Mode.parse(mode), seed=int(seed))
    return NetworkSpec(**kw)


def run_job(spec: NetworkSpec, train_images: torch.Tensor, test_images: torch.Tensor,
            sweep: str = "synchronous") -> RunRecord:
    """Train one network and score it on the held-out set; failures become records."""
    mode = Mode.parse(spec.mode).value
    try:
        state, tlog = train(spec, train_images, test_images, sweep=sweep)
        last = tlog.records[-1]
        report = CostReport(last.layer_costs, spec.lambdas, mode, spec.seed, last.epoch,
                            int(test_images.shape[0]), last.mean_iterations, last.unconverged)
        if not np.isfinite(report.total):
            raise HSCError("non-finite test cost")
        return RunRecord(mode, spec.seed, spec.lambdas, report, tlog.totals(),
                         [r.mean_iterations for r in tlog.records])
    except (HSCError, ValueError, RuntimeError) as exc:
        log.error("cell %s seed %d (%s) failed: %s", spec.lambdas, spec.seed, mode, exc)
        return RunRecord(mode, spec.seed, spec.lambdas, None, error=f"{type(exc).__name__}: {exc}")


@dataclass
class SweepGrid:
    """Runs of every (λ1, λ2) cell, both modes and all seeds, plus median aggregates."""

    lambda1: list[float]
    lambda2: list[float]
    seeds: list[int]
    runs: dict[tuple[float, float], dict[str, list[RunRecord]]] = field(default_factory=dict)

    def cell_runs(self, l1: float, l2: float, mode) -> list[RunRecord]:
        return self.runs.get((float(l1), float(l2)), {}).get(Mode.parse(mode).value, [])

    def cell_valid(self, l1: float, l2: float) -> bool:
        cell = self.runs.get((float(l1), float(l2)), {})
        modes = [Mode.HILA.value, Mode.SPC.value]
        return all(cell.get(m) and all(r.valid for r in cell[m]) for m in modes)

    def _grid(self, mode, key: Callable[[RunRecord], float], stat: int = 0) -> np.ndarray:
        out = np.full((len(self.lambda1), len(self.lambda2)), np.nan)
        for a, l1 in enumerate(self.lambda1):
            for b, l2 in enumerate(self.lambda2):
                runs = [r for r in self.cell_runs(l1, l2, mode) if r.valid]
                if runs and self.cell_valid(l1, l2):
                    out[a, b] = median_mad([key(r) for r in runs])[stat]
        return out

    def median_total(self, mode) -> np.ndarray:
        return self._grid(mode, lambda r: r.report.total)

    def mad_total(self, mode) -> np.ndarray:
        return self._grid(mode, lambda r: r.report.total, 1)

    def median_iterations(self, mode) -> np.ndarray:
        return self._grid(mode, lambda r: r.report.mean_iterations)

    def median_epoch_total(self, mode, epoch: int) -> np.ndarray:
        return self._grid(mode, lambda r: r.epoch_totals[epoch - 1])

    def relative_difference(self) -> np.ndarray:
        """``(HiLa - SPC) / HiLa`` of the median totals; positive when SPC is cheaper."""
        h, s = self.median_total(Mode.HILA), self.median_total(Mode.SPC)
        return (h - s) / h

    def grid_rows(self):
        rel = self.relative_difference()
        stats = {m: (self.median_total(m), self.mad_total(m), self.median_iterations(m))
                 for m in ("hila", "spc")}
        for a, l1 in enumerate(self.lambda1):
            for b, l2 in enumerate(self.lambda2):
                unconv = sum(r.report.unconverged for m in ("hila", "spc")
                             for r in self.cell_runs(l1, l2, m) if r.valid)
                row = {"lambda1": l1, "lambda2": l2, "valid": int(self.cell_valid(l1, l2)),
                       "relative_difference": rel[a, b], "unconverged": unconv}
                for m, (med, mad, it) in stats.items():
                    row[f"{m}_median_total"] = med[a, b]
                    row[f"{m}_mad_total"] = mad[a, b]
                    row[f"{m}_median_iterations"] = it[a, b]
                yield row

    def cost_rows(self):
        for (l1, l2), cell in sorted(self.runs.items()):
            for mode in sorted(cell):
                for r in sorted(cell[mode], key=lambda r: r.seed):
                    if r.valid:
                        yield from r.report.rows([l1, l2])

    def to_dict(self) -> dict:
        return {
            "lambda1": self.lambda1, "lambda2": self.lambda2, "seeds": self.seeds,
            "relative_difference": self.relative_difference(),
            "median_total": {m: self.median_total(m) for m in ("hila", "spc")},
            "median_iterations": {m: self.median_iterations(m) for m in ("hila", "spc")},
            "invalid_cells": [[l1, l2] for l1 in self.lambda1 for l2 in self.lambda2
                              if not self.cell_valid(l1, l2)],
            "errors": [{"lambda1": l1, "lambda2": l2, "mode": m, "seed": r.seed, "error": r.error}
                       for (l1, l2), cell in sorted(self.runs.items()) for m in sorted(cell)
                       for r in cell[m] if r.error],
        }

    def export(self, out_dir) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        return {"grid_csv": write_csv(out_dir / "grid.csv", GRID_COLUMNS, self.grid_rows()),
                "costs_csv": write_csv(out_dir / "costs.csv", COST_COLUMNS, self.cost_rows()),
                "grid_json": write_json(out_dir / "grid.json", self.to_dict())}


def worker_count(requested: int | None = None) -> int:
    """Worker count: ``HSC_WORKERS`` overrides the requested value."""
    env = os.environ.get("HSC_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ParameterError(f"HSC_WORKERS must be an integer, got {env!r}") from None
    else:
        n = 1 if requested is None else int(requested)
    if n < 1:
        raise ParameterError(f"worker count must be >= 1, got {n}")
    return n


def sweep(template: NetworkSpec, lambda1: Sequence[float], lambda2: Sequence[float],
          seeds: Sequence[int], train_set, test_set, modes=(Mode.HILA, Mode.SPC),
          workers: int | None = None, out_dir=None, resume: bool = False,
          sweep_order: str = "synchronous") -> SweepGrid:
    """Train and score every (λ1, λ2, seed, mode) job and gather them in a grid.

    With ``out_dir`` every finished job is stored under ``runs/<fingerprint>.json``;
    ``resume`` reuses those files instead of retraining.  A failed job marks
    its cell invalid and the sweep goes on.
    """
    lambda1 = [float(v) for v in lambda1]
    lambda2 = [float(v) for v in lambda2]
    if not lambda1 or not lambda2 or not seeds:
        raise ParameterError("sweep ranges and seed list must be nonempty")
    if len(template.layers) < 2:
        raise ParameterError("a λ1 × λ2 sweep needs at least two layers")
    template.validate()
    train_x = getattr(train_set, "images", train_set)
    test_x = getattr(test_set, "images", test_set)
    data_key = "|".join(getattr(d, "fingerprint", "") + f":{len(x)}"
                        for d, x in ((train_set, train_x), (test_set, test_x)))
    runs_dir = None
    if out_dir is not None:
        runs_dir = Path(out_dir) / "runs"
        runs_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for l1 in lambda1:
        for l2 in lambda2:
            for mode in modes:
                for seed in seeds:
                    spec = cell_spec(template, [l1, l2], mode, seed)
                    jobs.append(((l1, l2), spec, job_fingerprint(spec, data_key, sweep_order)))

    results: dict[str, RunRecord] = {}
    todo = []
    for key, spec, fp in jobs:
        path = runs_dir / f"{fp}.json" if runs_dir else None
        if resume and path is not None and path.exists():
            results[fp] = RunRecord.from_dict(json.loads(path.read_text()))
            log.info("resume: reusing %s", path.name)
        else:
            todo.append((key, spec, fp))

    def store(fp, rec):
        results[fp] = rec
        if runs_dir is not None:
            # full precision so resumed cells aggregate exactly like fresh ones
            (runs_dir / f"{fp}.json").write_text(json.dumps(rec.to_dict(), sort_keys=True) + "\n")

    n_workers = worker_count(workers)
    if n_workers == 1 or len(todo) <= 1:
        for _, spec, fp in todo:
            store(fp, run_job(spec, train_x, test_x, sweep_order))
    else:
        with concurrent.futures.ProcessPoolExecutor(n_workers) as pool:
            futures = {pool.submit(run_job, spec, train_x, test_x, sweep_order): fp
                       for _, spec, fp in todo}
            for fut in concurrent.futures.as_completed(futures):
                store(futures[fut], fut.result())

    grid = SweepGrid(lambda1, lambda2, [int(s) for s in seeds])
    for key, spec, fp in jobs:
        rec = results[fp]
        grid.runs.setdefault(key, {}).setdefault(rec.mode, []).append(rec)
    return grid


# ---------------------------------------------------------------------------
# Mosaics


def tile_normalize(atom: np.ndarray) -> np.ndarray:
    """Min-max scale one ``[c, h, w]`` atom to ``uint8``; flat atoms map to 0."""
    a = np.asarray(atom, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255).astype(np.uint8)


def mosaic_array(atoms, order: Sequence[int] | None = None, exclude_top: bool = False,
                 cols: int | None = None, gap: int = 1) -> np.ndarray:
    """Tile atoms ``[F, c, h, w]`` into one ``[H, W]`` or ``[H, W, 3]`` uint8 image.

    Tiles follow ``order`` (default: atom index); ``exclude_top`` drops the
    first one.  Tiles are separated by ``gap`` white pixels.
    """
    atoms = np.asarray(atoms.detach().cpu() if isinstance(atoms, torch.Tensor) else atoms)
    if atoms.ndim != 4 or atoms.shape[1] not in (1, 3):
        raise ParameterError(f"atoms must be [F, 1 or 3, h, w], got {atoms.shape}")
    order = list(range(atoms.shape[0])) if order is None else [int(i) for i in order]
    if exclude_top:
        order = order[1:]
    if not order:
        raise ParameterError("no atoms left to draw")
    n = len(order)
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    c, h, w = atoms.shape[1:]
    canvas = np.full((c, rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap), 255, dtype=np.uint8)
    for k, f in enumerate(order):
        r, q = divmod(k, cols)
        canvas[:, r * (h + gap):r * (h + gap) + h, q * (w + gap):q * (w + gap) + w] = tile_normalize(atoms[f])
    return canvas[0] if c == 1 else canvas.transpose(1, 2, 0)


def export_mosaic(atoms, path, order: Sequence[int] | None = None, exclude_top: bool = False,
                  cols: int | None = None, png: bool = True) -> dict[str, Path]:
    """Write a mosaic as PGM/PPM (``path`` suffix replaced) and optionally PNG."""
    from matplotlib.image import imsave
    from PIL import Image

    arr = mosaic_array(atoms, order, exclude_top, cols)
    path = Path(path)
    net = path.with_suffix(".pgm" if arr.ndim == 2 else ".ppm")
    Image.fromarray(arr).save(net)
    out = {"netpbm": net}
    if png:
        out["png"] = path.with_suffix(".png")
        imsave(out["png"], arr, cmap="gray" if arr.ndim == 2 else None, vmin=0, vmax=255)
    return out


def layer_mosaics(state: NetworkState, out_dir, histograms: Sequence[ActivationHistogram] | None = None,
                  exclude_top: bool = False, png: bool = True) -> list[dict]:
    """Back-project every layer's atoms to image space and draw them sorted by activity."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    info = []
    for i in range(1, state.n_layers + 1):
        rf = effective_dictionary(state.dicts, i, state.image_shape[1:])
        order = histograms[i - 1].order if histograms else None
        files = export_mosaic(rf, out_dir / f"layer{i}", order, exclude_top, png=png)
        n_tiles = rf.shape[0] - (1 if exclude_top else 0)
        info.append({"layer": i, "tile_hw": list(rf.shape[2:]), "n_tiles": n_tiles,
                     "files": {k: v.name for k, v in files.items()}})
    return info
