"""Dictionary learning by alternating inference and SGD steps.

For each training batch the codes are inferred with frozen dictionaries,
then every dictionary takes one momentum-SGD step on the quadratic part of
its layer loss and its atoms are renormalized.  The loss is the same for
both inference modes because the top-down term does not involve ``D_i``.
"""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch.nn.grad import conv2d_weight

from .conv import ConvDictionary, decode
from .errors import DimensionError, FormatError, HSCError, NumericalError
from .network import NetworkSpec, NetworkState
from .solver import Evaluation, InferenceConfig, evaluate, infer

log = logging.getLogger(__name__)

DTYPE = torch.float32
CHECKPOINT_MAGIC = b"HSC1"


class TrainingAborted(HSCError):
    """Training hit a non-finite value; ``state`` is the last good state."""

    def __init__(self, message, state, epoch):
        super().__init__(message)
        self.state = state
        self.epoch = epoch


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def dict_gradient(d: ConvDictionary, gamma_prev: torch.Tensor, gamma: torch.Tensor) -> torch.Tensor:
    """Gradient of ``1/2 |g_prev - D^T g|^2`` w.r.t. the kernels, batch-averaged."""
    if gamma.shape[0] != gamma_prev.shape[0]:
        raise DimensionError(
            f"batch axis: codes have {gamma.shape[0]} items, signals {gamma_prev.shape[0]}")
    residual = gamma_prev.to(d.weights.dtype) - decode(d, gamma, gamma_prev.shape[-2:])
    grad = conv2d_weight(residual, d.weights.shape, gamma.to(d.weights.dtype), stride=d.stride)
    return -grad / gamma.shape[0]


def normalize_atoms(d: ConvDictionary, rng=None) -> ConvDictionary:
    """Scale every atom to unit l2 norm; all-zero atoms are redrawn from N(0, 1)."""
    w = d.weights.clone()
    flat = w.reshape(w.shape[0], -1)
    norms = torch.linalg.vector_norm(flat.to(torch.float64), dim=1)
    dead = torch.nonzero(norms == 0).flatten()
    if len(dead):
        rng = _as_rng(rng)
        log.warning("re-initializing %d dead atom(s)", len(dead))
        for f in dead.tolist():
            flat[f] = torch.from_numpy(rng.standard_normal(flat.shape[1])).to(w.dtype)
        norms = torch.linalg.vector_norm(flat.to(torch.float64), dim=1)
    flat /= norms.to(w.dtype)[:, None]
    return ConvDictionary(w, d.stride)


def sgd_momentum_step(state: NetworkState, i: int, gradient: torch.Tensor, eta_learn: float,
                      momentum: float = 0.9, rng=None) -> ConvDictionary:
    """``v <- momentum v + g; W <- W - eta v``, renormalize, refresh the step size.

    A non-finite gradient leaves the layer untouched and raises
    :class:`NumericalError`.
    """
    d = state.dicts[i]
    if gradient.shape != d.weights.shape:
        raise DimensionError(
            f"gradient shape {tuple(gradient.shape)} differs from weights {tuple(d.weights.shape)}")
    if not torch.isfinite(gradient).all():
        log.error("layer %d: non-finite dictionary gradient, update skipped", i + 1)
        raise NumericalError(f"non-finite dictionary gradient in layer {i + 1}", layer=i + 1)
    velocity = momentum * state.momenta[i] + gradient.to(state.momenta[i].dtype)
    state.momenta[i] = velocity
    if eta_learn == 0:
        # renormalizing unit atoms is not bit-idempotent in float32
        return d
    updated = ConvDictionary(d.weights - eta_learn * velocity.to(d.weights.dtype), d.stride)
    state.dicts[i] = normalize_atoms(updated, rng)
    state.refresh_step(i)
    return state.dicts[i]


def init_state(spec: NetworkSpec, seed: int | None = None) -> NetworkState:
    """Standard-normal dictionaries with unit-norm atoms and zero velocities."""
    spec.validate()
    seed = spec.seed if seed is None else int(seed)
    rng = np.random.default_rng(seed)
    dicts = []
    for layer in spec.layers:
        w = rng.standard_normal((layer.n_features, layer.in_channels) + layer.kernel)
        dicts.append(normalize_atoms(ConvDictionary(torch.from_numpy(w).to(DTYPE), layer.stride), rng))
    momenta = [torch.zeros_like(d.weights) for d in dicts]
    return NetworkState(dicts, momenta, spec.lambdas, spec.image_shape, seed=seed)


@dataclass
class EpochRecord:
    epoch: int
    layer_costs: list[tuple[float, float]]
    mean_iterations: float
    unconverged: int
    seconds: float

    @property
    def total(self) -> float:
        return float(sum(q + l for q, l in self.layer_costs))


@dataclass
class TrainLog:
    """One record per completed epoch, evaluated on the held-out set."""

    records: list[EpochRecord] = field(default_factory=list)

    def totals(self) -> list[float]:
        return [r.total for r in self.records]

    def __len__(self):
        return len(self.records)


def _images(data) -> torch.Tensor:
    images = getattr(data, "images", data)
    if not isinstance(images, torch.Tensor):
        images = torch.as_tensor(np.asarray(images))
    return images


def inference_config(spec: NetworkSpec, **overrides) -> InferenceConfig:
    kw = dict(mode=spec.mode, t_stab=spec.t_stab, max_iters=spec.max_iters)
    kw.update(overrides)
    return InferenceConfig(**kw)


def train(spec: NetworkSpec, train_set, test_set, state: NetworkState | None = None,
          on_epoch: Callable[[EpochRecord, NetworkState], None] | None = None,
          sweep: str = "synchronous") -> tuple[NetworkState, TrainLog]:
    """Alternate inference and learning for ``spec.epochs`` epochs.

    Batches are drawn from a per-epoch shuffle seeded by ``spec.seed``.
    After each epoch the held-out set is scored with learning off.
    """
    spec.validate()
    if state is None:
        state = init_state(spec)
    train_x = _images(train_set).to(DTYPE)
    test_x = _images(test_set).to(DTYPE)
    if train_x.shape[0] == 0:
        raise ValueError("training set is empty")
    cfg = inference_config(spec, sweep=sweep)
    seeds = np.random.SeedSequence(spec.seed)
    order_rng, atom_rng = (np.random.default_rng(s) for s in seeds.spawn(2))
    tlog = TrainLog()
    n = train_x.shape[0]
    for _ in range(spec.epochs):
        epoch = state.epoch + 1
        tic = time.perf_counter()
        last_good = state.copy()
        try:
            order = torch.from_numpy(order_rng.permutation(n))
            for start in range(0, n, spec.batch_size):
                xb = train_x[order[start:start + spec.batch_size]]
                res = infer(state, xb, cfg)
                lowers = [xb] + res.gammas[:-1]
                grads = [dict_gradient(d, low, g)
                         for d, low, g in zip(state.dicts, lowers, res.gammas)]
                for i, (grad, layer) in enumerate(zip(grads, spec.layers)):
                    sgd_momentum_step(state, i, grad, layer.eta_learn, spec.momentum, atom_rng)
            ev = evaluate(state, test_x, cfg, spec.batch_size) if test_x.shape[0] else None
        except NumericalError as exc:
            raise TrainingAborted(f"epoch {epoch}: {exc}", last_good, epoch) from exc
        if ev is not None and not np.isfinite(ev.total):
            raise TrainingAborted(f"epoch {epoch}: non-finite test cost", last_good, epoch)
        state.epoch = epoch
        rec = _record(epoch, ev, len(spec.layers), time.perf_counter() - tic)
        tlog.records.append(rec)
        log.info("epoch %d: test cost %.6g, %.1f iterations (%.1fs)",
                 epoch, rec.total, rec.mean_iterations, rec.seconds)
        if on_epoch is not None:
            on_epoch(rec, state)
    return state, tlog


def _record(epoch, ev: Evaluation | None, n_layers, seconds) -> EpochRecord:
    if ev is None:
        return EpochRecord(epoch, [(float("nan"), float("nan"))] * n_layers, float("nan"), 0, seconds)
    return EpochRecord(epoch, ev.mean_terms(), float(ev.iterations.mean()),
                       int((~ev.converged).sum()), seconds)


# Checkpoint layout (little-endian):
#   b"HSC1", u32 n_layers, u32 image c/h/w,
#   per layer: u32 n_features, in_channels, k_h, k_w, stride; f64 lambda, eta_c,
#   f32 weights of every layer, f32 momenta of every layer,
#   i64 seed, u64 epoch.
_LAYER = struct.Struct("<5Idd")


def save_checkpoint(state: NetworkState, path) -> Path:
    path = Path(path)
    parts = [CHECKPOINT_MAGIC, struct.pack("<4I", state.n_layers, *state.image_shape)]
    for d, lam, eta in zip(state.dicts, state.lambdas, state.eta_c):
        parts.append(_LAYER.pack(*d.weights.shape, d.stride, float(lam), float(eta)))
    for t in [d.weights for d in state.dicts] + list(state.momenta):
        parts.append(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    parts.append(struct.pack("<qQ", int(state.seed), int(state.epoch)))
    path.write_bytes(b"".join(parts))
    return path


def load_checkpoint(path) -> NetworkState:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("bad magic: not an HSC1 checkpoint", offset=0)
    pos = 4

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"checkpoint truncated while reading {what}", offset=pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    n_layers, c, h, w = struct.unpack("<4I", take(16, "header"))
    layers = [_LAYER.unpack(take(_LAYER.size, f"layer {i + 1} header")) for i in range(n_layers)]

    def tensor(shape, what):
        count = int(np.prod(shape))
        arr = np.frombuffer(take(4 * count, what), dtype="<f4").reshape(shape)
        return torch.from_numpy(arr.astype(np.float32))

    dicts = [ConvDictionary(tensor(lay[:4], f"layer {i + 1} weights"), lay[4])
             for i, lay in enumerate(layers)]
    momenta = [tensor(lay[:4], f"layer {i + 1} momentum") for i, lay in enumerate(layers)]
    seed, epoch = struct.unpack("<qQ", take(16, "trailer"))
    if pos != len(buf):
        raise FormatError("trailing bytes after checkpoint trailer", offset=pos)
    # stored step sizes keep inference identical to the run that wrote the file
    return NetworkState(dicts, momenta, [lay[5] for lay in layers], (c, h, w),
                        eta_c=[lay[6] for lay in layers], seed=seed, epoch=epoch)
