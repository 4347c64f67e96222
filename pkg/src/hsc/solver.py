"""Proximal inference for stacked convolutional sparse coding layers.

Both models run the same accelerated loop; the predictive-coding variant
adds, for every non-top layer, the top-down error between the layer's state
and the prediction coming from the layer above.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .conv import ConvDictionary, decode, encode
from .errors import DimensionError, NumericalError, ParameterError
from .network import Mode, NetworkState


@dataclass
class LayerHyperParams:
    lam: float
    eta_c: float

    def __post_init__(self):
        if self.lam < 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")
        if not self.eta_c > 0:
            raise ParameterError(f"eta_c must be > 0, got {self.eta_c}")


SWEEPS = ("synchronous", "in-place")


@dataclass
class InferenceConfig:
    """Stopping rule and model choice for :func:`infer`.

    ``sweep="synchronous"`` lets every layer read its neighbours'
    extrapolated states from the start of the iteration.  ``"in-place"``
    makes a layer read the lower layer's state already refreshed in the same
    iteration; with feedback enabled that ordering tends to oscillate.
    """

    mode: Mode = Mode.SPC
    t_stab: float = 5e-4
    max_iters: int = 500
    sweep: str = "synchronous"

    def __post_init__(self):
        self.mode = Mode.parse(self.mode)
        if self.sweep not in SWEEPS:
            raise ParameterError(f"sweep must be one of {SWEEPS}, got {self.sweep!r}")
        if not self.t_stab > 0:
            raise ParameterError(f"t_stab must be > 0, got {self.t_stab}")
        if self.max_iters < 1:
            raise ParameterError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass
class InferenceResult:
    """Outcome of :func:`infer` for a batch.

    ``iterations`` and ``converged`` hold one entry per image; an image that
    never met the stopping rule reports ``max_iters`` and ``False``.
    """

    gammas: list[torch.Tensor]
    iterations: np.ndarray
    per_layer_residuals: list[torch.Tensor]
    converged: np.ndarray

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))


def soft_threshold_nonneg(v: torch.Tensor, alpha: float) -> torch.Tensor:
    """Elementwise ``max(v - alpha, 0)``; ``alpha = 0`` is a ReLU."""
    if alpha < 0:
        raise ParameterError(f"threshold must be >= 0, got {alpha}")
    return torch.clamp(v - alpha, min=0)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def _sq(t):
    return torch.sum(t.to(torch.float64) ** 2, dim=tuple(range(1, t.ndim)))


def _l1(t):
    return torch.sum(torch.abs(t.to(torch.float64)), dim=tuple(range(1, t.ndim)))


def lasso_cost(d: ConvDictionary, gamma_prev: torch.Tensor, gamma: torch.Tensor, lam: float,
               reduction: str = "sum"):
    """Quadratic and l1 terms of ``1/2 |g_prev - D^T g|^2 + lam |g|_1``.

    ``reduction="sum"`` returns two floats summed over the batch;
    ``"none"`` returns two float64 tensors with one entry per image.
    """
    residual = gamma_prev - decode(d, gamma, gamma_prev.shape[-2:])
    quad = 0.5 * _sq(residual)
    l1 = lam * _l1(gamma)
    if reduction == "none":
        return quad, l1
    return float(quad.sum()), float(l1.sum())


def spc_cost(d_i: ConvDictionary, gamma_prev: torch.Tensor, gamma_i: torch.Tensor, lam: float,
             d_next: ConvDictionary | None = None, gamma_next: torch.Tensor | None = None):
    """Lasso terms plus the top-down quadratic ``1/2 |g_i - D_next^T g_next|^2``.

    The top layer (no ``d_next``) has no top-down term.
    """
    quad, l1 = lasso_cost(d_i, gamma_prev, gamma_i, lam)
    if (d_next is None) != (gamma_next is None):
        raise ParameterError("d_next and gamma_next must be given together")
    topdown = 0.0
    if d_next is not None:
        pred = decode(d_next, gamma_next, gamma_i.shape[-2:])
        _same_shape(gamma_i, pred, "top-down prediction")
        topdown = float(0.5 * _sq(gamma_i - pred).sum())
    return quad, l1, topdown


def layer_update(gamma_i: torch.Tensor, gamma_prev: torch.Tensor, d_i: ConvDictionary,
                 hp: LayerHyperParams, feedback: torch.Tensor | None = None,
                 prediction: torch.Tensor | None = None) -> torch.Tensor:
    """One proximal step on a layer.

    ``T(g + eta D (g_prev - D^T g) - eta feedback)`` with threshold
    ``eta * lam``.  Without ``feedback`` this is the plain Lasso step.
    ``prediction`` may carry a precomputed ``D^T g``.
    """
    if prediction is None:
        prediction = decode(d_i, gamma_i, gamma_prev.shape[-2:])
    residual = gamma_prev - prediction
    drive = encode(d_i, residual)
    _same_shape(gamma_i, drive, "layer state vs. encoded residual")
    pre = gamma_i + hp.eta_c * drive
    if feedback is not None:
        _same_shape(gamma_i, feedback, "layer state vs. feedback")
        pre = pre - hp.eta_c * feedback
    return soft_threshold_nonneg(pre, hp.eta_c * hp.lam)


def fista_alpha_next(alpha_t: float) -> float:
    if alpha_t < 1:
        raise ParameterError(f"momentum strength must be >= 1, got {alpha_t}")
    return (1.0 + math.sqrt(1.0 + 4.0 * alpha_t * alpha_t)) / 2.0


def fista_momentum(gamma_t: torch.Tensor, gamma_prev_t: torch.Tensor, alpha_t: float,
                   alpha_next: float) -> torch.Tensor:
    """Extrapolated point ``T_0(g_t + (a_t - 1)/a_{t+1} (g_t - g_{t-1}))``."""
    _same_shape(gamma_t, gamma_prev_t, "momentum")
    coef = (alpha_t - 1.0) / alpha_next
    return soft_threshold_nonneg(gamma_t + coef * (gamma_t - gamma_prev_t), 0.0)


def relative_change(new: torch.Tensor, old: torch.Tensor) -> torch.Tensor:
    """Per-image ``|new - old| / |new|`` (float64).

    An all-zero ``new`` counts as unchanged only if ``old`` is zero too.
    """
    return _relative_change(new, old)[0]


def _norm(t):
    return torch.linalg.vector_norm(t.flatten(1), dim=1, dtype=torch.float64)


def _relative_change(new, old):
    # also returns |new| per image, which is non-finite iff new is
    num = _norm(new - old)
    den = _norm(new)
    ratio = num / torch.where(den > 0, den, torch.ones_like(den))
    undefined = (den == 0) & (num > 0)
    return torch.where(undefined, torch.full_like(ratio, math.inf), ratio), den


def stability_reached(gammas_t: Sequence[torch.Tensor], gammas_prev: Sequence[torch.Tensor],
                      t_stab: float) -> bool:
    """True iff every layer (and every image in the batch) moved less than ``t_stab``."""
    if len(gammas_t) != len(gammas_prev):
        raise DimensionError("layer lists differ in length")
    return all(bool(torch.all(relative_change(g, p) < t_stab)) for g, p in zip(gammas_t, gammas_prev))


def infer(state: NetworkState, x: torch.Tensor, cfg: InferenceConfig) -> InferenceResult:
    """Run joint inference on a batch with frozen dictionaries.

    Every image starts from zero codes and unit momentum strength.  Layers
    are swept bottom-up; by default each one reads the extrapolated states of
    its neighbours as they were at the start of the iteration (see
    :class:`InferenceConfig`).  Images leave the loop individually once all
    their layers are stable.
    """
    if x.ndim != 4:
        raise DimensionError(f"input must be 4-d [batch, channels, h, w], got {tuple(x.shape)}")
    shapes = state.signal_shapes()
    if tuple(x.shape[1:]) != shapes[0]:
        raise DimensionError(f"input images are {tuple(x.shape[1:])}, network expects {shapes[0]}")
    dicts = state.dicts
    dtype = dicts[0].weights.dtype
    x = x.to(dtype)
    n_layers = len(dicts)
    hps = [LayerHyperParams(lam, eta) for lam, eta in zip(state.lambdas, state.eta_c)]
    spc = cfg.mode is Mode.SPC
    in_place = cfg.sweep == "in-place"
    batch = x.shape[0]

    gammas = [torch.zeros((batch,) + s, dtype=dtype) for s in shapes[1:]]
    extrap = [g.clone() for g in gammas]
    iterations = np.zeros(batch, dtype=np.int64)
    converged = np.zeros(batch, dtype=bool)
    active = torch.arange(batch)
    alpha = 1.0
    t = 0
    while len(active) and t < cfg.max_iters:
        t += 1
        alpha_next = fista_alpha_next(alpha)
        whole = len(active) == batch
        xa = x if whole else x[active]
        prev = gammas if whole else [g[active] for g in gammas]
        ext = list(extrap) if whole else [g[active] for g in extrap]
        start = ext if in_place else list(ext)
        # D_i^T g_i from the states at the start of the sweep; each serves the
        # layer's own residual and the feedback of the layer below
        preds = [decode(d, e, s[1:]) for d, e, s in zip(dicts, ext, shapes)]
        new = []
        stable = torch.ones(len(active), dtype=torch.bool)
        for i in range(n_layers):
            lower = xa if i == 0 else start[i - 1]
            feedback = None
            if spc and i < n_layers - 1:
                feedback = ext[i] - preds[i + 1]
            g = layer_update(ext[i], lower, dicts[i], hps[i], feedback, preds[i])
            change, size = _relative_change(g, prev[i])
            if not torch.isfinite(size).all():
                raise NumericalError(f"non-finite state in layer {i + 1} at iteration {t}",
                                     layer=i + 1, iteration=t)
            ext[i] = fista_momentum(g, prev[i], alpha, alpha_next)
            new.append(g)
            stable &= change < cfg.t_stab
        if whole:
            gammas, extrap = new, ext
        else:
            for i in range(n_layers):
                gammas[i][active] = new[i]
                extrap[i][active] = ext[i]
        idx = active.numpy()
        iterations[idx] = t
        converged[idx[stable.numpy()]] = True
        active = active[~stable]
        alpha = alpha_next

    residuals = []
    lower = x
    for d, g in zip(dicts, gammas):
        residuals.append(lower - decode(d, g, lower.shape[-2:]))
        lower = g
    return InferenceResult(gammas, iterations, residuals, converged)


@dataclass
class Evaluation:
    """Per-image results of inference over a whole image set.

    ``quadratic`` and ``l1`` are ``[N, L]`` float64 arrays of the Lasso
    terms of every layer; ``active`` (when collected) holds one ``[N, F_i]``
    boolean array per layer telling whether atom ``f`` fired anywhere in
    image ``n``.
    """

    quadratic: np.ndarray
    l1: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    active: list[np.ndarray] | None = None

    @property
    def n_images(self) -> int:
        return self.quadratic.shape[0]

    def mean_terms(self) -> list[tuple[float, float]]:
        q = self.quadratic.mean(axis=0)
        l = self.l1.mean(axis=0)
        return [(float(a), float(b)) for a, b in zip(q, l)]

    @property
    def total(self) -> float:
        return float(self.quadratic.mean(axis=0).sum() + self.l1.mean(axis=0).sum())


def evaluate(state: NetworkState, images: torch.Tensor, cfg: InferenceConfig,
             batch_size: int = 32, collect_activity: bool = False) -> Evaluation:
    """Infer every image (in order, by batches) and score it with the Lasso loss.

    The loss is the same for both models: the top-down term is used for
    inference only.
    """
    if images.shape[0] == 0:
        raise ParameterError("cannot evaluate an empty image set")
    quads, l1s, iters, conv = [], [], [], []
    active = [[] for _ in state.dicts] if collect_activity else None
    for start in range(0, images.shape[0], batch_size):
        xb = images[start:start + batch_size]
        res = infer(state, xb, cfg)
        lower = xb.to(state.dicts[0].weights.dtype)
        q_cols, l_cols = [], []
        for i, (d, g, lam) in enumerate(zip(state.dicts, res.gammas, state.lambdas)):
            q, l = lasso_cost(d, lower, g, lam, reduction="none")
            q_cols.append(q.numpy())
            l_cols.append(l.numpy())
            if collect_activity:
                active[i].append((g > 0).flatten(2).any(dim=2).numpy())
            lower = g
        quads.append(np.stack(q_cols, axis=1))
        l1s.append(np.stack(l_cols, axis=1))
        iters.append(res.iterations)
        conv.append(res.converged)
    return Evaluation(
        np.concatenate(quads), np.concatenate(l1s), np.concatenate(iters), np.concatenate(conv),
        [np.concatenate(a) for a in active] if collect_activity else None)
