"""Convolutional dictionary algebra.

A layer dictionary ``D`` holds ``n_features`` atoms of shape
``[in_channels, k_h, k_w]`` and a stride.  Seen as a matrix, ``D`` maps a
signal of the lower layer to a code (``encode``, a strided correlation) and
``D^T`` maps a code back to the signal space (``decode``, a strided
transposed convolution).  Boundaries are "valid": no padding is ever added
to the signal, so the matrix is exactly Toeplitz.

Tensors are 4-d ``[batch, channels, height, width]`` torch tensors.  The
dense :func:`toeplitz_expand` is written in plain numpy so that it can act
as an independent oracle for the torch kernels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConvergenceError, DimensionError, ParameterError

TOEPLITZ_MAX_ENTRIES = 10**7
EIG_MAX_ITERS = 500
EIG_RTOL = 1e-6
LANCZOS_BASIS = 30
FOLD_MAX_CHANNELS = 3


@dataclass
class ConvDictionary:
    """Decoding weights of one layer: ``[n_features, in_channels, k_h, k_w]``."""

    weights: torch.Tensor
    stride: int = 1

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise DimensionError(
                f"dictionary weights must be 4-d, got shape {tuple(self.weights.shape)}")
        if int(self.stride) < 1:
            raise ParameterError(f"stride must be a positive integer, got {self.stride}")
        self.stride = int(self.stride)

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]

    def code_hw(self, signal_hw: Sequence[int]) -> tuple[int, int]:
        """Spatial size of the code produced from a signal of size ``signal_hw``."""
        out = []
        for axis, size, k in zip(("height", "width"), signal_hw, self.kernel_size):
            if k > size:
                raise DimensionError(
                    f"kernel {axis} {k} exceeds signal {axis} {size}")
            out.append((size - k) // self.stride + 1)
        return out[0], out[1]

    def output_padding(self, signal_hw: Sequence[int]) -> tuple[int, int]:
        """Trailing rows/cols of ``signal_hw`` not reached by any atom."""
        code = self.code_hw(signal_hw)
        return tuple(
            size - ((c - 1) * self.stride + k)
            for size, c, k in zip(signal_hw, code, self.kernel_size))

    def copy(self) -> "ConvDictionary":
        return ConvDictionary(self.weights.clone(), self.stride)


def _check_4d(name, t):
    if t.ndim != 4:
        raise DimensionError(f"{name} must be 4-d [batch, channels, h, w], got {tuple(t.shape)}")


def decode(d: ConvDictionary, code: torch.Tensor, out_hw: Sequence[int] | None = None) -> torch.Tensor:
    """Back-project a code into the lower layer: ``D^T code``.

    ``out_hw`` selects the signal size when the stride leaves trailing rows or
    columns uncovered; those positions are zero in the output.
    """
    _check_4d("code", code)
    if code.shape[1] != d.n_features:
        raise DimensionError(
            f"code channel axis has {code.shape[1]} maps, dictionary has {d.n_features} atoms")
    base = [(c - 1) * d.stride + k for c, k in zip(code.shape[2:], d.kernel_size)]
    pad = [0, 0]
    if out_hw is not None:
        for j, axis in enumerate(("height", "width")):
            pad[j] = int(out_hw[j]) - base[j]
            if not 0 <= pad[j] < d.stride:
                raise DimensionError(
                    f"code {axis} {code.shape[2 + j]} cannot produce signal {axis} "
                    f"{out_hw[j]} with kernel {d.kernel_size[j]} and stride {d.stride}")
    code = code.to(d.weights.dtype)
    if d.in_channels <= FOLD_MAX_CHANNELS:
        # few output channels: a matmul + col2im beats the transposed conv kernel
        b, n, h, w = code.shape
        cols = d.weights.reshape(n, -1).t() @ code.reshape(b, n, h * w)
        out = [base[0] + pad[0], base[1] + pad[1]]
        return F.fold(cols, out, d.kernel_size, stride=d.stride)
    return F.conv_transpose2d(code, d.weights, stride=d.stride, output_padding=tuple(pad))


def encode(d: ConvDictionary, signal: torch.Tensor) -> torch.Tensor:
    """Correlate a signal with every atom: ``D signal`` (adjoint of :func:`decode`)."""
    _check_4d("signal", signal)
    if signal.shape[1] != d.in_channels:
        raise DimensionError(
            f"signal channel axis has {signal.shape[1]} channels, dictionary expects {d.in_channels}")
    d.code_hw(signal.shape[2:])
    return F.conv2d(signal.to(d.weights.dtype), d.weights, stride=d.stride)


def toeplitz_expand(d: ConvDictionary, input_dims: Sequence[int]) -> np.ndarray:
    """Materialize ``D`` as a dense ``(n_code, n_signal)`` float64 matrix.

    ``input_dims`` is ``(channels, height, width)`` of the signal.  Row order
    follows ``vec(code)`` and column order ``vec(signal)``, both row-major.
    """
    c, h, w = (int(v) for v in input_dims)
    if c != d.in_channels:
        raise DimensionError(f"input has {c} channels, dictionary expects {d.in_channels}")
    ho, wo = d.code_hw((h, w))
    n_rows, n_cols = d.n_features * ho * wo, c * h * w
    if n_rows * n_cols > TOEPLITZ_MAX_ENTRIES:
        raise ParameterError(
            f"dense expansion needs {n_rows * n_cols} entries, limit is {TOEPLITZ_MAX_ENTRIES}")
    weights = d.weights.detach().cpu().numpy().astype(np.float64)
    kh, kw = d.kernel_size
    s = d.stride
    mat = np.zeros((d.n_features, ho, wo, c, h, w))
    for f in range(d.n_features):
        for i in range(ho):
            for j in range(wo):
                mat[f, i, j, :, i * s:i * s + kh, j * s:j * s + kw] = weights[f]
    return mat.reshape(n_rows, n_cols)


def _eig_start(d: ConvDictionary, code_hw, seed):
    # same spatial pattern for every atom: the estimate does not depend on atom order
    rng = np.random.default_rng(seed)
    pattern = 1.0 + rng.random(code_hw)
    v = np.broadcast_to(pattern, (1, d.n_features) + tuple(code_hw))
    return torch.from_numpy(np.array(v))


def top_eigenpair(d: ConvDictionary, input_hw: Sequence[int], start: torch.Tensor | None = None,
                  seed: int = 0, max_iters: int = EIG_MAX_ITERS,
                  rtol: float = EIG_RTOL) -> tuple[float, torch.Tensor]:
    """Largest eigenvalue of ``c -> D D^T c`` and its (unit) eigenvector.

    Restarted Lanczos in float64 from ``start`` (a previous eigenvector, for
    warm restarts) or from a seeded positive vector.  Stops when the Ritz
    residual ``|D D^T u - theta u|`` falls below ``rtol * theta``, which
    bounds the eigenvalue error by the same amount.  ``max_iters`` counts
    operator applications.  Raises :class:`ConvergenceError` carrying the
    last Ritz value in ``last_value`` and its vector in ``vector``.
    """
    input_hw = tuple(int(v) for v in input_hw)
    d64 = ConvDictionary(d.weights.detach().to(torch.float64), d.stride)
    if not torch.any(d64.weights != 0):
        raise ParameterError("dictionary is identically zero")
    code_hw = d64.code_hw(input_hw)
    if start is None or tuple(start.shape) != (1, d64.n_features) + tuple(code_hw):
        start = _eig_start(d64, code_hw, seed)
    shape = (1, d64.n_features) + tuple(code_hw)
    v = start.to(torch.float64).reshape(-1)
    v = v / torch.linalg.vector_norm(v)

    def apply(x):
        return encode(d64, decode(d64, x.reshape(shape), input_hw)).reshape(-1)

    theta, u, applied = None, v, 0
    while applied < max_iters:
        basis, alphas, betas = [u], [], []
        for _ in range(min(LANCZOS_BASIS, max_iters - applied)):
            w = apply(basis[-1])
            applied += 1
            alphas.append(float(basis[-1] @ w))
            q = torch.stack(basis)
            for _ in range(2):  # full reorthogonalization, twice for stability
                w = w - q.t() @ (q @ w)
            beta = float(torch.linalg.vector_norm(w))
            t = torch.diag(torch.tensor(alphas, dtype=torch.float64))
            if betas:
                off = torch.tensor(betas, dtype=torch.float64)
                t += torch.diag(off, 1) + torch.diag(off, -1)
            vals, vecs = torch.linalg.eigh(t)
            theta, s = float(vals[-1]), vecs[:, -1]
            if theta <= 0:
                raise ParameterError("start vector lies in the dictionary null space")
            u = q.t() @ s
            u = u / torch.linalg.vector_norm(u)
            if beta * abs(float(s[-1])) <= rtol * theta:
                return theta, u.reshape(shape)
            betas.append(beta)
            basis.append(w / beta)
    exc = ConvergenceError(
        f"eigen solver did not reach rtol={rtol} in {max_iters} operator applications", last_value=theta)
    exc.vector = u.reshape(shape)
    raise exc


def largest_eigenvalue(d: ConvDictionary, input_hw: Sequence[int], seed: int = 0,
                       max_iters: int = EIG_MAX_ITERS, rtol: float = EIG_RTOL) -> float:
    """Largest eigenvalue of the code-space Gram operator ``c -> D D^T c`` (cold start)."""
    return top_eigenpair(d, input_hw, None, seed, max_iters, rtol)[0]


def spectral_step_size(d: ConvDictionary, input_hw: Sequence[int], seed: int = 0,
                       max_iters: int = EIG_MAX_ITERS, rtol: float = EIG_RTOL) -> float:
    """Inference step ``1 / lambda_max(D^T D)`` for signals of size ``input_hw``."""
    return 1.0 / largest_eigenvalue(d, input_hw, seed=seed, max_iters=max_iters, rtol=rtol)


def chain_shapes(dicts: Sequence[ConvDictionary], image_shape: Sequence[int]) -> list[tuple[int, int, int]]:
    """Signal shape ``(channels, h, w)`` seen by each layer, plus the top code.

    Entry ``i`` is the input of layer ``i + 1``; the last entry is the shape
    of the top layer's code.
    """
    shapes = [tuple(int(v) for v in image_shape)]
    for idx, d in enumerate(dicts, start=1):
        c, h, w = shapes[-1]
        if c != d.in_channels:
            raise DimensionError(
                f"layer {idx} expects {d.in_channels} input channels, "
                f"layer {idx - 1} provides {c}")
        shapes.append((d.n_features,) + d.code_hw((h, w)))
    return shapes


def effective_dictionary(dicts: Sequence[ConvDictionary], layer_index: int,
                         input_hw: Sequence[int] | None = None) -> torch.Tensor:
    """Project the atoms of layer ``layer_index`` (1-based) into image space.

    Each atom is decoded through ``D_{i-1}^T ... D_1^T``.  With ``input_hw``
    (the image size the network was built for) every lower layer keeps the
    output padding it uses on real data; without it the receptive field is
    the tight support.
    """
    n = len(dicts)
    if not 1 <= layer_index <= n:
        raise ParameterError(f"layer index {layer_index} outside 1..{n}")
    for j in range(1, layer_index):
        if dicts[j - 1].n_features != dicts[j].in_channels:
            raise DimensionError(
                f"boundary between layer {j} and layer {j + 1}: {dicts[j - 1].n_features} "
                f"atoms feed {dicts[j].in_channels} channels")
    pads = [(0, 0)] * n
    if input_hw is not None:
        c0 = dicts[0].in_channels
        shapes = chain_shapes(dicts[:layer_index], (c0,) + tuple(input_hw))
        pads = [dicts[j].output_padding(shapes[j][1:]) for j in range(layer_index)]
    rf = dicts[layer_index - 1].weights.clone()
    for j in range(layer_index - 2, -1, -1):
        d = dicts[j]
        base_hw = [(s - 1) * d.stride + k for s, k in zip(rf.shape[2:], d.kernel_size)]
        out_hw = [b + p for b, p in zip(base_hw, pads[j])]
        rf = decode(d, rf, out_hw)
    return rf
