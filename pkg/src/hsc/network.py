"""Network architecture description and mutable learned state."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .conv import ConvDictionary, chain_shapes, top_eigenpair
from .errors import ConvergenceError, SpecError

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    """Inference variant: independent Lasso layers or predictive coding with feedback."""

    HILA = "hila"
    SPC = "spc"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {"hila": cls.HILA, "lasso": cls.HILA, "spc": cls.SPC, "2lspc": cls.SPC}
        if key not in aliases:
            raise SpecError(f"unknown mode {value!r}; expected 'hila' or 'spc'")
        return aliases[key]


@dataclass
class LayerSpec:
    n_features: int
    in_channels: int
    kernel: tuple[int, int]
    stride: int = 1
    lam: float = 0.1
    eta_learn: float = 1e-3

    def __post_init__(self):
        self.kernel = tuple(int(k) for k in self.kernel)


@dataclass
class NetworkSpec:
    """Architecture plus every training/inference tunable."""

    layers: list[LayerSpec]
    image_shape: tuple[int, int, int]
    t_stab: float = 5e-4
    epochs: int = 1
    batch_size: int = 32
    mode: Mode = Mode.SPC
    seed: int = 0
    max_iters: int = 500
    momentum: float = 0.9

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self.mode = Mode.parse(self.mode)

    @property
    def lambdas(self) -> list[float]:
        return [layer.lam for layer in self.layers]

    def validate(self) -> "NetworkSpec":
        if not self.layers:
            raise SpecError("layers: at least one layer is required")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise SpecError(f"image_shape: expected (channels, height, width), got {self.image_shape}")
        channels = self.image_shape[0]
        for i, layer in enumerate(self.layers, start=1):
            if layer.in_channels != channels:
                raise SpecError(
                    f"layers[{i}].in_channels: expected {channels} "
                    f"(output of layer {i - 1}), got {layer.in_channels}")
            if layer.n_features < 1 or min(layer.kernel) < 1 or layer.stride < 1:
                raise SpecError(f"layers[{i}]: sizes and stride must be positive")
            if layer.lam < 0:
                raise SpecError(f"layers[{i}].lambda must be >= 0, got {layer.lam}")
            if layer.eta_learn < 0:
                raise SpecError(f"layers[{i}].eta_learn must be >= 0, got {layer.eta_learn}")
            channels = layer.n_features
        if not self.t_stab > 0:
            raise SpecError(f"t_stab must be > 0, got {self.t_stab}")
        if self.epochs < 1:
            raise SpecError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise SpecError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_iters < 1:
            raise SpecError(f"max_iters must be >= 1, got {self.max_iters}")
        # kernels must fit the signal they act on
        try:
            chain_shapes([ConvDictionary(torch.zeros(l.n_features, l.in_channels, *l.kernel), l.stride)
                          for l in self.layers], self.image_shape)
        except ValueError as exc:
            raise SpecError(f"layers: {exc}") from None
        return self


@dataclass
class NetworkState:
    """Learned dictionaries, their SGD velocities and cached inference steps."""

    dicts: list[ConvDictionary]
    momenta: list[torch.Tensor]
    lambdas: list[float]
    image_shape: tuple[int, int, int]
    eta_c: list[float] = field(default_factory=list)
    seed: int = 0
    epoch: int = 0

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self._eigvecs: dict[int, torch.Tensor] = {}
        self._eig_weights: dict[int, torch.Tensor] = {}
        if not self.eta_c:
            self.eta_c = [0.0] * len(self.dicts)
            for i in range(len(self.dicts)):
                self.refresh_step(i)

    @property
    def n_layers(self) -> int:
        return len(self.dicts)

    def signal_shapes(self) -> list[tuple[int, int, int]]:
        return chain_shapes(self.dicts, self.image_shape)

    def refresh_step(self, i: int) -> float:
        """Recompute the inference step of layer ``i`` (0-based) after ``D_i`` changed."""
        hw = self.signal_shapes()[i][1:]
        seen = self._eig_weights.get(i)
        if seen is not None and torch.equal(seen, self.dicts[i].weights):
            return self.eta_c[i]
        self._eig_weights[i] = self.dicts[i].weights.clone()
        # warm restart from the previous eigenvector: D moves little per update
        try:
            value, self._eigvecs[i] = top_eigenpair(self.dicts[i], hw, self._eigvecs.get(i))
        except ConvergenceError as exc:
            log.warning("layer %d: %s; using last Rayleigh quotient %.6g", i + 1, exc, exc.last_value)
            value, self._eigvecs[i] = exc.last_value, exc.vector
        self.eta_c[i] = 1.0 / value
        return self.eta_c[i]

    def with_lambdas(self, lambdas: Sequence[float]) -> "NetworkState":
        if len(lambdas) != self.n_layers:
            raise SpecError(f"expected {self.n_layers} lambdas, got {len(lambdas)}")
        out = NetworkState([d.copy() for d in self.dicts], [m.clone() for m in self.momenta],
                           [float(v) for v in lambdas], self.image_shape, list(self.eta_c),
                           self.seed, self.epoch)
        out._eigvecs = {i: v.clone() for i, v in self._eigvecs.items()}
        out._eig_weights = {i: w.clone() for i, w in self._eig_weights.items()}
        return out

    def copy(self) -> "NetworkState":
        return self.with_lambdas(self.lambdas)
