"""Run configuration: a YAML file, validated before any compute.

Precedence, lowest first: built-in defaults, the config file, ``--set
key.path=value`` overrides, dedicated command-line flags.
"""

from __future__ import annotations

import copy
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import yaml

from .errors import SpecError
from .network import LayerSpec, Mode, NetworkSpec
from .solver import SWEEPS

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "hsc-out",
    "workers": 1,
    "data": {"source": "idx", "path": None, "test_path": None, "n_train": None, "n_test": None,
             "target_hw": None, "channels": 1, "split_ratio": 0.8},
    "preprocess": {"lcn": True, "lcn_window": 9, "lcn_epsilon": 1e-3, "whiten": "spectral"},
    "network": {"image_shape": None, "layers": []},
    "training": {"epochs": 1, "batch_size": 32, "momentum": 0.9},
    "inference": {"mode": "spc", "t_stab": 5e-4, "max_iters": 500, "sweep": "synchronous"},
    "sweep": {"lambda1": None, "lambda2": None, "seeds": None, "modes": ["hila", "spc"]},
}

DATA_SOURCES = ("idx", "image_dir", "cache")
WHITEN_METHODS = ("spectral", "zca", "none")

_RANGE = re.compile(r"^\s*([-+0-9.eE]+)\s*:\s*([-+0-9.eE]+)\s*::\s*([-+0-9.eE]+)\s*$")


class ConfigError(SpecError):
    """Invalid configuration; the message starts with the offending key path."""


def parse_range(text: str) -> list[float]:
    """``"a:b::s"`` -> ``[a, a+s, ..., b]`` (inclusive); plain numbers pass through."""
    m = _RANGE.match(str(text))
    if not m:
        try:
            return [float(text)]
        except ValueError:
            raise ConfigError(f"cannot parse range {text!r}; expected 'start:stop::step'") from None
    a, b, s = (float(v) for v in m.groups())
    if s <= 0 or b < a:
        raise ConfigError(f"range {text!r}: need step > 0 and stop >= start")
    n = int(round((b - a) / s))
    if abs(a + n * s - b) > 1e-9 * max(1.0, abs(b)):
        raise ConfigError(f"range {text!r}: stop is not a whole number of steps from start")
    return [round(a + k * s, 12) for k in range(n + 1)]


def parse_values(value) -> list[float]:
    """A λ axis: a list of numbers/ranges, a range string, or comma-separated mix."""
    if value is None:
        return []
    items = value if isinstance(value, (list, tuple)) else str(value).strip("[] ").split(",")
    out: list[float] = []
    for item in items:
        if isinstance(item, (int, float)) and not isinstance(item, bool):
            out.append(float(item))
        elif str(item).strip():
            out.extend(parse_range(str(item).strip()))
    return out


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def set_key(cfg: dict, dotted: str, value) -> None:
    """Set ``a.b.c`` in a nested dict; layer entries are addressed ``network.layers.0.lambda``."""
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        if isinstance(node, list):
            try:
                node = node[int(p)]
            except (ValueError, IndexError):
                raise ConfigError(f"{dotted}: no list entry {p!r}") from None
        else:
            node = node.setdefault(p, {})
    last = parts[-1]
    if isinstance(node, list):
        try:
            node[int(last)] = value
        except (ValueError, IndexError):
            raise ConfigError(f"{dotted}: no list entry {last!r}") from None
    else:
        node[last] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def _number(path: str, value, kind=float, minimum=None, strict=False):
    try:
        if isinstance(value, bool):
            raise ValueError
        v = kind(float(value)) if kind is int else float(value)
        if kind is int and float(value) != v:
            raise ValueError
    except (TypeError, ValueError):
        raise ConfigError(f"{path}: expected a {'integer' if kind is int else 'number'}, got {value!r}") from None
    if minimum is not None and (v <= minimum if strict else v < minimum):
        raise ConfigError(f"{path}: must be {'>' if strict else '>='} {minimum}, got {v}")
    return v


@dataclass
class RunConfig:
    """Validated configuration; ``raw`` is the merged dict echoed to the output dir."""

    raw: dict

    @classmethod
    def load(cls, path=None, overrides: Sequence[str] = (), flags: dict | None = None,
             need_network: bool = True) -> "RunConfig":
        cfg = copy.deepcopy(DEFAULTS)
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config: file {path} not found")
            try:
                loaded = yaml.safe_load(path.read_text()) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"config: YAML syntax error: {exc}") from None
            if not isinstance(loaded, dict):
                raise ConfigError("config: top level must be a mapping")
            unknown = sorted(set(loaded) - set(DEFAULTS))
            if unknown:
                raise ConfigError(f"{unknown[0]}: unknown top-level key")
            cfg = _merge(cfg, loaded)
        for text in overrides:
            set_key(cfg, *parse_override(text))
        for key, value in (flags or {}).items():
            if value is not None:
                set_key(cfg, key, value)
        return cls(cfg).validate(need_network)

    def section(self, name: str) -> dict:
        return self.raw[name]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def validate(self, need_network: bool = True) -> "RunConfig":
        r = self.raw
        r["seed"] = _number("seed", r["seed"], int, 0)
        r["workers"] = _number("workers", r["workers"], int, 1)
        d = r["data"]
        if d["source"] not in DATA_SOURCES:
            raise ConfigError(f"data.source: expected one of {', '.join(DATA_SOURCES)}, got {d['source']!r}")
        if not d.get("path"):
            raise ConfigError("data.path: required for source " + d["source"])
        for k in ("n_train", "n_test"):
            if d.get(k) is not None:
                d[k] = _number(f"data.{k}", d[k], int, 0)
        p = r["preprocess"]
        if p["whiten"] not in WHITEN_METHODS:
            raise ConfigError(f"preprocess.whiten: expected one of {', '.join(WHITEN_METHODS)}, got {p['whiten']!r}")
        p["lcn_window"] = _number("preprocess.lcn_window", p["lcn_window"], int, 1)
        if p["lcn_window"] % 2 == 0:
            raise ConfigError(f"preprocess.lcn_window: must be odd, got {p['lcn_window']}")
        p["lcn_epsilon"] = _number("preprocess.lcn_epsilon", p["lcn_epsilon"], float, 0, strict=True)
        t = r["training"]
        t["epochs"] = _number("training.epochs", t["epochs"], int, 1)
        t["batch_size"] = _number("training.batch_size", t["batch_size"], int, 1)
        t["momentum"] = _number("training.momentum", t["momentum"], float, 0)
        i = r["inference"]
        try:
            i["mode"] = Mode.parse(i["mode"]).value
        except ValueError as exc:
            raise ConfigError(f"inference.mode: {exc}") from None
        i["t_stab"] = _number("inference.t_stab", i["t_stab"], float, 0, strict=True)
        i["max_iters"] = _number("inference.max_iters", i["max_iters"], int, 1)
        if i["sweep"] not in SWEEPS:
            raise ConfigError(f"inference.sweep: expected one of {', '.join(SWEEPS)}, got {i['sweep']!r}")
        layers = r["network"]["layers"]
        if not isinstance(layers, list) or (need_network and not layers):
            raise ConfigError("network.layers: at least one layer is required")
        for k, layer in enumerate(layers):
            where = f"network.layers[{k}]"
            if not isinstance(layer, dict):
                raise ConfigError(f"{where}: expected a mapping")
            unknown = set(layer) - {"n_features", "in_channels", "kernel", "stride", "lambda", "eta_learn"}
            if unknown:
                raise ConfigError(f"{where}.{sorted(unknown)[0]}: unknown key")
            for key in ("n_features", "kernel", "lambda", "eta_learn"):
                if key not in layer:
                    raise ConfigError(f"{where}.{key}: required")
            layer["n_features"] = _number(f"{where}.n_features", layer["n_features"], int, 1)
            kern = layer["kernel"]
            kern = [kern, kern] if not isinstance(kern, (list, tuple)) else list(kern)
            if len(kern) != 2:
                raise ConfigError(f"{where}.kernel: expected k or [k_h, k_w]")
            layer["kernel"] = [_number(f"{where}.kernel", v, int, 1) for v in kern]
            layer["stride"] = _number(f"{where}.stride", layer.get("stride", 1), int, 1)
            layer["lambda"] = _number(f"{where}.lambda", layer["lambda"], float, 0)
            layer["eta_learn"] = _number(f"{where}.eta_learn", layer["eta_learn"], float, 0)
        shape = r["network"]["image_shape"]
        if shape is not None:
            if not isinstance(shape, (list, tuple)) or len(shape) != 3:
                raise ConfigError("network.image_shape: expected [channels, height, width]")
            r["network"]["image_shape"] = [_number("network.image_shape", v, int, 1) for v in shape]
        s = r["sweep"]
        for key in ("lambda1", "lambda2"):
            if s.get(key) is not None:
                s[key] = parse_values(s[key])
        if s.get("seeds") is not None:
            seeds = s["seeds"] if isinstance(s["seeds"], list) else [s["seeds"]]
            s["seeds"] = [_number("sweep.seeds", v, int, 0) for v in seeds]
        try:
            s["modes"] = [Mode.parse(m).value for m in s["modes"]]
        except ValueError as exc:
            raise ConfigError(f"sweep.modes: {exc}") from None
        if shape is not None and layers:
            self.network_spec()
        return self

    def network_spec(self, image_shape: Sequence[int] | None = None, mode=None,
                     seed: int | None = None) -> NetworkSpec:
        """Build and validate the network; ``in_channels`` chain from the image channels."""
        shape = image_shape or self.raw["network"]["image_shape"]
        if shape is None:
            raise ConfigError("network.image_shape: unknown until the dataset is loaded")
        channels = int(shape[0])
        layers = []
        for k, l in enumerate(self.raw["network"]["layers"]):
            c_in = l.get("in_channels", channels)
            if c_in != channels:
                raise ConfigError(f"network.layers[{k}].in_channels: expected {channels}, got {c_in}")
            layers.append(LayerSpec(l["n_features"], channels, tuple(l["kernel"]), l["stride"],
                                    l["lambda"], l["eta_learn"]))
            channels = l["n_features"]
        t, i = self.raw["training"], self.raw["inference"]
        spec = NetworkSpec(layers, tuple(shape), t_stab=i["t_stab"], epochs=t["epochs"],
                           batch_size=t["batch_size"], mode=mode or i["mode"],
                           seed=self.seed if seed is None else seed, max_iters=i["max_iters"],
                           momentum=t["momentum"])
        try:
            spec.validate()
        except SpecError as exc:
            raise ConfigError(f"network.{exc}") from None
        return spec

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.raw, sort_keys=True))
        return path
