"""Dataset ingestion and image normalization.

Images are held as float32 tensors ``[N, channels, height, width]``.  Every
transform appends a step to the dataset provenance, and a transform refuses
to run twice on the same data.
"""

from __future__ import annotations

import copy
import gzip
import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .conv import ConvDictionary, chain_shapes, decode
from .errors import FormatError, ParameterError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATASET_MAGIC = b"HSD1"

LCN_WINDOW = 9
LCN_EPSILON = 1e-3
WHITEN_F0 = 0.8


@dataclass
class Dataset:
    images: torch.Tensor
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ParameterError(f"images must be [N, c, h, w], got {tuple(self.images.shape)}")
        self.images = self.images.to(torch.float32)
        self.provenance.setdefault("steps", [])
        self.provenance.setdefault("warnings", [])

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def steps(self) -> list[str]:
        return [s["op"] for s in self.provenance["steps"]]

    @property
    def fingerprint(self) -> str:
        blob = json.dumps({"source": self.provenance.get("source"),
                           "steps": self.provenance["steps"]}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def derive(self, images: torch.Tensor, step: dict | None = None, **extra) -> "Dataset":
        prov = copy.deepcopy(self.provenance)
        if step is not None:
            prov["steps"].append(step)
        prov.update(extra)
        return Dataset(images, self.split, prov)

    def subset(self, n: int) -> "Dataset":
        """First ``n`` images (order preserved)."""
        return self.derive(self.images[:n].clone(), None, subset=n)


def _require_fresh(ds: Dataset, op: str):
    if op in ds.steps:
        raise ParameterError(f"{op} already applied to this dataset (fingerprint {ds.fingerprint})")


# ---------------------------------------------------------------------------
# Local contrast normalization


def gaussian_window(window: int, sigma: float | None = None) -> torch.Tensor:
    sigma = window / 4.0 if sigma is None else sigma
    r = torch.arange(window, dtype=torch.float64) - (window - 1) / 2
    g = torch.exp(-(r ** 2) / (2 * sigma ** 2))
    k = torch.outer(g, g)
    return k / k.sum()


def local_mean(x: torch.Tensor, window: int = LCN_WINDOW, sigma: float | None = None) -> torch.Tensor:
    """Gaussian-weighted mean over a window and all channels, ``[N, 1, h, w]``.

    Near the border the weights are renormalized over the pixels that exist.
    """
    x = x.to(torch.float64)
    c = x.shape[1]
    k = gaussian_window(window, sigma)
    kernel = k.expand(1, c, window, window) / c
    pad = window // 2
    num = F.conv2d(x, kernel, padding=pad)
    cover = F.conv2d(torch.ones((1, c) + tuple(x.shape[2:]), dtype=torch.float64), kernel, padding=pad)
    return num / cover


def lcn(images: torch.Tensor, window: int = LCN_WINDOW, epsilon: float = LCN_EPSILON,
        sigma: float | None = None) -> torch.Tensor:
    """Subtract the local mean, then divide by ``max(local std, epsilon)``.

    Accepts ``[c, h, w]`` or ``[N, c, h, w]``; channels share one local mean
    and one local std.
    """
    single = images.ndim == 3
    x = images[None] if single else images
    if window < 1 or window % 2 == 0:
        raise ParameterError(f"LCN window must be a positive odd integer, got {window}")
    if window > min(x.shape[2:]):
        raise ParameterError(f"LCN window {window} exceeds image size {tuple(x.shape[2:])}")
    if not epsilon > 0:
        raise ParameterError(f"LCN epsilon must be > 0, got {epsilon}")
    x64 = x.to(torch.float64)
    centered = x64 - local_mean(x64, window, sigma)
    std = torch.sqrt(local_mean(centered ** 2, window, sigma))
    out = (centered / torch.clamp(std, min=epsilon)).to(images.dtype)
    return out[0] if single else out


def lcn_dataset(ds: Dataset, window: int = LCN_WINDOW, epsilon: float = LCN_EPSILON) -> Dataset:
    _require_fresh(ds, "lcn")
    out = lcn(ds.images, window, epsilon)
    return ds.derive(out, {"op": "lcn", "window": window, "epsilon": epsilon,
                           "sigma": window / 4.0})


# ---------------------------------------------------------------------------
# Whitening


def whitening_filter(h: int, w: int, f0_ratio: float = WHITEN_F0) -> torch.Tensor:
    """``|f| exp(-(|f|/f0)^4)`` on the ``fft2`` grid, ``f0 = f0_ratio * Nyquist``."""
    if h < 2 and w < 2:
        raise ParameterError("cannot whiten 1x1 images")
    fy = torch.fft.fftfreq(h, dtype=torch.float64)
    fx = torch.fft.fftfreq(w, dtype=torch.float64)
    rho = torch.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    f0 = f0_ratio * 0.5
    return rho * torch.exp(-((rho / f0) ** 4))


@dataclass
class Whitener:
    """Reusable whitening operator; fit on training data, applied to any split.

    ``method="spectral"`` multiplies each channel's spectrum by a fixed
    radial filter.  ``method="zca"`` decorrelates pixels with the training
    covariance.  In both cases ``gain`` rescales the output so the training
    pixels have unit standard deviation.
    """

    method: str = "spectral"
    f0_ratio: float = WHITEN_F0
    zca_epsilon: float = 1e-2
    gain: float = 1.0
    zca_matrix: torch.Tensor | None = None

    def _raw(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        x64 = x.to(torch.float64)
        if self.method == "spectral":
            filt = whitening_filter(h, w, self.f0_ratio)
            return torch.fft.ifft2(torch.fft.fft2(x64) * filt).real
        if self.method == "zca":
            if self.zca_matrix is None:
                raise ParameterError("ZCA whitener used before fit")
            flat = x64.reshape(n, -1)
            return (flat @ self.zca_matrix).reshape(n, c, h, w)
        raise ParameterError(f"unknown whitening method {self.method!r}")

    def fit(self, x: torch.Tensor) -> "Whitener":
        if min(x.shape[2:]) < 2:
            raise ParameterError("cannot whiten 1x1 images")
        if self.method == "zca":
            flat = x.to(torch.float64).reshape(x.shape[0], -1)
            flat = flat - flat.mean(dim=0)
            cov = flat.T @ flat / max(flat.shape[0] - 1, 1)
            evals, evecs = torch.linalg.eigh(cov)
            self.zca_matrix = evecs @ torch.diag(1.0 / torch.sqrt(evals.clamp(min=0) + self.zca_epsilon)) @ evecs.T
        self.gain = 1.0
        std = float(self._raw(x).std())
        self.gain = 1.0 / std if std > 0 else 1.0
        return self

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return (self._raw(x) * self.gain).to(x.dtype)

    def describe(self) -> dict:
        return {"op": "whiten", "method": self.method, "f0_ratio": self.f0_ratio,
                "gain": self.gain}


def whiten(ds: Dataset, whitener: Whitener | None = None, method: str = "spectral") -> tuple[Dataset, Whitener]:
    """Whiten a dataset; without ``whitener`` one is fit on ``ds`` and returned."""
    _require_fresh(ds, "whiten")
    if min(ds.image_shape[1:]) < 2:
        raise ParameterError("cannot whiten 1x1 images")
    if whitener is None:
        whitener = Whitener(method=method).fit(ds.images)
    return ds.derive(whitener(ds.images), whitener.describe()), whitener


def preprocess_pair(train: Dataset, test: Dataset, window: int = LCN_WINDOW,
                    epsilon: float = LCN_EPSILON, method: str = "spectral") -> tuple[Dataset, Dataset]:
    """LCN then whitening, with the whitener fit on the training split only."""
    train = lcn_dataset(train, window, epsilon)
    test = lcn_dataset(test, window, epsilon) if len(test) else test
    train, wh = whiten(train, method=method)
    if len(test):
        test, _ = whiten(test, wh)
    return train, test


# ---------------------------------------------------------------------------
# IDX files


def _open_bytes(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".gz":
        data = gzip.decompress(data)
    return data


def read_idx(path) -> np.ndarray:
    """Raw ``uint8`` array stored in an IDX image (0x803) or label (0x801) file."""
    buf = _open_bytes(path)
    if len(buf) < 4:
        raise FormatError("file too short for an IDX magic number", offset=len(buf))
    (magic,) = struct.unpack(">I", buf[:4])
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise FormatError(f"bad IDX magic 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError("IDX header truncated", offset=len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    need = int(np.prod(dims))
    if len(buf) - header < need:
        raise FormatError(f"IDX payload truncated: expected {need} bytes after the header, "
                          f"found {len(buf) - header}", offset=len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> Path:
    array = np.asarray(array)
    if array.dtype != np.uint8 or array.ndim not in (1, 3):
        raise ParameterError("IDX export takes uint8 arrays of rank 1 (labels) or 3 (images)")
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    blob = struct.pack(f">I{array.ndim}I", magic, *array.shape) + np.ascontiguousarray(array).tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(blob, mtime=0) if path.suffix == ".gz" else blob)
    return path


def load_idx(path, split: str = "train") -> Dataset:
    """Image IDX file as a dataset with pixels scaled to [0, 1]."""
    raw = read_idx(path)
    if raw.ndim != 3:
        raise FormatError(f"{path} holds labels, not images", offset=0)
    images = torch.from_numpy(raw.astype(np.float32) / 255.0)[:, None]
    return Dataset(images, split, {"source": {"kind": "idx", "path": Path(path).name}})


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        p = directory / name
        if p.exists():
            return p
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist(directory) -> tuple[Dataset, Dataset]:
    """Train and test splits from the standard MNIST file names."""
    directory = Path(directory)
    train = load_idx(_find(directory, "train-images-idx3-ubyte"), "train")
    test = load_idx(_find(directory, "t10k-images-idx3-ubyte"), "test")
    for stem in ("train-labels-idx1-ubyte", "t10k-labels-idx1-ubyte"):
        try:
            read_idx(_find(directory, stem))
        except FileNotFoundError:
            pass
    return train, test


# ---------------------------------------------------------------------------
# Image folders

IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".pbm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif"}


def load_image_dir(path, target_hw: Sequence[int], channels: int = 1, split_ratio: float = 0.8,
                   seed: int = 0) -> tuple[Dataset, Dataset]:
    """Read, convert and bilinearly resize every image of a folder, then split.

    Files are taken in alphabetical order, shuffled with ``seed`` and the
    first ``ceil(split_ratio * N)`` go to the training split.  Unreadable
    files are skipped with a warning recorded in the provenance.
    """
    from PIL import Image

    if channels not in (1, 3):
        raise ParameterError(f"channels must be 1 or 3, got {channels}")
    if not 0 < split_ratio <= 1:
        raise ParameterError(f"split_ratio must be in (0, 1], got {split_ratio}")
    h, w = (int(v) for v in target_hw)
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    arrays, names, warnings = [], [], []
    for p in files:
        try:
            with Image.open(p) as im:
                im = im.convert("L" if channels == 1 else "RGB").resize((w, h), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except Exception as exc:  # PIL raises a zoo of types for bad files
            msg = f"skipped unreadable file {p.name}: {exc}"
            log.warning(msg)
            warnings.append(msg)
            continue
        arrays.append(arr[None] if channels == 1 else arr.transpose(2, 0, 1))
        names.append(p.name)
    if not arrays:
        raise ParameterError(f"no readable images in {path}")
    perm = np.random.default_rng(seed).permutation(len(arrays))
    n_train = math.ceil(split_ratio * len(arrays))
    if n_train == len(arrays):
        msg = f"split_ratio {split_ratio} leaves the test split empty"
        log.warning(msg)
        warnings.append(msg)
    stacked = torch.from_numpy(np.stack(arrays))
    source = {"kind": "image_dir", "path": str(path), "target_hw": [h, w], "channels": channels,
              "split_ratio": split_ratio, "seed": seed}
    out = []
    for split, idx in (("train", perm[:n_train]), ("test", perm[n_train:])):
        images = stacked[torch.from_numpy(idx)] if len(idx) else torch.zeros((0, channels, h, w))
        out.append(Dataset(images, split, {"source": source, "warnings": list(warnings),
                                           "files": [names[i] for i in idx]}))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass
class SyntheticSpec:
    """Images generated by decoding sparse top-layer codes through known dictionaries."""

    dicts: list[ConvDictionary]
    image_shape: tuple[int, int, int]
    n_images: int
    n_active: int = 1
    noise_std: float = 0.0
    seed: int = 0
    amplitude: tuple[float, float] = (1.0, 2.0)


def generate_synthetic(spec: SyntheticSpec, split: str = "train") -> tuple[Dataset, torch.Tensor]:
    """Dataset plus the ground-truth top-layer codes ``[N, F_L, h_L, w_L]``."""
    shapes = chain_shapes(spec.dicts, spec.image_shape)
    top = shapes[-1]
    n_code = int(np.prod(top))
    if not 0 <= spec.n_active <= n_code:
        raise ParameterError(f"n_active={spec.n_active} outside 0..{n_code} code entries")
    rng = np.random.default_rng(spec.seed)
    codes = np.zeros((spec.n_images, n_code))
    lo, hi = spec.amplitude
    for k in range(spec.n_images):
        pos = rng.choice(n_code, size=spec.n_active, replace=False)
        codes[k, pos] = rng.uniform(lo, hi, size=spec.n_active)
    codes_t = torch.from_numpy(codes.reshape((spec.n_images,) + top))
    x = codes_t
    for d, shape in zip(reversed(spec.dicts), reversed(shapes[:-1])):
        x = decode(ConvDictionary(d.weights.to(torch.float64), d.stride), x, shape[1:])
    if spec.noise_std > 0:
        x = x + spec.noise_std * torch.from_numpy(rng.standard_normal(tuple(x.shape)))
    source = {"kind": "synthetic", "n_images": spec.n_images, "n_active": spec.n_active,
              "noise_std": spec.noise_std, "seed": spec.seed}
    return Dataset(x.to(torch.float32), split, {"source": source}), codes_t


# ---------------------------------------------------------------------------
# Dataset cache: b"HSD1", u32 ndim, u32 dims..., f32 payload, u32 json length, json


def save_dataset(ds: Dataset, path) -> Path:
    meta = dict(ds.provenance, split=ds.split)
    blob = json.dumps(meta, sort_keys=True).encode()
    dims = tuple(ds.images.shape)
    parts = [DATASET_MAGIC, struct.pack(f"<I{len(dims)}I", len(dims), *dims),
             ds.images.contiguous().numpy().astype("<f4").tobytes(),
             struct.pack("<I", len(blob)), blob]
    path = Path(path)
    path.write_bytes(b"".join(parts))
    return path


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:4] != DATASET_MAGIC:
        raise FormatError("bad magic: not an HSD1 dataset file", offset=0)
    try:
        (ndim,) = struct.unpack_from("<I", buf, 4)
        dims = struct.unpack_from(f"<{ndim}I", buf, 8)
        pos = 8 + 4 * ndim
        count = int(np.prod(dims))
        if pos + 4 * count + 4 > len(buf):
            raise FormatError("dataset payload truncated", offset=len(buf))
        images = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
        pos += 4 * count
        (n_json,) = struct.unpack_from("<I", buf, pos)
        meta = json.loads(buf[pos + 4:pos + 4 + n_json].decode())
    except struct.error as exc:
        raise FormatError(f"dataset header truncated: {exc}", offset=len(buf)) from None
    split = meta.pop("split", "train")
    return Dataset(torch.from_numpy(images.astype(np.float32)), split, meta)
