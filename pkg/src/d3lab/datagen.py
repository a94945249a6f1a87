"""Synthetic datasets with controllable noise, plus binary PGM image I/O."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .nn.rng import Rng

REGRESSION = "regression"
CLASSIFICATION = "classification"
INR = "inr"


@dataclass(frozen=True)
class NoiseMeta:
    kind: str = "none"  # none | gaussian | label_corruption
    sigma: float = 0.0
    corruption_rate: float = 0.0
    noise_seed: int = 0
    realized_E: float | None = None

    def __post_init__(self):
        if self.kind not in ("none", "gaussian", "label_corruption"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError("corruption rate must lie in [0, 1]")


@dataclass(frozen=True)
class Dataset:
    """Training inputs with noisy targets and, when known, the clean ones.

    Regression/INR targets are float arrays of shape (N, k); classification
    targets are integer label vectors of shape (N,).
    """

    xs: np.ndarray
    ys_noisy: np.ndarray
    task: str
    ys_clean: np.ndarray | None = None
    noise_meta: NoiseMeta = field(default_factory=NoiseMeta)
    n_classes: int | None = None
    image_shape: tuple | None = None

    def __post_init__(self):
        n = len(self.xs)
        if n < 1:
            raise ValueError("dataset must contain at least one sample")
        if len(self.ys_noisy) != n:
            raise ValueError("xs and ys_noisy lengths differ")
        if self.ys_clean is not None and len(self.ys_clean) != n:
            raise ValueError("xs and ys_clean lengths differ")
        if self.task == CLASSIFICATION:
            K = self.n_classes
            if K is None or K < 2:
                raise ValueError("classification datasets need n_classes >= 2")
            for ys in (self.ys_noisy, self.ys_clean):
                if ys is not None and (ys.min() < 0 or ys.max() >= K):
                    raise ValueError("class labels must lie in [0, K)")
        elif self.task not in (REGRESSION, INR):
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def N(self) -> int:
        return len(self.xs)

    @property
    def input_dim(self) -> int:
        return self.xs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.n_classes if self.task == CLASSIFICATION else self.ys_noisy.shape[1]

    @property
    def has_clean(self) -> bool:
        return self.ys_clean is not None


# ----------------------------------------------------------------------
# regression


def sigmoid_target(x, literal: bool = False) -> np.ndarray:
    """2/(1+e^-x) - 1, i.e. tanh(x/2).

    ``literal=True`` evaluates 2/(1-e^-x) - 1 instead, which has a pole at 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if literal:
        with np.errstate(divide="ignore", invalid="ignore"):
            return 2.0 / (1.0 - np.exp(-x)) - 1.0
    return np.tanh(x / 2.0)


def gen_sigmoid_regression(
    N: int = 100,
    domain_lo: float = -2.0,
    domain_hi: float = 2.0,
    sigma: float = 0.5,
    seed: int = 0,
    literal: bool = False,
) -> Dataset:
    if N < 1:
        raise ValueError("N must be >= 1")
    if not domain_lo < domain_hi:
        raise ValueError("domain_lo must be below domain_hi")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = Rng(seed, "sigmoid")
    x = rng.uniform(domain_lo, domain_hi, (N, 1))
    y_clean = sigmoid_target(x, literal)
    noise = rng.child("noise").normal(0.0, 1.0, (N, 1))
    y_noisy = y_clean + sigma * noise
    return Dataset(
        x, y_noisy, REGRESSION, y_clean, NoiseMeta("gaussian" if sigma else "none", sigma, 0.0, seed)
    )


# ----------------------------------------------------------------------
# classification


def gen_blob_classification(
    N: int, K: int, input_dim: int, spread: float, seed: int, center_scale: float = 1.0
) -> Dataset:
    """K isotropic Gaussian clusters with (as near as possible) equal counts.

    Centers are N(0, center_scale^2 I); samples are center + spread * N(0, I).
    """
    if K < 2:
        raise ValueError("need K >= 2 classes")
    if N < K:
        raise ValueError("need N >= K")
    if spread <= 0:
        raise ValueError("spread must be positive")
    rng = Rng(seed, "blobs")
    centers = rng.child("centers").normal(0.0, center_scale, (K, input_dim))
    labels = rng.child("labels").permutation(np.arange(N) % K)
    xs = centers[labels] + spread * rng.child("points").normal(0.0, 1.0, (N, input_dim))
    return Dataset(xs, labels.copy(), CLASSIFICATION, labels.copy(), NoiseMeta(), n_classes=K)


def corrupt_labels(ds: Dataset, rate: float, seed: int) -> Dataset:
    """Redraw exactly round(rate*N) labels uniformly over all K classes.

    The true class is among the candidates, so the realized noise level E is
    about rate*(K-1)/K.  Clean labels are retained.
    """
    if ds.task != CLASSIFICATION:
        raise ValueError("label corruption applies to classification datasets only")
    if not 0.0 <= rate <= 1.0:
        raise ValueError("corruption rate must lie in [0, 1]")
    clean = ds.ys_clean if ds.ys_clean is not None else ds.ys_noisy
    n_corrupt = int(np.floor(rate * ds.N + 0.5))
    rng = Rng(seed, "corrupt")
    labels = ds.ys_noisy.copy()
    if n_corrupt:
        idx = np.sort(rng.choice(ds.N, n_corrupt, replace=False))
        labels[idx] = rng.child("labels").integers(0, ds.n_classes, n_corrupt)
    E = float(np.mean(labels != clean))
    meta = NoiseMeta("label_corruption" if rate else "none", 0.0, rate, seed, E)
    return replace(ds, ys_noisy=labels, ys_clean=clean.copy(), noise_meta=meta)


# ----------------------------------------------------------------------
# implicit neural representation


def pixel_coordinates(height: int, width: int) -> np.ndarray:
    """Row-major (x, y) coordinates in [-1, 1]^2; pixel (0, 0) maps to (-1, -1)."""
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def gen_inr_dataset(image: np.ndarray, sigma: float, seed: int) -> Dataset:
    """Pixel-coordinate regression onto a grayscale image.

    ``sigma`` is on the 0..255 scale.  Noise is added first and the result is
    clipped to [0, 1].
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("expected a non-empty 2-D grayscale image")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    h, w = img.shape
    clean = img.reshape(-1, 1)
    noise = Rng(seed, "pixel-noise").normal(0.0, 1.0, clean.shape)
    noisy = np.clip(clean + (sigma / 255.0) * noise, 0.0, 1.0)
    meta = NoiseMeta("gaussian" if sigma else "none", sigma, 0.0, seed)
    return Dataset(pixel_coordinates(h, w), noisy, INR, clean.copy(), meta, image_shape=(h, w))


def ramp_image(height: int = 64, width: int = 64, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    return np.tile(np.linspace(lo, hi, width), (height, 1))


def checkerboard_image(height: int = 64, width: int = 64, cell: int = 8, lo=0.2, hi=0.8) -> np.ndarray:
    r = (np.arange(height) // cell)[:, None]
    c = (np.arange(width) // cell)[None, :]
    return np.where((r + c) % 2 == 0, hi, lo).astype(np.float64)


def scene_image(height: int = 64, width: int = 64) -> np.ndarray:
    """Smooth shading, a disc and a bar: a small stand-in for a natural photo."""
    g = pixel_coordinates(height, width)
    x, y = g[:, 0], g[:, 1]
    img = 0.45 + 0.2 * np.sin(2.0 * x + 1.0) * np.cos(1.5 * y)
    img = np.where((x - 0.3) ** 2 + (y + 0.2) ** 2 < 0.16, 0.85, img)
    img = np.where((np.abs(x + 0.45) < 0.12) & (np.abs(y) < 0.7), 0.15, img)
    return np.clip(img, 0.0, 1.0).reshape(height, width)


def synthetic_image(kind: str, height: int = 64, width: int = 64) -> np.ndarray:
    makers = {"ramp": ramp_image, "checkerboard": checkerboard_image, "scene": scene_image}
    if kind not in makers:
        raise ValueError(f"unknown synthetic image {kind!r}")
    return makers[kind](height, width)


# ----------------------------------------------------------------------
# PGM (P5) I/O

_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def load_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM with maxval 255; returns floats in [0, 1]."""
    blob = Path(path).read_bytes()
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PGM_TOKEN.match(blob, pos)
        if m is None:
            raise ValueError("malformed PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ValueError(f"unsupported PGM magic {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ValueError("malformed PGM header") from exc
    if maxval != 255:
        raise ValueError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    payload = blob[pos : pos + width * height]
    if len(payload) != width * height:
        raise ValueError("truncated PGM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width) / 255.0


def save_pgm(img: np.ndarray, path) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("expected a 2-D grayscale image")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


# ----------------------------------------------------------------------


def export_csv(ds: Dataset, path) -> None:
    """One row per sample: inputs, noisy targets, clean targets (if known)."""
    ycols = 1 if ds.task == CLASSIFICATION else ds.ys_noisy.shape[1]
    header = [f"x{i}" for i in range(ds.input_dim)]
    header += [f"y_noisy{i}" for i in range(ycols)]
    if ds.has_clean:
        header += [f"y_clean{i}" for i in range(ycols)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.N):
            row = [repr(float(v)) for v in ds.xs[i]]
            row += [str(v) if ds.task == CLASSIFICATION else repr(float(v)) for v in np.atleast_1d(ds.ys_noisy[i])]
            if ds.has_clean:
                row += [str(v) if ds.task == CLASSIFICATION else repr(float(v)) for v in np.atleast_1d(ds.ys_clean[i])]
            writer.writerow(row)
