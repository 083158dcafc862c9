"""Sample streams for the training distribution pi(dx, dy) and for particle
initialization, plus an IDX-format MNIST ingester reduced to binary digit-pair
regression.

Synthetic models keep every moment assumption checkable by construction:
inputs live on a cube or a truncated gaussian, targets are bounded teacher
outputs plus bounded uniform noise, and initial output weights come from laws
with finite exponential moments (compact support or truncated tails).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .core import (Activation, ConfigError, RejectedInputError, activation,
                   network_batch_output, network_output)
from .measure import EmpiricalMeasure

X_LAWS = ("uniform-cube", "truncated-gaussian")
_GAUSS_CUT = 3.0
_NDTR_CUT = ndtr(_GAUSS_CUT)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """An IDX file does not follow the big-endian MNIST layout."""


@dataclass(frozen=True)
class Batch:
    """Array-backed list of (x, y) samples."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.ndim != 1 or len(self.x) != len(self.y):
            raise RejectedInputError("batch needs x (n, d) and y (n,)")

    def __len__(self) -> int:
        return self.y.shape[0]

    def __iter__(self):
        return ((self.x[i], float(self.y[i])) for i in range(len(self)))

    def __getitem__(self, i):
        return self.x[i], float(self.y[i])


@dataclass(frozen=True, eq=False)
class DataModel:
    """A reproducible law pi(dx, dy).

    kind "teacher-network": y = teacher(x) + noise, teacher a small fixed
    network; with ``teacher_mean=True`` the teacher averages its units through
    the exact same code path as ``eval_network`` (so a cloud that equals the
    teacher reproduces y bit for bit -- the interpolation fixed point).
    kind "noisy-polynomial": y = a0 + a1.x + a2.x^2 + noise.
    kind "mnist-binary": x is a stored image in [0,1]^d, y in {-1, +1}.
    """

    kind: str
    d: int
    x_law: str = "uniform-cube"
    noise_scale: float = 0.0
    activation: Activation | None = None
    teacher_c: np.ndarray | None = None
    teacher_w: np.ndarray | None = None
    teacher_mean: bool = False
    poly: tuple | None = None
    images: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("teacher-network", "noisy-polynomial", "mnist-binary"):
            raise ConfigError(f"unknown data model kind {self.kind!r}")
        if self.kind != "mnist-binary":
            if self.x_law not in X_LAWS:
                raise ConfigError(f"unknown x law {self.x_law!r}")
            if self.noise_scale < 0:
                raise ConfigError("noise scale must be >= 0")
        if self.kind == "teacher-network":
            if self.teacher_c is None or self.teacher_w is None or self.activation is None:
                raise ConfigError("teacher-network needs units and an activation")
            if self.teacher_w.shape != (self.teacher_c.shape[0], self.d):
                raise ConfigError("teacher unit shapes disagree with d")
        if self.kind == "mnist-binary" and (self.images is None or self.labels is None):
            raise ConfigError("mnist-binary needs loaded images and labels")


def teacher_network(d: int = 2, act: Activation | None = None,
                    units: tuple[np.ndarray, np.ndarray] | None = None,
                    noise_scale: float = 0.0,
                    x_law: str = "uniform-cube") -> DataModel:
    """Teacher model y = sum_j a_j sigma(b_j . x) + noise*U[-1, 1]."""
    act = act or activation("tanh")
    if units is None:
        if d != 2:
            raise ConfigError("built-in teacher units exist only for d=2; "
                              "pass units=(a, B) explicitly")
        units = (np.array([1.2, -0.8, 0.5]),
                 np.array([[0.7, -0.4], [-0.3, 0.9], [1.1, 0.6]]))
    a, B = np.asarray(units[0], dtype=np.float64), np.asarray(units[1], dtype=np.float64)
    return DataModel("teacher-network", d, x_law, noise_scale, act, a, B)


def default_model(noise_scale: float = 0.25) -> DataModel:
    """The standard d=2 tanh teacher with bounded label noise."""
    return teacher_network(noise_scale=noise_scale)


def from_network(cloud, act: Activation, x_law: str = "uniform-cube",
                 noise_scale: float = 0.0) -> DataModel:
    """Teacher that IS the given network (mean over atoms, same code path)."""
    c = np.asarray(cloud.c, dtype=np.float64).copy()
    w = np.asarray(cloud.w, dtype=np.float64).copy()
    return DataModel("teacher-network", w.shape[1], x_law, noise_scale,
                     act, c, w, teacher_mean=True)


def noisy_polynomial(d: int, const: float = 0.0,
                     lin: Sequence[float] | None = None,
                     quad: Sequence[float] | None = None,
                     noise_scale: float = 0.1,
                     x_law: str = "uniform-cube") -> DataModel:
    lin = np.zeros(d) if lin is None else np.asarray(lin, dtype=np.float64)
    quad = np.zeros(d) if quad is None else np.asarray(quad, dtype=np.float64)
    if lin.shape != (d,) or quad.shape != (d,):
        raise ConfigError("polynomial coefficients must have length d")
    return DataModel("noisy-polynomial", d, x_law, noise_scale,
                     poly=(float(const), lin, quad))


def conditional_mean(model: DataModel, x: np.ndarray) -> np.ndarray:
    """E[y | x] for synthetic models (noise has mean zero)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if model.kind == "teacher-network":
        if model.teacher_mean:
            return np.array([network_output(model.teacher_c, model.teacher_w,
                                            model.activation, xi) for xi in x])
        s = model.activation.value(x @ model.teacher_w.T)
        return s @ model.teacher_c
    if model.kind == "noisy-polynomial":
        a0, a1, a2 = model.poly
        return a0 + x @ a1 + (x * x) @ a2
    raise ConfigError("conditional mean is undefined for mnist-binary")


def _sample_x(model: DataModel, rng: np.random.Generator, n: int) -> np.ndarray:
    if model.x_law == "uniform-cube":
        return rng.uniform(-1.0, 1.0, size=(n, model.d))
    u = rng.uniform(1.0 - _NDTR_CUT, _NDTR_CUT, size=(n, model.d))
    return ndtri(u)


def sample_data(model: DataModel, rng: np.random.Generator, n: int) -> Batch:
    """n i.i.d. draws from pi; deterministic given the generator state."""
    if n < 1:
        raise RejectedInputError("need n >= 1 samples")
    if model.kind == "mnist-binary":
        idx = rng.integers(0, model.images.shape[0], size=n)
        return Batch(model.images[idx], model.labels[idx])
    x = _sample_x(model, rng, n)
    y = conditional_mean(model, x)
    if model.noise_scale > 0:
        y = y + model.noise_scale * rng.uniform(-1.0, 1.0, size=n)
    return Batch(x, y)


# ---------------------------------------------------------------------------
# initialization laws

C_LAWS = ("uniform-interval", "truncated-exponential-tail")
W_LAWS = ("standard-gaussian", "uniform-cube")


@dataclass(frozen=True)
class InitLaw:
    """Law of one initial particle (c_0, w_0).

    c has compact support (interval) or a truncated exponential tail, so it
    always carries a finite exponential moment; w has finite fourth moment.
    """

    d: int
    c_law: str = "uniform-interval"
    c_params: tuple = (-1.0, 1.0)
    w_law: str = "standard-gaussian"
    w_scale: float = 1.0

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("d must be >= 1")
        if self.c_law not in C_LAWS:
            raise ConfigError(f"unknown c law {self.c_law!r}")
        if self.w_law not in W_LAWS:
            raise ConfigError(f"unknown w law {self.w_law!r}")
        if self.c_law == "uniform-interval":
            lo, hi = self.c_params
            if not lo <= hi:
                raise ConfigError("uniform interval needs lo <= hi")
        else:
            scale, cap = self.c_params
            if scale <= 0 or cap <= 0:
                raise ConfigError("exponential tail needs scale > 0 and cap > 0")
        if self.w_scale <= 0:
            raise ConfigError("w scale must be > 0")


def default_init(d: int) -> InitLaw:
    return InitLaw(d=d)


def sample_init(law: InitLaw, rng: np.random.Generator, n: int) -> EmpiricalMeasure:
    """n i.i.d. particles as an array-backed cloud (reads as a particle list).

    All coordinates come from one uniform block, one row per particle, pushed
    through inverse CDFs.  Because each particle consumes a fixed number of
    draws, the first n particles sampled at a larger size coincide with the
    n-particle sample from the same generator state: nested sizes are coupled
    by common random numbers, which is what keeps across-N trend comparisons
    quiet.
    """
    if n < 1:
        raise RejectedInputError("need n >= 1 particles")
    width = (1 if law.c_law == "uniform-interval" else 2) + law.d
    u = rng.random((n, width))
    if law.c_law == "uniform-interval":
        lo, hi = law.c_params
        c = lo + (hi - lo) * u[:, 0]
        uw = u[:, 1:]
    else:
        scale, cap = law.c_params
        mag = np.minimum(-scale * np.log1p(-u[:, 0]), cap)
        c = mag * np.where(u[:, 1] < 0.5, -1.0, 1.0)
        uw = u[:, 2:]
    if law.w_law == "standard-gaussian":
        tiny = np.finfo(np.float64).tiny
        w = law.w_scale * ndtri(np.clip(uw, tiny, 1.0 - 1e-16))
    else:
        w = law.w_scale * (2.0 * uw - 1.0)
    return EmpiricalMeasure(c, w)


def fourth_moments(model: DataModel, rng: np.random.Generator,
                   n: int = 100_000) -> tuple[float, float]:
    """Monte Carlo (E||x||^4, E|y|^4); both must be finite and seed-stable."""
    batch = sample_data(model, rng, n)
    nx = np.sum(batch.x * batch.x, axis=1)
    return float(np.mean(nx * nx)), float(np.mean(batch.y ** 4))


# ---------------------------------------------------------------------------
# MNIST IDX ingestion


def _read_exact(fh, count: int, what: str, path) -> bytes:
    buf = fh.read(count)
    if len(buf) != count:
        raise OSError(f"{path}: truncated while reading {what}: "
                      f"expected {count} bytes, got {len(buf)}")
    return buf


def read_idx_images(path) -> np.ndarray:
    """(n, rows, cols) uint8 pixels from a big-endian IDX3 file."""
    with open(path, "rb") as fh:
        header = _read_exact(fh, 16, "image header", path)
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != IMAGES_MAGIC:
            raise IdxFormatError(
                f"{path}: bad magic 0x{magic:08x} at offset 0, "
                f"expected 0x{IMAGES_MAGIC:08x} (big-endian IDX3 images)")
        raw = _read_exact(fh, n * rows * cols, f"{n} images", path)
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    """(n,) uint8 labels from a big-endian IDX1 file."""
    with open(path, "rb") as fh:
        header = _read_exact(fh, 8, "label header", path)
        magic, n = struct.unpack(">II", header)
        if magic != LABELS_MAGIC:
            raise IdxFormatError(
                f"{path}: bad magic 0x{magic:08x} at offset 0, "
                f"expected 0x{LABELS_MAGIC:08x} (big-endian IDX1 labels)")
        raw = _read_exact(fh, n, f"{n} labels", path)
    return np.frombuffer(raw, dtype=np.uint8).copy()


def write_idx_images(path, images: np.ndarray):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def load_mnist_idx(images_path, labels_path,
                   digit_pair: tuple[int, int]) -> DataModel:
    """Binary digit-pair regression stream from IDX files.

    Pixels are scaled to [0, 1]; the first digit of the pair maps to y = -1,
    the second to y = +1; all other digits are dropped.
    """
    lo_digit, hi_digit = int(digit_pair[0]), int(digit_pair[1])
    if lo_digit == hi_digit:
        raise ConfigError("digit pair must name two distinct digits")
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images_path} has {images.shape[0]} images but "
            f"{labels_path} has {labels.shape[0]} labels")
    keep = (labels == lo_digit) | (labels == hi_digit)
    if not np.any(keep):
        raise ConfigError(f"no samples of digits {digit_pair} in the files")
    x = images[keep].reshape(keep.sum(), -1).astype(np.float64) / 255.0
    y = np.where(labels[keep] == hi_digit, 1.0, -1.0)
    return DataModel("mnist-binary", x.shape[1], images=x, labels=y)
