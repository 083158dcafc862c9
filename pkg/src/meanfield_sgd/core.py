"""Domain types shared by every module: particles, activations, bounded test
functions, and the deterministic randomness contract.

Conventions used across the package:

* a "cloud" of ``n`` particles is a pair of arrays ``c`` of shape ``(n,)`` and
  ``w`` of shape ``(n, d)``; single particles are :class:`ParticleState`;
* evaluators are pure, vectorized over particles, and safe to share;
* everything that consumes randomness takes a ``numpy.random.Generator``
  obtained from :class:`RandomStreams`, never global state.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class RejectedInputError(ValueError):
    """An operation received input violating its stated preconditions."""


class ConfigError(ValueError):
    """A configuration value is outside the supported whitelist or malformed."""


class DivergedError(RuntimeError):
    """A run produced non-finite or absurdly large parameters."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


# ---------------------------------------------------------------------------
# particles


@dataclass(frozen=True)
class ParticleState:
    """One unit of the network: output weight ``c`` and input weights ``w``."""

    c: float
    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1 or w.size < 1:
            raise RejectedInputError("w must be a vector with d >= 1")
        if not (np.isfinite(self.c) and np.all(np.isfinite(w))):
            raise RejectedInputError("particle parameters must be finite")
        object.__setattr__(self, "w", w)

    @property
    def d(self) -> int:
        return self.w.shape[0]


# ---------------------------------------------------------------------------
# activations

#: documented suprema of |sigma|, |sigma'|, |sigma''| per kind
ACTIVATION_SUPS = {
    "tanh": (1.0, 1.0, 4.0 / (3.0 * math.sqrt(3.0))),
    "logistic": (1.0, 0.25, 1.0 / (6.0 * math.sqrt(3.0))),
    "smooth-bump": (1.0, math.exp(-0.5), 1.0),
}


@dataclass(frozen=True)
class Activation:
    """A twice continuously differentiable, bounded activation.

    ``value``, ``deriv`` and ``deriv2`` are vectorized callables; the ``sup_*``
    fields are the analytically known suprema of their absolute values, kept on
    the object so bound checks never have to rediscover them.
    """

    kind: str
    value: Callable[[np.ndarray], np.ndarray]
    deriv: Callable[[np.ndarray], np.ndarray]
    deriv2: Callable[[np.ndarray], np.ndarray]
    sup_value: float
    sup_deriv: float
    sup_deriv2: float
    #: optional algebraic shortcut sigma'(z) as a function of sigma(z); lets
    #: large kernels skip a second transcendental pass when one exists
    deriv_from_value: Callable[[np.ndarray], np.ndarray] | None = None


def _tanh_dfv(v):
    return 1.0 - v * v


def _logistic_dfv(v):
    return v * (1.0 - v)


def _tanh_d1(z):
    t = np.tanh(z)
    return 1.0 - t * t


def _tanh_d2(z):
    t = np.tanh(z)
    return -2.0 * t * (1.0 - t * t)


def _logistic_d1(z):
    s = expit(z)
    return s * (1.0 - s)


def _logistic_d2(z):
    s = expit(z)
    return s * (1.0 - s) * (1.0 - 2.0 * s)


def _bump(z):
    z = np.asarray(z)
    return np.exp(-0.5 * z * z)


def _bump_d1(z):
    z = np.asarray(z)
    return -z * np.exp(-0.5 * z * z)


def _bump_d2(z):
    z = np.asarray(z)
    return (z * z - 1.0) * np.exp(-0.5 * z * z)


def activation(kind: str) -> Activation:
    """Build one of the whitelisted smooth bounded activations.

    Only activations with bounded value, first and second derivative are
    admissible; ``relu`` is rejected because it is not twice differentiable
    and its value is unbounded, which breaks every estimate this package is
    built to check.
    """
    if kind == "relu":
        raise ConfigError(
            "relu is not admissible: it is unbounded and not twice "
            "continuously differentiable; choose one of tanh, logistic, "
            "smooth-bump"
        )
    if kind == "tanh":
        return Activation("tanh", np.tanh, _tanh_d1, _tanh_d2,
                          *ACTIVATION_SUPS["tanh"], deriv_from_value=_tanh_dfv)
    if kind == "logistic":
        return Activation("logistic", expit, _logistic_d1, _logistic_d2,
                          *ACTIVATION_SUPS["logistic"],
                          deriv_from_value=_logistic_dfv)
    if kind == "smooth-bump":
        return Activation("smooth-bump", _bump, _bump_d1, _bump_d2,
                          *ACTIVATION_SUPS["smooth-bump"])
    raise ConfigError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# network evaluation
#
# ``eval_network`` accepts anything exposing ``.c`` (n,), ``.w`` (n, d) and
# ``.activation`` -- the sgd Ensemble does, and so does any slice of a
# mean-field solution when paired with an activation.


def network_output(c: np.ndarray, w: np.ndarray, act: Activation,
                   x: np.ndarray) -> float:
    """(1/n) sum_i c_i sigma(w_i . x) for a single input ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != w.shape[1]:
        raise RejectedInputError(
            f"input has shape {x.shape}, expected ({w.shape[1]},)")
    s = act.value(w @ x)
    return float(s @ c) / c.shape[0]


def network_batch_output(c: np.ndarray, w: np.ndarray, act: Activation,
                         x: np.ndarray) -> np.ndarray:
    """Vectorized ``network_output`` over rows of ``x`` with shape (k, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise RejectedInputError(
            f"batch has shape {x.shape}, expected (k, {w.shape[1]})")
    return act.value(x @ w.T) @ c / c.shape[0]


def eval_network(ensemble, x) -> float | np.ndarray:
    """Network output at ``x``; a 2-D ``x`` is treated as a batch of rows."""
    c = np.asarray(ensemble.c, dtype=np.float64)
    w = np.asarray(ensemble.w, dtype=np.float64)
    if c.size == 0:
        raise RejectedInputError("ensemble is empty")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return network_output(c, w, ensemble.activation, x)
    return network_batch_output(c, w, ensemble.activation, x)


def loss(ensemble, batch) -> float:
    """Half mean squared residual of the network over a batch of (x, y)."""
    xs, ys = _batch_arrays(batch, d=np.asarray(ensemble.w).shape[1])
    if xs.shape[0] == 0:
        raise RejectedInputError("loss needs a non-empty batch")
    g = eval_network(ensemble, xs)
    r = ys - g
    return 0.5 * float(np.mean(r * r))


def _batch_arrays(batch, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Accept either an array-backed batch (``.x``/``.y``) or pairs."""
    if hasattr(batch, "x") and hasattr(batch, "y"):
        return np.asarray(batch.x, dtype=np.float64), np.asarray(batch.y, dtype=np.float64)
    pairs = list(batch)
    if not pairs:
        return np.empty((0, d)), np.empty((0,))
    xs = np.asarray([np.asarray(x, dtype=np.float64) for x, _ in pairs])
    ys = np.asarray([float(y) for _, y in pairs])
    return xs, ys


# ---------------------------------------------------------------------------
# test functions
#
# Raw moments like c or c*w_1 are unbounded, so every test function is built
# from a smooth clamp that is the identity on [-a, a] and saturates at a + b:
#
#     psi(u) = u                                   for |u| <= a
#     psi(u) = sign(u) * (a + b*tanh((|u|-a)/b))   otherwise
#
# psi matches value, slope 1 and curvature 0 at the seam, so it is C^2 with
# |psi| <= a+b, |psi'| <= 1, |psi''| <= sup|tanh''|/b.  Inside [-a, a] the
# clamp is exactly inactive (returns u itself, same floats).


def _clamp_value(u, a, b):
    u = np.asarray(u, dtype=np.float64)
    inside = np.abs(u) <= a
    t = np.tanh((np.abs(u) - a) / b)
    return np.where(inside, u, np.sign(u) * (a + b * t))


def _clamp_d1(u, a, b):
    u = np.asarray(u, dtype=np.float64)
    inside = np.abs(u) <= a
    z = (np.abs(u) - a) / b
    return np.where(inside, 1.0, _tanh_d1(z))


def _clamp_d2(u, a, b):
    u = np.asarray(u, dtype=np.float64)
    inside = np.abs(u) <= a
    z = (np.abs(u) - a) / b
    return np.where(inside, 0.0, np.sign(u) * _tanh_d2(z) / b)


@dataclass(frozen=True)
class TestFunction:
    """A bounded C^2 function of one particle, with gradient and Hessian diagonal.

    Evaluators take ``c`` of shape (n,) and ``w`` of shape (n, d) and return
    (n,) arrays (``grad_w``/``hess_w`` return (n, d)).  ``d`` is the pinned
    input dimension, or ``None`` when the function applies to any d.
    """

    kind: str
    label: str
    value: Callable
    grad_c: Callable
    grad_w: Callable
    hess_c: Callable
    hess_w: Callable
    d: int | None = None


def _as_cloud(c, w):
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 1:
        w = w.reshape(c.shape[0], -1) if c.shape[0] > 1 else w.reshape(1, -1)
    return c, w


def smoothed_coordinate(coord: int | str = "c", a: float = 4.0,
                        b: float = 2.0) -> TestFunction:
    """psi applied to a single coordinate: the clamped first moment of c or w_j."""
    use_c = coord == "c"
    j = None if use_c else int(coord)
    label = "psi(c)" if use_c else f"psi(w{j + 1})"

    def pick(c, w):
        c, w = _as_cloud(c, w)
        if not use_c and j >= w.shape[1]:
            raise RejectedInputError(f"coordinate w_{j + 1} needs d > {j}")
        return c, w, (c if use_c else w[:, j])

    def value(c, w):
        c, w, u = pick(c, w)
        return _clamp_value(u, a, b)

    def grad_c(c, w):
        c, w, u = pick(c, w)
        return _clamp_d1(u, a, b) if use_c else np.zeros_like(c)

    def grad_w(c, w):
        c, w, u = pick(c, w)
        g = np.zeros_like(w)
        if not use_c:
            g[:, j] = _clamp_d1(u, a, b)
        return g

    def hess_c(c, w):
        c, w, u = pick(c, w)
        return _clamp_d2(u, a, b) if use_c else np.zeros_like(c)

    def hess_w(c, w):
        c, w, u = pick(c, w)
        h = np.zeros_like(w)
        if not use_c:
            h[:, j] = _clamp_d2(u, a, b)
        return h

    return TestFunction("coordinate-moment-smoothed", label,
                        value, grad_c, grad_w, hess_c, hess_w)


def _mono_d1(v, e):
    if e == 0:
        return np.zeros_like(v)
    return e * v ** (e - 1)


def _mono_d2(v, e):
    if e < 2:
        return np.zeros_like(v)
    return e * (e - 1) * v ** (e - 2)


def clamped_polynomial(c_exp: int, w_exps: Sequence[int], a: float = 4.0,
                       b: float = 2.0) -> TestFunction:
    """psi applied to the monomial c^c_exp * prod_j w_j^w_exps[j]."""
    w_exps = tuple(int(e) for e in w_exps)
    d = len(w_exps)
    pieces = ([f"c^{c_exp}"] if c_exp else []) + [
        f"w{j + 1}^{e}" for j, e in enumerate(w_exps) if e]
    label = "psi(" + ("*".join(pieces) or "1") + ")"

    def parts(c, w):
        c, w = _as_cloud(c, w)
        if w.shape[1] != d:
            raise RejectedInputError(f"test function pinned to d={d}")
        cf = c ** c_exp
        wf = np.stack([w[:, j] ** e for j, e in enumerate(w_exps)], axis=1)
        return c, w, cf, wf, cf * np.prod(wf, axis=1)

    def value(c, w):
        *_, p = parts(c, w)
        return _clamp_value(p, a, b)

    def grad_c(c, w):
        c, w, cf, wf, p = parts(c, w)
        return _clamp_d1(p, a, b) * _mono_d1(c, c_exp) * np.prod(wf, axis=1)

    def _wprod_except(wf, j):
        others = [wf[:, l] for l in range(d) if l != j]
        return np.prod(np.stack(others, axis=1), axis=1) if others else np.ones(wf.shape[0])

    def grad_w(c, w):
        c, w, cf, wf, p = parts(c, w)
        d1 = _clamp_d1(p, a, b)
        g = np.empty_like(w)
        for j, e in enumerate(w_exps):
            g[:, j] = d1 * cf * _mono_d1(w[:, j], e) * _wprod_except(wf, j)
        return g

    def hess_c(c, w):
        c, w, cf, wf, p = parts(c, w)
        wp = np.prod(wf, axis=1)
        dp = _mono_d1(c, c_exp) * wp
        return _clamp_d2(p, a, b) * dp * dp + _clamp_d1(p, a, b) * _mono_d2(c, c_exp) * wp

    def hess_w(c, w):
        c, w, cf, wf, p = parts(c, w)
        d1, d2 = _clamp_d1(p, a, b), _clamp_d2(p, a, b)
        h = np.empty_like(w)
        for j, e in enumerate(w_exps):
            rest = cf * _wprod_except(wf, j)
            dp = rest * _mono_d1(w[:, j], e)
            h[:, j] = d2 * dp * dp + d1 * rest * _mono_d2(w[:, j], e)
        return h

    return TestFunction("polynomial-clamped", label,
                        value, grad_c, grad_w, hess_c, hess_w, d=d)


def gaussian_bump(center_c: float, center_w: Sequence[float],
                  scale: float = 1.5) -> TestFunction:
    """exp(-||(c, w) - center||^2 / (2 scale^2)); bounded with all derivatives."""
    cw = np.asarray(center_w, dtype=np.float64)
    d = cw.shape[0]
    s2 = float(scale) ** 2
    label = f"bump(s={scale:g})"

    def offsets(c, w):
        c, w = _as_cloud(c, w)
        if w.shape[1] != d:
            raise RejectedInputError(f"test function pinned to d={d}")
        dc = c - center_c
        dw = w - cw
        return dc, dw, np.exp(-0.5 * (dc * dc + np.sum(dw * dw, axis=1)) / s2)

    def value(c, w):
        return offsets(c, w)[2]

    def grad_c(c, w):
        dc, dw, f = offsets(c, w)
        return -dc / s2 * f

    def grad_w(c, w):
        dc, dw, f = offsets(c, w)
        return -dw / s2 * f[:, None]

    def hess_c(c, w):
        dc, dw, f = offsets(c, w)
        return (dc * dc / s2 - 1.0) / s2 * f

    def hess_w(c, w):
        dc, dw, f = offsets(c, w)
        return (dw * dw / s2 - 1.0) / s2 * f[:, None]

    return TestFunction("gaussian-bump", label,
                        value, grad_c, grad_w, hess_c, hess_w, d=d)


def constant_one() -> TestFunction:
    """f = 1: pairing against any probability measure is exactly 1."""

    def value(c, w):
        c, w = _as_cloud(c, w)
        return np.ones_like(c)

    def zero_c(c, w):
        c, w = _as_cloud(c, w)
        return np.zeros_like(c)

    def zero_w(c, w):
        c, w = _as_cloud(c, w)
        return np.zeros_like(w)

    return TestFunction("polynomial-clamped", "1", value, zero_c, zero_w,
                        zero_c, zero_w)


def default_test_functions(d: int) -> list[TestFunction]:
    """The three probes used by the verification studies: a clamped first
    moment of c, a clamped c*w_1 coupling, and a Gaussian bump at the origin."""
    return [
        smoothed_coordinate("c"),
        clamped_polynomial(1, (1,) + (0,) * (d - 1)),
        gaussian_bump(0.0, np.zeros(d), scale=1.5),
    ]


# ---------------------------------------------------------------------------
# randomness


@dataclass(frozen=True)
class RandomStreams:
    """Counter-based splittable randomness: one 64-bit seed, many streams.

    ``stream(*ids, purpose=...)`` derives an independent Philox generator from
    (seed, ids..., crc32(purpose)); the same key always yields the same draws,
    distinct keys yield statistically independent streams.  Modules key their
    streams by structured ids (replica index, network size, ...) plus a short
    purpose tag ("init", "data", "quadrature", ...), so no draw depends on
    call ordering elsewhere in the program.
    """

    seed: int

    def __post_init__(self):
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ConfigError("seed must fit in an unsigned 64-bit integer")

    def stream(self, *ids: int, purpose: str = "") -> np.random.Generator:
        key = tuple(int(i) for i in ids)
        if purpose:
            key = key + (zlib.crc32(purpose.encode("utf-8")),)
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=key)
        return np.random.Generator(np.random.Philox(ss))
