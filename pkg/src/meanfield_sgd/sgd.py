"""The finite-N particle system: online SGD with the 1/N-scaled learning rate.

One step with sample (x, y) updates every particle simultaneously from the
pre-step state:

    g      = (1/N) sum_i c_i sigma(w_i . x)          (network output)
    c_i   += (alpha/N) (y - g) sigma(w_i . x)
    w_ij  += (alpha/N) (y - g) c_i sigma'(w_i . x) x_j

Scaled time runs one unit per N steps, so a horizon T means floor(N*T) steps
and the snapshot at scaled time t is the state after exactly floor(N*t) steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (Activation, DivergedError, RejectedInputError,
                   RandomStreams, activation)
from .data import DataModel, InitLaw, sample_data, sample_init
from .measure import EmpiricalMeasure

DIVERGENCE_LIMIT = 1e12
_STREAM_CHUNK = 4096  # samples drawn per refill; fixed, part of determinism


@dataclass
class Ensemble:
    """N particles plus the training hyperparameters that move them."""

    c: np.ndarray
    w: np.ndarray
    activation: Activation
    alpha: float
    step: int = 0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64).copy()
        self.w = np.asarray(self.w, dtype=np.float64).copy()
        if self.c.ndim != 1 or self.w.ndim != 2 or self.w.shape[0] != self.c.shape[0]:
            raise RejectedInputError("need c (N,) and w (N, d)")
        if self.n < 1:
            raise RejectedInputError("ensemble needs at least one particle")
        if self.alpha < 0:
            raise RejectedInputError("alpha must be >= 0")

    @property
    def n(self) -> int:
        return self.c.shape[0]

    @property
    def d(self) -> int:
        return self.w.shape[1]

    @classmethod
    def from_init(cls, law: InitLaw, act: Activation, alpha: float,
                  rng: np.random.Generator, n: int) -> "Ensemble":
        cloud = sample_init(law, rng, n)
        return cls(cloud.c, cloud.w, act, alpha)

    @classmethod
    def from_cloud(cls, cloud: EmpiricalMeasure, act: Activation,
                   alpha: float) -> "Ensemble":
        return cls(cloud.c, cloud.w, act, alpha)

    def measure(self) -> EmpiricalMeasure:
        return EmpiricalMeasure(self.c.copy(), self.w.copy())


def sgd_step(ens: Ensemble, x: np.ndarray, y: float) -> Ensemble:
    """One online step; mutates ``ens`` in place and returns it.

    Every particle sees the network output g of the pre-step parameters; both
    updates use pre-step c and w (simultaneous update).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (ens.d,):
        raise RejectedInputError(f"sample has shape {x.shape}, expected ({ens.d},)")
    z = ens.w @ x
    s = ens.activation.value(z)
    g = float(s @ ens.c) / ens.n
    coef = ens.alpha / ens.n * (y - g)
    dc = coef * s
    dw = (coef * ens.c * ens.activation.deriv(z))[:, None] * x[None, :]
    ens.c += dc
    ens.w += dw
    ens.step += 1
    _guard(ens)
    return ens


def _guard(ens: Ensemble):
    cmax = np.max(np.abs(ens.c))
    wmax = np.max(np.abs(ens.w))
    big = max(cmax, wmax)
    if not np.isfinite(big) or big > DIVERGENCE_LIMIT:
        raise DivergedError(
            f"parameters exceeded {DIVERGENCE_LIMIT:g} at step {ens.step}",
            step=ens.step)


def moment_guard(ens) -> float:
    """(1/N) sum_i (|c_i| + ||w_i||): the quantity whose boundedness uniform
    in N certifies that training stays in a compact parameter region."""
    c = np.asarray(ens.c, dtype=np.float64)
    w = np.asarray(ens.w, dtype=np.float64)
    return float(np.mean(np.abs(c) + np.linalg.norm(w, axis=1)))


@dataclass(frozen=True)
class TrainSchedule:
    """Horizon T in scaled time plus the snapshot times to record."""

    T: float
    snapshot_times: tuple = ()

    def __post_init__(self):
        if self.T <= 0:
            raise RejectedInputError("T must be > 0")
        times = tuple(float(t) for t in self.snapshot_times) or (self.T,)
        if any(t < 0 or t > self.T for t in times):
            raise RejectedInputError("snapshot times must lie in [0, T]")
        if list(times) != sorted(times):
            raise RejectedInputError("snapshot times must be sorted")
        object.__setattr__(self, "snapshot_times", times)

    def n_steps(self, n_particles: int) -> int:
        return int(np.floor(n_particles * self.T))

    def snapshot_steps(self, n_particles: int) -> list[int]:
        return [int(np.floor(n_particles * t)) for t in self.snapshot_times]


@dataclass
class TrainResult:
    """Snapshots (t, measure) in schedule order; behaves as that list."""

    snapshots: list
    moment_trace: np.ndarray | None = None

    @property
    def max_moment(self) -> float | None:
        if self.moment_trace is None:
            return None
        return float(np.max(self.moment_trace))

    def __iter__(self):
        return iter(self.snapshots)

    def __len__(self):
        return len(self.snapshots)

    def __getitem__(self, i):
        return self.snapshots[i]


def train(ens: Ensemble, model: DataModel, schedule: TrainSchedule,
          rng: np.random.Generator,
          observer: Callable | None = None,
          record_moments: bool = False) -> TrainResult:
    """Run floor(N*T) steps on a fresh i.i.d. stream; collect snapshots.

    ``observer(k, ens, x, y)``, if given, is called before each step with the
    pre-step state and the sample about to be applied (used by the drift and
    fluctuation diagnostics). Samples are drawn in fixed-size chunks, so the
    stream consumed is a deterministic function of the generator alone.
    """
    if model.d != ens.d:
        raise RejectedInputError("model dimension differs from ensemble")
    n_steps = schedule.n_steps(ens.n)
    snap_steps = schedule.snapshot_steps(ens.n)
    snapshots: list = [None] * len(snap_steps)
    trace = np.empty(n_steps + 1) if record_moments else None
    if record_moments:
        trace[0] = moment_guard(ens)

    def record(step_idx: int):
        for slot, want in enumerate(snap_steps):
            if want == step_idx and snapshots[slot] is None:
                snapshots[slot] = (schedule.snapshot_times[slot], ens.measure())

    record(0)
    done = 0
    while done < n_steps:
        batch = sample_data(model, rng, _STREAM_CHUNK)
        take = min(n_steps - done, len(batch))
        for i in range(take):
            x, y = batch.x[i], float(batch.y[i])
            if observer is not None:
                observer(done, ens, x, y)
            sgd_step(ens, x, y)
            done += 1
            if record_moments:
                trace[done] = moment_guard(ens)
            record(done)
    return TrainResult(snapshots, trace)


def run_default(model: DataModel, init: InitLaw, act: Activation, alpha: float,
                n: int, schedule: TrainSchedule, streams: RandomStreams,
                replica: int = 0, record_moments: bool = False) -> TrainResult:
    """Train one fresh ensemble with the package's standard stream keying.

    Streams are keyed by (replica, purpose) only, so runs at different N
    share initial-particle prefixes and the data sequence (common random
    numbers across an N-grid), which stabilizes trend comparisons.
    """
    ens = Ensemble.from_init(init, act, alpha,
                             streams.stream(replica, purpose="init"), n)
    return train(ens, model, schedule, streams.stream(replica, purpose="data"),
                 record_moments=record_moments)
