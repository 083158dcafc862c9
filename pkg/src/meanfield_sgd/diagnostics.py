"""Statistical verification of the limit behavior of the particle system:
variance decay of pairings, decay of the fluctuation (martingale) terms in
the step decomposition, distance between the finite-N cloud and the solved
limit, and asymptotic pairwise independence of particles.

Every study is replicated over seeds keyed by (replica, purpose) only, so
runs at different network sizes share their sample streams (common random
numbers); trend statements across an N-grid are then far less noisy, while
each single-N statistic keeps its marginal law.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (Activation, RandomStreams, RejectedInputError,
                   TestFunction, activation)
from .data import DataModel, InitLaw, sample_data
from .measure import EmpiricalMeasure, fmt_float, pair, resample, wasserstein
from .meanfield import (MeanFieldSolution, Quadrature, QuadratureSpec,
                        freeze_quadrature)
from .sgd import Ensemble, TrainSchedule, moment_guard, sgd_step, train

SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))


# ---------------------------------------------------------------------------
# replica studies


@dataclass
class ReplicaStudy:
    """R independent training runs at every size in an N-grid.

    ``clouds[(n, r)]`` is the list of (t, cloud) snapshots of replica r at
    size n; ``max_moments[(n, r)]`` is the max of the parameter-moment guard
    over that whole run.
    """

    model: DataModel
    init: InitLaw
    act: Activation
    alpha: float
    T: float
    n_grid: tuple
    R: int
    streams: RandomStreams
    snapshot_times: tuple
    clouds: dict = field(default_factory=dict)
    max_moments: dict = field(default_factory=dict)

    def cloud(self, n: int, r: int, t: float | None = None) -> EmpiricalMeasure:
        snaps = self.clouds[(n, r)]
        if t is None:
            return snaps[-1][1]
        for ti, cl in snaps:
            if abs(ti - t) <= 1e-9:
                return cl
        raise RejectedInputError(f"no snapshot at t={t}")

    def pairings(self, f: TestFunction, n: int, t: float | None = None) -> np.ndarray:
        return np.array([pair(f, self.cloud(n, r, t)) for r in range(self.R)])


def _study_task(args):
    model, init, act, alpha, T, snapshot_times, n, r, streams = args
    ens = Ensemble.from_init(init, act, alpha,
                             streams.stream(r, purpose="init"), n)
    result = train(ens, model, TrainSchedule(T, snapshot_times),
                   streams.stream(r, purpose="data"), record_moments=True)
    return (n, r), result.snapshots, result.max_moment


def run_study(model: DataModel, init: InitLaw, act: Activation, alpha: float,
              T: float, n_grid: Sequence[int], R: int, streams: RandomStreams,
              snapshot_times: Sequence[float] | None = None,
              workers: int = 1) -> ReplicaStudy:
    """Train R replicas at every N; deterministic regardless of scheduling."""
    if R < 2:
        raise RejectedInputError("a replica study needs R >= 2")
    times = tuple(snapshot_times) if snapshot_times else (float(T),)
    study = ReplicaStudy(model, init, act, alpha, T, tuple(int(n) for n in n_grid),
                         R, streams, times)
    tasks = [(model, init, act, alpha, T, times, n, r, streams)
             for n in study.n_grid for r in range(R)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_study_task, tasks))
    else:
        outcomes = [_study_task(t) for t in tasks]
    for key, snaps, max_m in outcomes:
        study.clouds[key] = snaps
        study.max_moments[key] = max_m
    return study


# ---------------------------------------------------------------------------
# law-of-large-numbers decay


@dataclass
class LlnTable:
    f_label: str
    n_values: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    slope: float | None     # least squares d log(std) / d log(N)

    def to_csv_rows(self):
        header = "n,mean,std,slope"
        rows = []
        for i, n in enumerate(self.n_values):
            s = "" if self.slope is None else fmt_float(self.slope)
            rows.append(f"{int(n)},{fmt_float(self.means[i])},"
                        f"{fmt_float(self.stds[i])},{s}")
        return header, rows


def lln_decay(study: ReplicaStudy, f: TestFunction,
              t: float | None = None) -> LlnTable:
    """Across-replica mean/std of <f, mu^N_t> per N and the log-log slope."""
    if study.R < 20:
        raise RejectedInputError("slope estimates need R >= 20")
    if len(study.n_grid) < 3:
        raise RejectedInputError("need at least 3 sizes in the N-grid")
    means, stds = [], []
    for n in study.n_grid:
        vals = study.pairings(f, n, t)
        means.append(float(np.mean(vals)))
        stds.append(float(np.std(vals, ddof=1)))
    means, stds = np.array(means), np.array(stds)
    slope = None
    if np.all(stds > 0):
        slope = float(np.polyfit(np.log(study.n_grid), np.log(stds), 1)[0])
    return LlnTable(f.label, np.array(study.n_grid, dtype=float), means, stds, slope)


# ---------------------------------------------------------------------------
# drift/fluctuation decomposition of pairing increments
#
# For a fixed test function f, the one-step change of <f, nu_k> splits into
# the first-order terms
#
#   A_k = (1/N) sum_i [df/dc_i * delta c_i + grad_w f_i . delta w_i]
#       = (D1_k + M1_k) + (D2_k + M2_k)
#
# plus a second-order Taylor remainder of size O(1/N^2).  D1/D2 are the
# conditional expectations of the two first-order terms given the current
# state (computed against a frozen quadrature), M1/M2 the leftover
# innovations: zero-mean, uncorrelated across steps.


@dataclass
class MartingaleTrace:
    """Cumulative D and M components over one training run."""

    times: np.ndarray
    d1: np.ndarray
    d2: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    qv1: float      # sum of squared M1 increments
    qv2: float


class _DecompositionObserver:
    """train() observer accumulating the four components step by step."""

    def __init__(self, f: TestFunction, quad: Quadrature, alpha: float,
                 act: Activation, n_steps: int, n: int):
        self.f = f
        self.quad = quad
        self.alpha = alpha
        self.act = act
        self.n = n
        self.i1 = np.empty(n_steps)  # per-step increments
        self.i2 = np.empty(n_steps)
        self.e1 = np.empty(n_steps)
        self.e2 = np.empty(n_steps)

    def __call__(self, k: int, ens: Ensemble, x: np.ndarray, y: float):
        f, act, n = self.f, self.act, self.n
        c, w = ens.c, ens.w
        fc = f.grad_c(c, w)
        fw = f.grad_w(c, w)
        # realized first-order increments at the actual sample
        z = w @ x
        s = act.value(z)
        g = float(s @ c) / n
        coef = self.alpha / n * (y - g)
        self.i1[k] = coef * float(np.mean(fc * s))
        self.i2[k] = coef * float(np.mean(c * act.deriv(z) * (fw @ x)))
        # conditional expectations of the same quantities under pi
        xq, yq = self.quad.x, self.quad.y
        sq = w @ xq.T                          # (N, K)
        vq = act.value(sq)
        gq = (c @ vq) / n                      # (K,)
        h1 = (fc @ vq) / n
        h2 = np.einsum("i,ik,ik->k", c, act.deriv(sq), fw @ xq.T) / n
        rq = self.alpha / n * (yq - gq)
        self.e1[k] = float(np.mean(rq * h1))
        self.e2[k] = float(np.mean(rq * h2))

    def trace(self, n_particles: int) -> MartingaleTrace:
        m1 = self.i1 - self.e1
        m2 = self.i2 - self.e2
        times = np.arange(1, self.i1.shape[0] + 1) / n_particles
        return MartingaleTrace(times, np.cumsum(self.e1), np.cumsum(self.e2),
                               np.cumsum(m1), np.cumsum(m2),
                               float(np.sum(m1 * m1)), float(np.sum(m2 * m2)))


def default_martingale_quadrature(model: DataModel) -> QuadratureSpec:
    """Fixed grid when the model supports one (bias ~h^2, exact in y), else
    frozen Monte Carlo nodes."""
    if model.kind != "mnist-binary" and model.x_law == "uniform-cube":
        return QuadratureSpec("fixed-grid", 1024)
    return QuadratureSpec("monte-carlo", 4096)


@dataclass
class MartingaleTable:
    f_label: str
    n_values: np.ndarray
    m1_sq: np.ndarray        # E[M1(T)^2], quadratic-variation estimate
    m2_sq: np.ndarray
    m1_sq_direct: np.ndarray  # plain across-replica mean of M1(T)^2
    m2_sq_direct: np.ndarray

    def ratio(self, n_small: int, n_large: int, which: int = 1) -> float:
        vals = self.m1_sq if which == 1 else self.m2_sq
        i = list(self.n_values).index(n_small)
        j = list(self.n_values).index(n_large)
        return float(vals[i] / vals[j])

    def to_csv_rows(self):
        header = "n,m1_sq,m2_sq,m1_sq_direct,m2_sq_direct"
        rows = [f"{int(n)},{fmt_float(self.m1_sq[i])},{fmt_float(self.m2_sq[i])},"
                f"{fmt_float(self.m1_sq_direct[i])},{fmt_float(self.m2_sq_direct[i])}"
                for i, n in enumerate(self.n_values)]
        return header, rows


def martingale_decay(model: DataModel, init: InitLaw, f: TestFunction,
                     n_grid: Sequence[int], T: float, R: int,
                     streams: RandomStreams, quad=None, alpha: float = 1.0,
                     act: Activation | None = None) -> MartingaleTable:
    """Second moments of the accumulated fluctuation terms M1(T), M2(T).

    Two estimates per size: the across-replica mean of M(T)^2, and the mean
    total quadratic variation sum_k M_k^2.  They estimate the same number
    (increments are uncorrelated across steps) but the quadratic variation
    averages floor(N*T) terms per run and is far tighter at small R.
    """
    act = act or activation("tanh")
    if quad is None:
        quad = default_martingale_quadrature(model)
    if not isinstance(quad, Quadrature):
        quad = freeze_quadrature(quad, model,
                                 streams.stream(purpose="quadrature"))
    rows = {n: ([], [], [], []) for n in n_grid}
    for n in n_grid:
        schedule = TrainSchedule(float(T))
        for r in range(R):
            ens = Ensemble.from_init(init, act, alpha,
                                     streams.stream(r, purpose="init"), n)
            obs = _DecompositionObserver(f, quad, alpha, act,
                                         schedule.n_steps(n), n)
            train(ens, model, schedule, streams.stream(r, purpose="data"),
                  observer=obs)
            tr = obs.trace(n)
            qv1, qv2 = tr.qv1, tr.qv2
            rows[n][0].append(qv1)
            rows[n][1].append(qv2)
            rows[n][2].append(tr.m1[-1] ** 2 if tr.m1.size else 0.0)
            rows[n][3].append(tr.m2[-1] ** 2 if tr.m2.size else 0.0)
    n_values = np.array([int(n) for n in n_grid])
    return MartingaleTable(
        f.label, n_values,
        np.array([np.mean(rows[n][0]) for n in n_grid]),
        np.array([np.mean(rows[n][1]) for n in n_grid]),
        np.array([np.mean(rows[n][2]) for n in n_grid]),
        np.array([np.mean(rows[n][3]) for n in n_grid]))


@dataclass
class ReconcileReport:
    """How exactly the four components rebuild actual pairing increments."""

    identity_defect: float    # max |(D1+M1+D2+M2)_k - A_k|, A from real deltas
    taylor_remainder: float   # max |delta<f,nu>_k - A_k|
    n: int
    steps: int


def reconcile_decomposition(model: DataModel, init: InitLaw, f: TestFunction,
                            n: int, T: float, streams: RandomStreams,
                            quad=None, alpha: float = 1.0,
                            act: Activation | None = None) -> ReconcileReport:
    """Replay a run comparing the decomposition against ground truth.

    A_k is rebuilt from the actually applied parameter deltas, so the check
    is independent of the formulas inside the observer; the defect must sit
    at float rounding (<= 1e-10), while the Taylor remainder is genuine and
    shrinks like 1/N^2 per step.
    """
    act = act or activation("tanh")
    if quad is None:
        quad = default_martingale_quadrature(model)
    if not isinstance(quad, Quadrature):
        quad = freeze_quadrature(quad, model,
                                 streams.stream(purpose="quadrature"))
    ens = Ensemble.from_init(init, act, alpha,
                             streams.stream(0, purpose="init"), n)
    schedule = TrainSchedule(float(T))
    n_steps = schedule.n_steps(n)
    obs = _DecompositionObserver(f, quad, alpha, act, n_steps, n)
    rng = streams.stream(0, purpose="data")
    identity = 0.0
    remainder = 0.0
    done = 0
    while done < n_steps:
        batch = sample_data(model, rng, min(4096, n_steps - done))
        for i in range(len(batch)):
            x, y = batch.x[i], float(batch.y[i])
            c0, w0 = ens.c.copy(), ens.w.copy()
            before = float(np.mean(f.value(c0, w0)))
            obs(done, ens, x, y)
            sgd_step(ens, x, y)
            after = float(np.mean(f.value(ens.c, ens.w)))
            fc = f.grad_c(c0, w0)
            fw = f.grad_w(c0, w0)
            a_actual = float(np.mean(fc * (ens.c - c0))
                             + np.mean(np.sum(fw * (ens.w - w0), axis=1)))
            four = obs.i1[done] + obs.i2[done]  # (D1+M1) + (D2+M2)
            identity = max(identity, abs(four - a_actual))
            remainder = max(remainder, abs((after - before) - a_actual))
            done += 1
            if done >= n_steps:
                break
    return ReconcileReport(identity, remainder, n, n_steps)


# ---------------------------------------------------------------------------
# distance to the solved limit


@dataclass
class LimitRow:
    n: int
    t: float
    w1: float                  # mean over replicas, cloud vs solved limit
    gaps: dict                 # f label -> (gap, noise_floor, gap_se)


@dataclass
class LimitTable:
    rows: list

    def gap_series(self, f_label: str, t: float) -> np.ndarray:
        return np.array([r.gaps[f_label][0] for r in self.rows
                         if abs(r.t - t) <= 1e-9])

    def to_csv_rows(self):
        header = "n,t,w1,f,gap,noise_floor,gap_se"
        rows = []
        for r in self.rows:
            for label, (gap, floor, se) in r.gaps.items():
                rows.append(f"{r.n},{fmt_float(r.t)},{fmt_float(r.w1)},"
                            f"{label},{fmt_float(gap)},{fmt_float(floor)},"
                            f"{fmt_float(se)}")
        return header, rows


def limit_distance(study: ReplicaStudy, sol: MeanFieldSolution,
                   fs: Sequence[TestFunction], n_boot: int = 1000) -> LimitTable:
    """Per (N, t): Wasserstein-1 to the solved limit cloud and pairing gaps.

    The noise floor per test function is E|gap| under the hypothesis that
    only sampling noise separates the two sides: replica scatter s_N plus
    the limit cloud's own finite-M standard error, folded through E|normal|
    = sqrt(2/pi) * sd.  gap_se is a seeded bootstrap SE of the mean
    absolute gap.
    """
    rows = []
    boot_rng = study.streams.stream(purpose="limit-boot")
    for n in study.n_grid:
        for t in study.snapshot_times:
            sol_cloud = sol.measure_at(t)
            w1s = []
            for r in range(study.R):
                mu = study.cloud(n, r, t)
                ref = (sol_cloud if sol_cloud.n == mu.n else
                       resample(sol_cloud, mu.n,
                                study.streams.stream(r, purpose="limit-resample")))
                w1s.append(wasserstein(mu, ref, p=1))
            gaps = {}
            for f in fs:
                vals = study.pairings(f, n, t)
                target = pair(f, sol_cloud)
                g = vals - target
                gap = float(np.mean(np.abs(g)))
                s_n = float(np.std(vals, ddof=1))
                fv = f.value(sol_cloud.c, sol_cloud.w)
                s_mf = float(np.std(fv, ddof=1) / np.sqrt(sol_cloud.n))
                floor = SQRT_2_OVER_PI * float(np.hypot(s_n, s_mf))
                idx = boot_rng.integers(0, study.R, size=(n_boot, study.R))
                boots = np.mean(np.abs(g[idx]), axis=1)
                gaps[f.label] = (gap, floor, float(np.std(boots, ddof=1)))
            rows.append(LimitRow(int(n), float(t), float(np.mean(w1s)), gaps))
    return LimitTable(rows)


# ---------------------------------------------------------------------------
# propagation of chaos


@dataclass
class ChaosTable:
    n_values: np.ndarray
    cov: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    mode: str

    def to_csv_rows(self):
        header = "n,cov,ci_lo,ci_hi"
        rows = [f"{int(n)},{fmt_float(self.cov[i])},{fmt_float(self.ci_lo[i])},"
                f"{fmt_float(self.ci_hi[i])}" for i, n in enumerate(self.n_values)]
        return header, rows


def chaos_test(model: DataModel, init: InitLaw, f1: TestFunction,
               f2: TestFunction, n_grid: Sequence[int], T: float, R: int,
               streams: RandomStreams, alpha: float = 1.0,
               act: Activation | None = None, mode: str = "pair-averaged",
               pair_indices: tuple[int, int] = (0, 1),
               n_boot: int = 1000) -> ChaosTable:
    """Estimated Cov(f1 of one particle, f2 of another) after training.

    mode "single-pair" uses exactly the particles named by ``pair_indices``;
    mode "pair-averaged" (default) averages f1(z_i) f2(z_j) over all ordered
    pairs i != j, which estimates the same covariance (particles are
    exchangeable) at a fraction of the replica noise.  The 95% CI comes from
    a seeded bootstrap over replicas.
    """
    if R < 50:
        raise RejectedInputError("chaos estimates need R >= 50")
    if min(n_grid) < 2:
        raise RejectedInputError("chaos needs at least 2 particles")
    if mode not in ("pair-averaged", "single-pair"):
        raise RejectedInputError(f"unknown mode {mode!r}")
    act = act or activation("tanh")
    i1, i2 = pair_indices
    out_n, out_cov, out_lo, out_hi = [], [], [], []
    boot_rng = streams.stream(purpose="chaos-boot")
    for n in n_grid:
        cross = np.empty(R)
        a1 = np.empty(R)
        a2 = np.empty(R)
        for r in range(R):
            ens = Ensemble.from_init(init, act, alpha,
                                     streams.stream(r, purpose="init"), n)
            train(ens, model, TrainSchedule(float(T)),
                  streams.stream(r, purpose="data"))
            v1 = f1.value(ens.c, ens.w)
            v2 = f2.value(ens.c, ens.w)
            if mode == "single-pair":
                cross[r] = v1[i1] * v2[i2]
                a1[r], a2[r] = v1[i1], v2[i2]
            else:
                s1, s2 = float(np.mean(v1)), float(np.mean(v2))
                s12 = float(np.mean(v1 * v2))
                cross[r] = (n * s1 * s2 - s12) / (n - 1)
                a1[r], a2[r] = s1, s2
        cov = float(np.mean(cross) - np.mean(a1) * np.mean(a2))
        idx = boot_rng.integers(0, R, size=(n_boot, R))
        boots = (np.mean(cross[idx], axis=1)
                 - np.mean(a1[idx], axis=1) * np.mean(a2[idx], axis=1))
        lo, hi = np.percentile(boots, [2.5, 97.5])
        out_n.append(int(n))
        out_cov.append(cov)
        out_lo.append(float(lo))
        out_hi.append(float(hi))
    return ChaosTable(np.array(out_n), np.array(out_cov), np.array(out_lo),
                      np.array(out_hi), mode)


# ---------------------------------------------------------------------------
# moment-guard boundedness


@dataclass
class MomentTable:
    n_values: np.ndarray
    max_guard: np.ndarray     # per N, replica-mean of max_t moment_guard
    se: np.ndarray            # per N, standard error of that mean

    @property
    def spread(self) -> float:
        return float(np.max(self.max_guard) / np.min(self.max_guard))

    @property
    def increasing(self) -> bool:
        """True only for a statistically meaningful growth trend.

        The bound being probed is uniform in N, so a finite-size correction
        that approaches the limit from below is fine; we flag growth only
        when the values rise monotonically AND the total rise exceeds three
        times its joint sampling error.
        """
        g = self.max_guard
        if not np.all(np.diff(g) > 0):
            return False
        joint = float(np.hypot(self.se[0], self.se[-1]))
        return bool(g[-1] - g[0] > 3.0 * joint)

    def to_csv_rows(self):
        header = "n,max_moment_guard,se"
        rows = [f"{int(n)},{fmt_float(self.max_guard[i])},{fmt_float(self.se[i])}"
                for i, n in enumerate(self.n_values)]
        return header, rows


def moment_bound(study: ReplicaStudy) -> MomentTable:
    """Replica-mean of the run-max parameter moment per network size."""
    vals, ses = [], []
    for n in study.n_grid:
        per = [study.max_moments[(n, r)] for r in range(study.R)]
        if any(v is None for v in per):
            raise RejectedInputError("study was run without moment recording")
        vals.append(float(np.mean(per)))
        ses.append(float(np.std(per, ddof=1) / np.sqrt(len(per))))
    return MomentTable(np.array(study.n_grid, dtype=int), np.array(vals),
                       np.array(ses))
