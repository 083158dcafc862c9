"""Reproducible experiment runner.

One flat key=value config file describes a whole experiment; each subcommand
reads the keys it needs.  A run is fully determined by (config file, seed):
artifacts embed the config hash, manifests carry per-file checksums and no
timestamps, so re-running a command into a fresh directory reproduces every
byte.

Exit codes: 0 ok; 2 config/artifact error; 3 diverged or non-convergent run;
4 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import (ConfigError, DivergedError, RandomStreams,
                   RejectedInputError, activation, default_test_functions)
from .data import (IdxFormatError, InitLaw, default_model, load_mnist_idx,
                   noisy_polynomial, sample_init, teacher_network)
from .diagnostics import (chaos_test, limit_distance, lln_decay,
                          martingale_decay, moment_bound, reconcile_decomposition,
                          run_study)
from .measure import (EmpiricalMeasure, fmt_float, histogram, histogram_w1,
                      pair, write_histogram_csv)
from .meanfield import (MeanFieldSolution, Quadrature, QuadratureSpec,
                        freeze_quadrature, frozen_start, picard_iterate,
                        seed_resampled_floor, solve_selfconsistent,
                        weak_residual)
from .sgd import Ensemble, TrainSchedule, train

# ---------------------------------------------------------------------------
# config handling

# key -> (parser, default); one shared schema so every command hashes the
# same file and artifact mixing is detectable
_SCHEMA = {
    "model": (str, "teacher"),
    "d": (int, 2),
    "activation": (str, "tanh"),
    "alpha": (float, 1.0),
    "t_horizon": (float, 0.5),
    "noise_scale": (float, 0.25),
    "init_c": (str, "-1,1"),
    "init_w_scale": (float, 1.0),
    "n": (int, 400),
    "snapshot_times": (str, ""),
    "bins": (int, 30),
    "n_grid": (str, "100,400,1600"),
    "replicas": (int, 30),
    "m": (int, 10000),
    "dt": (float, 0.0005),
    "quad_mode": (str, "monte-carlo"),
    "quad_nodes": (int, 4096),
    "mf_snapshots": (int, 51),
    "mode": (str, "selfconsistent"),
    "picard_tol": (float, 0.0),
    "picard_max_iters": (int, 25),
    "floor_runs": (int, 2),
    "chaos_replicas": (int, 50),
    "mart_n_grid": (str, "200,800"),
    "mart_replicas": (int, 20),
    "meanfield_dir": (str, ""),
    "workers": (int, 1),
    "images": (str, ""),
    "labels": (str, ""),
    "digit_pair": (str, "3,5"),
    "mnist_n_grid": (str, "100,1000,10000"),
}


def parse_config(path: str | None) -> dict:
    """Flat key=value lines; unknown keys are hard errors."""
    raw: dict[str, str] = {}
    if path:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            key, value = key.strip(), value.strip()
            if key not in _SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in raw:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            raw[key] = value
    cfg = {}
    for key, (parse, default) in _SCHEMA.items():
        if key in raw:
            try:
                cfg[key] = parse(raw[key])
            except ValueError as exc:
                raise ConfigError(f"config key {key}: {exc}") from exc
        else:
            cfg[key] = default
    return cfg


# operational keys: they steer where work happens, never what comes out,
# so artifacts stay shareable across machines and worker counts
_UNHASHED = {"meanfield_dir", "workers"}


def config_hash(cfg: dict) -> str:
    canon = "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg) if k not in _UNHASHED)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _int_list(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def _slug(label: str) -> str:
    safe = "".join(ch if ch.isalnum() or ch == "." else "-" for ch in label)
    return "-".join(piece for piece in safe.split("-") if piece)


def _float_list(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _build_model(cfg: dict):
    act = activation(cfg["activation"])
    kind = cfg["model"]
    if kind == "teacher":
        model = teacher_network(d=cfg["d"], act=act,
                                noise_scale=cfg["noise_scale"])
    elif kind == "polynomial":
        d = cfg["d"]
        model = noisy_polynomial(d, lin=np.ones(d),
                                 noise_scale=cfg["noise_scale"])
    elif kind == "mnist":
        if not cfg["images"] or not cfg["labels"]:
            raise ConfigError("model=mnist needs images= and labels= paths")
        digits = _int_list(cfg["digit_pair"])
        if len(digits) != 2:
            raise ConfigError("digit_pair must hold two digits")
        model = load_mnist_idx(cfg["images"], cfg["labels"], tuple(digits))
    else:
        raise ConfigError(f"unknown model {kind!r}")
    lo, hi = _float_list(cfg["init_c"]) or [-1.0, 1.0]
    init = InitLaw(d=model.d, c_params=(lo, hi), w_scale=cfg["init_w_scale"])
    return model, init, act


# ---------------------------------------------------------------------------
# artifacts


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, cfg_hash: str, seed: int, extra: dict | None = None):
    lines = {
        "config_hash": cfg_hash,
        "seed": str(seed),
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": ".".join(str(v) for v in sys.version_info[:3]),
    }
    lines.update(extra or {})
    for file in sorted(out.rglob("*")):
        if file.is_file() and file.name != "manifest.txt":
            lines[f"sha256:{file.relative_to(out)}"] = _sha256(file)
    text = "\n".join(f"{k}={v}" for k, v in sorted(lines.items())) + "\n"
    (out / "manifest.txt").write_text(text)


def read_manifest(out: Path) -> dict:
    path = out / "manifest.txt"
    if not path.exists():
        raise ConfigError(f"{out}: missing manifest.txt")
    entries = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            entries[k] = v
    return entries


def check_manifest(out: Path):
    """Verify every checksum recorded in a run directory's manifest."""
    entries = read_manifest(out)
    for key, want in entries.items():
        if not key.startswith("sha256:"):
            continue
        file = out / key.split(":", 1)[1]
        if not file.exists():
            raise ConfigError(f"{out}: artifact {file.name} is missing")
        got = _sha256(file)
        if got != want:
            raise ConfigError(
                f"{out}: checksum mismatch for {file.name}: "
                f"manifest {want[:12]}.., file {got[:12]}..")
    return entries


def _write_csv(path: Path, header: str, rows, cfg_hash: str):
    lines = [f"# config_hash={cfg_hash}", header]
    lines.extend(rows)
    path.write_text("\n".join(lines) + "\n")


def write_cloud_csv(path: Path, cloud: EmpiricalMeasure, cfg_hash: str):
    header = "c," + ",".join(f"w_{j + 1}" for j in range(cloud.d))
    rows = [",".join(fmt_float(v) for v in (cloud.c[i], *cloud.w[i]))
            for i in range(cloud.n)]
    _write_csv(path, header, rows, cfg_hash)


def read_cloud_csv(path: Path) -> EmpiricalMeasure:
    rows = [ln for ln in path.read_text().splitlines()
            if ln and not ln.startswith("#")]
    data = np.array([[float(tok) for tok in ln.split(",")] for ln in rows[1:]])
    return EmpiricalMeasure(data[:, 0], data[:, 1:])


def save_solution(sol: MeanFieldSolution, out: Path, cfg_hash: str):
    out.mkdir(parents=True, exist_ok=True)
    for i in range(sol.times.shape[0]):
        write_cloud_csv(out / f"solution_{i:03d}.csv", sol.slice(i), cfg_hash)
    quad_header = ",".join(f"x_{j + 1}" for j in range(sol.quad.x.shape[1])) + ",y"
    quad_rows = [",".join(fmt_float(v) for v in (*sol.quad.x[i], sol.quad.y[i]))
                 for i in range(sol.quad.n)]
    _write_csv(out / "quadrature.csv", quad_header, quad_rows, cfg_hash)
    meta = {
        "times": ",".join(fmt_float(t) for t in sol.times),
        "dt": fmt_float(sol.dt),
        "m_paths": str(sol.n_paths),
        "alpha": fmt_float(sol.alpha),
        "activation": sol.act.kind,
        "quad_mode": sol.quad.spec.mode,
        "quad_nodes": str(sol.quad.spec.n_nodes),
        "quad_refresh": sol.quad.spec.refresh,
        "max_rate": fmt_float(sol.max_rate),
    }
    text = "\n".join(f"{k}={v}" for k, v in sorted(meta.items())) + "\n"
    (out / "solution_meta.txt").write_text(text)


def load_solution(out: Path) -> MeanFieldSolution:
    meta_path = out / "solution_meta.txt"
    if not meta_path.exists():
        raise ConfigError(
            f"{out}: no mean-field solution found; run `mfsgd meanfield "
            f"--config <same config> --out {out}` first")
    meta = dict(line.split("=", 1) for line in meta_path.read_text().splitlines()
                if "=" in line)
    times = np.array(_float_list(meta["times"]))
    slices = [read_cloud_csv(out / f"solution_{i:03d}.csv")
              for i in range(times.shape[0])]
    quad_rows = [ln for ln in (out / "quadrature.csv").read_text().splitlines()
                 if ln and not ln.startswith("#")]
    qdata = np.array([[float(tok) for tok in ln.split(",")]
                      for ln in quad_rows[1:]])
    spec = QuadratureSpec(meta["quad_mode"], int(meta["quad_nodes"]),
                          meta["quad_refresh"])
    quad = Quadrature(qdata[:, :-1], qdata[:, -1], spec)
    return MeanFieldSolution(
        times,
        np.stack([s.c for s in slices]),
        np.stack([s.w for s in slices]),
        quad, activation(meta["activation"]), float(meta["alpha"]),
        float(meta["dt"]), float(meta["max_rate"]))


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(cfg: dict, seed: int, out: Path, quiet: bool) -> int:
    streams = RandomStreams(seed)
    model, init, act = _build_model(cfg)
    chash = config_hash(cfg)
    out.mkdir(parents=True, exist_ok=True)
    times = tuple(_float_list(cfg["snapshot_times"])) or (cfg["t_horizon"],)
    schedule = TrainSchedule(cfg["t_horizon"], (0.0,) + times)
    ens = Ensemble.from_init(init, act, cfg["alpha"],
                             streams.stream(0, purpose="init"), cfg["n"])
    try:
        result = train(ens, model, schedule, streams.stream(0, purpose="data"),
                       record_moments=True)
    except DivergedError as exc:
        (out / "DIVERGED").write_text(f"step={exc.step}\n")
        write_manifest(out, chash, seed, {"status": "diverged"})
        if not quiet:
            print(f"diverged at step {exc.step}", file=sys.stderr)
        return 3
    for i, (t, cloud) in enumerate(result.snapshots):
        write_cloud_csv(out / f"snapshot_{i:03d}.csv", cloud, chash)
        write_histogram_csv(histogram(cloud, "c", cfg["bins"]),
                            out / f"hist_c_{i:03d}.csv", chash)
    trace_rows = [f"{k},{fmt_float(v)}" for k, v in enumerate(result.moment_trace)]
    _write_csv(out / "moment_trace.csv", "step,moment_guard", trace_rows, chash)
    write_manifest(out, chash, seed, {"status": "ok"})
    if not quiet:
        print(f"train: {len(result.snapshots)} snapshots, "
              f"max moment {result.max_moment:.4f} -> {out}")
    return 0


def cmd_meanfield(cfg: dict, seed: int, out: Path, quiet: bool) -> int:
    streams = RandomStreams(seed)
    model, init, act = _build_model(cfg)
    chash = config_hash(cfg)
    out.mkdir(parents=True, exist_ok=True)
    spec = QuadratureSpec(cfg["quad_mode"], cfg["quad_nodes"])
    quad = freeze_quadrature(spec, model, streams.stream(purpose="quadrature"))
    t_grid = np.linspace(0.0, cfg["t_horizon"], cfg["mf_snapshots"])
    status = "ok"
    exit_code = 0
    if cfg["mode"] == "selfconsistent":
        sol = solve_selfconsistent(init, model, cfg["m"], cfg["dt"],
                                   cfg["t_horizon"], quad=quad or spec,
                                   rng=streams.stream(purpose="paths"),
                                   alpha=cfg["alpha"], act=act,
                                   snapshot_times=t_grid)
    elif cfg["mode"] == "picard":
        cloud0 = sample_init(init, streams.stream(purpose="paths"), cfg["m"])
        tol = cfg["picard_tol"]
        if tol <= 0:
            floor = seed_resampled_floor(init, model, cfg["m"], cfg["dt"],
                                         cfg["t_horizon"], quad, streams,
                                         n_runs=max(2, cfg["floor_runs"]),
                                         alpha=cfg["alpha"], act=act,
                                         snapshot_times=t_grid)
            tol = 2.0 * floor
        m0 = frozen_start(cloud0, cfg["t_horizon"], cfg["dt"], quad, act,
                          cfg["alpha"], snapshot_times=t_grid)
        res = picard_iterate(m0, model, quad, tol=tol,
                             max_iters=cfg["picard_max_iters"])
        dist_rows = [f"{i},{fmt_float(d)}" for i, d in enumerate(res.distances)]
        _write_csv(out / "picard_distances.csv", "iteration,distance",
                   dist_rows, chash)
        sol = res.solution
        if not res.converged:
            status = "picard-not-converged"
            exit_code = 3
    else:
        raise ConfigError(f"unknown meanfield mode {cfg['mode']!r}")
    save_solution(sol, out, chash)
    fs = default_test_functions(model.d)
    res_rows = []
    for f in fs:
        resid, norm = weak_residual(sol, f)
        rel = resid / norm if norm > 0 else 0.0
        res_rows.append(f"{f.label},{fmt_float(resid)},{fmt_float(norm)},"
                        f"{fmt_float(rel)}")
    _write_csv(out / "weak_residual.csv", "f,residual,normalizer,relative",
               res_rows, chash)
    write_manifest(out, chash, seed, {"status": status})
    if not quiet:
        print(f"meanfield[{cfg['mode']}]: {sol.times.shape[0]} slices -> {out} "
              f"({status})")
    return exit_code


def _check(checks: list, name: str, passed: bool, detail: str):
    checks.append((name, bool(passed), detail))


def cmd_verify(cfg: dict, seed: int, out: Path, quiet: bool) -> int:
    streams = RandomStreams(seed)
    model, init, act = _build_model(cfg)
    chash = config_hash(cfg)
    out.mkdir(parents=True, exist_ok=True)
    alpha, T = cfg["alpha"], cfg["t_horizon"]
    n_grid = _int_list(cfg["n_grid"])
    fs = default_test_functions(model.d)
    checks: list = []

    study = run_study(model, init, act, alpha, T, n_grid, cfg["replicas"],
                      streams, workers=cfg["workers"])

    # variance decay of pairings
    for f in fs:
        table = lln_decay(study, f)
        header, rows = table.to_csv_rows()
        _write_csv(out / f"lln_{_slug(f.label)}.csv", header, rows, chash)
        if table.slope is None:
            _check(checks, f"lln-slope[{f.label}]", True,
                   "degenerate: zero variance at some N")
        else:
            _check(checks, f"lln-slope[{f.label}]",
                   -0.65 <= table.slope <= -0.35, f"slope={table.slope:.3f}")

    # parameter-moment boundedness
    mb = moment_bound(study)
    header, rows = mb.to_csv_rows()
    _write_csv(out / "moment_bound.csv", header, rows, chash)
    _check(checks, "moment-bound", mb.spread <= 1.5 and not mb.increasing,
           f"spread={mb.spread:.3f} increasing={mb.increasing}")

    # fluctuation decay; fs[1] depends on both c and w, so neither
    # fluctuation term is structurally zero
    mart_grid = _int_list(cfg["mart_n_grid"])
    mart = martingale_decay(model, init, fs[1], mart_grid, T,
                            cfg["mart_replicas"], streams, alpha=alpha, act=act)
    header, rows = mart.to_csv_rows()
    _write_csv(out / "martingale.csv", header, rows, chash)
    if float(np.max(mart.m1_sq)) <= 1e-28 and float(np.max(mart.m2_sq)) <= 1e-28:
        _check(checks, "martingale-ratio", True, "degenerate: fluctuations are 0")
    else:
        r1 = mart.ratio(mart_grid[0], mart_grid[-1], which=1)
        r2 = mart.ratio(mart_grid[0], mart_grid[-1], which=2)
        scale = mart_grid[-1] / mart_grid[0]
        lo, hi = 2.5 * scale / 4.0, 6.0 * scale / 4.0
        _check(checks, "martingale-ratio",
               lo <= r1 <= hi and lo <= r2 <= hi,
               f"M1 {r1:.2f}, M2 {r2:.2f}, window [{lo:.2f},{hi:.2f}]")

    # limit solution: reuse artifacts when pointed at them, else solve here
    if cfg["meanfield_dir"]:
        mf_dir = Path(cfg["meanfield_dir"])
        entries = check_manifest(mf_dir)
        if entries.get("config_hash") != chash:
            raise ConfigError(
                f"{mf_dir}: artifacts were produced with config_hash="
                f"{entries.get('config_hash')}, this config is {chash}")
        sol = load_solution(mf_dir)
    else:
        spec = QuadratureSpec(cfg["quad_mode"], cfg["quad_nodes"])
        sol = solve_selfconsistent(
            init, model, cfg["m"], cfg["dt"], T, quad=spec,
            rng=streams.stream(purpose="meanfield"), alpha=alpha, act=act,
            snapshot_times=np.linspace(0.0, T, cfg["mf_snapshots"]))

    res_rows = []
    worst = 0.0
    for f in fs:
        resid, norm = weak_residual(sol, f)
        rel = resid / norm if norm > 0 else 0.0
        worst = max(worst, rel)
        res_rows.append(f"{f.label},{fmt_float(resid)},{fmt_float(norm)},"
                        f"{fmt_float(rel)}")
    _write_csv(out / "weak_residual.csv", "f,residual,normalizer,relative",
               res_rows, chash)
    _check(checks, "weak-residual", worst <= 0.05, f"max relative {worst:.4f}")

    lim = limit_distance(study, sol, fs)
    header, rows = lim.to_csv_rows()
    _write_csv(out / "limit_distance.csv", header, rows, chash)
    for f in fs:
        series = lim.gap_series(f.label, T)
        mono = bool(np.all(np.diff(series) <= 1e-12))
        last = [r for r in lim.rows if r.n == n_grid[-1] and abs(r.t - T) <= 1e-9][0]
        gap, floor, se = last.gaps[f.label]
        _check(checks, f"limit-gap[{f.label}]",
               mono and gap <= floor + 3.0 * se,
               f"gaps={np.array2string(series, precision=4)} "
               f"floor={floor:.4f} se={se:.4f}")

    chaos = chaos_test(model, init, fs[0], fs[1], n_grid, T,
                       cfg["chaos_replicas"], streams, alpha=alpha, act=act)
    header, rows = chaos.to_csv_rows()
    _write_csv(out / "chaos.csv", header, rows, chash)
    dec = bool(np.all(np.diff(np.abs(chaos.cov)) < 0))
    covers = chaos.ci_lo[-1] <= 0.0 <= chaos.ci_hi[-1]
    cov_txt = ",".join(f"{v:.2e}" for v in np.abs(chaos.cov))
    _check(checks, "chaos", dec and covers,
           f"|cov|=[{cov_txt}] "
           f"top-N CI [{chaos.ci_lo[-1]:.2e},{chaos.ci_hi[-1]:.2e}]")

    report = []
    for name, passed, detail in checks:
        report.append(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    (out / "report.txt").write_text("\n".join(report) + "\n")
    write_manifest(out, chash, seed,
                   {"status": "ok" if all(p for _, p, _ in checks) else "failed"})
    if not quiet:
        print("\n".join(report))
    return 0 if all(p for _, p, _ in checks) else 4


def cmd_mnist_hist(cfg: dict, seed: int, out: Path, quiet: bool) -> int:
    streams = RandomStreams(seed)
    if not cfg["images"] or not cfg["labels"]:
        raise ConfigError("mnist-hist needs images= and labels= in the config")
    digits = _int_list(cfg["digit_pair"])
    if len(digits) != 2:
        raise ConfigError("digit_pair must hold two digits")
    model = load_mnist_idx(cfg["images"], cfg["labels"], tuple(digits))
    act = activation(cfg["activation"])
    init = InitLaw(d=model.d, w_scale=cfg["init_w_scale"])
    chash = config_hash(cfg)
    out.mkdir(parents=True, exist_ok=True)
    n_grid = _int_list(cfg["mnist_n_grid"])
    hists = []
    for n in n_grid:
        ens = Ensemble.from_init(init, act, cfg["alpha"],
                                 streams.stream(0, purpose="init"), n)
        result = train(ens, model, TrainSchedule(cfg["t_horizon"]),
                       streams.stream(0, purpose="data"))
        cloud = result.snapshots[-1][1]
        h = histogram(cloud, "c", cfg["bins"])
        write_histogram_csv(h, out / f"hist_c_n{n}.csv", chash)
        hists.append((n, h))
    rows = []
    for (n_small, h_small), (n_large, h_large) in zip(hists, hists[1:]):
        rows.append(f"{n_small},{n_large},{fmt_float(histogram_w1(h_small, h_large))}")
    _write_csv(out / "hist_w1.csv", "n_small,n_large,w1", rows, chash)
    write_manifest(out, chash, seed, {"status": "ok"})
    if not quiet:
        for row in rows:
            print("w1:", row)
    return 0


# ---------------------------------------------------------------------------
# entry point


def _add_common(sub: argparse.ArgumentParser):
    sub.add_argument("--config", default=None, help="key=value config file")
    sub.add_argument("--seed", type=int, default=0, help="64-bit run seed")
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument("--quiet", action="store_true")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfsgd",
        description="Wide-network SGD particle system, its large-N limit, "
                    "and statistical verification runs")
    subs = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "meanfield", "verify", "mnist-hist"):
        _add_common(subs.add_parser(name))
    args = parser.parse_args(argv)
    dispatch = {
        "train": cmd_train,
        "meanfield": cmd_meanfield,
        "verify": cmd_verify,
        "mnist-hist": cmd_mnist_hist,
    }
    try:
        cfg = parse_config(args.config)
        out = Path(args.out) if args.out else Path(
            f"runs/{args.command}-{config_hash(cfg)[:8]}-s{args.seed}")
        return dispatch[args.command](cfg, args.seed, out, args.quiet)
    except (ConfigError, RejectedInputError, IdxFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except DivergedError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
