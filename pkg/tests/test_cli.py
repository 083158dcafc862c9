"""End-to-end checks of the command-line runner: config parsing, artifact
layout, byte-level reproducibility, manifest integrity, and exit codes."""

import numpy as np
import pytest

from meanfield_sgd.cli import (_slug, check_manifest, config_hash,
                               load_solution, main, parse_config,
                               read_cloud_csv, read_manifest, write_cloud_csv)
from meanfield_sgd.core import ConfigError
from meanfield_sgd.measure import EmpiricalMeasure

# ---------------------------------------------------------------------------
# config parsing


def test_defaults_without_config_file():
    cfg = parse_config(None)
    assert cfg["n"] == 400
    assert cfg["n_grid"] == "100,400,1600"
    assert cfg["dt"] == 0.0005
    assert cfg["mode"] == "selfconsistent"


def test_config_overrides_and_comments(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# tiny run\n\nn = 64\nalpha=0.5\n")
    cfg = parse_config(str(p))
    assert cfg["n"] == 64 and cfg["alpha"] == 0.5
    assert cfg["d"] == 2                      # untouched default


def test_unknown_key_names_file_and_line(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("n=64\nbogus=1\n")
    with pytest.raises(ConfigError, match=r"bad.cfg:2: unknown key 'bogus'"):
        parse_config(str(p))


def test_duplicate_key_rejected(tmp_path):
    p = tmp_path / "dup.cfg"
    p.write_text("n=64\nn=128\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config(str(p))


def test_unparseable_value_rejected(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("n=sixty-four\n")
    with pytest.raises(ConfigError, match="config key n"):
        parse_config(str(p))


def test_missing_equals_rejected(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("just a line\n")
    with pytest.raises(ConfigError, match="expected key=value"):
        parse_config(str(p))


def test_config_errors_exit_code_2(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("bogus=1\n")
    rc = main(["train", "--config", str(p), "--quiet"])
    assert rc == 2
    assert "unknown key" in capsys.readouterr().err


def test_config_hash_ignores_line_order(tmp_path):
    a, b = tmp_path / "a.cfg", tmp_path / "b.cfg"
    a.write_text("n=64\nalpha=0.5\n")
    b.write_text("alpha=0.5\nn=64\n")
    ha, hb = config_hash(parse_config(str(a))), config_hash(parse_config(str(b)))
    assert ha == hb and len(ha) == 16
    assert ha != config_hash(parse_config(None))


def test_slug_makes_filenames_safe():
    assert _slug("psi(c^1*w1^1)") == "psi-c-1-w1-1"
    assert _slug("bump(s=1.5)") == "bump-s-1.5"


def test_cloud_csv_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    cloud = EmpiricalMeasure(rng.standard_normal(17), rng.standard_normal((17, 3)))
    path = tmp_path / "cloud.csv"
    write_cloud_csv(path, cloud, "feedc0de")
    back = read_cloud_csv(path)
    assert np.array_equal(back.c, cloud.c) and np.array_equal(back.w, cloud.w)
    assert path.read_text().startswith("# config_hash=feedc0de\nc,w_1,w_2,w_3")


# ---------------------------------------------------------------------------
# train


TRAIN_CFG = "n=64\nt_horizon=0.25\nsnapshot_times=0.125,0.25\nbins=10\n"


def _write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_train_artifacts_and_byte_reproducibility(tmp_path):
    cfg = _write_cfg(tmp_path, TRAIN_CFG)
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["train", "--config", cfg, "--seed", "3",
                 "--out", str(out1), "--quiet"]) == 0
    for i in range(3):
        assert (out1 / f"snapshot_{i:03d}.csv").exists()
        assert (out1 / f"hist_c_{i:03d}.csv").exists()
    trace = (out1 / "moment_trace.csv").read_text().splitlines()
    assert len(trace) == 2 + 17          # hash line + header + 16 steps + t0
    entries = check_manifest(out1)       # every checksum verifies
    assert entries["status"] == "ok" and entries["seed"] == "3"

    assert main(["train", "--config", cfg, "--seed", "3",
                 "--out", str(out2), "--quiet"]) == 0
    for f1 in sorted(out1.iterdir()):
        assert f1.read_bytes() == (out2 / f1.name).read_bytes(), f1.name


def test_train_seed_changes_artifacts(tmp_path):
    cfg = _write_cfg(tmp_path, TRAIN_CFG)
    out1, out2 = tmp_path / "s3", tmp_path / "s4"
    main(["train", "--config", cfg, "--seed", "3", "--out", str(out1), "--quiet"])
    main(["train", "--config", cfg, "--seed", "4", "--out", str(out2), "--quiet"])
    a = (out1 / "snapshot_002.csv").read_bytes()
    b = (out2 / "snapshot_002.csv").read_bytes()
    assert a != b


def test_train_alpha_zero_leaves_histogram_fixed(tmp_path):
    cfg = _write_cfg(tmp_path, TRAIN_CFG + "alpha=0\n")
    out = tmp_path / "frozen"
    assert main(["train", "--config", cfg, "--out", str(out), "--quiet"]) == 0
    first = (out / "hist_c_000.csv").read_bytes()
    last = (out / "hist_c_002.csv").read_bytes()
    assert first == last


def test_train_divergence_exit_3(tmp_path):
    cfg = _write_cfg(tmp_path, "n=32\nt_horizon=0.5\nalpha=1e16\n")
    out = tmp_path / "boom"
    rc = main(["train", "--config", cfg, "--out", str(out), "--quiet"])
    assert rc == 3
    assert (out / "DIVERGED").read_text().startswith("step=")
    assert read_manifest(out)["status"] == "diverged"


def test_unknown_model_exit_2(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "model=quux\n")
    rc = main(["train", "--config", cfg, "--out", str(tmp_path / "x"), "--quiet"])
    assert rc == 2 and "unknown model" in capsys.readouterr().err


def test_default_out_directory_pattern(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    cfg = _write_cfg(tmp_path, TRAIN_CFG)
    assert main(["train", "--config", cfg, "--seed", "7", "--quiet"]) == 0
    chash = config_hash(parse_config(cfg))[:8]
    assert (tmp_path / "runs" / f"train-{chash}-s7" / "manifest.txt").exists()


# ---------------------------------------------------------------------------
# meanfield

MF_CFG = ("m=200\ndt=0.025\nt_horizon=0.25\nquad_nodes=128\n"
          "mf_snapshots=5\nn_grid=16,32,64\nreplicas=20\n"
          "mart_n_grid=16,64\nmart_replicas=8\nchaos_replicas=50\n")


def test_meanfield_selfconsistent_artifacts(tmp_path):
    cfg = _write_cfg(tmp_path, MF_CFG)
    out = tmp_path / "mf"
    assert main(["meanfield", "--config", cfg, "--out", str(out),
                 "--quiet"]) == 0
    sol = load_solution(out)
    assert sol.times.shape == (5,) and sol.n_paths == 200 and sol.d == 2
    assert sol.quad.n == 128
    resid = (out / "weak_residual.csv").read_text().splitlines()
    assert resid[1] == "f,residual,normalizer,relative" and len(resid) == 5
    check_manifest(out)


def test_meanfield_solution_roundtrip_exact(tmp_path):
    cfg = _write_cfg(tmp_path, MF_CFG)
    out1, out2 = tmp_path / "m1", tmp_path / "m2"
    main(["meanfield", "--config", cfg, "--seed", "5", "--out", str(out1),
          "--quiet"])
    main(["meanfield", "--config", cfg, "--seed", "5", "--out", str(out2),
          "--quiet"])
    for f1 in sorted(out1.iterdir()):
        assert f1.read_bytes() == (out2 / f1.name).read_bytes(), f1.name


def test_meanfield_picard_with_automatic_tolerance(tmp_path):
    cfg = _write_cfg(tmp_path, MF_CFG + "mode=picard\npicard_max_iters=8\n")
    out = tmp_path / "pic"
    assert main(["meanfield", "--config", cfg, "--out", str(out),
                 "--quiet"]) == 0
    dist = (out / "picard_distances.csv").read_text().splitlines()
    assert dist[1] == "iteration,distance" and len(dist) >= 3
    assert read_manifest(out)["status"] == "ok"


def test_meanfield_picard_nonconvergence_exit_3(tmp_path):
    cfg = _write_cfg(tmp_path,
                     MF_CFG + "mode=picard\npicard_tol=1e-15\n"
                              "picard_max_iters=1\n")
    out = tmp_path / "stuck"
    rc = main(["meanfield", "--config", cfg, "--out", str(out), "--quiet"])
    assert rc == 3
    assert read_manifest(out)["status"] == "picard-not-converged"
    assert (out / "solution_meta.txt").exists()   # partial result still saved


def test_meanfield_unknown_mode_exit_2(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "mode=magic\n")
    rc = main(["meanfield", "--config", cfg, "--out", str(tmp_path / "x"),
               "--quiet"])
    assert rc == 2 and "unknown meanfield mode" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# verify


@pytest.fixture(scope="module")
def verify_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("verify")
    cfg = _write_cfg(base, MF_CFG)
    mf_out = base / "mf"
    assert main(["meanfield", "--config", cfg, "--out", str(mf_out),
                 "--quiet"]) == 0
    out = base / "ver"
    rc = main(["verify", "--config", cfg, "--seed", "11", "--out", str(out),
               "--quiet"])
    return base, cfg, mf_out, out, rc


def test_verify_report_lines_match_exit_code(verify_run):
    _, _, _, out, rc = verify_run
    lines = (out / "report.txt").read_text().splitlines()
    # 3 lln + moment + martingale + residual + 3 limit gaps + chaos
    assert len(lines) == 10
    assert all(ln.startswith(("PASS ", "FAIL ")) for ln in lines)
    all_pass = all(ln.startswith("PASS") for ln in lines)
    assert rc == (0 if all_pass else 4)
    status = read_manifest(out)["status"]
    assert status == ("ok" if all_pass else "failed")
    for stem in ("moment_bound", "martingale", "weak_residual",
                 "limit_distance", "chaos"):
        assert (out / f"{stem}.csv").exists()


def test_verify_reuses_meanfield_artifacts(verify_run, tmp_path):
    """Pointing verify at a meanfield run directory must not change the
    config hash (it is an operational key), so the artifacts load."""
    base, cfg, mf_out, _, _ = verify_run
    reuse_cfg = _write_cfg(tmp_path, MF_CFG + f"meanfield_dir={mf_out}\n")
    out = tmp_path / "ver2"
    rc = main(["verify", "--config", reuse_cfg, "--seed", "11",
               "--out", str(out), "--quiet"])
    assert rc in (0, 4)
    assert (out / "report.txt").exists()


def test_verify_rejects_artifacts_from_other_config(verify_run, tmp_path,
                                                    capsys):
    base, cfg, mf_out, _, _ = verify_run
    mixed = _write_cfg(tmp_path,
                       MF_CFG + f"alpha=0.7\nmeanfield_dir={mf_out}\n",
                       name="mixed.cfg")
    rc = main(["verify", "--config", mixed, "--out", str(tmp_path / "vx"),
               "--quiet"])
    assert rc == 2
    assert "config_hash" in capsys.readouterr().err


def test_verify_detects_artifact_corruption(verify_run, tmp_path, capsys):
    base, cfg, mf_out, _, _ = verify_run
    victim = mf_out / "solution_000.csv"
    good = victim.read_bytes()
    try:
        victim.write_bytes(good.replace(b"0", b"1", 1))
        bad_cfg = _write_cfg(tmp_path, MF_CFG + f"meanfield_dir={mf_out}\n",
                             name="bad.cfg")
        rc = main(["verify", "--config", bad_cfg, "--out",
                   str(tmp_path / "v3"), "--quiet"])
        assert rc == 2
        assert "checksum mismatch" in capsys.readouterr().err
    finally:
        victim.write_bytes(good)


# ---------------------------------------------------------------------------
# mnist-hist


def test_mnist_hist_artifacts(idx_files, tmp_path):
    images, labels = idx_files
    cfg = _write_cfg(
        tmp_path,
        f"images={images}\nlabels={labels}\ndigit_pair=3,5\n"
        "mnist_n_grid=20,40\nt_horizon=0.1\nbins=10\ninit_w_scale=0.05\n")
    out = tmp_path / "mnist"
    assert main(["mnist-hist", "--config", cfg, "--out", str(out),
                 "--quiet"]) == 0
    assert (out / "hist_c_n20.csv").exists()
    assert (out / "hist_c_n40.csv").exists()
    w1 = (out / "hist_w1.csv").read_text().splitlines()
    assert w1[1] == "n_small,n_large,w1" and len(w1) == 3
    assert w1[2].startswith("20,40,")
    check_manifest(out)


def test_mnist_hist_missing_paths_exit_2(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, "mnist_n_grid=20,40\n")
    rc = main(["mnist-hist", "--config", cfg, "--out", str(tmp_path / "x"),
               "--quiet"])
    assert rc == 2 and "images=" in capsys.readouterr().err
