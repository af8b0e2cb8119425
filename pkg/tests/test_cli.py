import numpy as np
import pytest

from eventdiff import cli
from eventdiff.formats import read_table, read_trajectory_csv, write_gmm
from eventdiff.gmm import GmmDistribution, gmm_halfspace_prob


@pytest.fixture
def gmm_file(tmp_path):
    g = GmmDistribution([0.5, 0.5], [[-1.0], [1.0]], [[[0.3]], [[0.3]]])
    path = tmp_path / "g.gmm"
    write_gmm(path, g)
    return g, path


@pytest.fixture
def event_file(tmp_path):
    path = tmp_path / "tail.txt"
    path.write_text("kind=linear; relation=greater_than; y=1.8\nC: 1\n")
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_simulate_shape_and_determinism(tmp_path):
    for k in range(2):
        assert run("simulate", "--system", "lorenz", "--n", 8, "--n-test", 2, "--m", 60,
                   "--seed", 7, "--out", tmp_path / f"s{k}") == 0
    values, header = read_trajectory_csv(tmp_path / "s0" / "train.csv")
    assert values.shape == (8, 60, 3)
    assert header["system"] == "lorenz_rescaled"
    for name in ("train.csv", "test.csv"):
        assert (tmp_path / "s0" / name).read_bytes() == (tmp_path / "s1" / name).read_bytes()
    assert "seed=7" in (tmp_path / "s0" / "config.txt").read_text()


def test_simulate_default_split(tmp_path, monkeypatch):
    seen = []

    def fake(spec, n, m, seed, split, start_index=0):
        seen.append((n, split))
        raise KeyboardInterrupt  # stop before any integration work

    monkeypatch.setattr(cli, "generate_dataset", fake)
    with pytest.raises(KeyboardInterrupt):
        run("simulate", "--out", tmp_path / "x")
    assert seen == [(4000, "train")]
    assert cli.resolve_config(None, {})["n_test"] == 500


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = blue\n")
    assert run("verify", "--config", cfg) == cli.EXIT_USAGE


def test_bad_value_type_is_usage_error(tmp_path):
    assert run("simulate", "--n", "many", "--out", tmp_path) == cli.EXIT_USAGE


def test_unknown_flag_exits_with_usage_code():
    with pytest.raises(SystemExit) as info:
        run("sample", "--colour", "blue")
    assert info.value.code == 2


def test_config_file_then_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nseed = 3\nn_steps = 50\n")
    resolved = cli.resolve_config(cfg, {"n_steps": "70"})
    assert resolved["seed"] == 3 and resolved["n_steps"] == 70


def test_sample_and_condition_with_gmm(tmp_path, gmm_file, event_file):
    _, gpath = gmm_file
    out = tmp_path / "s.csv"
    assert run("sample", "--gmm", gpath, "--n", 50, "--n-steps", 100, "--out", out) == 0
    values, _ = read_trajectory_csv(out)
    assert values.shape == (50, 1, 1)
    rates = {}
    for meth in ("moment", "naive"):
        out = tmp_path / f"{meth}.csv"
        assert run("condition", "--gmm", gpath, "--event", event_file, "--method", meth,
                   "--n", 400, "--n-steps", 200, "--out", out) == 0
        cols, cfg = read_table(f"{out}.report.csv")
        rates[meth] = cols["satisfaction"][0]
        assert (tmp_path / f"{meth}.csv.config.txt").exists()
    assert rates["moment"] > rates["naive"]


def test_condition_rerun_identical(tmp_path, gmm_file, event_file):
    _, gpath = gmm_file
    for k in range(2):
        run("condition", "--gmm", gpath, "--event", event_file, "--n", 20, "--n-steps", 50,
            "--out", tmp_path / f"c{k}.csv")
    assert (tmp_path / "c0.csv").read_bytes() == (tmp_path / "c1.csv").read_bytes()


def test_gmm_needs_event_file(tmp_path, gmm_file):
    _, gpath = gmm_file
    assert run("condition", "--gmm", gpath, "--out", tmp_path / "c.csv") == cli.EXIT_USAGE


def test_loglik_matches_analytic(tmp_path, gmm_file):
    g, gpath = gmm_file
    pts = tmp_path / "pts.csv"
    np.savetxt(pts, np.linspace(-2, 2, 7)[:, None], delimiter=",")
    out = tmp_path / "ll.csv"
    assert run("loglik", "--gmm", gpath, "--data", pts, "--out", out) == 0
    cols, _ = read_table(out)
    assert np.max(np.abs(cols["log_density"] - cols["analytic"])) < 1e-2


def test_event_prob_reports_truth(tmp_path, gmm_file, event_file):
    g, gpath = gmm_file
    out = tmp_path / "ep.csv"
    assert run("event-prob", "--gmm", gpath, "--event", event_file, "--estimator", "rate",
               "--n", 400, "--n-steps", 200, "--out", out) == 0
    cols, _ = read_table(out)
    truth = gmm_halfspace_prob(g, [1.0], 1.8)
    assert cols["truth"][0] == pytest.approx(truth)
    assert abs(cols["estimate"][0] - truth) < 4 * np.sqrt(truth * (1 - truth) / 400)


def test_experiment_convergence_writes_csv(tmp_path):
    out = tmp_path / "conv.csv"
    assert run("experiment", "convergence", "--out", out) == 0
    cols, cfg = read_table(out)
    assert len(cols["t"]) == 5 and cfg["experiment"] == "convergence"


def test_verify_exit_codes(monkeypatch, capsys):
    assert run("verify") == cli.EXIT_OK
    assert capsys.readouterr().out.count("PASS") >= 9
    monkeypatch.setattr(cli.ex, "verify_suite", lambda seed: [("broken", False, "forced")])
    assert run("verify") == cli.EXIT_INVARIANT


def test_numeric_failure_exit_code(tmp_path, gmm_file, monkeypatch):
    _, gpath = gmm_file

    def boom(*args, **kwargs):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(cli, "reverse_sde_sample", boom)
    assert run("sample", "--gmm", gpath, "--out", tmp_path / "s.csv") == cli.EXIT_NUMERIC


def test_train_and_sample_from_checkpoint(tmp_path):
    assert run("simulate", "--system", "pendulum", "--n", 32, "--n-test", 2, "--m", 4,
               "--out", tmp_path / "d") == 0
    ck = tmp_path / "net.ckpt"
    assert run("train", "--data", tmp_path / "d" / "train.csv", "--epochs", 2, "--batch", 16,
               "--hidden", "16,16", "--out", ck) == 0
    assert "ema_period=1" in (tmp_path / "net.ckpt.config.txt").read_text()
    out = tmp_path / "s.csv"
    assert run("sample", "--checkpoint", ck, "--n", 5, "--n-steps", 20, "--out", out) == 0
    values, header = read_trajectory_csv(out)
    assert values.shape == (5, 4, 4)
    assert header["system"] == "double_pendulum"
