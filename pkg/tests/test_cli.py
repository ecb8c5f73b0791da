import pytest

from sors.cli import main

CHAIN = """\
states 3 actions 2 gamma 0.9
T 0 0 0
T 0 1 1
T 1 0 0
T 1 1 2
T 2 0 2
T 2 1 2
terminal 2
"""


def mdp_file(tmp_path, r2_scale):
    lines = [CHAIN]
    for s in range(3):
        for a in range(2):
            r = 1.0 if (s, a) == (1, 1) else 0.1 * a
            lines.append(f"R1 {s} {a} {r}\nR2 {s} {a} {r2_scale * r}\n")
    path = tmp_path / "m.mdp"
    path.write_text("".join(lines))
    return path


def test_verify_scaled(tmp_path, capsys):
    assert main(["verify", "--mdp", str(mdp_file(tmp_path, 2.0)), "--horizon", "3"]) == 0
    out = capsys.readouterr().out
    assert "equivalent: true" in out and "optimal_sets_equal: true" in out and "violation: none" in out


def test_verify_negated(tmp_path, capsys):
    assert main(["verify", "--mdp", str(mdp_file(tmp_path, -1.0)), "--horizon", "3"]) == 0
    out = capsys.readouterr().out
    assert "equivalent: false" in out and "tau_i=" in out and "returns_r2:" in out


def test_verify_nondeterministic(tmp_path, capsys):
    path = tmp_path / "n.mdp"
    path.write_text("states 2 actions 1 gamma 0.9\nT 0 0 0 0.5\nT 0 0 1 0.5\nT 1 0 1\nR1 0 0 1\nR2 0 0 2\n")
    assert main(["verify", "--mdp", str(path), "--horizon", "2"]) == 2
    assert "error" in capsys.readouterr().err


def test_verify_missing_reward(tmp_path):
    path = tmp_path / "m.mdp"
    path.write_text(CHAIN + "R1 0 0 1\n")
    assert main(["verify", "--mdp", str(path), "--horizon", "2"]) == 1


@pytest.mark.parametrize("argv", [["verify", "--mdp", "x"], ["verify", "--mdp", "x", "--horizon", "0"],
                                  ["run"], ["smooth", "--in", "x", "--half-life", "-1"], ["bogus"], []])
def test_usage_errors(argv):
    assert main(argv) == 1


def test_missing_files(tmp_path):
    assert main(["verify", "--mdp", str(tmp_path / "no"), "--horizon", "2"]) == 1
    assert main(["run", "--config", str(tmp_path / "no.cfg")]) == 1
    assert main(["smooth", "--in", str(tmp_path / "no.csv"), "--half-life", "2"]) == 1


def test_run_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("env = sparse_grid\nleraning_rate = 0.1\n")
    assert main(["run", "--config", str(cfg)]) == 1
    assert "leraning_rate" in capsys.readouterr().err


def test_run_writes_results(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("env = delayed_chain\nmode = sparse\nnum_seeds = 2\nenv.n = 4\nloop.total_steps = 400\n"
                   "loop.initial_random_steps = 100\nloop.eval_period = 100\n")
    assert main(["run", "--config", str(cfg)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("seed,final_return,")
    produced = sorted(p.name for p in (tmp_path / "results").iterdir())
    assert produced == ["config.resolved", "sparse_delayed_chain_aggregate.csv", "sparse_delayed_chain_seed0.csv",
                        "sparse_delayed_chain_seed1.csv", "sparse_delayed_chain_summary.csv"]
    other = tmp_path / "elsewhere"
    assert main(["run", "--config", str(cfg), "--out", str(other)]) == 0
    assert (other / "sparse_delayed_chain_aggregate.csv").read_bytes() == \
        (tmp_path / "results" / "sparse_delayed_chain_aggregate.csv").read_bytes()


def test_smooth(tmp_path, capsys):
    src = tmp_path / "c.csv"
    src.write_text("step,raw_return\n0,0\n4,1\n")
    assert main(["smooth", "--in", str(src), "--half-life", "4"]) == 0
    assert capsys.readouterr().out == "step,raw_return,smoothed_return\n0,0,0\n4,1,0.5\n"


def test_smooth_bad_csv(tmp_path):
    src = tmp_path / "c.csv"
    src.write_text("when,what\n0,0\n")
    assert main(["smooth", "--in", str(src), "--half-life", "4"]) == 1
