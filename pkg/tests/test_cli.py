import csv
import json

import pytest

from dpetc.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main


def write_cfg(path, data):
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def read_rows(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    return list(csv.DictReader(lines[1:]))


@pytest.fixture(scope="module")
def design_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("design")
    assert main(["design", "--out", str(out), "--check-reference"]) == EXIT_OK
    return out


class TestDesign:
    def test_both_classes(self, design_dir, capsys):
        rep = json.loads((design_dir / "design.json").read_text())
        assert rep["certified"]
        assert {a["n_out"] for a in rep["agents"]} == {2, 3}
        miet = {a["n_out"]: a["tau_miet"] for a in rep["agents"]}
        assert miet == {2: 0.07, 3: 0.05}
        assert (design_dir / "phi_N2.csv").exists() and (design_dir / "phi_N3.csv").exists()

    def test_reference_values_reported(self, design_dir):
        pv = json.loads((design_dir / "design.json").read_text())["reference_values"]
        assert all(r["matches_reference"] for r in pv["c"].values())
        assert not any(r["matches_reference"] for r in pv["c_over_n"].values())

    def test_rerun_is_byte_identical(self, design_dir, tmp_path):
        assert main(["design", "--out", str(tmp_path), "--check-reference"]) == EXIT_OK
        for name in ("design.json", "phi_N2.csv", "phi_N3.csv"):
            assert (tmp_path / name).read_bytes() == (design_dir / name).read_bytes()
        assert not [p for p in tmp_path.iterdir() if p.name.startswith(".")]

    @pytest.mark.parametrize("lam", [0.0, 1.5])
    def test_bad_lambda(self, tmp_path, lam, capsys):
        cfg = write_cfg(tmp_path / "c.json", {"etm": {"lam": lam}})
        assert main(["design", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "error" in capsys.readouterr().err

    def test_bad_ordering(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.json", {"etm": {"phi1_init": 0.1}})
        assert main(["design", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "initial conditions" in capsys.readouterr().err

    @pytest.mark.parametrize("data", [{"horizn": 3}, {"etm": {"phi1": 0.1}}, [1, 2]])
    def test_unknown_key(self, tmp_path, data):
        cfg = write_cfg(tmp_path / "c.json", data)
        assert main(["design", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_config(self, tmp_path):
        assert main(["design", "--config", str(tmp_path / "nope.json")]) == EXIT_CONFIG

    def test_consistent_variant(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", {"mu_convention": "c_over_n", "tau_miet": None,
                                              "etm": {"tau_masp": 5e-3, "d_min": 5e-4}})
        assert main(["design", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK

    def test_inconsistent_variant(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.json", {"mu_convention": "c_over_n"})
        assert main(["design", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
        assert "tau_miet" in capsys.readouterr().err


class TestSimulate:
    def test_files_and_summary(self, tmp_path):
        out = tmp_path / "run"
        assert main(["simulate", "--out", str(out), "--horizon", "0.5", "--seed", "4"]) == EXIT_OK
        summ = json.loads((out / "summary.json").read_text())
        assert summ["seed"] == 4 and summ["horizon"] == 0.5
        text = (out / "trace.csv").read_text()
        assert text.startswith("# dpetc-trace v1")
        rows = read_rows(out / "trace.csv")
        assert float(rows[0]["time"]) == 0.0 and float(rows[-1]["time"]) == 0.5
        assert not (out / "report.json").exists()
        assert sorted(p.name for p in out.iterdir()) == ["summary.json", "trace.csv"]

    def test_zero_horizon(self, tmp_path):
        assert main(["simulate", "--out", str(tmp_path), "--horizon", "0"]) == EXIT_OK
        rows = read_rows(tmp_path / "trace.csv")
        assert len(rows) == 1
        json.loads((tmp_path / "summary.json").read_text())

    def test_negative_horizon(self, tmp_path):
        assert main(["simulate", "--out", str(tmp_path), "--horizon", "-1"]) == EXIT_CONFIG

    def test_env_seed_overrides(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PETC_SEED", "17")
        assert main(["simulate", "--out", str(tmp_path / "a"), "--horizon", "0.2",
                     "--seed", "3"]) == EXIT_OK
        monkeypatch.delenv("PETC_SEED")
        assert main(["simulate", "--out", str(tmp_path / "b"), "--horizon", "0.2",
                     "--seed", "17"]) == EXIT_OK
        assert (tmp_path / "a/trace.csv").read_bytes() == (tmp_path / "b/trace.csv").read_bytes()
        assert json.loads((tmp_path / "a/summary.json").read_text())["seed"] == 17

    def test_two_seeds_verify(self, tmp_path, capsys):
        texts = []
        for seed in ("1", "2"):
            out = tmp_path / seed
            assert main(["simulate", "--out", str(out), "--horizon", "0.3", "--seed", seed,
                         "--verify"]) == EXIT_OK
            rep = json.loads((out / "report.json").read_text())
            assert rep["passed"]
            texts.append((out / "trace.csv").read_text())
        assert texts[0] != texts[1]
        assert "supply_downgrades=" in capsys.readouterr().out

    def test_conservative_mode(self, tmp_path):
        assert main(["simulate", "--out", str(tmp_path), "--horizon", "0.3", "--mode",
                     "conservative", "--verify"]) == EXIT_OK

    def test_large_seed(self, tmp_path):
        assert main(["simulate", "--out", str(tmp_path), "--horizon", "0.05", "--seed",
                     str(2 ** 64 - 1)]) == EXIT_OK


class TestVerify:
    def test_replay_matches_live(self, tmp_path):
        run_dir = tmp_path / "run"
        assert main(["simulate", "--out", str(run_dir), "--horizon", "0.3", "--seed", "6",
                     "--verify"]) == EXIT_OK
        chk = tmp_path / "chk"
        assert main(["verify", str(run_dir / "trace.csv"), "--out", str(chk)]) == EXIT_OK
        live = json.loads((run_dir / "report.json").read_text())
        again = json.loads((chk / "report.json").read_text())
        assert again["metrics"].pop("v_nonincreasing") is True
        again["metrics"].pop("v_worst_increase")
        assert again == live

    def test_detects_edited_trace(self, tmp_path):
        run_dir = tmp_path / "run"
        main(["simulate", "--out", str(run_dir), "--horizon", "0.3", "--seed", "6", "--verify"])
        lines = (run_dir / "trace.csv").read_text().splitlines(keepends=True)
        header = lines[1].rstrip("\n").split(",")
        col = header.index("eta0")
        # bump eta of agent 0 right after the first transmission it makes
        k = next(n for n, ln in enumerate(lines[2:], 2)
                 if ln.split(",")[1] == "G_a" and ln.split(",")[2] == "0")
        cells = lines[k].rstrip("\n").split(",")
        cells[col] = repr(float(cells[col]) + 0.5)
        lines[k] = ",".join(cells) + "\n"
        bad = tmp_path / "bad.csv"
        bad.write_text("".join(lines))
        code = main(["verify", str(bad), "--out", str(tmp_path / "chk")])
        assert code in (EXIT_FAIL, EXIT_CONFIG)

    def test_summary_only_trace_rejected(self, tmp_path, capsys):
        main(["simulate", "--out", str(tmp_path), "--horizon", "0.1"])
        assert main(["verify", str(tmp_path / "trace.csv"), "--out", str(tmp_path)]) == EXIT_CONFIG


class TestCurve:
    def test_grid(self, tmp_path):
        grid = ",".join(f"{v / 10:.1f}" for v in range(1, 10))
        assert main(["curve", "--out", str(tmp_path), "--lambdas", grid]) == EXIT_OK
        rows = list(csv.DictReader((tmp_path / "curve.csv").read_text().splitlines()))
        for n in ("2", "3"):
            sub = [r for r in rows if r["n_out"] == n]
            tmax = [float(r["tau_max"]) for r in sub]
            assert len(sub) == 4  # lambda >= 0.5 breaks the ordering
            assert all(a > b for a, b in zip(tmax, tmax[1:]))

    def test_single_lambda(self, tmp_path):
        assert main(["curve", "--out", str(tmp_path), "--lambdas", "0.2"]) == EXIT_OK
        rows = list(csv.DictReader((tmp_path / "curve.csv").read_text().splitlines()))
        assert [r["lambda"] for r in rows] == ["0.2", "0.2"]

    def test_empty_grid(self, tmp_path):
        assert main(["curve", "--out", str(tmp_path), "--lambdas", " , "]) == EXIT_CONFIG

    def test_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["launch"])
        assert exc.value.code == 2
