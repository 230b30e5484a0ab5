"""Configuration, report serialisation and the command-line contract."""

import json
import math

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from kinetic_bc import __version__
from kinetic_bc.cli import EXIT_CHECK, EXIT_INVALID, EXIT_OK, SCHEMAS, main, resolve_threads, run_scenario
from kinetic_bc.config import ScenarioConfig, load_config, parse_range
from kinetic_bc.errors import ConfigInvalid
from kinetic_bc.report import ReportBundle, csv_columns, emit_report, format_float, to_csv, to_json

FAST_DIFFUSE = {"bc": {"kind": "diffuse", "mc_paths": 300}, "run": {"t_start": 1.0, "t_end": 3.0, "t_steps": 5,
                                                                   "samples": 6}, "seed": 11}


def _write(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(json.dumps(data) if name.endswith(".json") else yaml.safe_dump(data))
    return p


class TestConfig:
    def test_defaults_are_valid(self):
        cfg = ScenarioConfig()
        assert cfg.weights.theta < 0.25 and cfg.seed == 0
        assert cfg.domain.build().is_quadric

    @pytest.mark.parametrize("section,values", [
        ("weights", {"theta": 0.25}),
        ("weights", {"theta": 0.3}),
        ("weights", {"rho": 0.0}),
        ("kernel", {"gamma": 1.5}),
        ("kernel", {"gamma": -0.1}),
        ("domain", {"kind": "torus"}),
        ("bc", {"kind": "maxwell"}),
        ("run", {"t_steps": 3}),
        ("run", {"typo_key": 1}),
    ])
    def test_invalid_sections(self, section, values):
        with pytest.raises(ConfigInvalid):
            ScenarioConfig.from_mapping({section: values})

    @pytest.mark.parametrize("seed", [-1, 1.5, "7", True])
    def test_bad_seed(self, seed):
        with pytest.raises(ConfigInvalid):
            ScenarioConfig.from_mapping({"seed": seed})

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigInvalid):
            ScenarioConfig.from_mapping({"sed": 3})

    def test_yaml_and_json_agree(self, tmp_path):
        data = {"domain": {"kind": "ellipsoid", "semi_axes": [0.8, 0.8, 1.2]}, "bc": {"kind": "specular"},
                "weights": {"theta": 0.1}, "seed": 4}
        a = load_config(_write(tmp_path, data, "a.yaml"))
        b = load_config(_write(tmp_path, data, "b.json"))
        assert a == b and a.config_hash() == b.config_hash()

    def test_hash_detects_changes(self):
        a = ScenarioConfig()
        assert a.config_hash() == ScenarioConfig().config_hash()
        assert a.config_hash() != a.with_overrides("run", samples=7).config_hash()
        assert a.config_hash() != a.with_overrides("seed", seed=1).config_hash()

    def test_unreadable_config(self, tmp_path):
        with pytest.raises(ConfigInvalid):
            load_config(tmp_path / "missing.yaml")
        bad = tmp_path / "bad.yaml"
        bad.write_text("- just\n- a list\n")
        with pytest.raises(ConfigInvalid):
            load_config(bad)

    def test_normalized_kernel(self):
        from kinetic_bc.collision import collision_frequency
        cfg = ScenarioConfig().kernel.build()
        assert float(collision_frequency(cfg, np.zeros(3), check=False)) == pytest.approx(1.0, rel=1e-12)

    @pytest.mark.parametrize("text,integer,expected", [
        ("2..5", True, [2, 3, 4, 5]),
        ("0..2", False, [0.0, 2.0]),
        ("3,7,9", True, [3, 7, 9]),
        ("4", True, [4]),
    ])
    def test_parse_range(self, text, integer, expected):
        assert parse_range(text, integer=integer) == expected

    def test_parse_range_rejects_garbage(self):
        with pytest.raises(ConfigInvalid):
            parse_range("a..b", integer=True)


class TestReport:
    def _bundle(self):
        b = ReportBundle("demo", rows=[{"t": 0.1, "v": 1 / 3}, {"t": 0.2, "v": np.float64(2 / 3), "extra": [1, 2]}],
                         summary={"pi": math.pi, "arr": np.array([0.1, 1e-300]), "none": None, "inf": math.inf},
                         provenance={"seed": 1})
        b.add_check("ok", True)
        return b

    def test_json_round_trip(self):
        b = self._bundle()
        d = json.loads(to_json(b))
        assert d["rows"][0]["v"] == 1 / 3 and d["rows"][1]["v"] == 2 / 3
        assert d["summary"]["pi"] == math.pi
        assert d["summary"]["arr"] == [0.1, 1e-300]
        assert d["summary"]["inf"] == "inf" and d["summary"]["none"] is None
        assert list(d) == ["command", "provenance", "summary", "checks", "rows"]

    def test_seventeen_digits(self):
        assert format_float(0.1) == "0.10000000000000001"
        assert format_float(1.0) == "1"
        assert format_float(float("nan")) == '"nan"'

    @settings(max_examples=200, deadline=None)
    @given(st.floats(allow_nan=False, allow_infinity=False))
    def test_float_round_trip(self, x):
        assert float(format_float(x)) == x

    def test_csv_header_first_seen_order(self):
        text = to_csv(self._bundle())
        assert text.splitlines()[0] == "t,v,extra"
        assert csv_columns(self._bundle().rows) == ["t", "v", "extra"]

    def test_emit_writes_file(self, tmp_path):
        path = emit_report(self._bundle(), "csv", tmp_path / "out")
        assert path.name == "demo.csv" and path.read_text() == to_csv(self._bundle())
        assert emit_report(self._bundle(), "json", None) is None


class TestRunScenario:
    def test_jacobian_example(self):
        cfg = ScenarioConfig().with_overrides("run", jacobian_k=2, eps0=1e-3)
        b = run_scenario(cfg, "jacobian", threads=1)
        row = b.rows[0]
        assert row["det_fd"] == pytest.approx(3.0, rel=0.05)
        assert row["det_pred"] == 3.0 and row["zeta_pred"] == 2
        assert not b.failed_checks
        assert b.provenance == {"config_hash": cfg.config_hash(), "seed": 0, "version": __version__,
                                "command": "jacobian"}

    def test_stuck_mass_monotone(self):
        cfg = ScenarioConfig.from_mapping({"run": {"k": list(range(2, 13)), "paths": 5000}, "seed": 2})
        b = run_scenario(cfg, "stuck-mass", threads=1)
        fr = [r["fraction"] for r in b.rows]
        assert all(b2 <= a for a, b2 in zip(fr, fr[1:]))
        assert b.summary["k0"] is not None and not b.failed_checks

    def test_decay_bounceback_rate(self):
        cfg = ScenarioConfig.from_mapping({"bc": {"kind": "bounceback"}, "run": {"samples": 200}})
        b = run_scenario(cfg, "decay", threads=1)
        assert b.summary["lambda_hat"] >= b.summary["nu0"] - 1e-6
        assert set(b.summary) >= {"times", "norms", "lambda_hat", "residual", "remainder_bounds",
                                  "quadrature_spec"}
        assert not b.failed_checks

    @pytest.mark.parametrize("command", ["trace", "cycles", "jacobian", "stuck-mass", "decay"])
    def test_csv_schema(self, command):
        cfg = ScenarioConfig.from_mapping({"run": {"samples": 20, "paths": 500, "k": [2, 3, 4]}})
        b = run_scenario(cfg, command, threads=1)
        assert to_csv(b).splitlines()[0].split(",") == SCHEMAS[command]

    @pytest.mark.parametrize("kind", ["inflow", "bounceback", "specular", "diffuse"])
    def test_cycles_schema_all_walls(self, kind):
        cfg = ScenarioConfig.from_mapping({"bc": {"kind": kind}, "run": {"t": 2.5}, "seed": 3})
        b = run_scenario(cfg, "cycles", threads=1)
        assert csv_columns(b.rows) == SCHEMAS["cycles"] and not b.failed_checks

    @pytest.mark.parametrize("command", ["solve", "coercivity"])
    def test_desk_commands(self, command):
        cfg = ScenarioConfig.from_mapping({"domain": {"radius": 0.5}, "run": {"t_end": 1.0, "t": 1.0,
                                                                              "picard_iters": 2}})
        b = run_scenario(cfg, command, threads=1)
        assert csv_columns(b.rows) == SCHEMAS[command] and not b.failed_checks
        if command == "solve":
            assert b.summary["conservation"]["mass_drift"] < 1e-10

    def test_unknown_command(self):
        with pytest.raises(ConfigInvalid):
            run_scenario(None, "plot")

    def test_desk_rejects_diffuse(self):
        with pytest.raises(ConfigInvalid):
            run_scenario(ScenarioConfig.from_mapping({"bc": {"kind": "diffuse"}}), "solve", threads=1)


class TestDeterminism:
    def test_same_seed_same_bytes(self):
        cfg = ScenarioConfig.from_mapping(FAST_DIFFUSE)
        a = to_json(run_scenario(cfg, "decay", threads=1))
        b = to_json(run_scenario(cfg, "decay", threads=1))
        assert a == b

    def test_thread_count_does_not_change_output(self):
        cfg = ScenarioConfig.from_mapping(FAST_DIFFUSE)
        assert to_json(run_scenario(cfg, "decay", threads=1)) == to_json(run_scenario(cfg, "decay", threads=4))

    def test_seed_changes_output(self):
        a = ScenarioConfig.from_mapping(FAST_DIFFUSE)
        b = a.with_overrides("seed", seed=12)
        ja = json.loads(to_json(run_scenario(a, "decay", threads=1)))
        jb = json.loads(to_json(run_scenario(b, "decay", threads=1)))
        assert ja["summary"]["norms"] != jb["summary"]["norms"]
        assert ja["provenance"]["config_hash"] != jb["provenance"]["config_hash"]


class TestMain:
    def test_success_prints_json(self, capsys):
        assert main(["jacobian", "--k", "2", "--eps0", "1e-3", "--domain", "ball"]) == EXIT_OK
        out = json.loads(capsys.readouterr().out)
        assert out["rows"][0]["zeta_pred"] == 2

    def test_invalid_config_exit_2(self, tmp_path, capsys):
        p = _write(tmp_path, {"weights": {"theta": 0.3}})
        assert main(["trace", "--config", str(p)]) == EXIT_INVALID
        assert "theta" in capsys.readouterr().err

    def test_argparse_error_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["jacobian", "--format", "xml"])
        assert exc.value.code == 2

    def test_failed_check_exit_3(self, tmp_path, capsys):
        p = _write(tmp_path, {"run": {"jacobian_tol": 1e-12}})
        assert main(["jacobian", "--config", str(p), "--eps0", "1e-2"]) == EXIT_CHECK
        assert "det_matches_prediction" in capsys.readouterr().err

    def test_check_failure_names_invariant(self, capsys):
        assert main(["stuck-mass", "--k", "2..3", "--t", "5", "--paths", "200", "--seed", "1"]) == EXIT_CHECK
        assert "drops_below_threshold" in capsys.readouterr().err

    def test_numerical_guard_exit_3(self, tmp_path, capsys):
        # one re-emission cannot reach t = 0 from t = 3, so the stuck-fraction cap trips
        p = _write(tmp_path, {"bc": {"kind": "diffuse", "k_trunc": 2, "mc_paths": 200},
                              "run": {"t_start": 1.0, "t_end": 3.0, "t_steps": 5, "samples": 3}})
        assert main(["decay", "--config", str(p)]) == EXIT_CHECK
        assert "RemainderTooLarge" in capsys.readouterr().err

    def test_out_dir_and_formats(self, tmp_path, capsys):
        for fmt, ext in (("json", "json"), ("csv", "csv"), ("text", "txt")):
            assert main(["trace", "--samples", "5", "--out", str(tmp_path), "--format", fmt]) == EXIT_OK
            assert (tmp_path / f"trace.{ext}").exists()
        assert capsys.readouterr().out == ""
        header = (tmp_path / "trace.csv").read_text().splitlines()[0]
        assert header.split(",") == SCHEMAS["trace"]

    def test_cli_bytes_identical(self, tmp_path):
        args = ["stuck-mass", "--k", "2..8", "--paths", "1000", "--seed", "5", "--format", "json"]
        main(args + ["--out", str(tmp_path / "a")])
        main(args + ["--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "stuck-mass.json").read_bytes() == (tmp_path / "b" / "stuck-mass.json").read_bytes()

    def test_threads_env_fallback(self, monkeypatch):
        monkeypatch.setenv("KC_THREADS", "3")
        assert resolve_threads(None) == 3
        assert resolve_threads(2) == 2
        monkeypatch.setenv("KC_THREADS", "many")
        with pytest.raises(ConfigInvalid):
            resolve_threads(None)
        with pytest.raises(ConfigInvalid):
            resolve_threads(0)
