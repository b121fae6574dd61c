"""CLI: commands, exit codes, config precedence, machine-readable output."""

from __future__ import annotations

import json
import os

import pytest

from supervisord.cli import (
    EXIT_BUDGET,
    EXIT_CLARIFICATION,
    EXIT_CORRUPT_STATE,
    EXIT_UNKNOWN_SESSION,
    EXIT_WORKLOAD_SPEC,
    main,
    resolve_config,
    build_parser,
)


@pytest.fixture
def store(tmp_path, monkeypatch):
    root = tmp_path / "store"
    monkeypatch.setenv("SUPERVISORD_STORE_ROOT", str(root))
    monkeypatch.delenv("SUPERVISORD_BUDGET_USD", raising=False)
    return root


def run_cli(*argv):
    return main(list(argv))


class TestRun:
    def test_simple_text_query(self, store, capsys):
        code = run_cli("--json", "run", "hello there", "--knob", "open_src")
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["flag"] == "routellm"
        assert float(payload["cost_usd"]) > 0
        assert os.path.exists(payload["trace_path"])

    def test_audio_fixture_run(self, store, tmp_path, capsys):
        fixtures = {"a.mp3": {"transcript": [{"word": "hi", "t": 0.0, "conf": 0.9}]}}
        fixture_path = tmp_path / "fixtures.json"
        fixture_path.write_text(json.dumps(fixtures))
        code = run_cli(
            "--json", "run", "transcribe", "--attach", "a.mp3",
            "--knob", "trad_couplet", "--fixtures", str(fixture_path),
        )
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["flag"] == "audio"
        assert "hi" in payload["answer"]

    def test_unknown_knob_defaults_to_closed(self, store, capsys):
        code = run_cli("--json", "run", "hello", "--knob", "SOMETHING_ELSE")
        assert code == 0

    def test_clarification_exit_code(self, store, capsys):
        code = run_cli("run", "Summarize this in the usual style")
        assert code == EXIT_CLARIFICATION
        assert "clarification needed" in capsys.readouterr().out

    def test_budget_exceeded_exit_code(self, store, capsys):
        code = run_cli("run", "hello there", "--budget-usd", "0.0000005")
        assert code == EXIT_BUDGET

    def test_state_files_persisted(self, store, capsys):
        run_cli("--json", "run", "hello there")
        payload = json.loads(capsys.readouterr().out)
        sid = payload["session_id"]
        assert (store / f"{sid}.state.json").exists()
        assert (store / f"{sid}.memory.json").exists()
        assert (store / f"{sid}.trace.jsonl").exists()


class TestInspect:
    def test_round_trip_with_run(self, store, capsys):
        run_cli("--json", "run", "hello there")
        sid = json.loads(capsys.readouterr().out)["session_id"]
        code = run_cli("--json", "inspect", sid)
        assert code == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["state"]["session_id"] == sid
        assert doc["trace"]  # timeline mirrors the JSONL file

    def test_unknown_session(self, store, capsys):
        assert run_cli("inspect", "0-doesnotexist0000") == EXIT_UNKNOWN_SESSION

    def test_corrupt_state_file(self, store, capsys):
        run_cli("--json", "run", "hello there")
        sid = json.loads(capsys.readouterr().out)["session_id"]
        (store / f"{sid}.state.json").write_text('{"version": 1, "state": ')
        assert run_cli("inspect", sid) == EXIT_CORRUPT_STATE


class TestSimulate:
    def test_small_simulation_with_comparison(self, store, tmp_path, capsys):
        out_dir = tmp_path / "reports"
        code = run_cli(
            "--json", "--seed", "5", "simulate", "--queries", "40",
            "--policies", "centralized,hierarchical", "--out", str(out_dir),
        )
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert "comparison" in payload
        assert (out_dir / "report-centralized.json").exists()
        assert (out_dir / "per-query-deltas.csv").exists()

    def test_self_comparison_zero_deltas(self, store, tmp_path, capsys):
        code = run_cli(
            "--json", "--seed", "5", "simulate", "--queries", "25",
            "--policies", "centralized,centralized", "--out", str(tmp_path / "r"),
        )
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["comparison"]["tta_reduction_median_pct"] == 0.0

    def test_seed_reproducibility(self, store, tmp_path, capsys):
        outputs = []
        for run_dir in ("a", "b"):
            code = run_cli(
                "--json", "--seed", "7", "simulate", "--queries", "30",
                "--policies", "centralized", "--out", str(tmp_path / run_dir),
            )
            assert code == 0
            outputs.append(capsys.readouterr().out)
            report = (tmp_path / run_dir / "report-centralized.json").read_text()
            outputs.append(report)
        assert outputs[0] == outputs[2]
        assert outputs[1] == outputs[3]

    def test_invalid_spec_exits_2_with_field(self, store, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"total_queries": 10, "category_mix": {"vision_qa": 1.0}}))
        code = run_cli("simulate", str(bad))
        assert code == EXIT_WORKLOAD_SPEC
        assert "category_mix" in capsys.readouterr().err

    def test_unknown_policy_exits_2(self, store, capsys):
        assert run_cli("simulate", "--policies", "psychic") == EXIT_WORKLOAD_SPEC


class TestListings:
    def test_tools_list_json(self, store, capsys):
        assert run_cli("--json", "tools", "list") == 0
        entries = json.loads(capsys.readouterr().out)
        assert any(e["name"] == "yolo-detect" for e in entries)

    def test_models_list_json(self, store, capsys):
        assert run_cli("--json", "models", "list") == 0
        entries = json.loads(capsys.readouterr().out)
        assert any(e["model_name"] == "gpt-4o" for e in entries)


class TestConfigPrecedence:
    def test_flag_beats_env_beats_file(self, tmp_path, monkeypatch):
        config_file = tmp_path / "cfg.json"
        config_file.write_text(json.dumps({"store_root": "/from-file", "seed": 1}))
        monkeypatch.setenv("SUPERVISORD_STORE_ROOT", "/from-env")
        parser = build_parser()
        args = parser.parse_args(["--config", str(config_file), "tools", "list"])
        cfg = resolve_config(args)
        assert cfg.store_root == "/from-env"  # env beats file
        assert cfg.seed == 1  # file beats default
        args = parser.parse_args(
            ["--config", str(config_file), "--store-root", "/from-flag", "tools", "list"]
        )
        cfg = resolve_config(args)
        assert cfg.store_root == "/from-flag"  # flag beats env

    def test_budget_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SUPERVISORD_BUDGET_USD", "1.25")
        args = build_parser().parse_args(["tools", "list"])
        cfg = resolve_config(args)
        assert cfg.budget_usd == "1.25"


class TestSessionRepl:
    def test_scripted_session(self, store, monkeypatch, capsys):
        lines = iter(["what is the capital of france", ":cost", ":memory", ":quit"])
        monkeypatch.setattr("builtins.input", lambda prompt="": next(lines))
        code = run_cli("session", "--knob", "open_src")
        assert code == 0
        output = capsys.readouterr().out
        assert "cumulative cost" in output
        assert "short-term window" in output

    def test_session_resume_unknown(self, store):
        assert run_cli("session", "--session", "0-missing") == EXIT_UNKNOWN_SESSION

    def test_clarification_inline(self, store, monkeypatch, capsys):
        lines = iter(["Summarize this in the usual style", "a formal tone", ":quit"])
        monkeypatch.setattr("builtins.input", lambda prompt="": next(lines))
        code = run_cli("session")
        assert code == 0
        assert "clarified: a formal tone" in capsys.readouterr().out

    def test_six_turns_memory_window(self, store, monkeypatch, capsys):
        queries = [f"question number {i} about topic {i}" for i in range(6)]
        lines = iter(queries + [":memory", ":quit"])
        monkeypatch.setattr("builtins.input", lambda prompt="": next(lines))
        code = run_cli("session", "--knob", "open_src")
        assert code == 0
        output = capsys.readouterr().out
        assert "short-term window (5 of last 6 turns)" in output
