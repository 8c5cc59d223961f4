import json

import pytest

from splatedit.cli import build_parser, config_from_args, main
from splatedit.pipeline import STAGES, read_manifest


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"k": 3, "lr": 0.1, "workdir": "w"}))
    args = build_parser().parse_args(["run", "--config", str(cfg), "--lr", "0.5", "--background", "1", "0", "0"])
    c = config_from_args(args)
    assert c.k == 3 and c.lr == 0.5 and c.background == [1.0, 0.0, 0.0]
    assert c.workdir == str(tmp_path / "w")


def test_bad_flag_type_exits(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["run", "--k", "many"])


def test_demo_then_stage_commands(tmp_path, capsys):
    out = tmp_path / "demo"
    assert main(["demo", str(out), "--views", "4", "--size", "32"]) == 0
    cfg = str(out / "config.json")
    for stage in STAGES:
        assert main([stage, "--config", cfg, "--iters", "2"]) == 0
    printed = capsys.readouterr().out
    assert "finetune: done" in printed
    assert main(["run", "--config", cfg, "--iters", "2"]) == 0
    assert capsys.readouterr().out.count("skipped") == len(STAGES)


def test_demo_with_run(tmp_path):
    assert main(["demo", str(tmp_path / "d"), "--views", "3", "--size", "32", "--run"]) == 0
    assert (tmp_path / "d" / "work" / "finetune" / "loss_log.csv").exists()


def test_missing_input_is_reported(tmp_path, capsys):
    assert main(["run", "--workdir", str(tmp_path / "w")]) == 1
    assert "error:" in capsys.readouterr().err


def test_failed_stage_exit_code(tmp_path, capsys):
    out = tmp_path / "demo"
    main(["demo", str(out), "--views", "3", "--size", "32"])
    code = main(["run", "--config", str(out / "config.json"), "--translator", "external",
                 "--translator-dir", str(tmp_path / "tr"), "--translator-timeout", "0.05"])
    assert code == 1
    assert "stage 'select' failed" in capsys.readouterr().err
    assert read_manifest(out / "work" / "select")["status"] == "failed"


def test_out_of_order_stage_fails(tmp_path, capsys):
    out = tmp_path / "demo"
    main(["demo", str(out), "--views", "3", "--size", "32"])
    assert main(["harmonize", "--config", str(out / "config.json")]) == 1
    assert "run it first" in capsys.readouterr().err
