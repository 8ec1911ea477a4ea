"""Exit codes, argument plumbing, and subcommand dispatch."""

import logging

import pytest

from histotype import __version__
from histotype.cli import build_parser, main, _make_context


@pytest.fixture(scope="module")
def cli_cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli-cohort")
    code = main(["synth", "--out", str(root), "--wsis-per-class", "4",
                 "--seed", "7", "--width", "128", "--height", "96"])
    assert code == 0
    return root


def test_synth_writes_cohort(cli_cohort):
    assert (cli_cohort / "manifest.csv").is_file()
    assert (cli_cohort / "cohort.cfg").is_file()
    assert (cli_cohort / "truth").is_dir()


def test_run_all_exits_zero_and_writes_outputs(cli_cohort):
    code = main(["run-all", "--config", str(cli_cohort / "cohort.cfg")])
    assert code == 0
    work = cli_cohort / "work"
    assert (work / "predictions.csv").is_file()
    assert (work / "report" / "report.txt").is_file()


def test_repeat_run_skips_and_force_reruns(cli_cohort, caplog):
    config = str(cli_cohort / "cohort.cfg")
    with caplog.at_level(logging.INFO, logger="histotype.pipeline"):
        assert main(["evaluate", "--config", config]) == 0
    assert "evaluate: skipped (up to date)" in caplog.text
    caplog.clear()
    with caplog.at_level(logging.INFO, logger="histotype.pipeline"):
        assert main(["evaluate", "--config", config, "--force"]) == 0
    assert "evaluate: running" in caplog.text


def test_single_stage_dispatch(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--wsis-per-class", "2",
                 "--width", "128", "--height", "96"]) == 0
    config = str(tmp_path / "cohort.cfg")
    assert main(["tile", "--config", config]) == 0
    assert (tmp_path / "work" / "tiles" / "tiles.csv").is_file()


def test_stage_with_missing_inputs_exits_two(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--wsis-per-class", "2",
                 "--width", "128", "--height", "96"]) == 0
    code = main(["score", "--config", str(tmp_path / "cohort.cfg")])
    assert code == 2


def test_missing_config_exits_one(tmp_path):
    assert main(["run-all", "--config", str(tmp_path / "nope.cfg")]) == 1


def test_unknown_override_exits_one(cli_cohort):
    code = main(["run-all", "--config", str(cli_cohort / "cohort.cfg"),
                 "--override", "nonsense.key=1"])
    assert code == 1


def test_bad_synth_signal_exits_one(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--signal", "2.0"]) == 1


def test_protocol_violation_exits_three(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--wsis-per-class", "3",
                 "--width", "128", "--height", "96"]) == 0
    # a scorer that never says READY breaks the handshake
    code = main(["run-all", "--config", str(tmp_path / "cohort.cfg"),
                 "--scorer-cmd", "python3 -c print(1)"])
    assert code == 3


def test_init_config_refuses_overwrite(tmp_path):
    target = tmp_path / "pipeline.cfg"
    assert main(["init-config", "--out", str(target)]) == 0
    first = target.read_text()
    assert "tiling.tile_size = 512" in first
    assert main(["init-config", "--out", str(target)]) == 1
    assert main(["init-config", "--out", str(target), "--force"]) == 0
    assert target.read_text() == first


def test_scorer_cmd_becomes_config_override(cli_cohort):
    parser = build_parser()
    args = parser.parse_args(["score", "--config",
                              str(cli_cohort / "cohort.cfg"),
                              "--scorer-cmd", "node bridge.js --stub"])
    ctx = _make_context(args)
    assert ctx.config.scorer_command == "node bridge.js --stub"


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert __version__ in capsys.readouterr().out


def test_missing_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main([])
    assert info.value.code == 2
