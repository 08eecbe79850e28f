"""Command-line surface: dispatch, exit codes, error lines and outputs."""

from __future__ import annotations

import io
import logging

import numpy as np
import pytest

from bifusion_gait.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, SUBCOMMAND_KEYS, configure_logging, run
from helpers import slow

TINY_CONF = """\
seed = 0
channels = 4,4,4
temporal_kernel = 3
silhouette_channels = 2,4,4
num_parts = 4
compact_dim = 4
fused_dim = 6
batch_p = 2
batch_k = 2
batch_t = 12
train_ids = 2
pretrain_iterations = 2
pretrain_milestones = 1
global_iterations = 2
global_milestones = 1
gen_frames = 12
"""


def _run(argv: list[str]) -> tuple[int, str, str]:
    out, err = io.StringIO(), io.StringIO()
    code = run(argv, stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(autouse=True)
def _reset_logging():
    yield
    logger = logging.getLogger("bifusion_gait")
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()
    logger.propagate = True


def test_unknown_subcommand_is_a_usage_error(capsys) -> None:
    code, _, _ = _run(["fly"])

    assert code == EXIT_USAGE
    assert "invalid choice" in capsys.readouterr().err


def test_unknown_config_key_prints_one_error_line() -> None:
    code, _, err = _run(["inspect-graph", "--set", "colour=blue"])

    assert code == EXIT_USAGE
    assert err.strip().splitlines() == ['error category=configuration message="Configuration error: unknown config keys: colour."']


def test_help_lists_the_config_keys_of_each_command(capsys) -> None:
    for command, keys in SUBCOMMAND_KEYS.items():
        code, _, _ = _run([command, "--help"])

        assert code == EXIT_OK
        text = capsys.readouterr().out
        assert "config keys read by this command" in text
        for key in keys:
            assert key in text, (command, key)


def test_inspect_graph_dumps_every_subset() -> None:
    code, out, _ = _run(["inspect-graph", "--scale", "joints", "--strategy", "gait_temporal"])

    lines = out.splitlines()
    assert code == EXIT_OK
    assert lines[0] == "scale,strategy,k"
    assert lines[1] == "joints,gait_temporal,0"
    assert len(lines) == 1 + 3 * (1 + 12)
    assert lines[14] == "joints,gait_temporal,1"
    assert all(len(line.split(",")) == 12 for line in lines[2:14])


def test_inspect_graph_writes_to_a_file(tmp_path) -> None:
    target = tmp_path / "limbs.csv"

    code, _, _ = _run(["inspect-graph", "--scale", "limbs", "--strategy", "uniform", "--out", str(target)])

    assert code == EXIT_OK
    assert target.read_text(encoding="utf-8").splitlines()[:2] == ["scale,strategy,k", "limbs,uniform,0"]


def test_gradcheck_kernels_pass() -> None:
    code, out, _ = _run(["gradcheck", "--kernels-only", "--seed", "0"])

    assert code == EXIT_OK
    assert "FAIL" not in out
    assert out.splitlines()[-1].startswith("max_error=")


def test_gen_writes_the_default_layout(tmp_path) -> None:
    code, out, _ = _run(["gen", "--ids", "1", "--seed", "7", "--out", str(tmp_path), "--set", "gen_frames=12", "--threads", "2"])

    assert code == EXIT_OK
    assert out.strip() == f"sequences=110 root={tmp_path}"
    assert len([path for path in tmp_path.rglob("data.kpm")]) == 110
    assert (tmp_path / "000" / "NM-06" / "180" / "data.sil").is_file()


def test_missing_dataset_is_a_load_failure(tmp_path) -> None:
    code, _, err = _run(["pretrain-msgg", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "m.msgg")])

    assert code == EXIT_FAILURE
    assert err.startswith("error category=load ")


def test_bad_probe_condition_is_a_usage_error(tmp_path) -> None:
    code, _, err = _run(["eval", "--data", str(tmp_path), "--model", str(tmp_path / "m"), "--probe", "XX"])

    assert code == EXIT_USAGE
    assert "probe must list conditions" in err


def test_deterministic_logs_have_no_timestamp(tmp_path) -> None:
    log_file = tmp_path / "run.log"

    _run(["inspect-graph", "--deterministic", "--log-file", str(log_file)])

    first = log_file.read_text(encoding="utf-8").splitlines()[0]
    assert first.startswith("INFO bifusion_gait.cli run_config command=inspect-graph ")
    assert "strategy=gait_temporal" in first


def test_configure_logging_replaces_its_own_handlers() -> None:
    configure_logging()
    configure_logging()

    assert len(logging.getLogger("bifusion_gait").handlers) == 1


@slow
def test_full_pipeline_from_generation_to_report(tmp_path) -> None:
    conf = tmp_path / "tiny.conf"
    conf.write_text(TINY_CONF, encoding="utf-8")
    data, common = tmp_path / "data", ["--config", str(conf), "--deterministic"]

    assert _run(["gen", "--ids", "3", "--out", str(data), *common])[0] == EXIT_OK
    assert _run(["pretrain-msgg", "--data", str(data), "--out", str(tmp_path / "m.msgg"), *common])[0] == EXIT_OK
    assert _run(["pretrain-sil", "--data", str(data), "--out", str(tmp_path / "s.silp"), *common])[0] == EXIT_OK
    code, _, _ = _run(
        ["train", "--data", str(data), "--msgg", str(tmp_path / "m.msgg"), "--sil", str(tmp_path / "s.silp"),
         "--out", str(tmp_path / "g.bifu"), "--telemetry", str(tmp_path / "g.csv"), *common]
    )
    assert code == EXIT_OK

    code, report, _ = _run(["eval", "--data", str(data), "--model", str(tmp_path / "g.bifu"), "--probe", "CL", *common])
    assert code == EXIT_OK
    rows = report.splitlines()
    assert rows[0] == "condition,probe_view,rank1_accuracy"
    assert len(rows) == 1 + 11 + 1
    assert rows[-1].startswith("CL,mean,")

    again = _run(["eval", "--data", str(data), "--model", str(tmp_path / "g.bifu"), "--probe", "CL", "--threads", "3", *common])
    assert again[1] == report

    target = tmp_path / "emb.npz"
    assert _run(["export-embeddings", "--data", str(data), "--model", str(tmp_path / "g.bifu"), "--out", str(target), *common])[0] == EXIT_OK
    with np.load(target) as archive:
        assert archive["features"].shape == (110, 4, 6)
        assert set(archive["identities"].tolist()) == {2}
