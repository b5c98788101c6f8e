import json
import subprocess
import sys

import pytest

from pathcal.cli import main
from pathcal.config import RunConfig, snapshot
from pathcal.pipeline import OUTPUTS, STAGES, run_pipeline

SMALL = RunConfig(data_n=60, data_ood_n=20, backbone_depth=2, backbone_epochs=2,
                  distill_epochs=1, distill_warmup_epochs=0, distill_cosine_cycle_epochs=1,
                  eval_n_draws=2)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    run_pipeline(SMALL, out)
    return out


def _write_cfg(tmp_path, cfg=SMALL):
    p = tmp_path / "small.cfg"
    p.write_text(snapshot(cfg))
    return p


def test_every_stage_writes_its_output(small_run):
    for stage in STAGES:
        assert (small_run / OUTPUTS[stage]).exists(), stage
    for extra in ("path_trace.ckpt", "distill_report.json", "calibration.svg", "timing.json",
                  "config.snapshot", "log.txt"):
        assert (small_run / extra).exists(), extra


def test_reports_carry_hash_seed_and_no_timing(small_run):
    for name in ("path.json", "distill_report.json", "calibration_report.json", "ood_report.json",
                 "summary.json"):
        d = json.loads((small_run / name).read_text())
        assert d["seed"] == 0 and len(d["config_hash"]) == 16
        assert "wall_clock" not in d


def test_report_contents(small_run):
    path = json.loads((small_run / "path.json").read_text())
    assert path["fidelity_max_abs"] < 1e-10
    assert all(abs(c - 1) < 1e-12 for c in path["layer_correlation_noise_off"])
    assert len(path["layer_correlation_noise_on"]) == 2
    calib = json.loads((small_run / "calibration_report.json").read_text())
    assert calib["parameters"]["kernel"] < calib["parameters"]["backbone"]
    assert "nll" in calib["vlb"] and calib["vlb"]["n_chains"] == 1000
    summary = json.loads((small_run / "summary.json").read_text())
    assert summary["kernel_smaller"] and summary["loss_weights"] == [0.5, 0.2, 0.3]


def test_rerun_is_byte_identical(small_run, tmp_path):
    run_pipeline(SMALL, tmp_path)
    for stage in STAGES:
        name = OUTPUTS[stage]
        assert (tmp_path / name).read_bytes() == (small_run / name).read_bytes(), name


def test_resume_skips_finished_stages(small_run, tmp_path):
    run_pipeline(SMALL, tmp_path, stages=STAGES[:2])
    run_pipeline(SMALL, tmp_path, resume=True)
    log = (tmp_path / "log.txt").read_text()
    assert "train-backbone: skipped" in log and "reconfigure: skipped" in log
    for stage in STAGES:
        assert (tmp_path / OUTPUTS[stage]).read_bytes() == (small_run / OUTPUTS[stage]).read_bytes()


def test_cli_missing_artifact(tmp_path, capsys):
    assert main(["--out", str(tmp_path), "eval"]) == 3
    assert "missing artifact" in capsys.readouterr().err


def test_cli_stage_by_stage_with_dump(small_run, tmp_path):
    cfg = _write_cfg(tmp_path)
    out = tmp_path / "run"
    for stage in ("train-backbone", "reconfigure", "distill"):
        assert main(["--config", str(cfg), "--out", str(out), stage]) == 0
    assert main(["eval", "--config", str(cfg), "--out", str(out), "--dump", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "predictions_distilled.csv").exists()
    assert (out / "calibration_report.json").read_bytes() == \
        (small_run / "calibration_report.json").read_bytes()


def test_cli_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("backbone.colour = red\n")
    assert main(["--config", str(bad), "--out", str(tmp_path), "train-backbone"]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_cli_unknown_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--turbo"])
    assert exc.value.code == 2


def test_cli_gen_data(tmp_path):
    assert main(["--seed", "3", "gen-data", "--kind", "moons", "-n", "25",
                 "--output", str(tmp_path / "m.csv")]) == 0
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 26
    assert main(["gen-data", "--kind", "nope", "--output", str(tmp_path / "x.csv")]) == 2


def test_global_flags_after_subcommand(tmp_path):
    assert main(["gen-data", "--seed", "1", "--out", str(tmp_path), "-n", "12"]) == 0
    assert (tmp_path / "data.csv").exists()


def test_stage_failure_exit_code(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, RunConfig(task="toy-text", data_kind="token-parity", data_n=40,
                                         backbone_depth=1, backbone_epochs=1, distill_epochs=1))
    out = tmp_path / "text"
    for stage in ("train-backbone", "reconfigure", "distill"):
        assert main(["--config", str(cfg), "--out", str(out), stage]) == 0
    assert main(["--config", str(cfg), "--out", str(out), "ood"]) == 1
    assert "stage 'ood' failed" in capsys.readouterr().err


def test_verify_quick_subprocess():
    proc = subprocess.run([sys.executable, "-m", "pathcal", "verify", "--quick"],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "FAIL" not in proc.stdout and "checks passed" in proc.stdout
