import json
import subprocess
import sys

import numpy as np
import pytest

from loopmag.cli import main
from loopmag.config import DEFAULTS, config_digest, parse_config
from loopmag.looprun import LoopRecord
from loopmag.tfcore import FrequencyResponse


def _config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def _summary(capsys) -> dict:
    lines = [l for l in capsys.readouterr().out.splitlines() if l.strip()]
    assert len(lines) == 1
    return json.loads(lines[0])


FAST_RUN = {"run": {"duration_ms": 2.0, "error_window_ms": [1.0, 2.0]}}


def test_synthesize_defaults(tmp_path, capsys):
    assert main(["synthesize", "--out", str(tmp_path)]) == 0
    s = _summary(capsys)
    assert s["t_dc"] == pytest.approx(1.0, abs=1e-9)
    assert s["closed_loop_stable"]
    # usable tracking band on the 100 kHz scale
    assert 1e4 < s["tracking_band_hz"] < 3e5
    design = json.loads((tmp_path / "design.json").read_text())
    assert design["config_sha256"] == s["config_sha256"]
    for name in "PCT":
        text = (tmp_path / f"bode_{name}.csv").read_text()
        assert text.startswith(f"# config_sha256: {s['config_sha256']}")
    t = FrequencyResponse.from_csv(tmp_path / "bode_T.csv")
    assert abs(t.values[0]) == pytest.approx(1.0, abs=1e-6)


def test_bad_key_names_the_key(tmp_path, capsys):
    cfg = _config(tmp_path, {"physics": {"t2": 11.2}})
    assert main(["synthesize", "--config", cfg, "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "physics.t2" in err
    assert "t2_ms" in err


def test_bad_json_and_types(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["synthesize", "--config", str(bad), "--out", str(tmp_path)]) == 1
    cfg = _config(tmp_path, {"controller": {"fc_hz": "1e6"}})
    assert main(["synthesize", "--config", cfg, "--out", str(tmp_path)]) == 1


def test_paper_plus_convention_warns(tmp_path, capsys):
    cfg = _config(tmp_path, {"controller": {"convention": "paper_plus"}})
    assert main(["synthesize", "--config", cfg, "--out", str(tmp_path)]) == 0
    captured = capsys.readouterr()
    assert "warning" in captured.err
    s = json.loads(captured.out)
    assert s["t_dc"] == pytest.approx(1 / 3, rel=1e-9)
    assert not s["closed_loop_stable"]


def test_zero_duration_rejected(tmp_path):
    cfg = _config(tmp_path, {"run": {"duration_ms": 0}})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 1


def test_simulate_step_record(tmp_path, capsys):
    assert main(["simulate", "--out", str(tmp_path)]) == 0
    s = _summary(capsys)
    rec = LoopRecord.from_csv(tmp_path / "record.csv")
    assert rec.metadata["config_sha256"] == s["config_sha256"]
    # precession before feedback, estimate nulls the field after
    before = rec.window(0.5e-3, 1e-3 - 1e-7)
    assert np.all(before.b_c == 0.0) and np.max(np.abs(before.y)) > 0
    # default noise is on, so a single sample scatters by a few tenths of a mG
    assert s["final_b_est_g"] == pytest.approx(0.05, rel=1e-2)
    assert 0 < s["settle_time_s"] < 1e-3


def test_seed_determinism_byte_for_byte(tmp_path, capsys):
    cfg = _config(tmp_path, FAST_RUN)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", cfg, "--out", str(a), "--seed", "7"]) == 0
    assert main(["simulate", "--config", cfg, "--out", str(b), "--seed", "7"]) == 0
    for name in ("record.csv", "record.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = tmp_path / "c"
    assert main(["simulate", "--config", cfg, "--out", str(c), "--seed", "8"]) == 0
    assert (a / "record.csv").read_bytes() != (c / "record.csv").read_bytes()


def test_seed_override_changes_digest():
    base = parse_config({})
    other = parse_config({"run": {"seed": 3}})
    assert config_digest(base) != config_digest(other)
    assert config_digest(base) == config_digest(parse_config({}))


def test_divergence_exit_code(tmp_path, capsys):
    cfg = _config(tmp_path, {"physics": {"n_atoms": 1e10}, **FAST_RUN})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 3
    s = _summary(capsys)
    assert s["error"] == "NumericalDivergence"
    # partial record is flushed
    assert len(LoopRecord.from_csv(tmp_path / "record.csv")) > 0


def test_open_loop_mode(tmp_path, capsys):
    cfg = _config(tmp_path, {"run": {"mode": "open", "duration_ms": 1.0, "error_window_ms": [0.5, 1.0]}})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path)]) == 0
    assert _summary(capsys)["final_b_est_g"] == pytest.approx(0.05, rel=0.05)


def test_identify_outputs(tmp_path, capsys):
    cfg = _config(tmp_path, {"physics": {"noise_psd_v2_per_hz": 0.0}})
    assert main(["identify", "--config", cfg, "--out", str(tmp_path)]) == 0
    s = _summary(capsys)
    fit = s["fit"]
    num, den = fit["num"], fit["den"]
    assert -num[1] == pytest.approx(1.6e4, rel=0.01)
    assert den == pytest.approx([4e9, 4.1e5, 1.0], rel=0.01)
    resp = FrequencyResponse.from_csv(tmp_path / "identify_response.csv")
    assert len(resp.omega) == DEFAULTS["identify"]["n_points"]
    assert (tmp_path / "identify_fit.csv").exists()
    assert json.loads((tmp_path / "identify.json").read_text())["config_sha256"] == s["config_sha256"]


def test_sweep_outputs(tmp_path, capsys):
    doc = {"sweep": {"atom_numbers": [1e8, 1e9], "replicates": 2}, **FAST_RUN}
    cfg = _config(tmp_path, doc)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path), "--jobs", "1"]) == 0
    captured = capsys.readouterr()
    assert captured.err.count("cell n=") == 4
    lines = (tmp_path / "robustness.csv").read_text().splitlines()
    assert lines[0].startswith("# config_sha256:")
    assert lines[1].startswith("n_atoms,closed_rms_mean_G,closed_rms_std_G,open_rms_mean_G,open_rms_std_G")
    assert len(lines) == 4


def test_sweep_all_cells_failed(tmp_path, capsys):
    doc = {"sweep": {"atom_numbers": [1e10], "replicates": 1}, **FAST_RUN}
    cfg = _config(tmp_path, doc)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path), "--jobs", "1"]) == 3


def test_empty_atom_numbers(tmp_path):
    cfg = _config(tmp_path, {"sweep": {"atom_numbers": []}})
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path)]) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "loopmag", "synthesize", "--out", str(tmp_path)],
        capture_output=True, text=True, check=False,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["command"] == "synthesize"
