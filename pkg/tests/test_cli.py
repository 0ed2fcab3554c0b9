import json

import numpy as np
import pytest

from diffptq import __version__, experiment, storage
from diffptq.cli import main
from diffptq.config import dump_config, load_config
from diffptq.metrics import bops


def write_cfg(path, cfg):
    path.write_text(dump_config(cfg))
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, tiny_cfg):
    """Trained and calibrated tiny run driven through the CLI."""
    run = tmp_path_factory.mktemp("tiny")
    cfg_path = write_cfg(run / "cfg.yaml", tiny_cfg.replace(out=str(run)))
    assert main(["train", "--config", str(cfg_path)]) == 0
    assert main(["calibrate", "--config", str(cfg_path)]) == 0
    return cfg_path, run


def test_init_config_writes_loadable_defaults(tmp_path):
    path = tmp_path / "c.yaml"
    assert main(["init-config", str(path)]) == 0
    cfg = load_config(path)
    assert cfg.schedule.T == 50 and cfg.quant.method == "progressive"


def test_train_is_byte_deterministic(tmp_path, tiny_run):
    cfg_path, run = tiny_run
    other = tmp_path / "again"
    assert main(["train", "--config", str(cfg_path), "--out", str(other)]) == 0
    for name in (storage.CHECKPOINT, storage.TRAIN_LOG):
        assert (other / name).read_bytes() == (run / name).read_bytes()


def test_train_log_monotone_column(tiny_run):
    _, run = tiny_run
    meta, rows = storage.read_csv(run / storage.TRAIN_LOG)
    assert list(rows[0]) == ["step", "loss", "ema_loss", "monotone_loss"]
    mono = [float(r["monotone_loss"]) for r in rows]
    assert all(b <= a for a, b in zip(mono, mono[1:]))
    assert [int(r["step"]) for r in rows][:3] == [1, 20, 40]
    assert meta["tool_version"] == __version__


def test_calibrate_save_load_save_identical(tmp_path, tiny_run, tiny_cfg):
    cfg_path, run = tiny_run
    cfg = load_config(cfg_path)
    model, _ = experiment.load_model(cfg)
    qm = experiment.load_quantized(cfg, model)
    storage.save_table(tmp_path / "t.csv", qm.act_table, cfg.hash(), {"method": "progressive"})
    assert (tmp_path / "t.csv").read_bytes() == (run / storage.TABLE).read_bytes()
    storage.save_quantized_weights(tmp_path / "w.json", qm, cfg.hash(), cfg.quant.weight_bits)
    assert (tmp_path / "w.json").read_bytes() == (run / storage.WEIGHTS).read_bytes()


def test_calibrate_and_evaluate_deterministic(tmp_path, tiny_run):
    cfg_path, run = tiny_run
    other = tmp_path / "copy"
    other.mkdir()
    (other / storage.CHECKPOINT).write_bytes((run / storage.CHECKPOINT).read_bytes())
    for _ in range(2):
        assert main(["calibrate", "--config", str(cfg_path), "--out", str(other)]) == 0
        assert main(["evaluate", "--config", str(cfg_path), "--out", str(other)]) == 0
        assert (other / storage.TABLE).read_bytes() == (run / storage.TABLE).read_bytes()
    first = (other / experiment.METRICS_TXT).read_bytes()
    assert main(["evaluate", "--config", str(cfg_path), "--out", str(other)]) == 0
    assert (other / experiment.METRICS_TXT).read_bytes() == first


def test_relaxed_calibration_bit_schedule(tmp_path, tiny_run):
    cfg_path, run = tiny_run
    other = tmp_path / "relaxed"
    other.mkdir()
    (other / storage.CHECKPOINT).write_bytes((run / storage.CHECKPOINT).read_bytes())
    assert main(["calibrate", "--config", str(cfg_path), "--out", str(other), "--tau", "0.2"]) == 0
    table, _ = storage.load_table(other / storage.TABLE)
    T = load_config(cfg_path).schedule.T
    assert int(np.sum(table.bit_schedule == 10)) == round(0.2 * T)
    assert list(np.flatnonzero(table.bit_schedule == 10) + 1) == [1, 2]
    # the relaxed table is stale for an unrelaxed config
    assert main(["evaluate", "--config", str(cfg_path), "--out", str(other), "--tau", "0"]) == 3
    assert main(["evaluate", "--config", str(cfg_path), "--out", str(other), "--tau", "0.2"]) == 0
    assert main(["calibrate", "--config", str(cfg_path), "--out", str(other), "--tau", "0"]) == 0
    table, _ = storage.load_table(other / storage.TABLE)
    assert np.all(table.bit_schedule == 8)


def test_t1_methods_give_identical_tables(tmp_path, tiny_cfg):
    cfg = tiny_cfg.replace(schedule={"T": 1}, training={"steps": 20}, out=str(tmp_path))
    cfg_path = write_cfg(tmp_path / "cfg.yaml", cfg)
    assert main(["train", "--config", str(cfg_path)]) == 0
    texts = []
    for method in ("progressive", "fp_trajectory"):
        assert main(["calibrate", "--config", str(cfg_path), "--method", method]) == 0
        texts.append((tmp_path / storage.TABLE).read_text().replace(method, "M"))
    assert texts[0] == texts[1]


def test_error_exit_codes(tmp_path, tiny_run, tiny_cfg, capsys):
    cfg_path, _ = tiny_run
    empty = tmp_path / "empty"
    assert main(["calibrate", "--config", str(cfg_path), "--out", str(empty)]) == 4
    bad = tmp_path / "bad.yaml"
    bad.write_text(dump_config(tiny_cfg).replace("  T: 10", "  T: ten"))
    assert main(["train", "--config", str(bad)]) == 2
    assert "schedule.T" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "absent.yaml")]) == 2
    mismatched = write_cfg(tmp_path / "t12.yaml", load_config(cfg_path).replace(schedule={"T": 12}))
    assert main(["evaluate", "--config", str(mismatched)]) == 3
    assert main(["evaluate", "--config", str(cfg_path), "--tau", "3"]) == 2
    assert main(["probe", "--config", str(cfg_path), "--interval", "0,20"]) == 2


def test_weight_bits_mismatch_is_inconsistent(tmp_path, tiny_run):
    cfg_path, _ = tiny_run
    other = write_cfg(tmp_path / "w4.yaml", load_config(cfg_path).replace(quant={"weight_bits": 4}))
    assert main(["evaluate", "--config", str(other)]) == 3


def test_disabled_quantization_reproduces_fp(tmp_path, tiny_run, tiny_cfg):
    _, run = tiny_run
    cfg = tiny_cfg.replace(quant={"weight_bits": None, "act_bits": None}, out=str(tmp_path))
    cfg_path = write_cfg(tmp_path / "cfg.yaml", cfg)
    (tmp_path / storage.CHECKPOINT).write_bytes((run / storage.CHECKPOINT).read_bytes())
    assert main(["calibrate", "--config", str(cfg_path)]) == 0
    assert main(["evaluate", "--config", str(cfg_path)]) == 0
    metrics = json.loads((tmp_path / experiment.METRICS_JSON).read_text())
    for split in ("calib", "heldout"):
        assert metrics["splits"][split]["frechet_to_fp"] == 0.0
    assert "\ncalib.frechet_to_fp=0\n" in (tmp_path / experiment.METRICS_TXT).read_text()


def test_sweep_rows(tiny_run):
    cfg_path, run = tiny_run
    assert main(["sweep", "--config", str(cfg_path)]) == 0
    meta, rows = storage.read_csv(run / experiment.SWEEP)
    assert list(rows[0]) == ["tau", "end", "avg_bits", "nominal_avg_bits", "bops", "frechet_to_fp",
                             "condition_score", "seeds"]
    taus = [float(r["tau"]) for r in rows]
    assert taus == [0.0, 0.1, 0.2]
    cfg = load_config(cfg_path)
    model, sched = experiment.load_model(cfg)
    flops = 2 * model.macs() * sched.T * cfg.eval.samples * 2
    for r in rows:
        nominal = 8 + float(r["tau"]) * 2
        assert float(r["nominal_avg_bits"]) == pytest.approx(nominal)
        assert float(r["bops"]) == pytest.approx(bops(flops, 8, nominal))
    assert [float(r["avg_bits"]) for r in rows] == [8.0, 8.2, 8.4]
    assert main(["sweep", "--config", str(cfg_path), "--taus", "0.2,0.1"]) == 2


def test_probe_report(tiny_run):
    cfg_path, run = tiny_run
    assert main(["probe", "--config", str(cfg_path), "--noise-std", "0"]) == 0
    _, rows = storage.read_csv(run / experiment.PROBE)
    assert [r["variant"] for r in rows] == ["perturb", "fp_override"]
    assert list(rows[0]) == list(experiment.PROBE_COLUMNS)
    assert float(rows[0]["frechet"]) == 0.0
    assert rows[0]["condition_score"] == rows[0]["baseline_condition_score"]
    assert (int(rows[1]["interval_a"]), int(rows[1]["interval_b"])) == (1, 2)


def test_theorem_check_outputs(tiny_run):
    cfg_path, run = tiny_run
    assert main(["theorem-check", "--config", str(cfg_path)]) == 0
    d = json.loads((run / experiment.THEOREM_JSON).read_text())
    assert d["delta_actual"] >= 0 and len(d["coefficients"]) == 10
    assert "delta_actual=" in (run / experiment.THEOREM_TXT).read_text()


def test_every_output_has_provenance(tiny_run):
    cfg_path, run = tiny_run
    for cmd in ("evaluate", "probe", "sweep", "theorem-check"):
        assert main([cmd, "--config", str(cfg_path)]) == 0
    cfg = load_config(cfg_path)
    files = [p for p in run.iterdir() if p.name != "cfg.yaml"]
    assert len(files) >= 11
    for p in files:
        text = p.read_text()
        assert cfg.hash() in text, p.name
        assert __version__ in text, p.name


def test_seed_override_changes_training(tmp_path, tiny_run):
    cfg_path, run = tiny_run
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path), "--seed", "7"]) == 0
    assert (tmp_path / storage.CHECKPOINT).read_bytes() != (run / storage.CHECKPOINT).read_bytes()


@pytest.mark.slow
def test_fp_override_near_x0_helps(trained, tmp_path):
    """Running the last steps in full precision moves W4A4 samples closer to the FP reference."""
    cfg, _, _, run = trained
    cfg = cfg.replace(quant={"weight_bits": 4, "act_bits": 4}, eval={"samples": 1024},
                      probe={"interval": [1, 5], "n_seeds": 1, "noise_std": None})
    (tmp_path / storage.CHECKPOINT).write_bytes((run / storage.CHECKPOINT).read_bytes())
    experiment.run_calibrate(cfg, tmp_path)
    rows = experiment.run_probe(cfg, tmp_path)
    override = dict(zip(experiment.PROBE_COLUMNS, rows[1]))
    assert override["frechet"] < override["baseline_frechet"]
