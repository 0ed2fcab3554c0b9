import numpy as np
import pytest

from diffptq.calibration import (
    CalibrationSpec,
    distribution_shift_report,
    fp_trajectory_calibrate,
    prepare,
    progressive_calibrate,
)
from diffptq.diffusion import ddpm_step, initial_noise, make_schedule, run_sampler
from diffptq.errors import InvalidArgumentError
from diffptq.fakequant import ActQuantTable
from diffptq.model import LinearDenoiser, MLPDenoiser
from diffptq.quant import calibrate
from oracles import brute_fake_quantize, brute_mse_params


def small_mlp(seed=0):
    m = MLPDenoiser.init(2, 4, hidden=16, time_dim=8, cond_dim=4, seed=seed)
    m.params["out.w"] = np.random.default_rng(seed).standard_normal(m.params["out.w"].shape) * 0.5
    return m


def test_spec_validation():
    with pytest.raises(InvalidArgumentError):
        CalibrationSpec(())
    with pytest.raises(InvalidArgumentError):
        CalibrationSpec((0,), samples_per_condition=0)
    spec = CalibrationSpec((0, 1), samples_per_condition=3)
    np.testing.assert_array_equal(spec.labels(), [0, 0, 0, 1, 1, 1])


def test_progressive_matches_two_step_oracle():
    sched = make_schedule(2, 0.1, 0.3)
    a = {1: 0.8, 2: 1.3}
    model = LinearDenoiser.from_arrays(np.array([a[1], a[2]]))
    spec = CalibrationSpec((0,), samples_per_condition=8, seed=5, weight_bits=None, act_bits=4)
    qm = prepare(model, spec, sched)
    table = progressive_calibrate(qm, spec, sched)

    # oracle: calibrate step 2 on x_2, build the step-2-quantized x̂_1, calibrate step 1 on it
    x2 = initial_noise(5, 8, 1, 2)[0].ravel()
    _, s2, z2 = brute_mse_params(x2, 4, 80)
    eps2 = a[2] * brute_fake_quantize(x2, s2, z2, 4)
    x1_hat = (x2 - sched.beta[1] / np.sqrt(1 - sched.alpha_bar[1]) * eps2) / np.sqrt(sched.alpha[1])
    _, s1, z1 = brute_mse_params(x1_hat, 4, 80)

    q2, q1 = table.get("in", 2), table.get("in", 1)
    assert q2.scale == pytest.approx(s2, rel=1e-12) and q2.zero_point == z2
    assert q1.scale == pytest.approx(s1, rel=1e-12) and q1.zero_point == z1

    # the baseline calibrates step 1 on the full-precision x_1 instead
    base = fp_trajectory_calibrate(qm, spec, sched)
    x1 = (x2 - sched.beta[1] / np.sqrt(1 - sched.alpha_bar[1]) * a[2] * x2) / np.sqrt(sched.alpha[1])
    _, s1_fp, _ = brute_mse_params(x1, 4, 80)
    assert base.get("in", 1).scale == pytest.approx(s1_fp, rel=1e-12)
    assert base.get("in", 2).scale == q2.scale


def test_t1_progressive_equals_fp_trajectory():
    sched = make_schedule(1, 0.1, 0.1)
    model = small_mlp()
    spec = CalibrationSpec((0, 1, 2, 3), samples_per_condition=4, seed=1, weight_bits=4, act_bits=4,
                           grid_points=20)
    qm = prepare(model, spec, sched)
    a = progressive_calibrate(qm, spec, sched)
    b = fp_trajectory_calibrate(qm, spec, sched)
    assert a.to_text() == b.to_text()


def test_progressive_equals_naive_rerun():
    """Each step-t quantizer is the calibration of activations at x̂_t from a fresh partially-quantized run."""
    sched = make_schedule(4, 0.05, 0.3)
    model = small_mlp(1)
    spec = CalibrationSpec((0, 1, 2, 3), samples_per_condition=4, seed=2, weight_bits=4, act_bits=4,
                           grid_points=20)
    qm = prepare(model, spec, sched)
    table = progressive_calibrate(qm, spec, sched)
    labels = spec.labels()
    for t in range(sched.T, 0, -1):
        partial = ActQuantTable(sched.T, model.act_layers, 4)
        for (layer, s), q in table.entries.items():
            if s > t:
                partial.set_entry(layer, s, q)
        run = qm.with_table(partial)
        x = spec.initial_states(model.dim, sched.T)
        for s in range(sched.T, t, -1):
            x = ddpm_step(x, run.forward(x, s, labels), s, sched)
        rec: dict = {}
        run.forward_fp_acts(x, t, labels, record=rec)
        for layer in model.act_layers:
            q = calibrate(rec[layer], table.effective_bits(layer, t), "mse", 20)
            assert table.get(layer, t).scale == q.scale
            assert table.get(layer, t).zero_point == q.zero_point


def test_zero_error_model_gives_identical_tables():
    # eps == 0 regardless of quantization, so both populations coincide
    sched = make_schedule(5, 0.05, 0.3)
    model = LinearDenoiser.from_arrays(np.zeros(5))
    spec = CalibrationSpec((0,), samples_per_condition=16, weight_bits=16, act_bits=16)
    qm = prepare(model, spec, sched)
    assert progressive_calibrate(qm, spec, sched).to_text() == fp_trajectory_calibrate(qm, spec, sched).to_text()


def test_sixteen_bit_tables_nearly_equal():
    sched = make_schedule(6, 0.05, 0.3)
    model = small_mlp(2)
    spec = CalibrationSpec((0, 1, 2, 3), samples_per_condition=4, weight_bits=16, act_bits=16, grid_points=20)
    qm = prepare(model, spec, sched)
    a = progressive_calibrate(qm, spec, sched)
    b = fp_trajectory_calibrate(qm, spec, sched)
    for key, q in a.entries.items():
        assert q.scale == pytest.approx(b.entries[key].scale, rel=1e-3)


def test_disabled_activations_pass_through():
    sched = make_schedule(5, 0.05, 0.3)
    model = small_mlp()
    spec = CalibrationSpec((0, 1), samples_per_condition=4, weight_bits=4, act_bits=None)
    qm = prepare(model, spec, sched)
    table = progressive_calibrate(qm, spec, sched)
    assert table.entries == {}
    weight_only = qm.with_table(table)
    x_T = spec.initial_states(2, sched.T)
    a, _ = run_sampler(weight_only.forward, x_T, spec.labels(), sched)

    def weights_only(x, t, c):
        return model.forward(x, t, c, weights=qm.qweights)
    b, _ = run_sampler(weights_only, x_T, spec.labels(), sched)
    np.testing.assert_array_equal(a, b)


def test_calibration_log():
    sched = make_schedule(3, 0.05, 0.3)
    model = small_mlp()
    spec = CalibrationSpec((0, 1), samples_per_condition=4, weight_bits=8, act_bits=8, grid_points=10)
    log: list = []
    progressive_calibrate(prepare(model, spec, sched), spec, sched, log=log)
    assert len(log) == 3 * len(model.act_layers)
    assert [r.t for r in log[:: len(model.act_layers)]] == [3, 2, 1]
    assert all(r.calib_mse >= 0 and r.seconds >= 0 for r in log)


def test_table_schedule_mismatch():
    model = small_mlp()
    spec = CalibrationSpec((0,), samples_per_condition=2)
    qm = prepare(model, spec, make_schedule(3, 0.05, 0.3))
    with pytest.raises(InvalidArgumentError):
        progressive_calibrate(qm, spec, make_schedule(4, 0.05, 0.3))


def test_shift_report_disabled_is_zero():
    sched = make_schedule(5, 0.05, 0.3)
    model = small_mlp()
    spec = CalibrationSpec((0, 1), samples_per_condition=8, weight_bits=None, act_bits=None)
    qm = prepare(model, spec, sched)
    for row in distribution_shift_report(model, qm, spec, sched, [5, 3, 1]):
        assert row["js_divergence"] == 0.0
        assert row["fp"] == row["quant"]


def test_shift_report_first_step_state_unshifted():
    sched = make_schedule(5, 0.05, 0.3)
    model = small_mlp()
    spec = CalibrationSpec((0, 1), samples_per_condition=8, weight_bits=4, act_bits=4, grid_points=10)
    qm = prepare(model, spec, sched)
    qm = qm.with_table(progressive_calibrate(qm, spec, sched))
    rows = distribution_shift_report(model, qm, spec, sched, [5], layers=["in"])
    assert rows[0]["js_divergence"] == 0.0
    assert rows[0]["fp"] == rows[0]["quant"]


@pytest.mark.slow
def test_shift_grows_towards_x0(trained):
    cfg, model, sched, _ = trained
    spec = CalibrationSpec(tuple(range(4)) * 8, 4, seed=3, weight_bits=4, act_bits=4)
    qm = prepare(model, spec, sched)
    qm = qm.with_table(progressive_calibrate(qm, spec, sched))
    rows = distribution_shift_report(model, qm, spec, sched, [sched.T - 1, 1], layers=["in"])
    shift = {r["t"]: abs(r["fp"]["mean"] - r["quant"]["mean"]) + abs(r["fp"]["std"] - r["quant"]["std"])
             for r in rows}
    js = {r["t"]: r["js_divergence"] for r in rows}
    assert shift[1] > shift[sched.T - 1]
    assert js[1] > js[sched.T - 1]
