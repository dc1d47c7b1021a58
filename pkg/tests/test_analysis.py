import dataclasses
import math

import numpy as np
import pytest

from conflict_gate import analysis, net, seir
from conflict_gate.analysis import ToyProblem, compute_m_kappa, m_kappa_grid
from conflict_gate.exceptions import ModeError
from conflict_gate.trainer import TraceRecord, TrainConfig, TrainTrace
from conflict_gate.weighting import gate


def test_m_kappa_at_five():
    m = compute_m_kappa(5.0)
    assert m.m_kappa == pytest.approx(0.056, abs=0.005)
    assert m.s_star == pytest.approx(0.26, abs=0.02)
    assert m.c == 1 - m.m_kappa


def test_m_kappa_at_zero_is_boundary():
    m = compute_m_kappa(0.0)
    assert m.m_kappa == 0.5 and m.s_star == 1.0


@pytest.mark.parametrize("kappa", [0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 40.0])
def test_golden_section_agrees_with_grid(kappa):
    a, b = compute_m_kappa(kappa), m_kappa_grid(kappa)
    assert abs(a.m_kappa - b.m_kappa) <= 1e-8
    assert abs(a.s_star - b.s_star) <= 1e-5


def test_m_kappa_stationarity():
    # interior optimum solves 1 + e^{-z} = z with z = kappa s
    m = compute_m_kappa(5.0)
    z = 5.0 * m.s_star
    # f is flat at the optimum, so s_star is only resolved to ~sqrt(machine eps)
    assert 1 + math.exp(-z) == pytest.approx(z, abs=1e-6)


def test_m_kappa_decreasing_and_c_at_least_half():
    ms = [compute_m_kappa(k).m_kappa for k in (0, 1, 2, 5, 10)]
    assert all(a > b for a, b in zip(ms, ms[1:]))
    for k in np.linspace(0, 100, 51):
        m = compute_m_kappa(float(k))
        assert 0 < m.m_kappa <= 0.5 and m.c >= 0.5


def test_m_kappa_rejects_negative():
    with pytest.raises(ValueError):
        compute_m_kappa(-1.0)


def test_deadlock_symmetric_case():
    r = analysis.deadlock_demo(1.0)
    assert r.lambda_std == pytest.approx(1.0, rel=1e-15)
    assert r.pareto_alpha == 0.5
    assert r.fixed_stalls and r.pareto_stationary and r.cggs_escapes


def test_deadlock_pareto_weight():
    assert analysis.deadlock_demo(3.0).pareto_alpha == 0.25


def test_deadlock_gated_ratio():
    r = analysis.deadlock_demo(2.0, kappa=5.0)
    ratio = r.cggs_update_norm / r.g_data_norm
    assert 1 - gate(-1.0, 5.0) - 1e-12 <= ratio <= 1.0
    assert r.passed


def test_deadlock_fuzz():
    rng = np.random.default_rng(0)
    for k in range(100):
        c = float(rng.uniform(0.1, 10))
        dim = int(rng.integers(10, 2000))
        r = analysis.deadlock_demo(c, dim=dim, seed=k)
        assert r.passed, r.to_dict()
        assert r.cggs_update_norm >= 0.99 * r.g_data_norm


def test_deadlock_rejects_nonpositive():
    with pytest.raises(ValueError):
        analysis.deadlock_demo(0.0)


def _rec(step, nd=1.0, s=0.5, inner=None, dn=None, l_data=1.0, l_logic=0.0):
    inner = nd * nd if inner is None else inner
    dn = nd if dn is None else dn
    return TraceRecord(step, l_data, 0.1, l_logic, 1.0, s, nd, 1.0, inner, dn)


THEORY = TrainConfig(learning_rate=0.1).theory()


def test_verify_cooperative_trace():
    recs = [_rec(k, nd=1.0 / (k + 1), s=0.3, inner=1.2 / (k + 1) ** 2, l_data=1.0 / (k + 1)) for k in range(10)]
    v = analysis.verify_trace(TrainTrace(recs, config=THEORY), compute_m_kappa(5.0), "descent")
    assert v.checked_steps == 10 and v.descent_pass_rate == 1.0 and v.passed


def test_verify_flags_injected_violation():
    recs = [_rec(k) for k in range(8)]
    # cooperative step with inner product below ||g||^2, and a step too long
    recs[3] = _rec(3, s=0.2, inner=0.97)
    recs[5] = _rec(5, dn=2.1)
    v = analysis.verify_trace(TrainTrace(recs, config=THEORY), compute_m_kappa(5.0), "descent")
    assert v.descent_violations == [3] and v.step_bound_violations == [5]
    assert not v.passed and v.descent_pass_rate == pytest.approx(6 / 8)


def test_verify_conflicting_step_uses_descent_constant():
    m = compute_m_kappa(5.0)
    ok = _rec(0, s=-0.3, inner=m.c + 1e-9)
    bad = _rec(1, s=-0.3, inner=m.c - 1e-6)
    v = analysis.verify_trace(TrainTrace([ok, bad], config=THEORY), m, "descent")
    assert v.descent_violations == [1]


def test_verify_skips_regularized_steps():
    # norm product below epsilon: the recorded cosine is shrunk, the bound does not apply
    recs = [_rec(0, nd=1e-9, s=-1e-2, inner=0.5e-18), _rec(1)]
    v = analysis.verify_trace(TrainTrace(recs, config=THEORY), compute_m_kappa(5.0), "descent")
    assert v.regularized_steps == 1 and v.checked_steps == 1 and v.passed


def test_verify_skips_logic_active_steps():
    recs = [_rec(0), _rec(1, inner=-5.0, l_logic=0.2)]
    v = analysis.verify_trace(TrainTrace(recs, config=THEORY), compute_m_kappa(5.0), "descent")
    assert v.checked_steps == 1 and v.passed


def test_verify_theorem_arithmetic():
    m = compute_m_kappa(5.0)
    recs = [_rec(k, nd=0.5, l_data=1.0 - 0.1 * k) for k in range(5)]
    v = analysis.verify_trace(TrainTrace(recs, config=THEORY), m, "theorem")
    assert v.theorem_lhs == 0.25
    assert v.theorem_bound == pytest.approx(2 * 0.4 / (m.c * 0.1 * 5))
    assert v.theorem_ok and v.g_hat == 1.0
    # a flat loss gives a zero bound that any nonzero gradient violates
    flat = analysis.verify_trace(TrainTrace([_rec(k) for k in range(5)], config=THEORY), m, "theorem")
    assert flat.theorem_ok is False and not flat.passed


@pytest.mark.parametrize(
    "cfg, mode",
    [
        (TrainConfig(), "descent"),
        (TrainConfig(optimizer="gd"), "all"),
        (TrainConfig(alpha=0.0), "theorem"),
        (TrainConfig(strategy="lra").theory(), "descent"),
    ],
)
def test_verify_mode_errors(cfg, mode):
    with pytest.raises(ModeError):
        analysis.verify_trace(TrainTrace([_rec(0)], config=cfg), compute_m_kappa(5.0), mode)


def test_verify_needs_learning_rate_without_config():
    with pytest.raises(ModeError):
        analysis.verify_trace(TrainTrace([_rec(0)]), compute_m_kappa(5.0), "theorem")
    v = analysis.verify_trace(TrainTrace([_rec(0)]), compute_m_kappa(5.0), "descent")
    assert v.passed


def test_smoothness_of_quadratic():
    a = np.diag([1.0, 4.0, 9.0, 0.5])
    l_hat = analysis.estimate_smoothness(lambda th: a @ th, np.ones(4), n_pairs=50)
    assert l_hat == pytest.approx(9.0, rel=1e-6)


def test_smoothness_of_toy_within_analytic_constant():
    toy = ToyProblem()
    for theta in ([0.0, 0.0], [1.0, 0.4], [-2.0, 2.0]):
        l_hat = analysis.estimate_smoothness(toy.data_grad, theta, n_pairs=30)
        assert l_hat <= toy.smoothness * (1 + 1e-6)
    assert analysis.estimate_smoothness(toy.data_grad, [0.0, 0.0]) == pytest.approx(2.0, rel=1e-5)


def test_toy_gradients():
    toy = ToyProblem()
    th = np.array([0.7, -0.3])
    for f, g in ((toy.data_loss, toy.data_grad), (toy.phy_loss, toy.phy_grad)):
        fd = [(f(th + h) - f(th - h)) / 2e-6 for h in np.eye(2) * 1e-6]
        np.testing.assert_allclose(g(th), fd, rtol=1e-7, atol=1e-9)


def test_toy_run_satisfies_descent_and_envelope():
    trace = analysis.run_toy(steps=300)
    m = compute_m_kappa(5.0)
    v = analysis.verify_trace(trace, m)
    assert v.checked_steps + v.regularized_steps == 300 and v.checked_steps >= 100
    assert v.passed, v.to_dict()
    assert (trace.column("s_cos") < 0).any(), "toy should exercise the conflicting branch"
    assert trace.records[-1].l_data < trace.records[0].l_data


def test_toy_oversized_step_is_caught():
    # well above c / (4 L) the summed inequality no longer holds
    trace = analysis.run_toy(steps=200, learning_rate=1.0)
    v = analysis.verify_trace(trace, compute_m_kappa(5.0), "theorem")
    assert v.theorem_ok is False


def test_peak_errors():
    t = np.linspace(0, 100, 1001)
    truth = seir.rk4_simulate(seir.SeirParams())
    assert analysis.peak_errors(t, truth.i, truth.i) == (0.0, 0.0)
    pv, pt = analysis.peak_errors(t, 0.85 * truth.i, truth.i)
    assert pv == pytest.approx(0.15, abs=1e-12) and pt == 0.0
    shifted = np.roll(truth.i, 20)
    assert analysis.peak_errors(t, shifted, truth.i)[1] == pytest.approx(2.0)


def test_experiment_metrics_schema():
    truth = seir.rk4_simulate(seir.SeirParams())
    p = net.init((1, 4, 4), 0, 25.0)
    recs = [TraceRecord(k, 1.0 / (k + 1), 0, 0, 0.1 if k < 250 else 2.0, 0, 1, 1, 1, 1) for k in range(700)]
    m = analysis.experiment_metrics(TrainTrace(recs), p, truth)
    assert m.peak_value_error >= 0 and m.final_l_data == pytest.approx(1 / 700)
    assert m.phase_medians == {"early": 0.1, "late": 2.0}
    assert set(m.to_dict()) == {"peak_value_error", "peak_time_error", "final_l_data", "phase_medians"}


def test_late_window_missing_on_short_runs():
    truth = seir.rk4_simulate(seir.SeirParams())
    recs = [TraceRecord(k, 1.0, 0, 0, 1.0, 0, 1, 1, 1, 1) for k in range(100)]
    m = analysis.experiment_metrics(TrainTrace(recs), net.init((1, 4, 4), 0), truth)
    assert m.phase_medians["late"] is None


def test_theory_learning_rate_formula():
    cfg = TrainConfig(layer_sizes=(1, 6, 6, 4), n_collocation=20)
    from conflict_gate.trainer import make_inputs

    inputs = make_inputs(cfg, data_seed=0)
    p = net.init(cfg.layer_sizes, 0, 25.0)
    eta, l_hat = analysis.theory_learning_rate(p, inputs, n_pairs=10)
    assert l_hat > 0 and eta == pytest.approx(compute_m_kappa(5.0).c / (4 * l_hat))
    assert dataclasses.replace(cfg, learning_rate=eta).learning_rate == eta
