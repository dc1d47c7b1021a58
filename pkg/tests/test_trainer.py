import math

import numpy as np
import pytest

from conflict_gate import net, seir, trainer
from conflict_gate.exceptions import ConfigError, NumericalError, ParseError
from conflict_gate.losses import data_loss, ode_loss
from conflict_gate.seir import Dataset, SeirParams
from conflict_gate.tape import Tape
from conflict_gate.trainer import TrainConfig, TrainTrace
from conflict_gate.weighting import diagnostics, gate
from oracles import central_diff

SMALL = dict(layer_sizes=(1, 8, 8, 4), n_collocation=40)


@pytest.fixture(scope="module")
def small_inputs():
    return trainer.make_inputs(TrainConfig(**SMALL), data_seed=0)


def _config(**kw):
    return TrainConfig(**{**SMALL, **kw})


def test_config_validation():
    with pytest.raises(ConfigError, match="fixed, lra, cggs"):
        TrainConfig(strategy="pcgrad")
    for kw in ({"optimizer": "sgd"}, {"learning_rate": 0.0}, {"steps": 0}, {"alpha": 1.0}):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)
    with pytest.raises(ConfigError, match="bogus"):
        trainer.config_from_dict({"strategy": "lra", "bogus": 1})
    cfg = trainer.config_from_dict({"strategy": "lra", "layer_sizes": [1, 4, 4]})
    assert cfg.layer_sizes == (1, 4, 4)


def test_theory_config():
    cfg = TrainConfig().theory()
    assert cfg.alpha == 0.0 and cfg.optimizer == "gd" and cfg.is_theory_mode
    assert not TrainConfig().is_theory_mode


def test_zero_network_on_zero_data_has_zero_data_gradient(small_inputs):
    p = net.init(SMALL["layer_sizes"], 0)
    p = p.with_theta(np.zeros(p.size))
    inputs = small_inputs._replace(dataset=Dataset([1.0, 5.0, 9.0], [0.0, 0.0, 0.0]))
    diag, (l_data, _, _) = trainer.compute_gradients(p, inputs)
    assert l_data == 0.0
    np.testing.assert_array_equal(diag.g_data, 0.0)


def test_data_gradient_matches_finite_differences(small_inputs):
    p = net.init(seed=3, time_scale=25.0)
    diag, (l_data, _, _) = trainer.compute_gradients(p, small_inputs)
    fd = central_diff(lambda th: float(data_loss(p.with_theta(th), Tape(), small_inputs.dataset).value), p.theta)
    assert np.linalg.norm(diag.g_data - fd) / np.linalg.norm(fd) <= 1e-5


def test_gradients_do_not_depend_on_strategy(small_inputs):
    # weights are applied after the gradients, so only theta matters
    p = net.init(SMALL["layer_sizes"], 1, 25.0)
    a, la = trainer.compute_gradients(p, small_inputs)
    b, lb = trainer.compute_gradients(p, small_inputs)
    assert la == lb
    for x, y in ((a.g_data, b.g_data), (a.g_phy, b.g_phy), (a.g_logic, b.g_logic)):
        np.testing.assert_array_equal(x, y)


def _injector(c, dim, seed=0):
    g_phy = np.random.default_rng(seed).normal(size=dim)
    g_data = -c * g_phy

    def fn(params, inputs, epsilon, raw_rates=None):
        return diagnostics(g_data, g_phy, np.zeros(dim), epsilon), (1.0, 1.0, 0.0)

    return fn, g_data


@pytest.mark.parametrize("c", [0.5, 2.0, 7.0])
def test_fixed_weight_stalls_on_injected_deadlock(small_inputs, c):
    cfg = _config(strategy="fixed", lambda_phy=c, optimizer="gd", learning_rate=0.1, lambda_logic=0.0)
    p = net.init(cfg.layer_sizes, 0)
    fn, _ = _injector(c, p.size)
    p2, _, rec = trainer.train_step(p, cfg.gate_state(), cfg, small_inputs, gradient_fn=fn)
    np.testing.assert_array_equal(p2.theta, p.theta)
    assert rec.d_norm == 0.0


@pytest.mark.parametrize("c", [0.5, 2.0, 7.0])
def test_gated_step_escapes_injected_deadlock(small_inputs, c):
    cfg = _config(strategy="cggs", learning_rate=0.1, lambda_logic=0.0).theory()
    p = net.init(cfg.layer_sizes, 0)
    fn, g_data = _injector(c, p.size)
    p2, state, _ = trainer.train_step(p, cfg.gate_state(), cfg, small_inputs, gradient_fn=fn)
    moved = np.linalg.norm(p2.theta - p.theta)
    assert moved >= 0.1 * (1 - gate(-1.0, 5.0)) * np.linalg.norm(g_data) * (1 - 1e-12)
    assert state.lambda_hat == pytest.approx(c * gate(-1.0, 5.0), rel=1e-6)


def test_non_finite_gradient_aborts(small_inputs):
    cfg = _config()
    p = net.init(cfg.layer_sizes, 0)

    def bad(params, inputs, epsilon, raw_rates=None):
        g = np.ones(p.size)
        g[3] = np.nan
        return diagnostics(g, np.ones(p.size), np.zeros(p.size), epsilon), (math.nan, 1.0, 0.0)

    with pytest.raises(NumericalError, match="step 7"):
        trainer.train_step(p, cfg.gate_state(), cfg, small_inputs, step=7, gradient_fn=bad)


def test_gd_step_is_exact():
    theta = np.array([1.0, -2.0, 0.5])
    d = np.array([0.25, 0.5, -4.0])
    np.testing.assert_array_equal(trainer.GradientDescent(0.125).step(theta, d), theta - 0.125 * d)


def test_adam_first_step_is_signed_learning_rate():
    theta = np.zeros(4)
    d = np.array([3.0, -0.01, 1e3, -7.0])
    out = trainer.Adam(1e-3).step(theta, d)
    np.testing.assert_allclose(out, -1e-3 * np.sign(d), rtol=1e-6)


def test_single_step_run(small_inputs):
    tr = trainer.run(_config(steps=1), small_inputs)
    assert len(tr) == 1 and tr.records[0].step == 0
    assert tr.params.size == net.n_params(SMALL["layer_sizes"])


def test_run_is_deterministic(tmp_path, small_inputs):
    paths = []
    for k in range(2):
        tr = trainer.run(_config(steps=30, seed=4), small_inputs)
        paths.append(tmp_path / f"t{k}.csv")
        tr.to_csv(paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_unit_gate_reproduces_magnitude_balancing(small_inputs):
    a = trainer.run(_config(strategy="lra", steps=60), small_inputs)
    b = trainer.run(_config(strategy="cggs", force_gate=1.0, steps=60), small_inputs)
    for name in trainer.TRACE_COLUMNS:
        np.testing.assert_array_equal(a.column(name), b.column(name))
    np.testing.assert_array_equal(a.params.theta, b.params.theta)


def test_fixed_strategy_keeps_weight(small_inputs):
    tr = trainer.run(_config(strategy="fixed", lambda_phy=2.5, steps=10), small_inputs)
    assert set(tr.column("lambda_hat")) == {2.5}


def test_trace_records_are_consistent(small_inputs):
    tr = trainer.run(_config(steps=20), small_inputs)
    for r in tr.records:
        assert -1 <= r.s_cos <= 1 and r.norm_data >= 0 and r.norm_phy >= 0 and r.lambda_hat > 0
        assert r.logic_inactive() == (r.norm_logic < 1e-12)


def test_training_reduces_data_loss(small_inputs):
    tr = trainer.run(_config(steps=300, layer_sizes=(1, 16, 16, 4)), small_inputs)
    assert tr.records[-1].l_data < tr.records[0].l_data


def test_trace_csv_round_trip(tmp_path, small_inputs):
    tr = trainer.run(_config(steps=15), small_inputs)
    path = tmp_path / "trace.csv"
    tr.to_csv(path)
    assert path.read_text().splitlines()[0] == ",".join(trainer.TRACE_COLUMNS)
    back = TrainTrace.from_csv(path)
    for name in trainer.TRACE_COLUMNS:
        np.testing.assert_array_equal(back.column(name), tr.column(name))
    back.to_csv(tmp_path / "again.csv")
    assert (tmp_path / "again.csv").read_bytes() == path.read_bytes()


@pytest.mark.parametrize(
    "body",
    [
        "",
        "step,l_data\n0,1\n",
        ",".join(trainer.TRACE_COLUMNS) + "\n0,1,2,3\n",
        ",".join(trainer.TRACE_COLUMNS) + "\n0" + ",x" * 9 + "\n",
        ",".join(trainer.TRACE_COLUMNS) + "\n1" + ",0.5" * 9 + "\n",
    ],
)
def test_trace_csv_errors(tmp_path, body):
    path = tmp_path / "bad.csv"
    path.write_text(body)
    with pytest.raises(ParseError):
        TrainTrace.from_csv(path)


def test_softplus_keeps_rates_positive():
    raw = np.linspace(-30, 30, 601)
    assert np.all(trainer._softplus(raw) > 0)
    rates = np.array([1.0, 0.2, 0.14, 1e-3, 25.0])
    np.testing.assert_allclose(trainer._softplus(trainer.softplus_inv(rates)), rates, rtol=1e-12)


def test_ode_loss_rate_gradient_matches_finite_differences(small_inputs):
    p = net.init(SMALL["layer_sizes"], 2, 25.0)
    raw = trainer.softplus_inv([1.0, 0.2, 0.14])
    diag, _ = trainer.compute_gradients(p, small_inputs, raw_rates=raw)
    assert diag.g_phy.size == p.size + 3

    def l_ode(r):
        b, s, g = trainer._softplus(r)
        sp = SeirParams(beta=b, sigma=s, gamma=g)
        return float(ode_loss(p, Tape(), small_inputs.grid, sp).value)

    fd = central_diff(l_ode, raw)
    np.testing.assert_allclose(diag.g_phy[-3:], fd, rtol=1e-6)
    # rates only enter the physics loss
    np.testing.assert_array_equal(diag.g_data[-3:], 0.0)


def test_inverse_mode_is_stable_at_true_rates():
    # clean data, rates initialized at the truth, plain gradient descent
    cfg = TrainConfig(inverse_mode=True, optimizer="gd", learning_rate=1e-2, steps=2000)
    inputs = trainer.make_inputs(cfg, noise_sigma=0.0, data_seed=0)
    tr = trainer.run(cfg, inputs)
    truth = {"beta": 1.0, "sigma": 0.2, "gamma": 0.14}
    for name, value in truth.items():
        assert abs(tr.rates[name] - value) <= 0.05 * value, tr.rates


def test_make_inputs_defaults():
    inputs = trainer.make_inputs(TrainConfig(), data_seed=0)
    assert len(inputs.dataset) == 20 and len(inputs.grid) == 200
    truth = seir.rk4_simulate(SeirParams())
    assert inputs.dataset == seir.generate_dataset(truth, 20, 0.05, 0)
