import io

import numpy as np
import pytest

from fdbench.errors import DivergenceError, InputError, ParameterError, ScenarioError
from fdbench.observers import LtiModel
from fdbench.plant import (
    ActuatorChange,
    ClosedLoopConfig,
    FaultScenario,
    FaultSegment,
    HelicopterParams,
    Trace,
    build_helicopter_model,
    hover_input,
    lqr_gain,
    scenario_from_config,
    simulate,
)

from .helpers import experiment_trace, helicopter, helicopter_detectors, rng_for, scenario


def test_travel_coupling_cancels_for_balanced_arm():
    p = HelicopterParams(m_f=1.0, m_w=2.0, L_a=1.0, L_m=1.0)
    assert build_helicopter_model(p).A[5, 1] == 0.0


def test_travel_coupling_without_counterweight():
    p = HelicopterParams(m_f=1.0, m_w=1e-12, L_a=1.0, L_h=1e-9, g=9.81)
    assert build_helicopter_model(p).A[5, 1] == pytest.approx(9.81, rel=1e-9)


def test_helicopter_measures_angles():
    C = build_helicopter_model().C
    assert np.array_equal(C, np.hstack([np.eye(3), np.zeros((3, 3))]))


def test_helicopter_open_loop_poles_at_origin():
    assert np.allclose(np.linalg.eigvals(build_helicopter_model().A), 0)


@pytest.mark.parametrize("field", ["m_f", "L_h", "K_f", "g"])
def test_helicopter_rejects_nonpositive_parameters(field):
    with pytest.raises(ParameterError):
        HelicopterParams(**{field: 0.0})


def test_hover_input_balances_gravity():
    model = build_helicopter_model()
    u = hover_input()
    assert u[0] == u[1] > 0
    p = HelicopterParams()
    # lift torque of both motors equals the net gravity torque
    lift = 2 * p.K_f * u[0] * p.L_a
    assert lift == pytest.approx((2 * p.m_f * p.L_a - p.m_w * p.L_w) * p.g)
    assert model.B[3, 0] > 0


# controller ---------------------------------------------------------------------

def test_lqr_scalar():
    m = LtiModel([[0.0]], [[1.0]], [[1.0]], None)
    assert lqr_gain(m, [[1.0]], [[1.0]])[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_lqr_costlier_input_slows_loop():
    rng = rng_for(11)
    A = rng.standard_normal((4, 4))
    m = LtiModel(A, rng.standard_normal((4, 2)), rng.standard_normal((2, 4)), None)
    K1 = lqr_gain(m, np.eye(4), np.eye(2))
    K2 = lqr_gain(m, np.eye(4), 2 * np.eye(2))
    a1 = max(np.linalg.eigvals(A - m.B @ K1).real)
    a2 = max(np.linalg.eigvals(A - m.B @ K2).real)
    assert a1 < a2 < 0


def test_helicopter_closed_loop_is_hurwitz():
    model, cl, _ = helicopter()
    assert max(np.linalg.eigvals(model.A - model.B @ cl.K_ctrl).real) < 0


# scenarios ----------------------------------------------------------------------

def test_empty_scenario_is_nominal():
    sc = FaultScenario(5.0)
    f, fd = sc.fault_at(2.0, 3, 0)
    assert not f.any() and fd.size == 0
    assert np.array_equal(sc.actuator_at(2.0, 2), np.eye(2))


def test_experiment1_timeline():
    sc = scenario("experiment1")
    assert sc.onsets() == [10.0, 30.0, 50.0]
    assert [s.t_end for s in sc.segments] == [20.0, 40.0, 70.0]
    assert sc.duration == 70.0


def test_experiment2_actuator_switch():
    sc = scenario("experiment2")
    assert np.array_equal(sc.actuator_at(9.999, 2), np.eye(2))
    assert np.array_equal(sc.actuator_at(10.0, 2), np.diag([0.95, 0.3]))


def test_overlapping_segments_rejected():
    with pytest.raises(ScenarioError, match="overlaps"):
        FaultScenario(10.0, (FaultSegment(1.0, 5.0, (1.0,)), FaultSegment(4.0, 6.0, (1.0,))))


def test_segment_outside_run_rejected():
    with pytest.raises(ScenarioError, match="outside"):
        FaultScenario(10.0, (FaultSegment(8.0, 12.0, (1.0,)),))


def test_scenario_file_schema():
    with pytest.raises(InputError, match="schema_version"):
        scenario_from_config({"kind": "scenario", "duration": 1.0})
    with pytest.raises(ScenarioError, match="unknown"):
        scenario_from_config({"schema_version": 1, "duration": 1.0, "faults": []})
    with pytest.raises(ScenarioError, match="overlaps"):
        scenario_from_config({"schema_version": 1, "duration": 10.0, "segments": [
            {"t_start": 0, "t_end": 5, "f": [1]}, {"t_start": 3, "t_end": 7, "f": [1]}]})


def test_wrong_fault_length_is_reported():
    model, cl, _ = helicopter()
    sc = FaultScenario(1.0, (FaultSegment(0.0, 1.0, (1.0,)),))
    with pytest.raises(ScenarioError, match="length 3"):
        simulate(model, cl, sc)


# simulation ---------------------------------------------------------------------

def test_equilibrium_stays_put():
    model, cl, _ = helicopter()
    dets = helicopter_detectors()
    tr = simulate(model, cl, FaultScenario(2.0), {d.name: d.observer for d in dets})
    for d in dets:
        assert np.max(np.abs(tr[f"{d.name}.residual"])) <= 1e-12
    assert np.max(np.abs(tr["x"])) == 0.0


def test_trace_columns_have_equal_length():
    tr = experiment_trace("experiment1")
    assert all(len(v) == len(tr) for v in tr.columns.values())
    assert np.allclose(np.diff(tr.t), tr.dt)


def _terminal_state(dt):
    model, cl, _ = helicopter()
    cfg = cl.replace(dt=dt, x0=np.array([0.1, -0.05, 0.2, 0.0, 0.1, -0.1]))
    return simulate(model, cfg, FaultScenario(4.0))["x"][-1]


def test_rk4_richardson_ratio():
    h = [0.04, 0.02, 0.01]
    x = [_terminal_state(dt) for dt in h]
    ratio = np.linalg.norm(x[0] - x[1]) / np.linalg.norm(x[1] - x[2])
    assert 12 <= ratio <= 20


def test_simulation_is_deterministic():
    model, cl, _ = helicopter()
    dets = helicopter_detectors()
    obs = {d.name: d.observer for d in dets}
    sc = FaultScenario(3.0, (FaultSegment(1.0, 2.0, (0.0, 1.0, 0.0)),))
    a = simulate(model, cl.replace(x0=np.full(6, 0.01)), sc, obs)
    b = simulate(model, cl.replace(x0=np.full(6, 0.01)), sc, obs)
    assert a.columns.keys() == b.columns.keys()
    for k in a.columns:
        assert np.array_equal(a[k], b[k]), k


def test_trace_csv_round_trip():
    model, cl, _ = helicopter()
    sc = FaultScenario(0.5, (FaultSegment(0.1, 0.3, (1.0, 0.0, 0.0)),))
    tr = simulate(model, cl.replace(x0=np.full(6, 1 / 3)), sc)
    text = tr.to_csv()
    assert text.splitlines()[0].startswith("t,x[0],x[1]")
    back = Trace.from_csv(io.StringIO(text))
    assert np.array_equal(back.t, tr.t)
    for k, v in tr.columns.items():
        if v.ndim == 1 or v.shape[1]:
            assert np.array_equal(back[k], v), k


def test_trace_csv_stride_and_columns():
    tr = simulate(*helicopter()[:2], FaultScenario(0.1))
    rows = tr.to_csv(columns=["y"], stride=10).splitlines()
    assert rows[0] == "t,y[0],y[1],y[2]"
    assert len(rows) == 1 + len(range(0, len(tr), 10))


def test_divergence_reports_time():
    m = LtiModel([[5.0]], [[1.0]], [[1.0]], None)
    cfg = ClosedLoopConfig(np.zeros((1, 1)), x0=np.ones(1), dt=1e-2)
    with pytest.raises(DivergenceError) as info:
        simulate(m, cfg, FaultScenario(20.0))
    assert 5.0 < info.value.time < 6.0


def test_duration_must_fit_grid():
    with pytest.raises(InputError):
        simulate(*helicopter()[:2], FaultScenario(0.0105))


@pytest.mark.slow
@pytest.mark.parametrize("name", ["experiment1", "experiment2", "nominal"])
def test_closed_loop_stays_bounded(name):
    """|x(t)| <= 10 (|x0| + largest fault), with actuator loss counted as a fault."""
    model, cl, _ = helicopter()
    sc = scenario(name)
    tr = experiment_trace(name) if name != "nominal" else simulate(model, cl, sc)
    u_op = cl.u_op
    equiv = [np.linalg.norm(model.B @ (c.X @ u_op - u_op)) for c in sc.actuator_schedule]
    bound = 10 * (np.linalg.norm(tr["x"][0]) + max([sc.max_fault_norm()] + equiv))
    assert np.max(np.linalg.norm(tr["x"], axis=1)) <= bound
    if name == "nominal":
        assert bound == 0 and not tr["x"].any()


def test_actuator_loss_reaches_plant_not_observers():
    model, cl, _ = helicopter()
    X = np.diag([0.5, 1.0])
    sc = FaultScenario(1.0, actuator_schedule=(ActuatorChange(0.0, X),))
    tr = simulate(model, cl, sc)
    # the commanded input is recorded, the plant feels the lost thrust
    assert np.allclose(tr["u"], -tr["x"] @ cl.K_ctrl.T)
    assert tr["x"][-1, 0] < 0
