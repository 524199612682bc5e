import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmc_es import safe_flow, sim
from gmc_es.problem import builtin


def decay(t, x):
    return -x, None


def test_euler_closed_form():
    traj = sim.integrate(decay, [1.0], 0.1, 1.0, "euler")
    assert len(traj) == 11
    assert traj.final_state[0] == pytest.approx(0.9 ** 10, rel=1e-14)
    assert traj.final_state[0] == pytest.approx(0.34868, abs=1e-5)


def test_rk4_accuracy():
    traj = sim.integrate(decay, [1.0], 0.1, 1.0, "rk4")
    assert abs(traj.final_state[0] - math.exp(-1.0)) <= 1e-6


def test_zero_field_is_constant():
    traj = sim.integrate(lambda t, x: (np.zeros_like(x), None), [1.0, -2.0], 0.5, 3.0, "rk4")
    assert np.all(traj.states == np.array([1.0, -2.0]))


def test_times_uniform_and_lengths_match():
    traj = sim.integrate(decay, [1.0], 0.05, 2.0, "euler", recorder=lambda t, x, aux: {"x2": x[0] ** 2})
    np.testing.assert_allclose(np.diff(traj.times), 0.05, atol=1e-14)
    assert len(traj.diagnostics["x2"]) == len(traj) == traj.states.shape[0]


def test_recorder_sees_first_stage_aux():
    seen = []

    def rhs(t, x):
        return -x, ("aux", t)

    sim.integrate(rhs, [1.0], 0.25, 1.0, "rk4", recorder=lambda t, x, aux: seen.append((t, aux)) or {})
    assert all(aux == ("aux", t) for t, aux in seen)


def test_non_finite_state_aborts():
    with np.errstate(over="ignore"):
        traj = sim.integrate(lambda t, x: (x * 1e200, None), [1e200], 1.0, 10.0, "euler")
    assert traj.status == sim.ABORTED
    assert traj.failure_state is not None and not np.all(np.isfinite(traj.failure_state))
    assert np.all(np.isfinite(traj.states))


def test_stop_callback():
    traj = sim.integrate(decay, [1.0], 0.1, 10.0, "euler", stop=lambda t, x, aux: "converged" if x[0] < 0.5 else None)
    assert traj.status == sim.CONVERGED
    assert traj.final_state[0] < 0.5 <= traj.states[-2, 0]


def test_halt_from_rhs():
    def rhs(t, x):
        if t > 0.25:
            raise sim.IntegrationHalt(sim.QP_FAILURE, "boom", x)
        return -x, None

    traj = sim.integrate(rhs, [1.0], 0.1, 1.0, "euler")
    assert traj.status == sim.QP_FAILURE and traj.message == "boom"


def test_invalid_arguments():
    with pytest.raises(ValueError):
        sim.integrate(decay, [1.0], 0.0, 1.0)
    with pytest.raises(ValueError):
        sim.integrate(decay, [1.0], 0.1, 1.0, "heun")


def test_num_steps_tolerates_rounding():
    assert sim.num_steps(0.01, 20.0) == 2000
    assert sim.num_steps(0.048, 5000.0) == 104166


def _ramp(records: int) -> sim.Trajectory:
    return sim.integrate(lambda t, x: (np.ones(1), None), [0.0], 1.0, records - 1, "euler")


def test_decimate_rules():
    traj = _ramp(101)
    assert len(sim.decimate(traj, 1)) == 101
    assert len(sim.decimate(traj, 10)) == 11
    ends = sim.decimate(traj, 500)
    assert len(ends) == 2 and ends.times[0] == 0.0 and ends.times[-1] == 100.0
    assert sim.decimate(_ramp(11), 3).times.tolist() == [0.0, 3.0, 6.0, 9.0, 10.0]
    with pytest.raises(ValueError):
        sim.decimate(traj, 0)


def _paper2d_run():
    return safe_flow.integrate(builtin("paper2d"), [0.0, 0.0], safe_flow.FlowParams(horizon=1.0))


def test_csv_header_and_first_row():
    text = sim.to_csv(_paper2d_run())
    lines = text.split("\n")
    assert lines[0] == "t,theta_1,theta_2,g_1,g_2,V_eps,norm_G_alpha,u_1,u_2,qp_status"
    cols = sim.read_csv(text)
    assert cols["g_1"][0] == 0.0 and cols["g_2"][0] == -1.0
    assert cols["qp_status"][0] == "optimal"
    assert text.endswith("\n") and "\r" not in text


def test_csv_round_trip_is_exact():
    traj = _paper2d_run()
    cols = sim.read_csv(sim.to_csv(traj))
    assert np.array_equal(cols["t"], traj.times)
    assert np.array_equal(cols["theta_1"], traj.states[:, 0])
    assert np.array_equal(cols["u_2"], traj.diagnostics["u"][:, 1])
    assert np.array_equal(cols["V_eps"], traj.diagnostics["V_eps"])


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_number_format_is_lossless(x):
    assert float(sim._fmt(x)) == x


def test_empty_trajectory_csv_is_header_only():
    empty = sim.Trajectory(times=np.zeros(0), states=np.zeros((0, 2)), metadata={"n": 2, "m": 1, "l": 0})
    assert sim.to_csv(empty) == "t,theta_1,theta_2,g_1,V_eps,norm_G_alpha,u_1,qp_status\n"


def test_es_columns():
    assert sim.csv_columns(2, 0, 1, es=True) == [
        "t", "theta_1", "theta_2", "theta_hat_1", "theta_hat_2", "h_1", "V_eps", "norm_G_alpha", "v_1", "qp_status",
    ]


def test_csv_is_deterministic():
    assert sim.to_csv(_paper2d_run()) == sim.to_csv(_paper2d_run())


def test_metadata_sidecar():
    import json

    traj = _paper2d_run()
    meta = json.loads(sim.metadata_json(traj))
    assert meta["status"] == traj.status and meta["records"] == len(traj)
    assert meta["params"]["dt"] == 0.01 and meta["problem"] == "paper2d"
