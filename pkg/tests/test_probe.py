import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evnet.probe import EventNeuron, drift_scenario, error_retention_probe


def test_zero_schedule():
    res = error_retention_probe([0.5, -1.0], np.zeros((10, 2)), a0=0.7, threshold=0.1)
    assert res.d_final == 0.0 and res.a_final == 0.7 and res.holds()
    with pytest.raises(ValueError):
        error_retention_probe([1.0], np.zeros((2, 1)))


def test_neuron_update_rule():
    n = EventNeuron([2.0], f="relu", a=-1.0)
    n.receive([1.0])  # a: -1 -> 1, f(a): 0 -> 1
    assert (n.a, n.b, n.d) == (1.0, 1.0, 1.0)
    assert n.transmit(False) == 0.0 and n.d == 1.0
    assert n.transmit(True) == 1.0 and n.d == 0.0


def test_forgetful_neuron_discards_remainder():
    n = EventNeuron([1.0], memory=False)
    assert n.step([0.01], threshold=0.05) == 0.0
    assert n.d == 0.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["identity", "relu"]))
def test_identities_hold(seed, f):
    rng = np.random.default_rng(seed)
    n_in = int(rng.integers(1, 5))
    schedule = rng.standard_normal((50, n_in)) * (rng.random((50, n_in)) < 0.5)
    res = error_retention_probe(rng.standard_normal(n_in), schedule, a0=float(rng.standard_normal()), f=f,
                                fire_pattern=rng.random(50) < 0.3)
    assert res.holds(1e-6)


def test_permuted_schedule_same_final_state():
    rng = np.random.default_rng(11)
    w = rng.standard_normal(3)
    schedule = rng.standard_normal((50, 3))
    a = error_retention_probe(w, schedule, threshold=0.5)
    b = error_retention_probe(w, schedule[rng.permutation(50)], threshold=0.5)
    assert a.a_final == pytest.approx(b.a_final, abs=1e-9)
    assert a.d_final + a.sum_out == pytest.approx(b.d_final + b.sum_out, abs=1e-9)


def test_drift_scenarios():
    delta = 0.05
    err, sent = drift_scenario([2 * delta], delta)
    assert err == 0.0 and sent == [2 * delta]
    ramp = [0.1 * delta * k for k in range(1, 21)]
    err, _ = drift_scenario(ramp, delta, memory=False)
    assert err == pytest.approx(-2 * delta, abs=1e-12)
    err, sent = drift_scenario(ramp, delta, memory=True)
    assert abs(err) <= delta and any(sent)
