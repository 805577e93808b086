import numpy as np
import pytest

from lvrtcsr.integrate import integrate_batch


def _osc(y):
    return np.stack([y[..., 1], -y[..., 0]], axis=-1)


def test_harmonic_oscillator_accuracy():
    res = integrate_batch(_osc, np.array([[1.0, 0.0], [0.0, 2.0]]), 10.0, rtol=1e-10, atol=1e-12)
    t = 10.0
    assert np.allclose(res.y_final[0], [np.cos(t), -np.sin(t)], atol=1e-8)
    assert np.allclose(res.y_final[1], [2 * np.sin(t), 2 * np.cos(t)], atol=1e-8)


def test_t_eval_uses_dense_output():
    ts = np.linspace(0, 3, 31)
    res = integrate_batch(_osc, np.array([1.0, 0.0]), 3.0, rtol=1e-10, atol=1e-12, t_eval=ts)
    assert np.allclose(res.times, ts)
    ys = np.array([s[0] for s in res.states])
    assert np.allclose(ys[:, 0], np.cos(ts), atol=1e-8)


def test_event_location():
    # y0 = cos t crosses zero at pi/2
    res = integrate_batch(_osc, np.array([1.0, 0.0]), 3.0, rtol=1e-10, atol=1e-12,
                          events=lambda y: y[..., :1])
    assert res.event_time[0, 0] == pytest.approx(np.pi / 2, abs=1e-6)


def test_stop_retires_trajectories():
    res = integrate_batch(_osc, np.array([[1.0, 0.0], [0.5, 0.0]]), 5.0,
                          stop=lambda y: y[..., 0] < 0.0)
    assert res.stopped.all()
    assert np.all(res.t_final < 5.0)
