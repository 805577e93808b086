"""Batched Dormand-Prince 5(4) integrator with dense output and sign-change events.

One step size is shared by the whole batch (the worst trajectory sets it), which
keeps every stage a single vectorized evaluation. Trajectories can be retired
from the batch early through ``stop``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# continuous extension (same coefficients as the classic DOPRI5 dense output)
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


class StepSizeUnderflow(RuntimeError):
    def __init__(self, msg, t, state):
        super().__init__(msg)
        self.t = t
        self.state = state


@dataclass
class BatchResult:
    t_final: np.ndarray  # per trajectory
    y_final: np.ndarray
    event_time: np.ndarray  # (batch, n_event); inf when never triggered
    stopped: np.ndarray  # retired early by ``stop``
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)


def _dense(y_old, k, h, theta):
    """States at t_old + theta*h for each theta; returns (len(theta), batch, dim)."""
    q = np.einsum("sbd,sj->jbd", k, _P)  # (4, batch, dim)
    p = np.cumprod(np.tile(np.asarray(theta)[:, None], (1, 4)), axis=1)  # (ntheta, 4)
    return y_old[None] + h * np.einsum("tj,jbd->tbd", p, q)


def integrate_batch(
    rhs,
    y0,
    t_end: float,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    project=None,
    events=None,
    stop=None,
    terminal_events: bool = False,
    record: bool = False,
    n_dense: int = 8,
    h0: float | None = None,
    h_min: float = 1e-12,
    max_steps: int = 2_000_000,
    t_eval=None,
) -> BatchResult:
    """Integrate ``y' = rhs(y)`` (autonomous) for a batch of initial states.

    ``events(y) -> (..., n_event)`` is monitored on ``n_dense`` dense-output
    points per step; the first time a component turns negative is located by
    bisection on the interpolant. ``stop(y) -> bool mask`` retires trajectories.
    With ``t_eval`` the recorded samples are the dense-output states at those
    times instead of the step endpoints.
    """
    y = np.array(y0, dtype=float)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[None]
    nb, dim = y.shape
    if project is not None:
        y = project(y)
    n_ev = 0 if events is None else np.atleast_2d(events(y[:1])).shape[-1]
    ev_time = np.full((nb, n_ev), np.inf)
    if n_ev:
        neg = events(y) < 0
        ev_time[neg] = 0.0
    t_final = np.full(nb, t_end)
    stopped = np.zeros(nb, dtype=bool)
    y_out = y.copy()
    active = np.arange(nb)
    if stop is not None:
        s0 = stop(y)
        if terminal_events and n_ev:
            s0 |= np.isfinite(ev_time).any(axis=1)
        stopped[s0] = True
        t_final[s0] = 0.0
        active = active[~s0]
        y = y[~s0]
    if t_eval is not None:
        t_eval = np.sort(np.asarray(t_eval, dtype=float))
        record = True
        pending = t_eval[t_eval > 0]
        times = [float(v) for v in t_eval[t_eval <= 0]]
        states = [y_out.copy() for _ in times]
    else:
        times = [0.0] if record else []
        states = [y_out.copy()] if record else []

    t = 0.0
    f = rhs(y) if len(active) else None
    if h0 is None:
        if len(active):
            scale = atol + rtol * np.abs(y)
            d0 = np.sqrt(np.mean((y / scale) ** 2))
            d1 = np.sqrt(np.mean((f / scale) ** 2))
            h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        else:
            h0 = 1e-3
    h = min(h0, t_end)
    thetas = np.arange(1, n_dense + 1) / n_dense
    steps = 0
    while len(active) and t < t_end:
        steps += 1
        if steps > max_steps:
            raise StepSizeUnderflow("too many steps", t, y)
        h = min(h, t_end - t)
        k = np.empty((7,) + y.shape)
        k[0] = f
        for s in range(1, 7):
            dy = sum(a * k[i] for i, a in enumerate(_A[s]) if a != 0)
            k[s] = rhs(y + h * dy)
        y_new = y + h * np.einsum("s,sbd->bd", _B, k)
        err = h * np.einsum("s,sbd->bd", _E, k)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        en = np.sqrt(np.mean((err / scale) ** 2, axis=1))
        err_norm = float(np.max(en))
        if not np.isfinite(err_norm):
            err_norm = 1e10
        if err_norm > 1.0:
            h *= max(0.2, 0.9 * err_norm ** -0.2)
            if h < h_min * max(1.0, t):
                raise StepSizeUnderflow(f"step size underflow at t={t:.6g}", t, y)
            continue

        if n_ev:
            dense = _dense(y, k, h, thetas)  # (nt, b, d)
            g = events(dense)  # (nt, b, n_ev)
            live = ~np.isfinite(ev_time[active])
            hit = (g < 0) & live[None]
            if hit.any():
                for bi, ei in zip(*np.nonzero(hit.any(axis=0))):
                    first = int(np.argmax(hit[:, bi, ei]))
                    lo = thetas[first - 1] if first > 0 else 0.0
                    hi = thetas[first]
                    for _ in range(40):
                        mid = 0.5 * (lo + hi)
                        ym = _dense(y[bi : bi + 1], k[:, bi : bi + 1], h, [mid])
                        if events(ym)[0, 0, ei] < 0:
                            hi = mid
                        else:
                            lo = mid
                    ev_time[active[bi], ei] = t + hi * h
        if t_eval is not None:
            due = pending[pending <= t + h * (1 + 1e-12)]
            if len(due):
                pending = pending[len(due):]
                dense = _dense(y, k, h, np.clip((due - t) / h, 0.0, 1.0))
                for tv, yv in zip(due, dense):
                    if project is not None:
                        yv = project(yv)
                    full = y_out.copy()
                    full[active] = yv
                    times.append(float(tv))
                    states.append(full)
        t += h
        if project is not None:
            y_new = project(y_new)
        y = y_new
        f = rhs(y)
        if record and t_eval is None:
            times.append(t)
            full = y_out.copy()
            full[active] = y
            states.append(full)
        retire = np.zeros(len(active), dtype=bool)
        if stop is not None:
            retire |= stop(y)
        if terminal_events and n_ev:
            retire |= np.isfinite(ev_time[active]).any(axis=1)
        if retire.any():
            idx = active[retire]
            y_out[idx] = y[retire]
            t_final[idx] = t
            stopped[idx] = True
            active = active[~retire]
            y = y[~retire]
            f = f[~retire]
        h *= min(10.0, max(0.2, 0.9 * max(err_norm, 1e-10) ** -0.2))
    y_out[active] = y
    if squeeze:
        y_out = y_out[0]
    return BatchResult(t_final, y_out, ev_time, stopped, times, states)
