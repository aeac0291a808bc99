"""Simulated low-level flight controller: rate-loop PID plus motor mixer.

The policy commands a normalized collective throttle and a body-rate setpoint;
the controller converts them to per-rotor thrusts through a per-axis PID on
rate error and an X-configuration sign mixer. Runs at the environment rate
(one call per dynamics step). All functions accept leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .dynamics import apply_fault


class RateCommand(NamedTuple):
    throttle: float         # [0,1] collective
    omega_cmd: np.ndarray   # (3,) rad/s body-rate setpoint


class PidGains(NamedTuple):
    kp: np.ndarray          # (3,)
    ki: np.ndarray          # (3,)
    kd: np.ndarray          # (3,)
    integral_limit: float   # bound on the accumulated ki*e*dt term


def gains_from_config(cfg) -> PidGains:
    return PidGains(kp=np.asarray(cfg.kp, dtype=np.float64),
                    ki=np.asarray(cfg.ki, dtype=np.float64),
                    kd=np.asarray(cfg.kd, dtype=np.float64),
                    integral_limit=float(cfg.integral_limit))


@dataclass
class PidState:
    """Mutable controller state; prev_meas supports derivative-on-measurement."""
    integ: np.ndarray       # (...,3) accumulated ki*e*dt, clamped
    prev_meas: np.ndarray   # (...,3) last measured body rates

    @classmethod
    def zeros(cls, n=None):
        shape = (3,) if n is None else (n, 3)
        return cls(integ=np.zeros(shape), prev_meas=np.zeros(shape))


def rate_pid(w_meas, omega_cmd, pid: PidState, gains: PidGains, dt):
    """Per-axis PID on rate error; returns torque demand in [-1,1] per axis.

    Derivative acts on the measurement (not the error) so setpoint steps do
    not kick the D term; the integrator stores ki*e*dt and is clamped.
    """
    e = omega_cmd - w_meas
    integ = np.clip(pid.integ + gains.ki * e * dt,
                    -gains.integral_limit, gains.integral_limit)
    deriv = (w_meas - pid.prev_meas) / dt
    out = np.clip(gains.kp * e + integ - gains.kd * deriv, -1.0, 1.0)
    return out, PidState(integ=integ, prev_meas=np.array(w_meas, dtype=np.float64))


def motor_mix(throttle, torque_setpoint, params):
    """Normalized-thrust mixer: u_i = clamp(throttle + M_i . d, 0, 1) * u_max.

    The sign matrix matches mix_rotor_thrusts, so positive demand on an axis
    produces positive body torque about that axis.
    """
    d = torque_setpoint
    dx = d[..., 0]
    dy = d[..., 1]
    dz = d[..., 2]
    b0 = throttle + dx - dy + dz
    b1 = throttle + dx + dy - dz
    b2 = throttle - dx + dy + dz
    b3 = throttle - dx - dy - dz
    u = np.stack([b0, b1, b2, b3], axis=-1)
    return np.clip(u, 0.0, 1.0) * params.u_max


def autopilot_step(cmd: RateCommand, w_meas, pid: PidState, fault_loss,
                   params, gains: PidGains, dt):
    """rate_pid -> motor_mix -> fault ceiling; returns (u, new PidState)."""
    d, pid2 = rate_pid(w_meas, cmd.omega_cmd, pid, gains, dt)
    u = motor_mix(cmd.throttle, d, params)
    u = apply_fault(u, fault_loss, params)
    return u, pid2


def hover_throttle(mass, params) -> float:
    """Normalized throttle that balances gravity: m*g / (4*u_max), clipped."""
    return float(np.clip(mass * (-params.g[2]) / (4.0 * params.u_max), 0.0, 1.0))
