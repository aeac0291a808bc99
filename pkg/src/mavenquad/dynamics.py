"""Rigid-body quadrotor dynamics with rotor mixing and fault injection.

All kernels are written as explicit component arithmetic on numpy arrays with
arbitrary leading batch dimensions, so the batched path executes exactly the
same floating-point operations as the scalar path (bit-identical results).

Conventions: world frame z-up, body frame z along thrust; R maps body to
world; X-configuration rotor layout with lever arm l/sqrt(2) per axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


def _default_inertia():
    return np.diag([2.5e-3, 2.5e-3, 4.3e-3])


@dataclass
class QuadrotorParams:
    """Physical parameters; J may be any symmetric positive-definite matrix."""
    m: float = 0.33                     # kg
    J: np.ndarray = field(default_factory=_default_inertia)  # kg m^2
    l: float = 0.1                      # m, arm length
    c_tau: float = 0.01                 # m, yaw-drag coefficient
    u_max: float = 2.8326375            # N, per-rotor thrust ceiling
    g: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))

    def __post_init__(self):
        self.J = np.asarray(self.J, dtype=np.float64)
        self.g = np.asarray(self.g, dtype=np.float64)
        self.J_inv = np.linalg.inv(self.J)

    @classmethod
    def from_config(cls, qc, mass=None):
        return cls(
            m=qc.mass if mass is None else mass,
            J=np.diag(qc.inertia),
            l=qc.arm_length,
            c_tau=qc.c_tau,
            u_max=qc.u_max,
            g=np.array([0.0, 0.0, -qc.gravity]),
        )


@dataclass
class QuadrotorState:
    p: np.ndarray       # (3,) m
    v: np.ndarray       # (3,) m/s
    R: np.ndarray       # (3,3) body->world
    w: np.ndarray       # (3,) rad/s body rates

    @classmethod
    def at_rest(cls, p):
        return cls(p=np.asarray(p, dtype=np.float64).copy(),
                   v=np.zeros(3), R=np.eye(3), w=np.zeros(3))


@dataclass
class FaultSpec:
    """Per-rotor fractional loss of the thrust ceiling, each in [0, 1]."""
    loss: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        self.loss = np.asarray(self.loss, dtype=np.float64)


class Wrench(NamedTuple):
    f_z: float          # N, collective body-z thrust (f_x = f_y = 0 always)
    tau: np.ndarray     # (3,) N m body torque


def mix_rotor_thrusts(u, params: QuadrotorParams) -> Wrench:
    """Map per-rotor thrusts (4-vector, N) to collective thrust and torque.

    Supports leading batch dimensions on u; returns batched f_z and tau.
    """
    u0 = u[..., 0]
    u1 = u[..., 1]
    u2 = u[..., 2]
    u3 = u[..., 3]
    s = params.l / np.sqrt(2.0)
    f_z = u0 + u1 + u2 + u3
    tau_x = s * (u0 + u1 - u2 - u3)
    tau_y = s * (-u0 + u1 + u2 - u3)
    tau_z = params.c_tau * (u0 - u1 + u2 - u3)
    return Wrench(f_z, np.stack([tau_x, tau_y, tau_z], axis=-1))


def apply_fault(u_cmd, loss, params: QuadrotorParams):
    """Clamp commanded rotor thrusts to the fault-reduced ceiling.

    loss is a 4-vector (or batch) of fractional ceiling reductions; the
    effective ceiling is (1 - loss_i) * u_max. Never raises any thrust.
    """
    ceiling = (1.0 - loss) * params.u_max
    return np.maximum(np.minimum(u_cmd, ceiling), 0.0)


def _integrate(p, v, R, w, f_z, tau, m, J, J_inv, g, dt):
    """One semi-implicit step; component-unrolled, batch-shape generic.

    p,v,w: (...,3); R: (...,3,3); f_z: (...); tau: (...,3); m broadcasts to
    (...). J/J_inv are shared (3,3). Velocity and body rates update first;
    position uses the velocity midpoint (exact for constant acceleration)
    and attitude uses the exponential map of the new rates.
    """
    px, py, pz = p[..., 0], p[..., 1], p[..., 2]
    vx, vy, vz = v[..., 0], v[..., 1], v[..., 2]
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    tau_x, tau_y, tau_z = tau[..., 0], tau[..., 1], tau[..., 2]
    r00, r01, r02 = R[..., 0, 0], R[..., 0, 1], R[..., 0, 2]
    r10, r11, r12 = R[..., 1, 0], R[..., 1, 1], R[..., 1, 2]
    r20, r21, r22 = R[..., 2, 0], R[..., 2, 1], R[..., 2, 2]

    # translational: acceleration = R @ (0,0,f_z)/m + g
    am = f_z / m
    vx2 = vx + dt * (am * r02 + g[0])
    vy2 = vy + dt * (am * r12 + g[1])
    vz2 = vz + dt * (am * r22 + g[2])
    half_dt = 0.5 * dt
    px2 = px + half_dt * (vx + vx2)
    py2 = py + half_dt * (vy + vy2)
    pz2 = pz + half_dt * (vz + vz2)

    # rotational: w' = w + dt * J^-1 (tau - w x (J w))
    jwx = J[0, 0] * wx + J[0, 1] * wy + J[0, 2] * wz
    jwy = J[1, 0] * wx + J[1, 1] * wy + J[1, 2] * wz
    jwz = J[2, 0] * wx + J[2, 1] * wy + J[2, 2] * wz
    cx = wy * jwz - wz * jwy
    cy = wz * jwx - wx * jwz
    cz = wx * jwy - wy * jwx
    tx = tau_x - cx
    ty = tau_y - cy
    tz = tau_z - cz
    wx2 = wx + dt * (J_inv[0, 0] * tx + J_inv[0, 1] * ty + J_inv[0, 2] * tz)
    wy2 = wy + dt * (J_inv[1, 0] * tx + J_inv[1, 1] * ty + J_inv[1, 2] * tz)
    wz2 = wz + dt * (J_inv[2, 0] * tx + J_inv[2, 1] * ty + J_inv[2, 2] * tz)

    # attitude: R' = R @ expm(hat(w' * dt)) via Rodrigues
    rx = wx2 * dt
    ry = wy2 * dt
    rz = wz2 * dt
    t2 = rx * rx + ry * ry + rz * rz
    pos = t2 > 0.0
    safe = np.where(pos, t2, 1.0)
    th = np.sqrt(safe)
    a = np.where(pos, np.sin(th) / th, 1.0)
    b = np.where(pos, (1.0 - np.cos(th)) / safe, 0.5)
    e00 = 1.0 - b * (ry * ry + rz * rz)
    e01 = b * rx * ry - a * rz
    e02 = b * rx * rz + a * ry
    e10 = b * rx * ry + a * rz
    e11 = 1.0 - b * (rx * rx + rz * rz)
    e12 = b * ry * rz - a * rx
    e20 = b * rx * rz - a * ry
    e21 = b * ry * rz + a * rx
    e22 = 1.0 - b * (rx * rx + ry * ry)

    n00 = r00 * e00 + r01 * e10 + r02 * e20
    n01 = r00 * e01 + r01 * e11 + r02 * e21
    n02 = r00 * e02 + r01 * e12 + r02 * e22
    n10 = r10 * e00 + r11 * e10 + r12 * e20
    n11 = r10 * e01 + r11 * e11 + r12 * e21
    n12 = r10 * e02 + r11 * e12 + r12 * e22
    n20 = r20 * e00 + r21 * e10 + r22 * e20
    n21 = r20 * e01 + r21 * e11 + r22 * e21
    n22 = r20 * e02 + r21 * e12 + r22 * e22

    p2 = np.stack([px2, py2, pz2], axis=-1)
    v2 = np.stack([vx2, vy2, vz2], axis=-1)
    w2 = np.stack([wx2, wy2, wz2], axis=-1)
    R2 = np.stack([
        np.stack([n00, n01, n02], axis=-1),
        np.stack([n10, n11, n12], axis=-1),
        np.stack([n20, n21, n22], axis=-1),
    ], axis=-2)
    return p2, v2, R2, w2


def step_dynamics(state: QuadrotorState, wrench: Wrench,
                  params: QuadrotorParams, dt: float) -> QuadrotorState:
    """Integrate one step. Caller should check state_is_finite afterwards."""
    p2, v2, R2, w2 = _integrate(
        state.p, state.v, state.R, state.w,
        np.float64(wrench.f_z), np.asarray(wrench.tau, dtype=np.float64),
        params.m, params.J, params.J_inv, params.g, dt)
    return QuadrotorState(p=p2, v=v2, R=R2, w=w2)


def state_is_finite(state: QuadrotorState) -> bool:
    return bool(np.isfinite(state.p).all() and np.isfinite(state.v).all()
                and np.isfinite(state.R).all() and np.isfinite(state.w).all())


@dataclass
class QuadBatch:
    """Structure-of-arrays state for n environments."""
    p: np.ndarray       # (n,3)
    v: np.ndarray       # (n,3)
    R: np.ndarray       # (n,3,3)
    w: np.ndarray       # (n,3)

    @classmethod
    def at_rest(cls, n, p0):
        return cls(p=np.tile(np.asarray(p0, dtype=np.float64), (n, 1)),
                   v=np.zeros((n, 3)),
                   R=np.tile(np.eye(3), (n, 1, 1)),
                   w=np.zeros((n, 3)))


def step_batch(batch: QuadBatch, f_z, tau, m, params: QuadrotorParams,
               dt: float) -> QuadBatch:
    """Vectorized step_dynamics; element i is bit-identical to the scalar path.

    m is per-environment mass, (n,) or scalar; geometry (J, g) comes from
    params and is shared across the batch.
    """
    n = batch.p.shape[0]
    f_z = np.asarray(f_z, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if f_z.shape != (n,) or tau.shape != (n, 3):
        raise ValueError(f"wrench batch shape mismatch: {f_z.shape}, {tau.shape}")
    p2, v2, R2, w2 = _integrate(batch.p, batch.v, batch.R, batch.w,
                                f_z, tau, m, params.J, params.J_inv,
                                params.g, dt)
    return QuadBatch(p=p2, v=v2, R=R2, w=w2)


def finite_mask(batch: QuadBatch) -> np.ndarray:
    """(n,) bool, True where all state components are finite."""
    return (np.isfinite(batch.p).all(axis=1)
            & np.isfinite(batch.v).all(axis=1)
            & np.isfinite(batch.R).all(axis=(1, 2))
            & np.isfinite(batch.w).all(axis=1))
