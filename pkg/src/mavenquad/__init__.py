"""Meta-RL quadrotor waypoint flight at desk scale.

Batched rigid-body simulator, simulated rate-PID autopilot, waypoint POMDP,
minimal autodiff/NN core, predictive context encoder, latent-conditioned PPO
meta-training, and deployment/evaluation tooling behind one CLI.
"""

__version__ = "0.1.0"
