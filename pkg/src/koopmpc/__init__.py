"""Koopman surrogate models for CSTR control: system identification,
differentiable convex-MPC policies, and end-to-end PPO refinement."""

__version__ = "0.1.0"
