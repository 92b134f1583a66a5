"""Charge-aware EV route planning, RL training harness and vehicle-parameter estimation."""
