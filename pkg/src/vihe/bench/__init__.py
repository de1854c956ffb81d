"""
Synthetic benchmark.

This module contains:
- tasks: Scene samplers, oracle keyposes and success predicates
- world: Kinematic tabletop world
- generate: Sensor simulation and demonstration datasets
- evaluate: Episode rollouts and evaluation reports
"""
