"""Learned Whittle indices for restless bandits, with a contextual mixture of experts.

Modules: ``envs`` (arm dynamics), ``oracle`` (exact Whittle indices and
indexability certificates), ``nets`` (index networks and gating),
``training`` (mini-batch REINFORCE trainers), ``policy`` (index policies and
evaluation) and ``harness`` (config, experiments, CLI).
"""

__version__ = "0.1.0"
