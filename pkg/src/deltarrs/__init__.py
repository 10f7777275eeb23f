"""Cooperative Delta + 3-RRS peg-in-hole toolkit.

Kinematics and workspace tools for both mechanisms, an orientation-atlas
design optimizer for the 3-RRS, and a self-contained Rainbow DQN stack
(environment, network, replay, trainer, evaluation) with a single CLI.
"""

__version__ = "0.1.0"

from .kinematics import DeltaParams, RrsConfig, RrsGeometry  # noqa: F401
