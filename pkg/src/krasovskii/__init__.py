"""Krasovskii passivity for sampled discrete-time systems.

Implicit-midpoint discretization, trajectory-wise passivity audits,
Krasovskii-passivity-based stabilizing and output-consensus controllers,
and DC microgrid case studies.
"""

__version__ = "0.1.0"
