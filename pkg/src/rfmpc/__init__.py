"""Rotation-matrix MPC for single-rigid-body quadruped models.

Modules: ``so3`` (Lie group utilities), ``dynamics`` (plant), ``linearize``
(variation-based affine models), ``mpc`` (QP assembly and controller),
``qp`` (interior-point solver), ``gait`` / ``twist_jump`` / ``backflip``
(references), ``ea_baseline`` (Euler-angle MPC) and ``sim`` / ``cli``
(closed-loop experiments).
"""

__version__ = "0.1.0"
