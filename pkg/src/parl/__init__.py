"""Desk-scale policy-agnostic actor-critic RL toolkit.

Policy improvement happens in action space: sample candidates from the base
policy, re-rank them under a learned Q-function, push each uphill with
accepted gradient steps, then distill the optimized actions back into the
policy with a plain supervised loss. Works unchanged for tanh-Gaussian,
diffusion, and autoregressive categorical policies, on top of Cal-QL, IQL,
or a hybrid online critic.
"""
import os

# Networks here are tiny; BLAS thread fan-out costs more than it saves.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

__version__ = "0.1.0"
