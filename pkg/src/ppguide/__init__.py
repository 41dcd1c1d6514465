"""Relevance-guided diffusion policy steering on a 2D navigation toy task.

Stages, each in its own module: ``nn`` (dense nets, gradients, Adam,
container format), ``env`` (toy task and scripted expert), ``policy``
(DDPM action-chunk policy), ``mil`` (gated-attention multiple instance
learning), ``labels`` (SR / FR / IR pseudo-labels), ``guide`` (relevance
classifier), ``guidance`` (guided denoising) and ``harness`` (rollouts,
evaluation, sweeps, pipeline).
"""

__version__ = "0.1.0"
