"""Desk-scale visual planner with a self-adapting improvement loop.

A small conditional video-diffusion model plans pushes in a 2-D color world,
an inverse dynamics model turns plans into actions, and the planner improves
itself by finetuning on its own rollouts while composed with a frozen,
broadly trained denoiser.
"""

__version__ = "0.1.0"
