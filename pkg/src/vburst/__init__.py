"""Vocal-burst multitask toolkit.

Preprocessing (highpass FIR, MMSE-STSA denoising, energy VAD, speed
perturbation), log-mel and learnable Gabor-STRF frontends, a small
differentiable multitask model (age / emotion / country), challenge
metrics (CCC, UAR, MAE, composite score), and weighted late score fusion.
"""

__version__ = "0.1.0"
