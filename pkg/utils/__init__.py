"""Numerical core: autodiff, diffusion, models, losses, replay, metrics and the continual runner."""
