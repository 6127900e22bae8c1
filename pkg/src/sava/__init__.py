"""Sparse adversarial video attacks at desk scale.

Modules: ``autodiff`` (reverse-mode engine), ``ssim`` (windowed SSIM and its
closed-form gradient), ``warp`` (bilinear flow warping), ``models`` (toy video
classifiers), ``attack`` (masked noise + flow optimization), ``selection``
(Bayesian key-frame search), ``metrics``, ``data`` and ``cli``.
"""

__version__ = "0.1.0"
