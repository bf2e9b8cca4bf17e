"""Desk-scale toolkit for label-free super-resolution of phase-modulated micrographs.

Subpackages and modules:

* :mod:`phasenano.targets` — synthetic bar targets with exact ground truth
* :mod:`phasenano.optics` — coherent 4f rendering (brightfield / PCM / DIC)
* :mod:`phasenano.dataset` — registration, tiling and dataset persistence
* :mod:`phasenano.nn` — minimal differentiable tensor core and the U-Net,
  O-Net and theta-net cascade builders, training and inference
* :mod:`phasenano.metrics` — line profiles, FWHM, verdicts, SNR, PSNR/SSIM
  and the model-comparison harness
* :mod:`phasenano.cli` — the ``phasenano`` command-line orchestrator
"""

__version__ = "0.1.0"
