"""Recognition-parametrised models: exact EM for categorical latents,
variational E-steps for Gaussian latents, RP-LDA and RP-GPFA."""

__version__ = "0.1.0"
