"""Multi-frame pop-bug detection with hybrid co-finetuning.

A student ViT feeds a two-stage detector trained on the downstream title,
an alpha-weighted detection loss on co-title data, and a beta-weighted
masked latent reconstruction loss against a frozen target encoder.
"""

__version__ = "0.1.0"
