"""Infrared/visible image fusion with a multi-scale encoder, axial-attention
fusion blocks and a nested decoder, trained on a small numpy autodiff tape."""

__version__ = "0.1.0"
