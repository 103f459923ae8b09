"""Multichannel far-field speech frontend toolkit.

Self-attention channel combination with exact hand-derived gradients, an
MVDR+CDR beamformer baseline, image-method room simulation, and a desk-scale
surrogate training/analysis harness.
"""

__version__ = "0.1.0"
