"""Desk-scale lane-topology pipeline.

Multi-view feature extraction, BEV encoding (temporal self-attention +
spatial cross-attention), deformable-attention lane decoding, Hungarian
set-matching losses, and Chamfer-based mAP evaluation, all on a minimal
tape-autodiff tensor core.
"""

__version__ = "0.1.0"
