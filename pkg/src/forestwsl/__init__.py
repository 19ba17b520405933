"""Weakly supervised forest mapping from dual-polarisation SAR.

Sparse-label (masked loss) training and iterative pseudo-label refinement for
a small encoder-decoder network, with a synthetic benchmark scene generator.
"""

__version__ = "0.1.0"
