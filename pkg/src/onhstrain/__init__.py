"""Desk-scale optic-nerve-head biomechanics-to-function pipeline.

Synthetic ONH phantoms are deformed by a known displacement program,
tracked with block-matching volume correlation, summarized as effective
strain, attached to BMO-aligned point clouds, classified with a compact
PointNet, and explained with input-gradient saliency maps.
"""

__version__ = "0.1.0"
