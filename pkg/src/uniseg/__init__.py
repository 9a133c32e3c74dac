"""Joint MRI/CT tumor segmentation at desk scale.

A self-contained pipeline: numpy-backed autodiff tensors, an
attention-gated encoder-decoder segmentation network, Tversky-family
losses with per-modality weighting, AdamW + one-cycle optimization, a
deterministic two-domain phantom dataset, balanced dual-domain training,
and a full metric suite, all driven by the ``uniseg`` CLI.
"""

__version__ = "0.1.0"
