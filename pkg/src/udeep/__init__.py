"""Underwater crayfish/plastic monitoring pipeline: GMM segmentation, pluggable detection,
detection metrics, dataset augmentation and inference-current telemetry."""

__version__ = "0.1.0"
