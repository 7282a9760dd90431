"""qtlab: post-training quantization analysis and outlier-driven fine-tuning on a toy transformer."""

__version__ = "0.1.0"
