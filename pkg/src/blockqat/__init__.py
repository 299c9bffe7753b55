"""blockqat: two-phase quantization-aware training for small decoder-only
transformers, with low-bit weight packing and dequantizing inference kernels."""

__version__ = "0.1.0"
