"""Product-quantized autoencoder (PQ-VAE) training and lookup-table retrieval."""

__version__ = "0.1.0"
