"""Camera-to-trajectory parking predictor with dual coordinate decoders."""

__version__ = "0.1.0"
