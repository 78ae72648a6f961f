"""Information-bottleneck attribution for video classifiers at desk scale."""

__version__ = "0.1.0"
