"""Speaker-verification toolkit: log-mel front end, ResNet/RepVGG extractors, CM-Softmax training, cosine scoring and NIST-style metrics."""

__version__ = "0.1.0"
