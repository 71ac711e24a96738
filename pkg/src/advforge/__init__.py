"""advforge: target-conditioned adversarial example generation and evaluation."""

__version__ = "0.1.0"
