"""Self-supervised auto-encoder pretraining and four-class histology patch grading."""

__version__ = "0.1.0"
