"""Variable-duration language-audio pretraining at desk scale."""

__version__ = "0.1.0"
