"""protoeeg: prototype-based interpretable EEG spike classifier."""

__version__ = "0.1.0"
