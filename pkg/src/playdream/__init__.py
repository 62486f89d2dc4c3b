"""Language-conditioned imitation inside a learned world model, desk scale."""

__version__ = "0.1.0"
