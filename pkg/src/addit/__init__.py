"""Training-free object insertion with weighted extended attention on a toy MM-DiT."""

__version__ = "0.1.0"
