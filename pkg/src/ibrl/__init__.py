"""Information-bottleneck policy training with beta annealing."""

__version__ = "0.1.0"
