from .cartpole import CartPoleContext, CartPoleEnv, context_grid, make_context
from .grid import GridEnv, MazeLayout, generate_maze, sample_transfer_split

__all__ = [
    "CartPoleContext", "CartPoleEnv", "context_grid", "make_context",
    "GridEnv", "MazeLayout", "generate_maze", "sample_transfer_split",
]
