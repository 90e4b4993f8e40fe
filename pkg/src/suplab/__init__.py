"""Laboratory for limits of non-negative supermartingales on grids and trees."""

__version__ = "0.1.0"
