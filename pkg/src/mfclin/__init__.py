"""Mean-field control of large agent teams with linear model approximations:
simulation, learning, grid planning and performance-loss verification."""
from .kernels import BACKEND
from .model import FiniteMFCModel, ModelConstants, estimate_constants, make_model
from .simplex import SimplexGrid, build_grid, tv_distance, wasserstein1_discrete

__all__ = ["BACKEND", "FiniteMFCModel", "ModelConstants", "SimplexGrid", "build_grid", "estimate_constants",
           "make_model", "tv_distance", "wasserstein1_discrete"]
__version__ = "0.1.0"
