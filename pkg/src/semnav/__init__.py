"""Object-goal navigation on procedural 2D semantic worlds.

The stack: a raycasting world simulator, a semantic map builder, geodesic
cost fields (fast marching), a sampling-based MPC in continuous action
space, pluggable cost-map predictors, dataset generation, and a navigation
evaluation harness.
"""

__version__ = "0.1.0"
