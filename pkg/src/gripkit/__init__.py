"""Graph inverse problems: forward operators, classical and learned solvers."""
from .graph import Graph, build_graph
from .forward import ForwardSpec, Problem, Mask, Diffusion, Transport, EdgeDiffusion
from .numerics import Rng

__all__ = ["Graph", "build_graph", "ForwardSpec", "Problem", "Mask", "Diffusion", "Transport",
           "EdgeDiffusion", "Rng"]
