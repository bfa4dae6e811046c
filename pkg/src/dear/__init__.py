"""Deep equilibrium algorithmic reasoning: pointer-predicting graph networks
whose processor state is solved to a fixed point instead of unrolled."""

__version__ = "0.1.0"
