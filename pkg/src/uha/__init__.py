"""Uncorrected Hamiltonian annealing: differentiable annealed lower bounds on log Z."""
import jax

jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
