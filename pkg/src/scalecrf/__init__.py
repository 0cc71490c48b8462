"""Linear-chain and Gaussian CRFs with neural potentials, and tools for
controlling the relative scale of unary and pairwise potentials."""

__version__ = "0.1.0"
