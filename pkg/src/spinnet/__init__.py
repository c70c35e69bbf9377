"""spinnet: disordered dipolar spin-network simulation toolkit."""

__version__ = "0.1.0"
