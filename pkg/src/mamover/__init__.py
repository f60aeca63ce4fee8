"""Moving-mesh engine: Monge-Ampere equidistribution, a physics-trained
neural mesh mover, and a two-branch moving-mesh PDE surrogate."""

__version__ = "0.1.0"
