"""PV self-consumption battery control: OU factor models, bang-bang policy, HJB solver."""
__version__ = "0.1.0"
