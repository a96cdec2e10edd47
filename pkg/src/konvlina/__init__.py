"""KonvLiNA building blocks: spline-edge KAN layers, Nystrom attention, cKSPP/eNAU neck."""

__version__ = "0.1.0"
