"""mvlov: interacting-particle and Fokker-Planck laboratory for mean-field SDEs
with singular pairwise drifts."""

__version__ = "0.1.0"
