"""Carbon-flux upscaling toolkit: temporal fusion transformer, tree
ensembles, KNN gap filling, site splits, metrics and interpretation."""

__version__ = "0.1.0"
