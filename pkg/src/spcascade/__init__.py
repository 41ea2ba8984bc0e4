"""Structured prediction cascades: max-marginal filtering over sparse label lattices."""
from spcascade.inference import map_decode, max_marginals, sum_product_marginals
from spcascade.lattice import SparseLattice, StateHierarchy, expand, full_lattice, refine
from spcascade.model import Example, FeatureTemplate, LinearModel
from spcascade.threshold import ThresholdParams, filter_lattice, mean_max_threshold

__version__ = "0.1.0"
