"""Single-organ CT segmentation backbones and their fusion into multi-organ ensembles."""

__version__ = "0.1.0"
