"""Confounder-suppressing embeddings of tabular biological data.

Three embedding recipes are provided (PCA only, HCP normalization followed by
PCA, and a triplet-network metric learned on PCA scores), together with a
cross-validated evaluation harness and a synthetic confounded-data generator.
"""

__version__ = "0.1.0"
