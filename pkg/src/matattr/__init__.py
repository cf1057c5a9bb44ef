"""Material attribute discovery toolkit.

Pipeline: pairwise similarity votes -> perceptual distance matrix ->
category-attribute embedding -> patch-level attribute predictors ->
material classification, per-pixel maps, trait linkage, one-shot
recognition.
"""

__version__ = "0.1.0"
