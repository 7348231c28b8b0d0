"""Bayesian causal discovery from interventional data.

Total-effect estimates from instrumented interventions are summarized by a
matrix-normal likelihood over the direct-effect graph, combined with an
empirical-Bayes spike-and-slab horseshoe prior and sampled with NUTS.
"""

__version__ = "0.1.0"
