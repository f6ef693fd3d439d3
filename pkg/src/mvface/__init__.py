"""Multi-view face recognition toolkit.

SURF-128 features, MLP / LVQ / RBF combined classifiers with four fusion
rules, noise robustness evaluation and a synthetic multi-view face
generator.
"""

__version__ = "0.1.0"
