"""Selective-labeling experiment toolkit.

Episode construction, four selection strategies (uniform random, PAM
k-medoids, and two trainable BiLSTM policies), a prototype cosine
predictor scored by AUROC, REINFORCE training with a random-selection
baseline, and the distributional analyses used to compare selectors.
"""

__version__ = "0.1.0"
