"""Distribution-matching training for sequence-to-sequence models.

Train a seq2seq model against sampled neighborhoods of the data: two
augmenters (one per side of each example pair) propose nearby sources
and targets, and the model is fit by minimizing the KL divergence
between the transformed source distribution and the augmented target
distribution, with entropy regularization and similarity rewards keeping
the augmenters honest. Every estimator is checked against enumeration
and quadrature oracles at desk scale.
"""

__version__ = "0.1.0"
