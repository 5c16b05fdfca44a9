"""Small builders shared by several test modules."""

import numpy as np

from ulab.data import gen_gaussian_classes
from ulab.nn import init_model


def tiny_dataset(seed=0, n_classes=3, per_class=20, d=4, separation=6.0):
    return gen_gaussian_classes(n_classes, per_class, d, separation, seed)


def tiny_model(d=4, n_classes=3, seed=0, hidden=(8,)):
    return init_model((d, *hidden, n_classes), seed)


def fixed_logit_model(logits_row):
    """Model that outputs ``logits_row`` for every input (zero weights)."""
    from ulab.nn import ModelParams

    c = len(logits_row)
    return ModelParams(((np.zeros((2, c)), np.asarray(logits_row, dtype=np.float64)),), ())
