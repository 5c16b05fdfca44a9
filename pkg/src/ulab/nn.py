"""Small MLP classifier and feature extractor with exact gradients."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import DimensionError, InputError, LabelError

_ACTIVATIONS = {"tanh": ad.tanh, "relu": ad.relu}

DEFAULT_HIDDEN = (64, 64)
EXTRACTOR_HIDDEN = 32
FEATURE_DIM = 16


@dataclass(frozen=True)
class ModelParams:
    """Weights ``layers[i] = (W, b)`` with ``W`` of shape (fan_in, fan_out).

    ``activations`` has one tag per hidden layer; the last layer is affine.
    """

    layers: tuple
    activations: tuple

    def __post_init__(self):
        if len(self.activations) != len(self.layers) - 1:
            raise DimensionError("need one activation per hidden layer")
        for a in self.activations:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for (w0, _), (w1, _) in zip(self.layers, self.layers[1:]):
            if ad.value(w0).shape[1] != ad.value(w1).shape[0]:
                raise DimensionError("consecutive layer dimensions do not compose")

    @property
    def dims(self):
        dims = [ad.value(self.layers[0][0]).shape[0]]
        dims += [ad.value(w).shape[1] for w, _ in self.layers]
        return tuple(dims)

    @property
    def n_outputs(self):
        return self.dims[-1]

    def n_params(self):
        return int(np.sum([np.size(ad.value(w)) + np.size(ad.value(b)) for w, b in self.layers]))


@dataclass(frozen=True)
class ExtractorParams(ModelParams):
    """Same layout as :class:`ModelParams`; the output is a feature vector."""


@dataclass
class TrainConfig:
    lr: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise InputError("learning rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise InputError("epochs must be >= 0 and batch_size >= 1")


# -- parameter trees --------------------------------------------------------

def tree_leaves(tree):
    if isinstance(tree, ModelParams):
        return [x for pair in tree.layers for x in pair]
    if isinstance(tree, (list, tuple)):
        return [leaf for t in tree for leaf in tree_leaves(t)]
    if isinstance(tree, dict):
        return [leaf for k in sorted(tree) for leaf in tree_leaves(tree[k])]
    return [tree]


def tree_unflatten(tree, leaves):
    """Rebuild a tree shaped like ``tree`` from a flat leaf list."""
    it = iter(leaves)

    def build(t):
        if isinstance(t, ModelParams):
            layers = tuple((next(it), next(it)) for _ in t.layers)
            return dataclasses.replace(t, layers=layers)
        if isinstance(t, (list, tuple)):
            return type(t)(build(x) for x in t)
        if isinstance(t, dict):
            return {k: build(t[k]) for k in sorted(t)}
        return next(it)

    return build(tree)


def tree_map(fn, *trees):
    leaves = [tree_leaves(t) for t in trees]
    if len({len(ls) for ls in leaves}) != 1:
        raise DimensionError("parameter trees are not congruent")
    out = []
    for group in zip(*leaves):
        shapes = {np.shape(ad.value(x)) for x in group}
        if len(shapes) != 1:
            raise DimensionError(f"leaf shapes differ: {sorted(shapes)}")
        out.append(fn(*group))
    return tree_unflatten(trees[0], out)


# -- construction -----------------------------------------------------------

def init_model(layer_dims, seed, activation="tanh", cls=ModelParams):
    """Fan-in scaled uniform weights ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, zero biases."""
    layer_dims = [int(d) for d in layer_dims]
    if len(layer_dims) < 2:
        raise DimensionError("layer_dims needs at least an input and an output width")
    if any(d < 1 for d in layer_dims):
        raise DimensionError("layer widths must be positive")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(layer_dims, layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        layers.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return cls(tuple(layers), (activation,) * (len(layer_dims) - 2))


def default_dims(n_inputs, n_classes):
    return (n_inputs, *DEFAULT_HIDDEN, n_classes)


def sample_extractor(seed, n_inputs=8, hidden=EXTRACTOR_HIDDEN, features=FEATURE_DIM):
    """A fresh randomly initialised (never trained) feature extractor."""
    return init_model((n_inputs, hidden, features), seed, cls=ExtractorParams)


# -- evaluation -------------------------------------------------------------

def forward(model, batch):
    """Logits of shape (batch, C). Returns a ``Var`` if any input is one."""
    w0 = ad.value(model.layers[0][0])
    bv = ad.value(batch)
    if np.ndim(bv) != 2 or bv.shape[1] != w0.shape[0]:
        raise DimensionError(f"batch of shape {np.shape(bv)} does not fit input width {w0.shape[0]}")
    h = batch
    last = len(model.layers) - 1
    for i, (w, b) in enumerate(model.layers):
        h = ad.add(ad.matmul(h, w), b)
        if i < last:
            h = _ACTIVATIONS[model.activations[i]](h)
    return h


def feature_extract(ext, batch):
    return forward(ext, batch)


def _check_labels(labels, n_classes, n_rows):
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise DimensionError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes})")
    return labels.astype(np.intp)


def cross_entropy(logits, labels):
    """Per-sample ``-log softmax(logits)[label]``."""
    lv = ad.value(logits)
    labels = _check_labels(labels, lv.shape[1], lv.shape[0])
    rows = np.arange(lv.shape[0])
    shifted = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    # clamp tiny negatives from rounding; the exact value is >= 0
    out = np.maximum(lse - shifted[rows, labels], 0.0)
    if not isinstance(logits, Var):
        return out
    probs = np.exp(shifted - lse[:, None])

    def backward(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * g[:, None],)

    return ad._node(out, (logits,), backward, "cross_entropy")


def l1_norm(model):
    total = 0.0
    for leaf in tree_leaves(model):
        total = ad.add(total, ad.sum(ad.absolute(leaf)))
    return total


def predict(model, batch):
    # argmax breaks ties toward the lowest class index
    return np.argmax(forward(model, batch), axis=1)


# -- gradients and training -------------------------------------------------

def value_and_grad(objective, params):
    """Evaluate ``objective(params)`` and its exact gradient w.r.t. ``params``."""
    leaves = tree_leaves(params)
    wrapped = [Var(np.array(ad.value(x), dtype=np.float64, copy=True)) for x in leaves]
    out = objective(tree_unflatten(params, wrapped))
    if not isinstance(out, Var):
        # objective does not depend on the parameters
        return float(out), tree_map(lambda x: np.zeros(np.shape(ad.value(x))), params)
    if out.value.size != 1:
        raise DimensionError("objective must be scalar")
    out.backward()
    grads = [np.zeros_like(w.value) if w.grad is None else w.grad for w in wrapped]
    return float(out.value), tree_unflatten(params, grads)


def grad(objective, params):
    return value_and_grad(objective, params)[1]


def sgd_step(params, gradient, lr):
    return tree_map(lambda p, g: ad.value(p) - lr * ad.value(g), params, gradient)


def mean_ce(model, x, y):
    return ad.mean(cross_entropy(forward(model, x), y))


def iterate_batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def train(model, x, y, cfg, loss_fn=mean_ce):
    """Minibatch SGD. ``loss_fn(model, xb, yb)`` must return a scalar.

    Returns the trained model and the per-epoch mean batch loss.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise InputError("cannot train on an empty split")
    rng = np.random.default_rng(cfg.seed)
    history = []
    for _ in range(cfg.epochs):
        losses = []
        for idx in iterate_batches(len(x), cfg.batch_size, rng):
            xb, yb = x[idx], y[idx]
            loss, g = value_and_grad(lambda m: loss_fn(m, xb, yb), model)
            model = sgd_step(model, g, cfg.lr)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return model, history
