"""Blend condensation: one learned weighted average per free cluster.

Blend weights are ``softplus(raw)`` so they stay positive. Weights for a
cluster are fitted so that the features of the blended image match the
mean features of the members, averaged over a pool of random extractors.
All clusters are optimised together; the objective is a sum of
independent per-cluster terms, so each cluster sees exactly its own
gradient and its own step-size backtracking.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .data import Dataset, LabeledSet
from .errors import ConsistencyError, InputError, NumericError
from .nn import sample_extractor

SOFTPLUS_INV_ONE = float(np.log(np.expm1(1.0)))
MAX_HALVINGS = 10


@dataclass
class BlendWeights:
    raw: np.ndarray
    initial_loss: float | None = None
    final_loss: float | None = None

    @property
    def omega(self):
        return ad.softplus(np.asarray(self.raw, dtype=np.float64))

    def __len__(self):
        return len(self.raw)

    @classmethod
    def uniform(cls, n):
        return cls(np.full(n, SOFTPLUS_INV_ONE))


@dataclass
class BlendConfig:
    steps: int = 200
    lr: float = 0.5
    pool_size: int = 4
    resample_pool: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.pool_size < 1 or self.lr <= 0:
            raise InputError("need steps >= 0, pool_size >= 1 and lr > 0")


@dataclass
class Prototype:
    image: np.ndarray
    label: int
    cluster_id: int
    weights: BlendWeights


@dataclass
class CondensedSet:
    prototypes: list = field(default_factory=list)
    seconds: float = 0.0

    def __len__(self):
        return len(self.prototypes)

    def as_labeled(self):
        if not self.prototypes:
            return LabeledSet(np.zeros((0, 0)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
        x = np.stack([p.image.reshape(-1) for p in self.prototypes])
        y = np.array([p.label for p in self.prototypes], dtype=np.int64)
        return LabeledSet(x, y, np.full(len(y), -1, dtype=np.int64))

    def to_dataset(self, n_classes):
        """Prototypes as an all-training :class:`Dataset`, storable with ``save_dataset``."""
        if not self.prototypes:
            raise InputError("no prototypes to store")
        s = self.as_labeled()
        return Dataset(s.x, s.y, n_classes, np.ones(len(s.y), dtype=bool))

    def to_json(self):
        return {
            "seconds": self.seconds,
            "prototypes": [
                {
                    "cluster_id": int(p.cluster_id),
                    "label": int(p.label),
                    "raw_weights": [float(v) for v in p.weights.raw],
                    "initial_loss": p.weights.initial_loss,
                    "final_loss": p.weights.final_loss,
                }
                for p in self.prototypes
            ],
        }


def blend_image(images, weights):
    """``sum_j w_j I_j / sum_j w_j`` for congruent images."""
    imgs = np.asarray(images, dtype=np.float64)
    w = weights.omega if isinstance(weights, BlendWeights) else np.asarray(weights, dtype=np.float64)
    if len(imgs) == 0:
        raise InputError("cannot blend an empty image list")
    if w.shape != (len(imgs),):
        raise InputError(f"{len(w)} weights for {len(imgs)} images")
    flat = imgs.reshape(len(imgs), -1)
    return ((w @ flat) / w.sum()).reshape(imgs.shape[1:])


# -- stacked extractor pool -------------------------------------------------

def _stack_pool(pool):
    """Stack P extractors into arrays with a leading pool axis."""
    acts = {p.activations for p in pool}
    if len(acts) != 1:
        raise InputError("all extractors in a pool must share activations")
    layers = []
    for li in range(len(pool[0].layers)):
        w = np.stack([np.asarray(p.layers[li][0]) for p in pool])
        b = np.stack([np.asarray(p.layers[li][1]) for p in pool])[:, None, :]
        layers.append((w, b))
    return layers, pool[0].activations


def _stacked_features(layers, acts, x):
    """x: (..., n, d) broadcast against weights (P, ..., d, h)."""
    h = x
    for i, (w, b) in enumerate(layers):
        h = ad.add(ad.matmul(h, w), b)
        if i < len(layers) - 1:
            h = ad.tanh(h) if acts[i] == "tanh" else ad.relu(h)
    return h


class _ClusterBatch:
    """Members of many clusters stacked contiguously, cluster after cluster."""

    def __init__(self, clusters):
        flat = [np.asarray(c, dtype=np.float64).reshape(len(c), -1) for c in clusters]
        if any(len(c) == 0 for c in flat):
            raise InputError("clusters must be non-empty")
        self.sizes = np.array([len(c) for c in flat])
        self.x = np.concatenate(flat)
        self.seg = np.repeat(np.arange(len(flat)), self.sizes)
        self.starts = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])
        # feature-major copy: segment sums along the contiguous axis are cheaper
        self.xT = np.ascontiguousarray(self.x.T)

    def segment_mean(self, x):
        return np.add.reduceat(x, self.starts, axis=-2) / self.sizes[:, None]

    def blends(self, raw):
        """Per-cluster blended rows; one fused node with a closed-form backward."""
        rv = ad.value(raw)
        w = ad.softplus(rv)
        den = np.add.reduceat(w, self.starts)
        out = np.add.reduceat(w[:, None] * self.x, self.starts, axis=0) / den[:, None]
        if not ad.is_var(raw):
            return out

        def backward(g):
            # d out_i / d w_j = (x_j - out_i) / den_i for j in cluster i
            diff = self.x - np.repeat(out, self.sizes, axis=0)
            gw = np.einsum("md,md->m", diff, np.repeat(g, self.sizes, axis=0))
            return (gw / np.repeat(den, self.sizes) * ad.sigmoid(rv),)

        return ad._node(out, (raw,), backward, "blend")

    def mean_features(self, layers, acts):
        # (P, M, F) member features, averaged per cluster -> (P, n_c, F)
        return self.segment_mean(_stacked_features(layers, acts, self.x))

    def _fused_forward(self, raw, layers, acts, targets):
        w = ad._softplus(raw)
        den = np.add.reduceat(w, self.starts)
        blend = (np.add.reduceat(w * self.xT, self.starts, axis=1) / den).T
        hs, h = [], blend
        for i, (wt, b) in enumerate(layers):
            h = h @ wt + b
            if i < len(layers) - 1:
                h = np.tanh(h) if acts[i] == "tanh" else np.maximum(h, 0.0)
            hs.append(h)
        diff = h - targets
        losses = np.einsum("pcf,pcf->c", diff, diff) / diff.shape[0]
        return losses, (w, den, blend, hs, diff)

    def fused_losses(self, raw, layers, acts, targets):
        losses, cache = self._fused_forward(raw, layers, acts, targets)
        # the accepted trial point is where the next gradient is taken
        self._memo = (raw, losses, cache)
        return losses

    def fused_value_and_grad(self, raw, layers, acts, targets):
        """Per-cluster losses and d(sum of losses)/d(raw) without building a graph.

        Hot loop of the optimiser; tests check it against the autodiff route.
        """
        memo = getattr(self, "_memo", None)
        if memo is not None and memo[0] is raw:
            losses, (w, den, blend, hs, diff) = memo[1], memo[2]
        else:
            losses, (w, den, blend, hs, diff) = self._fused_forward(raw, layers, acts, targets)
        g = 2.0 * diff / diff.shape[0]
        for i in range(len(layers) - 1, -1, -1):
            if i < len(layers) - 1:
                a = hs[i]
                g = g * (1.0 - a * a) if acts[i] == "tanh" else g * (a > 0)
            g = g @ np.swapaxes(layers[i][0], -1, -2)
        g_blend = g.sum(axis=0) if g.ndim == 3 else g
        # d/dw_j of blend_i . g_i = (x_j . g_i - blend_i . g_i) / den_i
        per_row = np.einsum("dm,dm->m", self.xT, np.repeat(g_blend.T, self.sizes, axis=1))
        centre = np.einsum("cd,cd->c", blend, g_blend)
        gw = (per_row - np.repeat(centre, self.sizes)) / np.repeat(den, self.sizes)
        # softplus' = sigmoid = 1 - exp(-softplus)
        return losses, gw * -np.expm1(-w)

    def losses(self, raw, layers, acts, targets):
        b = self.blends(raw)
        diff = ad.sub(_stacked_features(layers, acts, b), targets)
        per_pool = ad.sum(ad.square(diff), axis=2)           # (P, n_c)
        return ad.mean(per_pool, axis=0)                      # (n_c,)


def blend_loss(weights, cluster_images, extractor_pool):
    """Mean over the pool of ``|| mean_j psi(I_j) - psi(blend) ||^2``."""
    if len(extractor_pool) == 0:
        raise InputError("extractor pool must be non-empty")
    raw = weights.raw if isinstance(weights, BlendWeights) else weights
    batch = _ClusterBatch([cluster_images])
    if np.shape(ad.value(raw)) != (len(batch.x),):
        raise InputError("one raw weight per cluster member is required")
    layers, acts = _stack_pool(extractor_pool)
    targets = batch.mean_features(layers, acts)
    loss = batch.losses(raw, layers, acts, targets)
    return ad.getitem(loss, 0) if isinstance(loss, Var) else float(loss[0])


def extractor_pool(seed, size, n_inputs):
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0x706F6F6C])
    return [sample_extractor(int(s), n_inputs=n_inputs) for s in seq.generate_state(size)]


def _descend(batch, raw, loss_fn, value_and_grad_fn, lr0, steps):
    """Gradient descent with per-cluster step halving on any loss increase.

    ``loss_fn(raw, step)`` returns per-cluster losses and
    ``value_and_grad_fn(raw, step)`` also the gradient of their sum. A cluster whose loss
    still rises after MAX_HALVINGS halvings keeps its previous weights for
    that step. Halved step sizes persist.
    """
    n_c = len(batch.sizes)
    lr = np.full(n_c, float(lr0))
    lr_rows = np.repeat(lr, batch.sizes)
    raw = raw.copy()
    for step in range(steps):
        current, g = value_and_grad_fn(raw, step)
        candidate = raw - lr_rows * g
        trial = loss_fn(candidate, step)
        if not np.isfinite(trial).all():
            raise NumericError("blend_loss")
        todo = trial > current
        if not todo.any():
            raw = candidate
            continue
        for _ in range(MAX_HALVINGS):
            lr[todo] *= 0.5
            lr_rows = np.repeat(lr, batch.sizes)
            rows = todo[batch.seg]
            candidate[rows] = raw[rows] - lr_rows[rows] * g[rows]
            trial = loss_fn(candidate, step)
            if not np.isfinite(trial).all():
                raise NumericError("blend_loss")
            todo &= trial > current
            if not todo.any():
                break
        # clusters that never improved keep their weights for this step
        raw = np.where(todo[batch.seg], raw, candidate)
    return raw


def _autodiff_value_and_grad(loss_fn):
    def value_and_grad_fn(raw, step):
        var = Var(raw)
        per_cluster = loss_fn(var, step)
        ad.sum(per_cluster).backward()
        return per_cluster.value, var.grad

    return value_and_grad_fn


def _optimize_clusters(clusters, cfg, cluster_ids=None, pool=None):
    batch = _ClusterBatch(clusters)
    n_c = len(batch.sizes)
    d = batch.x.shape[1]
    raw0 = np.full(len(batch.x), SOFTPLUS_INV_ONE)
    if cluster_ids is None:
        cluster_ids = np.arange(n_c)
    if pool is None:
        pool = extractor_pool(cfg.seed, cfg.pool_size, d)
    layers, acts = _stack_pool(pool)
    targets = batch.mean_features(layers, acts)

    def fixed_loss(raw, step=None):
        return batch.losses(raw, layers, acts, targets)

    initial = fixed_loss(raw0)
    if not cfg.resample_pool:
        def fixed_value_and_grad(raw, step):
            return batch.fused_value_and_grad(raw, layers, acts, targets)

        def fused_loss(raw, step):
            return batch.fused_losses(raw, layers, acts, targets)

        raw = _descend(batch, raw0, fused_loss, fixed_value_and_grad, cfg.lr, cfg.steps)
    else:
        streams = [np.random.SeedSequence([int(cfg.seed) & 0xFFFFFFFF, int(i)]) for i in cluster_ids]
        step_seeds = np.stack([s.generate_state(max(cfg.steps, 1)) for s in streams])  # (n_c, steps)
        cache = {}

        def stepped_loss(raw, step):
            if step not in cache:
                cache.clear()
                exts = [sample_extractor(int(s), n_inputs=d) for s in step_seeds[:, step]]
                lay, ac = _stack_pool(exts)
                cache[step] = (lay, ac, _percluster_targets(batch, lay, ac))
            lay, ac, tgt = cache[step]
            return _percluster_loss(batch, raw, lay, ac, tgt)

        raw = _descend(batch, raw0, stepped_loss, _autodiff_value_and_grad(stepped_loss), cfg.lr, cfg.steps)
    final = fixed_loss(raw)
    if cfg.resample_pool:
        # stochastic steps carry no descent guarantee on the fixed pool
        worse = final > initial
        raw = np.where(worse[batch.seg], raw0, raw)
        final = np.where(worse, initial, final)
    out = []
    for i in range(n_c):
        m = batch.seg == i
        out.append(BlendWeights(raw[m], float(initial[i]), float(final[i])))
    return out


def _percluster_targets(batch, layers, acts):
    """Mean member features when cluster i has its own extractor (stacked on axis 0)."""
    member_layers = [(w[batch.seg], b[batch.seg]) for w, b in layers]
    feats = _stacked_features(member_layers, acts, batch.x[:, None, :])[:, 0, :]
    return batch.segment_mean(feats)


def _percluster_loss(batch, raw, layers, acts, targets):
    n_c = len(batch.sizes)
    b = ad.reshape(batch.blends(raw), (n_c, 1, -1))
    fb = ad.reshape(_stacked_features(layers, acts, b), (n_c, -1))
    return ad.sum(ad.square(ad.sub(fb, targets)), axis=1)


def optimize_blend(cluster_images, cfg, pool=None):
    """Fit blend weights for one cluster, starting from the uniform blend."""
    return _optimize_clusters([cluster_images], cfg, pool=pool)[0]


def condense_groups(groups, samples, cfg):
    """One blended prototype per ``(cluster_id, label, member_ids)`` group.

    Empty groups are skipped. The returned set is timed end to end.
    """
    samples = np.asarray(samples, dtype=np.float64)
    start = time.perf_counter()
    groups = [(int(i), int(c), np.asarray(m, dtype=np.int64)) for i, c, m in groups if len(m)]
    if not groups:
        return CondensedSet([], time.perf_counter() - start)
    clusters = [samples[m] for _, _, m in groups]
    weights = _optimize_clusters(clusters, cfg, cluster_ids=[i for i, _, _ in groups])
    protos = [Prototype(blend_image(imgs, w), c, i, w)
              for (i, c, _), imgs, w in zip(groups, clusters, weights)]
    return CondensedSet(protos, time.perf_counter() - start)


def condense_free(partition, split, samples, cfg):
    """One blended prototype per free cluster; residual and forget images are never used."""
    ids = [int(i) for i in split.free_cluster_ids]
    if set(ids) & set(int(i) for i in split.forget_cluster_ids):
        raise ConsistencyError("a cluster is marked both free and forget-touching")
    groups = [(i, partition.clusters[i].class_label, partition.clusters[i].member_ids) for i in ids]
    return condense_groups(groups, samples, cfg)


def build_reduced_retain(condensed, residual_ids, samples, labels, forget_ids=()):
    residual_ids = np.asarray(residual_ids, dtype=np.int64)
    clash = np.intersect1d(residual_ids, np.asarray(list(forget_ids), dtype=np.int64))
    if len(clash):
        raise ConsistencyError(f"residual ids overlap the forget set: {clash[:10].tolist()}")
    residual = LabeledSet(np.asarray(samples)[residual_ids], np.asarray(labels)[residual_ids], residual_ids)
    if len(condensed) == 0:
        return residual
    return LabeledSet.concat([condensed.as_labeled(), residual])
