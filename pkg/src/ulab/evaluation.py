"""Accuracy, the threshold membership-inference score and report rows.

The MIA score here is a best-threshold attack on Gaussianized losses, not
a shadow-model attack; reports label it ``threshold-MIA`` accordingly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InputError
from .gaussianize import DEFAULT_K, gaussianize_losses
from .nn import cross_entropy, forward, predict

MIA_LABEL = "threshold-MIA"
CSV_COLUMNS = ("method", "retain_source", "round", "mia", "retain_acc", "forget_acc",
               "test_acc", "preprocess_s", "unlearn_s", "seed")


def _nonempty(split, what):
    if split is None or len(split) == 0:
        raise InputError(f"{what} split is empty")


def accuracy(model, split):
    """Percent of rows whose argmax prediction equals the label."""
    _nonempty(split, "evaluation")
    return 100.0 * float(np.mean(predict(model, split.x) == split.y))


def per_sample_losses(model, split):
    return np.log1p(cross_entropy(forward(model, split.x), split.y))


def best_threshold_score(z_members, z_nonmembers):
    """Best balanced accuracy (percent) over every threshold and both orientations.

    Thresholds only matter between distinct pooled values, so the sweep
    visits each boundary of the sorted pool once.
    """
    zm = np.asarray(z_members, dtype=np.float64)
    zn = np.asarray(z_nonmembers, dtype=np.float64)
    if len(zm) == 0 or len(zn) == 0:
        raise InputError("both member and non-member scores are required")
    pooled = np.concatenate([zm, zn])
    is_member = np.concatenate([np.ones(len(zm)), np.zeros(len(zn))])
    order = np.argsort(pooled, kind="stable")
    sorted_z = pooled[order]
    # cut after position i only where the next value differs (or at the end)
    last_of_run = np.append(sorted_z[1:] != sorted_z[:-1], True)
    tpr = np.concatenate([[0.0], np.cumsum(is_member[order])[last_of_run] / len(zm)])
    fpr = np.concatenate([[0.0], np.cumsum(1.0 - is_member[order])[last_of_run] / len(zn)])
    # predict "member" for z <= threshold; the flipped rule scores 1 - b
    balanced = 0.5 * (tpr + 1.0 - fpr)
    return 100.0 * float(np.max(np.maximum(balanced, 1.0 - balanced)))


def mia_score(model, forget, t, K=DEFAULT_K):
    """Membership attack accuracy distinguishing F (members) from T."""
    _nonempty(forget, "forget")
    _nonempty(t, "T")
    losses = np.concatenate([per_sample_losses(model, forget), per_sample_losses(model, t)])
    z = gaussianize_losses(losses, K)
    return best_threshold_score(z[:len(forget)], z[len(forget):])


@dataclass
class MetricsReport:
    mia_score: float
    retain_acc: float
    forget_acc: float
    test_acc: float
    unlearning_seconds: float = 0.0
    preprocessing_seconds: float = 0.0
    method: str = ""
    retain_source: str = "full"
    round: int = 0
    seed: int = 0
    mia_kind: str = MIA_LABEL
    extra: dict = field(default_factory=dict)

    def as_row(self, timings=True):
        """One CSV row in :data:`CSV_COLUMNS` order.

        With ``timings=False`` the wall-clock cells are left blank so rows
        from repeated runs compare byte for byte.
        """
        def t(v):
            return repr(float(v)) if timings else ""

        return [self.method, self.retain_source, str(self.round), repr(self.mia_score),
                repr(self.retain_acc), repr(self.forget_acc), repr(self.test_acc),
                t(self.preprocessing_seconds), t(self.unlearning_seconds), str(self.seed)]

    def to_json(self):
        return asdict(self)


def evaluate(model, splits, K=DEFAULT_K):
    """The four model-dependent metrics as a dict of percents."""
    return {
        "mia_score": mia_score(model, splits.forget, splits.t, K),
        "retain_acc": accuracy(model, splits.retain),
        "forget_acc": accuracy(model, splits.forget),
        "test_acc": accuracy(model, splits.test_eval),
    }


def report(run, splits, K=DEFAULT_K, **labels):
    """Assemble a :class:`MetricsReport` for a finished unlearning run.

    ``labels`` fill the bookkeeping fields (method, retain_source, round,
    seed); method and retain_source default to the run's own.
    """
    labels.setdefault("method", getattr(run, "method", ""))
    labels.setdefault("retain_source", getattr(run, "retain_source", "full"))
    return MetricsReport(**evaluate(run.model, splits, K),
                         unlearning_seconds=run.unlearning_seconds,
                         preprocessing_seconds=run.preprocessing_seconds, **labels)
