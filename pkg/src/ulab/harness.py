"""Experiment orchestration: configs, forget specs, retain sources and run records.

A config is a flat mapping of dotted keys (``unlearn.method: a_cf``); see
:func:`default_flat_config` for the full schema with defaults.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import platform
import sys
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np
import yaml

from .blend import BlendConfig, build_reduced_retain, condense_free, condense_groups
from .data import build_splits, gen_gaussian_classes, load_dataset
from .errors import InputError
from .evaluation import CSV_COLUMNS, MetricsReport, accuracy, report
from .nn import DEFAULT_HIDDEN, ModelParams, TrainConfig, init_model, sample_extractor, train
from .partition import partition_dataset, sample_F
from .unlearn import RETAIN_SOURCES, UnlearnConfig, run_rounds

FORGET_MODES = ("random_class", "uniform_fraction")
ARM_NUMBERS = {s: i + 1 for i, s in enumerate(RETAIN_SOURCES)}


# -- forget specs and splits ------------------------------------------------

@dataclass
class ForgetSpec:
    mode: str = "random_class"
    class_id: int = 0
    fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in FORGET_MODES:
            raise InputError(f"unknown forget mode {self.mode!r}")
        if self.mode == "uniform_fraction" and not 0 < self.fraction < 1:
            raise InputError("forget fraction must lie in (0, 1)")
        if self.mode == "random_class" and self.class_id < 0:
            raise InputError("class_id must be nonnegative")


def forget_ids_for(dataset, spec, pool_ids=None, base_count=None):
    """Forget ids drawn from ``pool_ids`` (default: all training ids).

    A uniform fraction is taken of ``base_count`` when given, else of the
    pool size.
    """
    pool = dataset.train_ids if pool_ids is None else np.asarray(pool_ids, dtype=np.int64)
    if spec.mode == "random_class":
        if spec.class_id >= dataset.n_classes:
            raise InputError(f"class_id {spec.class_id} outside [0, {dataset.n_classes})")
        ids = pool[dataset.labels[pool] == spec.class_id]
    else:
        n = int(round(spec.fraction * (len(pool) if base_count is None else base_count)))
        n = min(n, len(pool))
        ids = np.sort(np.random.default_rng(spec.seed).choice(pool, size=n, replace=False))
    if len(ids) == 0:
        raise InputError("forget spec selects no samples")
    return ids


def make_splits(dataset, spec):
    return build_splits(dataset, forget_ids_for(dataset, spec))


def round_forget_sets(dataset, spec, n_rounds, fraction_of="original"):
    """Disjoint forget sets for sequential rounds.

    Class rounds forget ``class_id``, ``class_id + 1``, ... (mod C). Uniform
    rounds take ``fraction`` of the original training pool, or of the
    current pool when ``fraction_of == "current"``.
    """
    if fraction_of not in ("original", "current"):
        raise InputError("fraction_of must be 'original' or 'current'")
    pool = dataset.train_ids
    base = len(pool) if fraction_of == "original" else None
    out = []
    for r in range(n_rounds):
        s = replace(spec, class_id=(spec.class_id + r) % dataset.n_classes, seed=spec.seed + r)
        ids = forget_ids_for(dataset, s, pool, base)
        out.append(ids)
        pool = np.setdiff1d(pool, ids)
    return out


# -- retain sources -----------------------------------------------------------

@dataclass
class PartitionSpec:
    k: int = 10
    seed: int = 0
    extractor_seed: int = 1


def prepare_retain_source(dataset, splits, pool_ids, forget_ids, source, part_spec, blend_cfg):
    """Attach the retain set for ``source`` to ``splits``; return seconds spent.

    The partition is recomputed on the current pool (forget samples
    included, so forget-touching clusters can be identified).
    """
    if source == "full":
        return 0.0
    start = time.perf_counter()
    ext = sample_extractor(part_spec.extractor_seed, n_inputs=dataset.n_features)
    pool = np.asarray(pool_ids, dtype=np.int64)
    part = partition_dataset(dataset.samples[pool], dataset.labels[pool], ext, part_spec.k,
                             part_spec.seed, ids=pool)
    split = sample_F(part, forget_ids)
    free_ids = split.free_member_ids(part)
    srcs = splits.retain_sources
    srcs["free_raw"] = dataset.take(np.sort(free_ids))
    srcs["residual_raw"] = dataset.take(np.sort(split.residual_image_ids))
    x = dataset.samples
    if source == "full_condensed":
        forget = np.asarray(forget_ids)
        groups = [(i, c.class_label, c.member_ids[~np.isin(c.member_ids, forget)])
                  for i, c in enumerate(part.clusters)]
        srcs[source] = condense_groups(groups, x, blend_cfg).as_labeled()
    elif source == "free_condensed":
        srcs[source] = condense_free(part, split, x, blend_cfg).as_labeled()
    elif source == "residual_condensed":
        forget = np.asarray(forget_ids)
        groups = [(i, part.clusters[i].class_label,
                   part.clusters[i].member_ids[~np.isin(part.clusters[i].member_ids, forget)])
                  for i in split.forget_cluster_ids]
        srcs[source] = condense_groups(groups, x, blend_cfg).as_labeled()
    elif source == "reduced":
        condensed = condense_free(part, split, x, blend_cfg)
        srcs[source] = build_reduced_retain(condensed, split.residual_image_ids, x, dataset.labels,
                                            forget_ids)
    return time.perf_counter() - start


# -- configuration ------------------------------------------------------------

@dataclass
class DataSpec:
    n_classes: int = 5
    per_class: int = 1000
    d: int = 8
    separation: float = 20.0
    seed: int = 0
    path: str = ""


@dataclass
class ModelSpec:
    hidden: list = field(default_factory=lambda: list(DEFAULT_HIDDEN))
    activation: str = "tanh"


@dataclass
class ForgetSection:
    mode: str = "random_class"
    class_id: int = 0
    fraction: float = 0.1
    seed: int = 0
    rounds: int = 1
    fraction_of: str = "original"


@dataclass
class OutputSpec:
    dir: str = "runs/latest"
    timings: bool = True
    trail: bool = True


_SECTIONS = {
    "data": DataSpec,
    "model": ModelSpec,
    "pretrain": TrainConfig,
    "partition": PartitionSpec,
    "blend": BlendConfig,
    "unlearn": UnlearnConfig,
    "forget": ForgetSection,
    "output": OutputSpec,
}
_TOP_LEVEL = {"repeats": 1, "seed": 0}


def _field_default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    raise TypeError(f"field {f.name} has no default")


def default_flat_config():
    """Every recognised dotted key with its default value."""
    flat = dict(_TOP_LEVEL)
    for name, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            flat[f"{name}.{f.name}"] = _field_default(f)
    return flat


def _coerce(key, value, default):
    if isinstance(value, str) and not isinstance(default, str):
        value = yaml.safe_load(value)
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise InputError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, list) and not isinstance(value, list):
        return [value]
    if not isinstance(value, type(default)):
        raise InputError(f"{key} expects {type(default).__name__}, got {value!r}")
    return value


@dataclass
class ExperimentConfig:
    data: DataSpec
    model: ModelSpec
    pretrain: TrainConfig
    partition: PartitionSpec
    blend: BlendConfig
    unlearn: UnlearnConfig
    forget: ForgetSection
    output: OutputSpec
    repeats: int = 1
    seed: int = 0
    flat: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.repeats < 1:
            raise InputError("repeats must be >= 1")
        if self.forget.rounds < 1:
            raise InputError("forget.rounds must be >= 1")

    @classmethod
    def from_flat(cls, overrides=None):
        """Build from dotted keys; unknown keys are rejected."""
        defaults = default_flat_config()
        flat = dict(defaults)
        for key, value in (overrides or {}).items():
            if key not in defaults:
                raise InputError(f"unknown config key {key!r}")
            flat[key] = _coerce(key, value, defaults[key])
        sections = {}
        for name, scls in _SECTIONS.items():
            kw = {f.name: flat[f"{name}.{f.name}"] for f in dataclasses.fields(scls)}
            try:
                sections[name] = scls(**kw)
            except TypeError as exc:
                raise InputError(f"bad values in section {name!r}: {exc}") from None
        return cls(**sections, repeats=flat["repeats"], seed=flat["seed"], flat=flat)

    def to_flat(self):
        return dict(self.flat) if self.flat else default_flat_config()

    def with_overrides(self, **dotted):
        merged = dict(self.to_flat())
        merged.update(dotted)
        return ExperimentConfig.from_flat(merged)

    @property
    def rounds(self):
        f = self.forget
        base = ForgetSpec(f.mode, f.class_id, f.fraction, f.seed)
        return [replace(base, class_id=base.class_id + r, seed=base.seed + r) for r in range(f.rounds)]


def load_config(path, overrides=None):
    with open(path) as fh:
        flat = yaml.safe_load(fh) or {}
    if not isinstance(flat, dict):
        raise InputError("config file must be a mapping of dotted keys")
    flat.update(overrides or {})
    return ExperimentConfig.from_flat(flat)


def save_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_flat(), fh, sort_keys=True)


# -- models on disk -------------------------------------------------------------

def save_model(model, path):
    arrays = {}
    for i, (w, b) in enumerate(model.layers):
        arrays[f"W{i}"] = np.asarray(w)
        arrays[f"b{i}"] = np.asarray(b)
    np.savez(path, activations=np.array(model.activations), **arrays)


def load_model(path):
    with np.load(path, allow_pickle=False) as z:
        n = sum(1 for k in z.files if k.startswith("W"))
        layers = tuple((z[f"W{i}"], z[f"b{i}"]) for i in range(n))
        return ModelParams(layers, tuple(str(a) for a in z["activations"]))


# -- experiments ------------------------------------------------------------

def derive_seed(*parts):
    """Stable 31-bit seed from integer parts (master seed, arm, repeat, ...)."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0] >> 1)


def load_or_generate(data_spec):
    if data_spec.path:
        return load_dataset(data_spec.path)
    return gen_gaussian_classes(data_spec.n_classes, data_spec.per_class, data_spec.d,
                                data_spec.separation, data_spec.seed)


def pretrain(dataset, cfg, seed):
    dims = (dataset.n_features, *cfg.model.hidden, dataset.n_classes)
    model = init_model(dims, derive_seed(seed, 0), cfg.model.activation)
    tr = dataset.take(dataset.train_ids)
    model, _ = train(model, tr.x, tr.y, replace(cfg.pretrain, seed=derive_seed(seed, 1)))
    return model


@dataclass
class RunRecord:
    config: dict
    reports: list
    errors: list
    environment: dict
    trails: list = field(default_factory=list)

    def to_json(self):
        return {
            "config": self.config,
            "environment": self.environment,
            "reports": [r.to_json() for r in self.reports],
            "errors": self.errors,
            "trails": self.trails,
        }


def environment_fingerprint():
    from . import __version__

    return {
        "package_version": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "platform": platform.platform(),
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }


def _run_arm(dataset, cfg, pretrained, source, repeat):
    """All rounds of one (retain source, repeat); returns (reports, trail rows)."""
    arm = ARM_NUMBERS[source]
    ucfg = replace(cfg.unlearn, retain_source=source, seed=derive_seed(cfg.seed, arm, repeat))
    rounds = round_forget_sets(dataset, cfg.rounds[0], cfg.forget.rounds, cfg.forget.fraction_of)

    def prepare(splits, pool, forget):
        return prepare_retain_source(dataset, splits, pool, forget, source, cfg.partition, cfg.blend)

    reports, trails = [], []
    for r, outcome in enumerate(run_rounds(pretrained, dataset, rounds, ucfg, prepare)):
        res, splits = outcome.result, outcome.splits
        rep = report(res, splits, ucfg.K, round=r, seed=ucfg.seed)
        if len(splits.retain_sources.get("free_raw", ())):
            rep.extra["free_retain_acc"] = accuracy(res.model, splits.retain_sources["free_raw"])
        rep.extra["retain_size"] = len(splits.retain_for(source))
        rep.extra["repeat"] = repeat
        reports.append(rep)
        for row in res.trail:
            trails.append({"method": ucfg.method, "retain_source": source, "repeat": repeat,
                           "round": r, **row})
    return reports, trails


def run_experiment(cfg, sources=None, write=True):
    """Pretrain, then unlearn every round for each repeat and retain source.

    ``sources`` defaults to the configured ``unlearn.retain_source``. A
    failing repeat is recorded in ``errors`` and the remaining repeats
    still run. Runs execute serially in a fixed order.
    """
    sources = [cfg.unlearn.retain_source] if sources is None else list(sources)
    for s in sources:
        if s not in RETAIN_SOURCES:
            raise InputError(f"unknown retain source {s!r}")
    dataset = load_or_generate(cfg.data)
    reports, errors, trails = [], [], []
    for repeat in range(cfg.repeats):
        try:
            pretrained = pretrain(dataset, cfg, derive_seed(cfg.seed, 0, repeat))
            for source in sources:
                reps, tr = _run_arm(dataset, cfg, pretrained, source, repeat)
                reports.extend(reps)
                trails.extend(tr)
        except Exception as exc:  # noqa: BLE001 - record and continue with the next repeat
            errors.append({"repeat": repeat, "type": type(exc).__name__, "message": str(exc)})
    record = RunRecord(cfg.to_flat(), reports, errors, environment_fingerprint(), trails)
    if write:
        write_outputs(record, cfg.output)
    return record


def run_ablation(cfg, write=True):
    """The seven retain-source arms on one shared pretrained model per repeat."""
    return run_experiment(cfg, sources=RETAIN_SOURCES, write=write)


def write_results_csv(reports, path, timings=True):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rep in reports:
            w.writerow(rep.as_row(timings))


def write_trail_csv(trails, path, timings=True):
    keys = []
    for row in trails:
        keys.extend(k for k in row if k not in keys)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in trails:
            w.writerow({**row, "seconds": row["seconds"] if timings else ""})


def write_outputs(record, out):
    os.makedirs(out.dir, exist_ok=True)
    write_results_csv(record.reports, os.path.join(out.dir, "results.csv"), out.timings)
    if out.trail and record.trails:
        write_trail_csv(record.trails, os.path.join(out.dir, "trail.csv"), out.timings)
    with open(os.path.join(out.dir, "run_record.json"), "w") as fh:
        json.dump(record.to_json(), fh, indent=1, default=float)


def report_from_json(obj):
    return MetricsReport(**obj)


__all__ = [
    "ARM_NUMBERS", "DataSpec", "ExperimentConfig", "ForgetSpec", "RunRecord",
    "default_flat_config", "derive_seed", "forget_ids_for", "load_config", "load_model",
    "make_splits", "prepare_retain_source", "pretrain", "round_forget_sets", "run_ablation",
    "run_experiment", "save_config", "save_model",
]
