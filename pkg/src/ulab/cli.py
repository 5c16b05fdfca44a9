"""Command-line entry point: ``ulab <subcommand> [--config FILE] [--section.key VALUE ...]``.

Every dotted config key is also a flag, so ``--unlearn.method cf`` overrides
``unlearn.method`` from the config file.
"""

from __future__ import annotations

import argparse
import json
import sys

from .blend import condense_free
from .data import gen_gaussian_classes, load_dataset, save_dataset
from .errors import UlabError
from .evaluation import CSV_COLUMNS, accuracy, evaluate
from .harness import (ExperimentConfig, default_flat_config, forget_ids_for, load_config, load_model,
                      make_splits, prepare_retain_source, pretrain, run_ablation, run_experiment,
                      save_model, ForgetSpec, write_outputs)
from .nn import sample_extractor
from .partition import Partition, partition_dataset, sample_F
from .unlearn import run_unlearning


def _config(args, **forced):
    known = default_flat_config()
    overrides = {k: v for k, v in vars(args).items() if k in known}
    overrides.update(forced)
    if args.config:
        return load_config(args.config, overrides)
    return ExperimentConfig.from_flat(overrides)


def _dataset(args, cfg):
    if getattr(args, "data", None):
        return load_dataset(args.data)
    if cfg.data.path:
        return load_dataset(cfg.data.path)
    d = cfg.data
    return gen_gaussian_classes(d.n_classes, d.per_class, d.d, d.separation, d.seed)


def _forget_spec(cfg):
    f = cfg.forget
    return ForgetSpec(f.mode, f.class_id, f.fraction, f.seed)


def cmd_gen_data(args):
    cfg = _config(args)
    d = cfg.data
    ds = gen_gaussian_classes(d.n_classes, d.per_class, d.d, d.separation, d.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples ({len(ds.train_ids)} train) to {args.out}")


def cmd_pretrain(args):
    cfg = _config(args)
    ds = _dataset(args, cfg)
    model = pretrain(ds, cfg, cfg.seed)
    save_model(model, args.out)
    tr, te = ds.take(ds.train_ids), ds.take(ds.test_ids)
    print(f"train_acc={accuracy(model, tr):.2f} test_acc={accuracy(model, te):.2f} -> {args.out}")


def cmd_partition(args):
    cfg = _config(args)
    ds = _dataset(args, cfg)
    p = cfg.partition
    ext = sample_extractor(p.extractor_seed, n_inputs=ds.n_features)
    ids = ds.train_ids
    part = partition_dataset(ds.samples[ids], ds.labels[ids], ext, p.k, p.seed, ids=ids)
    part.save(args.out)
    print(f"{len(part.clusters)} clusters -> {args.out}")


def cmd_condense(args):
    cfg = _config(args)
    ds = _dataset(args, cfg)
    part = Partition.load(args.partition)
    forget = forget_ids_for(ds, _forget_spec(cfg))
    split = sample_F(part, forget)
    condensed = condense_free(part, split, ds.samples, cfg.blend)
    obj = condensed.to_json()
    for entry, proto in zip(obj["prototypes"], condensed.prototypes):
        entry["image"] = [float(v) for v in proto.image.reshape(-1)]
    obj["residual_ids"] = [int(i) for i in split.residual_image_ids]
    with open(args.out, "w") as fh:
        json.dump(obj, fh, indent=1)
    if args.prototypes and len(condensed):
        save_dataset(condensed.to_dataset(ds.n_classes), args.prototypes)
    print(f"{len(condensed)} prototypes, {len(split.residual_image_ids)} residual images, "
          f"{condensed.seconds:.3f}s -> {args.out}")


def cmd_unlearn(args):
    cfg = _config(args)
    ds = _dataset(args, cfg)
    model = load_model(args.model)
    splits = make_splits(ds, _forget_spec(cfg))
    prep = prepare_retain_source(ds, splits, ds.train_ids, splits.forget.ids, cfg.unlearn.retain_source,
                                 cfg.partition, cfg.blend)
    result = run_unlearning(model, splits, cfg.unlearn, prep)
    save_model(result.model, args.out)
    print(f"method={cfg.unlearn.method} retain_source={cfg.unlearn.retain_source} "
          f"preprocess_s={result.preprocessing_seconds:.3f} unlearn_s={result.unlearning_seconds:.3f} "
          f"-> {args.out}")


def cmd_evaluate(args):
    cfg = _config(args)
    ds = _dataset(args, cfg)
    model = load_model(args.model)
    splits = make_splits(ds, _forget_spec(cfg))
    metrics = evaluate(model, splits, cfg.unlearn.K)
    for k, v in metrics.items():
        print(f"{k}={v:.2f}")


def _run_and_report(cfg, runner):
    record = runner(cfg, write=False)
    write_outputs(record, cfg.output)
    print(",".join(CSV_COLUMNS))
    for rep in record.reports:
        print(",".join(rep.as_row(cfg.output.timings)))
    for err in record.errors:
        print(f"repeat {err['repeat']} failed: {err['type']}: {err['message']}", file=sys.stderr)
    print(f"outputs in {cfg.output.dir}", file=sys.stderr)
    return 1 if record.errors and not record.reports else 0


def cmd_pipeline(args):
    return _run_and_report(_config(args), run_experiment)


def cmd_ablate(args):
    return _run_and_report(_config(args), run_ablation)


def cmd_rounds(args):
    forced = {}
    if "forget.rounds" not in vars(args):
        forced["forget.rounds"] = 3
    return _run_and_report(_config(args, **forced), run_experiment)


_COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the Gaussian-blob dataset file", ["out"]),
    "pretrain": (cmd_pretrain, "train the classifier on the full training split", ["data?", "out"]),
    "partition": (cmd_partition, "per-class k-means of the training split", ["data?", "out"]),
    "condense": (cmd_condense, "blend-condense the free clusters", ["data?", "partition", "out", "prototypes?"]),
    "unlearn": (cmd_unlearn, "run one unlearning method", ["data?", "model", "out"]),
    "evaluate": (cmd_evaluate, "report accuracies and the threshold-MIA score", ["data?", "model"]),
    "pipeline": (cmd_pipeline, "pretrain, unlearn and evaluate end to end", []),
    "ablate": (cmd_ablate, "run all seven retain-source arms", []),
    "rounds": (cmd_rounds, "sequential unlearning rounds (default 3)", []),
}


def build_parser():
    keys = argparse.ArgumentParser(add_help=False)
    keys.add_argument("--config", help="YAML file of dotted keys")
    group = keys.add_argument_group("config keys")
    for key, default in default_flat_config().items():
        group.add_argument(f"--{key}", dest=key, default=argparse.SUPPRESS, metavar="V",
                           help=f"(default: {default!r})")
    parser = argparse.ArgumentParser(prog="ulab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, helptext, paths) in _COMMANDS.items():
        p = sub.add_parser(name, parents=[keys], help=helptext)
        for path in paths:
            optional = path.endswith("?")
            flag = path.rstrip("?")
            p.add_argument(f"--{flag}", required=not optional, help=f"{flag} path")
        p.set_defaults(func=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except UlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
