"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) and
then asserts. Thresholds are applied exactly as stated; nothing is tuned
per fixture.
"""

import csv
import time

import numpy as np
import pytest
from scipy import stats

from conftest import central_fd, record_criterion
from ulab import autodiff as ad
from ulab.blend import BlendConfig, blend_loss, condense_free, build_reduced_retain, extractor_pool
from ulab.cli import main
from ulab.data import build_splits, gen_gaussian_classes, load_dataset, save_dataset
from ulab.evaluation import accuracy, mia_score
from ulab.gaussianize import gaussianize, gaussianize_losses, mmd
from ulab.harness import ExperimentConfig, run_ablation, run_experiment
from ulab.nn import (TrainConfig, grad, init_model, mean_ce, sample_extractor, train,
                     tree_leaves, tree_unflatten)
from ulab.partition import inertia, kmeans, partition_dataset, sample_F
from ulab.unlearn import UnlearnConfig, a_amu_objective, run_unlearning

FIXTURE = dict(n_classes=5, per_class=1000, d=8, separation=20.0, seed=0)
FORGET_CLASS = 0


def _max_rel(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def _model_fd(obj, model, h=1e-5):
    """Analytic vs central-difference gradient over every parameter."""
    g = tree_leaves(grad(obj, model))
    leaves = tree_leaves(model)
    worst = 0.0
    for k, leaf in enumerate(leaves):
        def f(v, k=k):
            ls = list(leaves)
            ls[k] = v
            return float(obj(tree_unflatten(model, ls)))

        worst = max(worst, _max_rel(g[k], central_fd(f, leaf, h)))
    return worst


@pytest.fixture(scope="module")
def blobs():
    ds = gen_gaussian_classes(**FIXTURE)
    tr = ds.take(ds.train_ids)
    model, _ = train(init_model((8, 64, 64, 5), 0), tr.x, tr.y, TrainConfig(epochs=30, seed=0))
    forget = ds.train_ids[ds.labels[ds.train_ids] == FORGET_CLASS]
    return ds, model, build_splits(ds, forget)


def test_criterion_01_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for i in range(20):
        model = init_model((4, 6, 3), int(rng.integers(1 << 30)))
        x, y = rng.normal(size=(10, 4)), rng.integers(0, 3, size=10)
        note("ce", _model_fd(lambda m: mean_ce(m, x, y), model))

        imgs = rng.normal(size=(int(rng.integers(2, 9)), 8))
        pool = extractor_pool(i, 4, 8)
        raw = rng.normal(size=len(imgs))
        v = ad.Var(raw)
        blend_loss(v, imgs, pool).backward()
        note("blend", _max_rel(v.grad, central_fd(lambda r: blend_loss(r, imgs, pool), raw)))

        losses = rng.exponential(size=16)
        w = rng.normal(size=16)
        v = ad.Var(losses)
        ad.sum(ad.mul(gaussianize_losses(ad.log1p(v)), w)).backward()
        fd = central_fd(lambda a: float(np.dot(gaussianize_losses(np.log1p(a)), w)), losses)
        note("gaussianize", _max_rel(v.grad, fd))

        a, b = rng.normal(size=12), rng.normal(0.5, 1.5, size=9)
        v = ad.Var(a)
        mmd(v, b).backward()
        note("mmd", _max_rel(v.grad, central_fd(lambda z: mmd(z, b), a)))

        batch = lambda n: (rng.normal(size=(n, 4)), rng.integers(0, 3, size=n))  # noqa: E731
        r, f, t = batch(16), batch(32), batch(32)
        note("a_amu", _model_fd(lambda m: a_amu_objective(m, r, f, t, 1.0, 100.0, 1e-3), model))
    seconds = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and seconds < 60
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    record_criterion(1, ok, f"max rel err {detail}; {seconds:.1f}s")
    assert ok


def test_criterion_02_gaussianization_convergence():
    x = np.random.default_rng(0).exponential(size=2000)
    z = gaussianize(x, K=200)
    ks = stats.kstest(z, "norm").statistic
    ok = ks <= 0.05 and abs(z.mean()) <= 0.05 and 0.9 <= z.var() <= 1.1
    record_criterion(2, ok, f"KS={ks:.4f} mean={z.mean():+.4f} var={z.var():.4f}")
    assert ok


def test_criterion_03_mmd_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        a = rng.normal(size=rng.integers(1, 51))
        b = rng.normal(rng.normal(), 2, size=rng.integers(1, 51))
        kaa = sum(np.exp(-(u - v) ** 2 / 2) for u in a for v in a) / len(a) ** 2
        kbb = sum(np.exp(-(u - v) ** 2 / 2) for u in b for v in b) / len(b) ** 2
        kab = sum(np.exp(-(u - v) ** 2 / 2) for u in a for v in b) / (len(a) * len(b))
        worst = max(worst, abs(mmd(a, b) - (kaa + kbb - 2 * kab)))
    self_max, neg = 0.0, 0
    for _ in range(1000):
        a = rng.normal(scale=rng.uniform(0.1, 10), size=rng.integers(1, 40))
        b = rng.normal(scale=rng.uniform(0.1, 10), size=rng.integers(1, 40))
        self_max = max(self_max, mmd(a, a))
        neg += mmd(a, b) < 0
    ok = worst <= 1e-12 and self_max == 0.0 and neg == 0
    record_criterion(3, ok, f"max |diff| vs double loop={worst:.1e}; max MMD(A,A)={self_max:.1e}; negatives={neg}")
    assert ok


def test_criterion_04_partition_combinatorics():
    violations = 0
    for seed in range(200):
        r = np.random.default_rng(seed)
        n_classes, n = int(r.integers(1, 5)), int(r.integers(5, 80))
        labels = r.integers(0, n_classes, size=n)
        samples = r.normal(size=(n, 4)) + labels[:, None]
        ids = np.sort(r.choice(10 * n, size=n, replace=False))
        k = int(r.integers(1, 10))
        forget = r.choice(ids, size=int(r.integers(0, n)), replace=False)
        part = partition_dataset(samples, labels, sample_extractor(seed, n_inputs=4), k, seed, ids=ids)
        lab = dict(zip(ids.tolist(), labels.tolist()))
        members = part.member_ids()
        violations += sorted(members.tolist()) != sorted(ids.tolist())
        violations += any({lab[i] for i in c.member_ids.tolist()} != {c.class_label} for c in part.clusters)
        split = sample_F(part, forget)
        kept = np.concatenate([split.free_member_ids(part), split.residual_image_ids])
        violations += sorted(kept.tolist()) != np.setdiff1d(ids, forget).tolist()
    pts = np.array([0.0, 0.4, 1.1, 1.3, 5.0, 5.2, 5.9, 9.0, 9.4, 12.0])[:, None]
    assign, cent = kmeans(pts, 3, seed=0)
    got = inertia(pts, assign, cent)
    optimum = 6.853333333333333  # exhaustive search over all 3^10 assignments
    ok = violations == 0 and abs(got - optimum) <= 1e-12
    record_criterion(4, ok, f"invariant violations={violations}; k-means inertia {got:.6f} vs optimum {optimum:.6f}")
    assert ok


def _forgets(split_metrics):
    return split_metrics["forget_acc"] <= 1.0 and split_metrics["retain_acc"] >= 95.0


def test_criterion_05_unlearning_efficacy(blobs):
    start = time.perf_counter()
    ds, model, splits = blobs
    train_acc = accuracy(model, ds.take(ds.train_ids))
    out = {}
    for method in ("cf", "a_cf", "retrain"):
        res = run_unlearning(model, splits, UnlearnConfig(method=method))
        out[method] = {"forget_acc": accuracy(res.model, splits.forget),
                       "retain_acc": accuracy(res.model, splits.retain),
                       "mia": mia_score(res.model, splits.forget, splits.t)}
    seconds = time.perf_counter() - start
    ok = (train_acc >= 99.0 and _forgets(out["cf"]) and _forgets(out["a_cf"])
          and 45.0 <= out["retrain"]["mia"] <= 55.0 and seconds < 300)
    detail = "; ".join(f"{m}: forget={v['forget_acc']:.2f} retain={v['retain_acc']:.2f} mia={v['mia']:.2f}"
                       for m, v in out.items())
    record_criterion(5, ok, f"pretrain train_acc={train_acc:.2f}; {detail}; {seconds:.0f}s")
    assert ok


MAX_EPOCHS = 20


def _epochs_to_threshold(model, splits, method):
    res = run_unlearning(model, splits, UnlearnConfig(method=method, epochs=MAX_EPOCHS, track_metrics=True))
    for e in res.trail:
        if _forgets(e) and e["mia_score"] <= 55.0:
            return e["epoch"], res.trail
    return None, res.trail


def test_criterion_06_acceleration(blobs):
    _, model, splits = blobs
    cf, cf_trail = _epochs_to_threshold(model, splits, "cf")
    acf, acf_trail = _epochs_to_threshold(model, splits, "a_cf")
    ok = cf is not None and acf is not None and acf <= cf / 2
    last = lambda tr: f"forget={tr[-1]['forget_acc']:.2f} mia={tr[-1]['mia_score']:.2f}"  # noqa: E731
    record_criterion(6, ok, f"epochs to threshold (max {MAX_EPOCHS}): cf={cf} a_cf={acf}; "
                            f"after {MAX_EPOCHS} epochs cf {last(cf_trail)}, a_cf {last(acf_trail)}")
    assert ok


def test_criterion_07_condensation_value(blobs):
    ds, model, splits = blobs
    forget = splits.forget.ids
    ids = ds.train_ids
    part = partition_dataset(ds.samples[ids], ds.labels[ids], sample_extractor(1, n_inputs=8), 10, 0, ids=ids)
    split = sample_F(part, forget)
    condense_s = []
    for _ in range(3):
        condensed = condense_free(part, split, ds.samples, BlendConfig())
        condense_s.append(condensed.seconds)
    reduced = build_reduced_retain(condensed, split.residual_image_ids, ds.samples, ds.labels, forget)
    splits.retain_sources["reduced"] = reduced
    full_runs = [run_unlearning(model, splits, UnlearnConfig(method="cf", epochs=2, seed=s)) for s in range(3)]
    two_epochs_s = min(r.unlearning_seconds for r in full_runs)
    ft_full = run_unlearning(model, splits, UnlearnConfig(method="cf"))
    ft_reduced = run_unlearning(model, splits, UnlearnConfig(method="cf", retain_source="reduced"))
    acc_full = accuracy(ft_full.model, splits.test_eval)
    acc_red = accuracy(ft_reduced.model, splits.test_eval)
    ratio = len(reduced) / len(splits.retain)
    ok = ratio <= 0.60 and abs(acc_full - acc_red) <= 5.0 and min(condense_s) <= two_epochs_s
    record_criterion(7, ok, f"|reduced|/|R|={ratio:.3f}; test_eval full={acc_full:.2f} reduced={acc_red:.2f}; "
                            f"condense {min(condense_s):.3f}s vs two CF epochs {two_epochs_s:.3f}s")
    assert ok


OVERFIT = {"data.separation": 2.0, "data.per_class": 60, "pretrain.epochs": 200, "partition.k": 10,
           "forget.mode": "uniform_fraction", "forget.fraction": 0.1, "unlearn.method": "cf", "repeats": 6}


def test_criterion_08_ablation_ordering():
    rec = run_ablation(ExperimentConfig.from_flat(OVERFIT), write=False)
    by = {}
    for r in rec.reports:
        by.setdefault(r.retain_source, []).append(r)
    mean = lambda src, key: float(np.mean([getattr(r, key) if key != "free" else r.extra["free_retain_acc"]  # noqa: E731
                                           for r in by[src]]))
    f7, f2 = mean("reduced", "forget_acc"), mean("full_condensed", "forget_acc")
    r7, r5 = mean("reduced", "free"), mean("residual_raw", "free")
    ok = not rec.errors and f7 <= f2 and r7 >= r5
    record_criterion(8, ok, f"forget acc reduced={f7:.2f} <= full_condensed={f2:.2f}; "
                            f"free-retain acc reduced={r7:.2f} >= residual_raw={r5:.2f}")
    assert ok


def test_criterion_09_multi_round_stability():
    cfg = ExperimentConfig.from_flat({"forget.mode": "uniform_fraction", "forget.rounds": 3,
                                      "unlearn.method": "a_cf"})
    rec = run_experiment(cfg, write=False)
    mias = [r.mia_score for r in rec.reports]
    tests = [r.test_acc for r in rec.reports]
    base = tests[0] if tests else float("nan")
    ok = (not rec.errors and [r.round for r in rec.reports] == [0, 1, 2]
          and all(45.0 <= m <= 60.0 for m in mias)
          and all(abs(t - base) <= 5.0 and t >= 0.5 * base for t in tests))
    record_criterion(9, ok, f"mia per round={[round(m, 2) for m in mias]}; test_eval per round={tests}")
    assert ok


def test_criterion_10_reproducibility(tmp_path):
    flags = ["--repeats", "3", "--output.timings", "false"]
    assert main(["pipeline", *flags, "--output.dir", str(tmp_path / "a")]) == 0
    assert main(["pipeline", *flags, "--output.dir", str(tmp_path / "b")]) == 0
    csv_a = (tmp_path / "a" / "results.csv").read_bytes()
    csv_b = (tmp_path / "b" / "results.csv").read_bytes()
    # with wall-clock cells present, every other cell must still agree
    assert main(["pipeline", "--repeats", "3", "--output.dir", str(tmp_path / "c")]) == 0
    with open(tmp_path / "a" / "results.csv") as fa, open(tmp_path / "c" / "results.csv") as fc:
        strip = lambda rows: [r[:7] + r[9:] for r in rows]  # noqa: E731
        cells_match = strip(list(csv.reader(fa))) == strip(list(csv.reader(fc)))
    ds = gen_gaussian_classes(**FIXTURE)
    save_dataset(ds, tmp_path / "d.ulab")
    back = load_dataset(tmp_path / "d.ulab")
    save_dataset(back, tmp_path / "e.ulab")
    round_trip = back == ds and (tmp_path / "d.ulab").read_bytes() == (tmp_path / "e.ulab").read_bytes()
    rows = csv_a.count(b"\n") - 1
    ok = csv_a == csv_b and cells_match and round_trip and rows == 3
    record_criterion(10, ok, f"results.csv identical={csv_a == csv_b} ({rows} rows); "
                             f"non-timing cells stable with timings on={cells_match}; dataset round trip={round_trip}")
    assert ok
