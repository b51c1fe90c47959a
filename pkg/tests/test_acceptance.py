"""Acceptance criteria A1 to A9.

Each test records one PASS/FAIL line, printed again in the terminal summary.
"""

import time

import numpy as np

from aupretrain import cli
from aupretrain.ablation import directional_ok, median_by_value, run_point
from aupretrain import tensor as T
from aupretrain.checkpoint import load_checkpoint, save_checkpoint
from aupretrain.datapipe import Manifest, SampleRecord, as_dataset, load_manifest
from aupretrain.metrics import confusion_counts, f1_score, load_bundled_table, macro, pr_auc, roc_auc
from aupretrain.network import build_vgg13, replace_head
from aupretrain.splits import sample_by_images, sample_by_subjects, subject_kfold
from aupretrain.synthgen import FINETUNE_AUS, SynthSpec, clean_manifest, generate_dataset
from aupretrain.tensor import Tensor
from aupretrain.trainer import TrainConfig, dataset_loss, evaluate_model, fit

from conftest import record_criterion
from oracles import ap_threshold_sweep, central_diff, confusion_loop, roc_pairwise, vgg13_table_shapes


def strict_rel(a, n, floor=1e-7):
    return abs(a - n) / max(abs(a), abs(n), floor)


def gradient_errors(build, params, rng, n_coords=None, h=1e-6):
    """Worst relative error of backward() against central differences with step ``h``."""
    return gradient_report(build, params, rng, n_coords, h)[0]


def one_sided(f, x, idx, h):
    """(forward, backward) one-sided differences at x[idx]; ``x`` is restored."""
    old = x[idx]
    f0 = f()
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - f0) / h, (f0 - fm) / h


def gradient_report(build, params, rng, n_coords=None, h=1e-6, names=None, skip_kinks=False):
    """(worst relative error, where, kinks skipped) of backward() against central differences.

    With ``skip_kinks``, a sampled coordinate whose one-sided slopes disagree
    sits within ``h`` of a ReLU or max-pool switch, where the central
    difference is not a derivative; it is replaced by a fresh coordinate.
    """
    loss = build()
    for p in params:
        p.grad = None
    loss.backward()
    f = lambda: float(build().item())  # noqa: E731
    worst, where, skipped = 0.0, None, 0
    names = names or [str(i) for i in range(len(params))]
    for name, p in zip(names, params):
        coords = list(np.ndindex(p.shape))
        order = rng.permutation(len(coords))
        want = len(coords) if n_coords is None else min(n_coords, len(coords))
        checked = 0
        for j in order:
            if checked == want:
                break
            idx = coords[j]
            if skip_kinks:
                fwd, bwd = one_sided(f, p.data, idx, h)
                if strict_rel(fwd, bwd) > 1e-3:
                    skipped += 1
                    continue
            num = central_diff(f, p.data, idx, h)
            err = strict_rel(float(p.grad[idx]), num)
            if err > worst:
                worst, where = err, (name, idx, float(p.grad[idx]), num)
            checked += 1
    return worst, where, skipped


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


# -- A1 -----------------------------------------------------------------------------

def op_gradient_suite(rng):
    """Worst error per op; each op output is reduced as sum(c * out) with fixed random c."""
    errs = {}
    x, w, b = leaf(rng, 2, 2, 6, 6), leaf(rng, 3, 2, 3, 3), leaf(rng, 3)
    for stride, padding in ((1, 1), (2, 0)):
        out = T.conv2d(x, w, b, stride=stride, padding=padding)
        weights = rng.normal(size=(1, int(np.prod(out.shape[1:]))))

        def build(stride=stride, padding=padding, weights=weights):
            y = T.conv2d(x, w, b, stride=stride, padding=padding)
            return T.tensor_sum(T.linear(T.flatten(y), Tensor(weights)))

        errs[f"conv2d s{stride} p{padding}"] = gradient_errors(build, [x, w, b], rng)
    cases = {
        # distinct values keep every pooling window's maximum unique
        "maxpool2d": (Tensor(rng.permutation(2 * 3 * 6 * 6).reshape(2, 3, 6, 6) * 0.1, requires_grad=True), T.maxpool2d),
        # entries kept away from the kink at zero
        "relu": (Tensor(rng.uniform(0.1, 1.0, (4, 5)) * rng.choice([-1, 1], (4, 5)), requires_grad=True), T.relu),
        "sigmoid": (leaf(rng, 4, 5, scale=2.0), T.sigmoid),
        "dropout": (leaf(rng, 4, 5), lambda t: T.dropout(t, 0.5, True, np.random.default_rng(3))),
        "flatten": (leaf(rng, 2, 3, 2, 2), T.flatten),
    }
    for name, (t, op) in cases.items():
        weights = rng.normal(size=(1, int(np.prod(op(t).shape[1:]))))
        errs[name] = gradient_errors(lambda op=op, t=t, weights=weights: T.tensor_sum(
            T.linear(T.flatten(op(t)), Tensor(weights))), [t], rng)
    xl, wl, bl = leaf(rng, 3, 7), leaf(rng, 5, 7), leaf(rng, 5)
    weights = rng.normal(size=(1, 5))
    errs["linear"] = gradient_errors(
        lambda: T.tensor_sum(T.linear(T.linear(xl, wl, bl), Tensor(weights))), [xl, wl, bl], rng)
    pb = Tensor(rng.uniform(0.05, 0.95, size=(4, 3)), requires_grad=True)
    y = rng.integers(0, 2, size=(4, 3)).astype(np.float64)
    errs["bce_loss"] = gradient_errors(lambda: T.bce_loss(pb, y), [pb], rng)
    return errs


def test_A1_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    op_errs = op_gradient_suite(rng)
    net = build_vgg13(1, 17, seed=0).astype(np.float64)
    x = rng.random((2, 1, 64, 64))
    y = rng.integers(0, 2, size=(2, 17)).astype(np.float64)
    params = list(net.parameters.values())

    def build():
        return T.bce_loss(net.forward(x, training=True, rng=np.random.default_rng(7)), y)

    # the deep float64 forward carries ~1e-13 roundoff in the loss; h = 1e-5 keeps that
    # below 1e-8 in the slope, and kinks crossed within h are screened out
    e2e, where, kinks = gradient_report(build, params, rng, n_coords=4, h=1e-5, names=list(net.parameters),
                                        skip_kinks=True)
    elapsed = time.perf_counter() - t0
    worst_op = max(op_errs.values())
    ok = worst_op < 1e-4 and e2e < 1e-3 and elapsed < 300
    record_criterion("A1", ok, f"worst op rel err {worst_op:.2e} ({max(op_errs, key=op_errs.get)}), "
                               f"VGG13 sampled rel err {e2e:.2e} at {where[0]} ({kinks} kink coords resampled), {elapsed:.0f}s")
    assert worst_op < 1e-4, op_errs
    assert e2e < 1e-3
    assert elapsed < 300


# -- A2 -----------------------------------------------------------------------------

def test_A2_architecture_audit():
    results = {}
    for outputs in (17, 12):
        net = build_vgg13(1, outputs, seed=0)
        trace = []
        net.forward(np.zeros((1, 1, 64, 64), np.float32), trace=trace)
        results[outputs] = trace == vgg13_table_shapes(outputs)
    ok = all(results.values())
    record_criterion("A2", ok, f"layer outputs match the table for heads 17: {results[17]}, 12: {results[12]}")
    assert ok


# -- A3 -----------------------------------------------------------------------------

def test_A3_metric_oracles():
    rng = np.random.default_rng(2024)
    worst = {"f1": 0.0, "roc_auc": 0.0, "pr_auc": 0.0}
    cases = {"f1": 0, "roc_auc": 0, "pr_auc": 0}
    while min(cases.values()) < 500:
        n = int(rng.integers(2, 80))
        # half the cases use coarse scores so ties are frequent
        scores = rng.integers(0, 6, n) / 5.0 if rng.random() < 0.5 else rng.random(n)
        labels = (rng.random(n) < rng.uniform(0.05, 0.95)).astype(int)
        tp, fp, tn, fn = confusion_loop(scores, labels)
        want = 0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
        worst["f1"] = max(worst["f1"], abs(f1_score(confusion_counts(scores, labels))[0] - want))
        cases["f1"] += 1
        if 0 < labels.sum() < n:
            worst["roc_auc"] = max(worst["roc_auc"], abs(roc_auc(scores, labels) - roc_pairwise(scores, labels)))
            cases["roc_auc"] += 1
        if labels.sum() > 0:
            worst["pr_auc"] = max(worst["pr_auc"], abs(pr_auc(scores, labels) - ap_threshold_sweep(scores, labels)))
            cases["pr_auc"] += 1
    ok = max(worst.values()) < 1e-9
    record_criterion("A3", ok, "max abs err " + ", ".join(f"{k} {v:.1e} ({cases[k]} cases)" for k, v in worst.items()))
    assert ok


# -- A4 -----------------------------------------------------------------------------

EXPECTED_MEANS = {
    "disfa_f1_comparison": {"Ours": 59.9, "LP-Net": 56.9, "OpenFace 2.0": 53.6},
    "disfa_f1_by_pretrain_images": {"1,000": 28.0, "2,000": 39.7, "10,000": 44.6, "~160,000": 59.9},
    "disfa_f1_by_pretrain_subjects": {"12": 0.0, "200": 45.7, "600": 49.3, "1,000": 58.5, "~2,000": 59.9},
}


def test_A4_table_fixtures(capsys):
    misses = []
    for name, expected in EXPECTED_MEANS.items():
        assert cli.main(["report", "--table", name]) == 0
        rendered = {}
        for line in capsys.readouterr().out.splitlines():
            cells = [c.strip() for c in line.split("|")]
            if cells[0] in expected:
                rendered[cells[0]] = float(cells[-1])
        for label, value in expected.items():
            if label not in rendered or abs(rendered[label] - value) > 0.05:
                misses.append((name, label, rendered.get(label), value))
        # the recomputed mean agrees with the rendered one
        for label, mean in load_bundled_table(name).means().items():
            assert abs(round(mean, 1) - rendered[label]) < 1e-9
    ok = not misses
    record_criterion("A4", ok, f"{sum(len(e) for e in EXPECTED_MEANS.values())} row means within 0.05"
                     if ok else f"mismatches {misses}")
    assert ok


# -- A5 -----------------------------------------------------------------------------

def test_A5_transfer_isolation(tmp_path):
    t0 = time.perf_counter()
    net = build_vgg13(1, 17, seed=0)
    swapped = replace_head(net, 12, seed=1)
    body_same = all(swapped.parameters[n].data.tobytes() == t.data.tobytes()
                    for n, t in net.parameters.items() if not n.startswith("output."))
    head_ok = swapped.parameters["output.weight"].shape == (12, 1024)
    save_checkpoint(swapped, tmp_path / "ft.aupt")
    back = load_checkpoint(tmp_path / "ft.aupt")
    roundtrip = set(back.parameters) == set(swapped.parameters) and all(
        back.parameters[n].data.tobytes() == t.data.tobytes() and back.parameters[n].data.dtype == t.data.dtype
        for n, t in swapped.parameters.items())
    save_checkpoint(back, tmp_path / "again.aupt")
    stable = (tmp_path / "ft.aupt").read_bytes() == (tmp_path / "again.aupt").read_bytes()
    elapsed = time.perf_counter() - t0
    ok = body_same and head_ok and roundtrip and stable and elapsed < 30
    record_criterion("A5", ok, f"body bitwise {body_same}, head 12x1024 {head_ok}, roundtrip bitwise {roundtrip}, "
                               f"re-save identical {stable}, {elapsed:.1f}s")
    assert ok


# -- A6 -----------------------------------------------------------------------------

def random_manifest(rng):
    n_subjects = int(rng.integers(3, 120))
    recs = []
    for s in range(n_subjects):
        gender = "M" if rng.random() < rng.uniform(0.3, 0.7) else "F"
        for i in range(int(rng.integers(1, 12))):
            recs.append(SampleRecord(f"{s}_{i}.png", f"P{s:04d}", gender, "r", (int(rng.integers(0, 2)),)))
    return Manifest(("AU01",), "binary", recs)


def test_A6_split_safety():
    rng = np.random.default_rng(6)
    failures = []
    for trial in range(100):
        m = random_manifest(rng)
        subjects = set(m.subjects())
        k = int(rng.integers(2, min(10, len(subjects)) + 1))
        folds = subject_kfold(m, k, seed=trial)
        sizes = folds.fold_sizes()
        tests = [set(folds.test_subjects(f)) for f in range(k)]
        if max(sizes) - min(sizes) > 1 or set().union(*tests) != subjects or sum(map(len, tests)) != len(subjects):
            failures.append((trial, "partition"))
        for f in range(k):
            tr, te = folds.fold_indices(m, f)
            if set(m.subject_ids[tr]) & set(m.subject_ids[te]) or len(tr) + len(te) != len(m):
                failures.append((trial, f"overlap fold {f}"))
        genders = m.subject_genders()
        n_m = sum(g == "M" for g in genders.values())
        n_sub = min(2 * min(n_m, len(genders) - n_m), len(genders))
        if n_sub >= 1:
            chosen = sample_by_subjects(m, n_sub, gender_balanced=True, seed=trial).subject_genders()
            c_m = sum(g == "M" for g in chosen.values())
            if len(chosen) != n_sub or abs(c_m - (len(chosen) - c_m)) > 1:
                failures.append((trial, "subject balance"))
        g = m.genders
        n_img = min(2 * min(int((g == "M").sum()), int((g == "F").sum())), len(m))
        if n_img >= 1:
            picked = sample_by_images(m, n_img, gender_balanced=True, seed=trial).genders
            if abs(int((picked == "M").sum()) - int((picked == "F").sum())) > 1:
                failures.append((trial, "image balance"))
    ok = not failures
    record_criterion("A6", ok, "100 manifests: disjoint folds, sizes within 1, |M-F| <= 1" if ok else f"{failures[:5]}")
    assert ok


# -- A9 -----------------------------------------------------------------------------

def test_A9_determinism(tmp_path_factory):
    root = tmp_path_factory.mktemp("a9")
    tiny = ["--set", "width_multiplier=0.0625", "--set", "max_epochs=2", "--set", "batch_size=8", "--set", "val_fraction=0.25"]
    assert cli.main(["synth", "--out", str(root / "data"), "--set", "n_subjects=9", "--set", "images_per_subject=4",
                     "--set", "n_labels=4"]) == 0
    assert cli.main(["pretrain", "--manifest", str(root / "data" / "manifest.csv"), "--out", str(root / "pre.aupt"),
                     *tiny]) == 0
    outs = []
    for run in ("a", "b"):
        assert cli.main(["finetune", "--checkpoint", str(root / "pre.aupt"),
                         "--manifest", str(root / "data" / "true_labels.csv"), "--out", str(root / run), *tiny]) == 0
        outs.append({n: (root / run / n).read_bytes() for n in ("report.csv", "report.txt", "predictions.csv")})
    ok = outs[0] == outs[1]
    record_criterion("A9", ok, "two finetune runs, report.csv/report.txt/predictions.csv byte-identical" if ok
                     else "reports differ")
    assert ok


# -- A7 -----------------------------------------------------------------------------

# Desk-scale protocol: width 1/16 with dropout off (narrow nets with the full
# rates never leave the label-frequency baseline), and every pre-training
# point is shown the same number of images so small subsets are not starved.
A7_WIDTH = 0.0625
A7_BUDGET = 24000
A7_SEEDS = (0, 1, 2)
A7_IMAGES = (0, 1000, 4000, 8000)
A7_SUBJECTS = (10, 50, 200, 400)
A7_FIXED_IMAGES = 400
A7_PER_SUBJECT = 40


def a7_series(pool, ft, folds, axis, grid, images_per_point=None):
    pre = TrainConfig(lr=1e-3, batch_size=16, max_epochs=1, augment=None)
    tune = TrainConfig(lr=5e-4, batch_size=16, max_epochs=15, early_stop_patience=5, augment=None)
    cache, points = {}, []
    for value in grid:
        for seed in A7_SEEDS:
            point, _ = run_point(pool, ft, folds, axis, value, seed, pre, tune, A7_WIDTH, cache,
                                 images_per_point=images_per_point, dropout_scale=0.0, pretrain_budget=A7_BUDGET)
            points.append(point)
    return points


def fmt_series(grid, f1):
    return " ".join(f"{g}:{v:.3f}" for g, v in zip(grid, f1))


def test_A7_directional_ablation(tmp_path):
    t0 = time.perf_counter()
    # 40 images per subject so the 10-subject point can supply the fixed image
    # count; images 0..19 of every subject are the 400 x 20 pool
    noisy = generate_dataset(SynthSpec(n_subjects=400, images_per_subject=A7_PER_SUBJECT), tmp_path / "pool")
    generate_dataset(SynthSpec(n_subjects=30, images_per_subject=20, first_subject=400), tmp_path / "ft")
    ft = clean_manifest(tmp_path / "ft").select_columns(FINETUNE_AUS)
    pool20 = noisy.subset(np.flatnonzero(np.arange(len(noisy)) % A7_PER_SUBJECT < 20))
    assert len(pool20) == 8000 and len(pool20.subjects()) == 400
    folds = subject_kfold(ft, 3, 0)

    by_images = median_by_value(a7_series(pool20, ft, folds, "images", A7_IMAGES))
    by_subjects = median_by_value(a7_series(noisy, ft, folds, "subjects", A7_SUBJECTS, A7_FIXED_IMAGES))
    img_f1 = [by_images[str(v)] for v in A7_IMAGES]
    subj_f1 = [by_subjects[str(v)] for v in A7_SUBJECTS]
    gain = by_images["8000"] - by_images["0"]
    ok_images = directional_ok(img_f1, max_inversions=1, max_drop=0.02)
    ok_subjects = directional_ok(subj_f1, max_inversions=1, max_drop=0.02)
    ok = ok_images and ok_subjects and gain >= 0.05
    record_criterion("A7", ok, f"median F1 over {len(A7_SEEDS)} seeds; images [{fmt_series(A7_IMAGES, img_f1)}] "
                               f"8k-random {gain:+.3f}; subjects@{A7_FIXED_IMAGES} [{fmt_series(A7_SUBJECTS, subj_f1)}]; "
                               f"{(time.perf_counter() - t0) / 60:.0f} min")
    assert ok


# -- A8 -----------------------------------------------------------------------------

def test_A8_overfit_sanity(tmp_path):
    # desk-scale width; dropout stays on during training, losses are measured in eval mode
    generate_dataset(SynthSpec(n_subjects=8, images_per_subject=4, n_labels=17, seed=8), tmp_path)
    ds = as_dataset(load_manifest(tmp_path / "manifest.csv"), 1, None, 0)
    assert len(ds) == 32
    net = build_vgg13(1, 17, seed=0, width_multiplier=0.25)
    cfg = TrainConfig(lr=1e-3, batch_size=4, max_epochs=300, augment=None, seed=0)
    state = {}

    def check(net, rec):
        scores, labels = evaluate_model(net, ds)
        loss = dataset_loss(net, ds)
        f1 = macro(f1_score(confusion_counts(scores, labels)))
        state.update(epoch=rec.epoch, loss=loss, f1=f1)
        return loss < 0.05 and f1 == 1.0

    t0 = time.perf_counter()
    fit(net, ds, cfg, on_epoch_end=check)
    ok = state["loss"] < 0.05 and state["f1"] == 1.0
    record_criterion("A8", ok, f"32 samples, width 0.25: train BCE {state['loss']:.4f}, train F1 {state['f1']:.3f} "
                               f"at epoch {state['epoch']} of 300, {time.perf_counter() - t0:.0f}s")
    assert ok
