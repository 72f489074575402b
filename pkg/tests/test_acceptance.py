"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Trend checks run the same experiment harness as ``matchtune train`` with
five seeds; each seed regenerates its data (``resample_data``) so the
trends are not an artefact of one draw.
"""

import itertools
import time

import numpy as np
import pytest

from matchtune import autodiff as ad
from matchtune.attacks import AttackConfig, attack_batch, robust_accuracy
from matchtune.autodiff import Tensor
from matchtune.cli import main
from matchtune.data import DatasetSpec, generate
from matchtune.encoders import EncoderConfig
from matchtune.experiment import config_from_dict, run_experiment
from matchtune.matching import MatchMode, apply_mask, compute_match_matrix, mass_diagnostics
from matchtune.metrics import f1, matthews, spearman
from matchtune.training import Trainer, TrainConfig, fit, forward, init_model

SEEDS = 5


def smooth(x, window=20):
    """Trailing moving average (shorter window at the start)."""
    x = np.asarray(x, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(1, x.size + 1)
    lo = np.maximum(i - window, 0)
    return (c[i] - c[lo]) / (i - lo)


def experiment(tmp_path, name, **overrides):
    base = {
        "name": name,
        "output_dir": str(tmp_path),
        "repeat": SEEDS,
        "base_seed": 0,
        "resample_data": True,
    }
    base.update(overrides)
    return config_from_dict(base)


# ----------------------------------------------------------------------------
# 1. matching-matrix algebra


def test_c01_matching_algebra(verdict):
    rng = np.random.default_rng(2024)
    started = time.perf_counter()
    failures = []
    for case in range(1000):
        n, d = int(rng.integers(1, 13)), int(rng.integers(1, 9))
        tau = float(rng.uniform(0.1, 5.0))
        H = rng.standard_normal((n, d))
        labels = rng.integers(0, int(rng.integers(1, 4)), size=n)
        M = compute_match_matrix(Tensor(H), tau).numpy()
        ok = np.allclose(M.sum(axis=1), 1.0, rtol=0, atol=1e-9) and np.all(M >= 0)

        perm = rng.permutation(n)
        Mp = compute_match_matrix(Tensor(H[perm]), tau).numpy()
        ok &= np.allclose(Mp, M[np.ix_(perm, perm)], rtol=0, atol=1e-12)

        hot = compute_match_matrix(Tensor(H), 1e6).numpy()
        ok &= np.allclose(hot, 1.0 / n, rtol=0, atol=1e-5)
        S = H @ H.T
        top2 = np.sort(S, axis=1)[:, -2:] if n > 1 else None
        if n > 1:
            gap = float(np.min(top2[:, 1] - top2[:, 0]))
            if gap > 1e-6:
                cold = compute_match_matrix(Tensor(H), gap / 60.0).numpy()
                ok &= np.allclose(cold[np.arange(n), S.argmax(axis=1)], 1.0, rtol=0, atol=1e-12)

        same = np.zeros(n, dtype=np.int64)
        mt = compute_match_matrix(Tensor(H), tau)
        ok &= np.array_equal(apply_mask(mt, same, MatchMode.POSITIVE, renormalize=False).numpy(), M)
        distinct = np.arange(n)
        ok &= np.array_equal(apply_mask(mt, distinct, MatchMode.POSITIVE).numpy(), np.eye(n))

        diag = mass_diagnostics(mt, labels)
        ok &= abs(diag.self_mass + diag.positive_mass + diag.negative_mass - 1.0) <= 1e-9
        if not ok:
            failures.append(case)
    elapsed = time.perf_counter() - started
    verdict(1, "matching algebra", not failures and elapsed < 60, f"{1000 - len(failures)}/1000 cases in {elapsed:.1f}s")


# ----------------------------------------------------------------------------
# 2. gradient oracle through the whole pipeline


def _tiny_batch(kind):
    if kind == "mlp":
        return generate(DatasetSpec(kind="gaussian", num_classes=2, num_instances=4, dim=5, seed=3)), 5
    return generate(DatasetSpec(kind="tokens", num_classes=2, num_instances=4, vocab=12, seq_len=4, rho=0.5, seed=3)), 12


def test_c02_gradient_oracle(verdict):
    started = time.perf_counter()
    worst = {}
    for kind in ("embedding-bag", "mlp", "attention-block"):
        batch, input_dim = _tiny_batch(kind)
        for mode in MatchMode:
            enc = EncoderConfig(kind=kind, input_dim=input_dim, hidden_dim=4, rep_dim=3, seed=1)
            cfg = TrainConfig(encoder=enc, match_mode=mode.value, temperature=0.7)
            model = init_model(cfg, 2)

            def loss():
                return ad.loss_ce(forward(model, batch, cfg).out, batch.labels)

            worst[(kind, mode.value)] = ad.finite_diff_check(loss, model.parameters())
    elapsed = time.perf_counter() - started
    top = max(worst.values())
    verdict(2, "gradient oracle", top < 1e-4 and elapsed < 60, f"max relative error {top:.2e} over {len(worst)} combos in {elapsed:.1f}s")


# ----------------------------------------------------------------------------
# 3. vanilla equals full with the matching matrix pinned to identity


def test_c03_drop_in_identity(verdict):
    data = generate(DatasetSpec(kind="gaussian", num_classes=3, num_instances=64, dim=8, seed=5))
    enc = EncoderConfig(kind="mlp", input_dim=8, hidden_dim=16, rep_dim=8, seed=5)
    configs = [
        TrainConfig(encoder=enc, match_mode="vanilla", lr=1e-2, seed=5),
        TrainConfig(encoder=enc, match_mode="full", force_identity=True, lr=1e-2, seed=5),
    ]
    trainers = [Trainer(init_model(c, 3), c, total_steps=100) for c in configs]
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        batch = data.subset(rng.choice(len(data), size=16, replace=False))
        for t in trainers:
            t.train_step(batch)
        a, b = (t.model.named_arrays() for t in trainers)
        worst = max(worst, max(float(np.max(np.abs(a[k] - b[k]))) for k in a))
    verdict(3, "drop-in identity", worst <= 1e-10, f"max parameter gap {worst:.1e} over 100 steps")


# ----------------------------------------------------------------------------
# 4 and 10. separable clusters: mass transition and loss curves

SEPARABLE = {
    "dataset": {"kind": "gaussian", "num_classes": 2, "num_instances": 400, "dim": 16, "separation": 4.0},
    "eval_instances": 200,
    "train": {
        "lr": 1e-2,
        "epochs": 5,
        "batch_size": 16,
        "encoder": {"kind": "mlp", "input_dim": 16, "hidden_dim": 32, "rep_dim": 16, "init_scale": 0.5},
    },
}


def _separable(tmp_path, mode):
    spec = {**SEPARABLE, "train": {**SEPARABLE["train"], "match_mode": mode}}
    cfg = experiment(tmp_path, f"separable-{mode}", **spec)
    run_dir, _ = run_experiment(cfg)
    assert main(["diagnose", str(run_dir)]) == 0
    return run_dir


def _table(path):
    import csv

    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    by_run = {}
    for r in rows:
        by_run.setdefault(r["run"], []).append(r)
    return by_run


@pytest.fixture(scope="module")
def separable_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("separable")
    started = time.perf_counter()
    runs = {mode: _separable(root, mode) for mode in ("vanilla", "full")}
    return runs, time.perf_counter() - started


def test_c04_interpolation_transition(verdict, separable_runs):
    runs, elapsed = separable_runs
    mass = _table(runs["full"] / "diagnostics" / "mass.csv")
    details, wins = [], 0
    for run, rows in sorted(mass.items()):
        neg = smooth([float(r["negative"]) for r in rows])
        tenth = max(1, len(neg) // 10)
        first, last = neg[:tenth].mean(), neg[-tenth:].mean()
        wins += last < first
        details.append(f"{first:.3f}->{last:.3f}")
    verdict(4, "negative-mass transition", wins == SEEDS and elapsed < 120, f"{wins}/{SEEDS} seeds [{', '.join(details)}], {elapsed:.0f}s")


def test_c10_loss_curves(verdict, separable_runs):
    runs, _ = separable_runs
    final = {}
    for mode, run_dir in runs.items():
        loss = _table(run_dir / "diagnostics" / "loss.csv")
        final[mode] = {run: smooth([float(r["loss"]) for r in rows])[-1] for run, rows in loss.items()}
    wins = sum(final["full"][r] <= final["vanilla"][r] for r in final["full"])
    detail = ", ".join(f"{final['full'][r]:.2e}/{final['vanilla'][r]:.2e}" for r in sorted(final["full"]))
    verdict(10, "final smoothed loss full <= vanilla", wins >= 4, f"{wins}/{SEEDS} seeds (full/vanilla: {detail})")


# ----------------------------------------------------------------------------
# 5 and 6. label noise and minority-class trends

NOISY = {
    "dataset": {"kind": "gaussian", "num_classes": 2, "num_instances": 400, "dim": 16, "separation": 1.5},
    "eval_instances": 1000,
    "train": {
        "lr": 1e-2,
        "epochs": 20,
        "batch_size": 16,
        "encoder": {"kind": "mlp", "input_dim": 16, "hidden_dim": 64, "rep_dim": 16, "init_scale": 0.5},
    },
}


def _mean(tmp_path, name, mode, metric, corruption=None):
    spec = {**NOISY, "train": {**NOISY["train"], "match_mode": mode}, "corruption": corruption or {}}
    _, summary = run_experiment(experiment(tmp_path, name, **spec))
    assert summary["failed"] == 0
    return 100 * summary["mean"][metric]


def test_c05_label_noise_trend(verdict, tmp_path):
    started = time.perf_counter()
    acc = {
        (mode, noise): _mean(tmp_path, f"noise-{mode}-{noise}", mode, "accuracy", {"noise_ratio": noise})
        for mode, noise in itertools.product(("vanilla", "full"), (0.0, 0.1))
    }
    elapsed = time.perf_counter() - started
    drop = {m: acc[(m, 0.0)] - acc[(m, 0.1)] for m in ("vanilla", "full")}
    ok = acc[("full", 0.1)] >= acc[("vanilla", 0.1)] - 0.5 and drop["full"] <= drop["vanilla"] + 0.5
    verdict(
        5,
        "label-noise trend",
        ok and elapsed < 300,
        f"noisy acc full {acc[('full', 0.1)]:.2f} vs vanilla {acc[('vanilla', 0.1)]:.2f}; "
        f"degradation full {drop['full']:.2f} vs vanilla {drop['vanilla']:.2f}; {elapsed:.0f}s",
    )


def test_c06_minority_trend(verdict, tmp_path):
    started = time.perf_counter()
    corruption = {"minority_label": 1, "keep_ratio": 0.3}
    acc = {mode: _mean(tmp_path, f"minority-{mode}", mode, "class_1_accuracy", corruption) for mode in ("vanilla", "full")}
    elapsed = time.perf_counter() - started
    verdict(
        6,
        "minority-class trend",
        acc["full"] >= acc["vanilla"] and elapsed < 300,
        f"minority acc full {acc['full']:.2f} vs vanilla {acc['vanilla']:.2f}; {elapsed:.0f}s",
    )


# ----------------------------------------------------------------------------
# 7. group robustness on the spurious-cue token task

GROUPS = {
    "dataset": {"kind": "tokens", "num_classes": 2, "num_instances": 1000, "vocab": 256, "seq_len": 8, "rho": 0.9},
    "eval_instances": 1000,
    "train": {
        "lr": 1e-2,
        "epochs": 10,
        "batch_size": 16,
        "groupdro_eta": 0.01,
        "encoder": {"kind": "embedding-bag", "input_dim": 256, "hidden_dim": 64, "rep_dim": 64, "init_scale": 1.0},
    },
}


def test_c07_group_robustness(verdict, tmp_path):
    started = time.perf_counter()
    worst = {}
    for objective, mode in (("erm", "vanilla"), ("groupdro", "vanilla"), ("groupdro", "full")):
        spec = {**GROUPS, "train": {**GROUPS["train"], "objective": objective, "match_mode": mode}}
        _, summary = run_experiment(experiment(tmp_path, f"groups-{objective}-{mode}", **spec))
        worst[(objective, mode)] = 100 * summary["mean"]["worst_group_accuracy"]
    elapsed = time.perf_counter() - started
    gain = worst[("groupdro", "vanilla")] - worst[("erm", "vanilla")]
    delta = worst[("groupdro", "full")] - worst[("groupdro", "vanilla")]
    verdict(
        7,
        "group robustness",
        gain >= 2.0 and delta >= -0.5 and elapsed < 300,
        f"worst-group ERM {worst[('erm', 'vanilla')]:.2f}, GroupDRO {worst[('groupdro', 'vanilla')]:.2f} "
        f"(gain {gain:+.2f}, need >= 2), GroupDRO+Full {worst[('groupdro', 'full')]:.2f} "
        f"(delta {delta:+.2f}, need >= -0.5); {elapsed:.0f}s",
    )


# ----------------------------------------------------------------------------
# 8. attack harness exactness


def test_c08_attack_exactness(verdict):
    data = generate(DatasetSpec(kind="tokens", num_classes=2, num_instances=64, vocab=32, seq_len=6, rho=0.9, seed=1))
    cfg = TrainConfig(encoder=EncoderConfig(kind="attention-block", input_dim=32, hidden_dim=8, rep_dim=8), epochs=2, lr=1e-2)
    model = fit(data, None, cfg).model
    robust, clean = robust_accuracy(model, data, AttackConfig(kind="pgd", epsilon=0.0, steps=3))
    ok = robust == clean
    eps = 0.05
    pgd = attack_batch(model, data, AttackConfig(kind="pgd", epsilon=eps, steps=7, step_size=0.02, random_start=True, seed=3))
    ok &= bool(np.all(np.abs(pgd.delta) <= eps) and np.array_equal(pgd.perturbed, pgd.clean + pgd.delta))
    fgsm = attack_batch(model, data, AttackConfig(kind="fgsm", epsilon=eps))
    ok &= bool(np.all(np.abs(fgsm.delta) <= eps) and np.array_equal(fgsm.perturbed, fgsm.clean + fgsm.delta))
    single = attack_batch(model, data, AttackConfig(kind="pgd", epsilon=eps, steps=1))
    ok &= np.array_equal(single.perturbed, fgsm.perturbed)
    verdict(8, "attack exactness", ok, f"eps=0 robust {robust:.4f} == clean {clean:.4f}; ball and pgd1==fgsm checked")


# ----------------------------------------------------------------------------
# 9. overhead of matching per epoch


def test_c09_overhead(verdict):
    data = generate(DatasetSpec(kind="tokens", num_classes=2, num_instances=4096, vocab=256, seq_len=16, rho=0.9, seed=0))
    enc = EncoderConfig(kind="attention-block", input_dim=256, hidden_dim=64, rep_dim=64, init_scale=0.5)
    cfgs = {mode: TrainConfig(encoder=enc, match_mode=mode, epochs=1, batch_size=16, lr=1e-3) for mode in ("vanilla", "full")}
    for cfg in cfgs.values():
        fit(data, None, cfg)  # untimed warm-up
    # each round times one epoch of each mode back to back, alternating which goes first, and the
    # criterion uses the median of the per-round ratios so drift in machine speed cancels within a pair
    ratios, times = [], {"vanilla": [], "full": []}
    for r in range(3):
        for mode in (("vanilla", "full") if r % 2 == 0 else ("full", "vanilla")):
            times[mode].extend(fit(data, None, cfgs[mode]).epoch_seconds)
        ratios.append(times["full"][-1] / times["vanilla"][-1])
    ratio = float(np.median(ratios))
    medians = {mode: float(np.median(t)) for mode, t in times.items()}
    verdict(9, "matching overhead", ratio <= 1.15, f"full/vanilla epoch time {ratio:.3f} ({medians['full']:.2f}s vs {medians['vanilla']:.2f}s)")


# ----------------------------------------------------------------------------
# 11. metrics against brute force


def _brute_counts(p, y):
    tp = fp = fn = tn = 0
    for a, b in zip(p, y):
        if a == 1 and b == 1:
            tp += 1
        elif a == 1:
            fp += 1
        elif b == 1:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def _brute_f1(p, y):
    tp, fp, fn, _ = _brute_counts(p, y)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def _brute_mcc(p, y):
    tp, fp, fn, tn = _brute_counts(p, y)
    den = ((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)) ** 0.5
    return (tp * tn - fp * fn) / den if den else 0.0


def _brute_ranks(x):
    # average rank of ties, 1-based, by direct counting
    return [sum(v < xi for v in x) + (sum(v == xi for v in x) + 1) / 2 for xi in x]


def _brute_spearman(a, b):
    ra, rb = _brute_ranks(list(a)), _brute_ranks(list(b))
    ma, mb = sum(ra) / len(ra), sum(rb) / len(rb)
    cov = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    va = sum((x - ma) ** 2 for x in ra)
    vb = sum((y - mb) ** 2 for y in rb)
    return cov / (va * vb) ** 0.5 if va and vb else 0.0


def test_c11_metric_brute_force(verdict):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        p, y = rng.integers(0, 2, n), rng.integers(0, 2, n)
        a = rng.integers(0, 6, n).astype(float) if rng.random() < 0.5 else rng.standard_normal(n)
        b = rng.integers(0, 6, n).astype(float) if rng.random() < 0.5 else rng.standard_normal(n)
        worst = max(
            worst,
            abs(f1(p, y) - _brute_f1(p, y)),
            abs(matthews(p, y) - _brute_mcc(p, y)),
            abs(spearman(a, b) - _brute_spearman(a, b)),
        )
    verdict(11, "metric brute force", worst <= 1e-12, f"max disagreement {worst:.1e} over 1000 vectors")


# ----------------------------------------------------------------------------
# 12. determinism of the train command


def test_c12_determinism(verdict, tmp_path):
    config = tmp_path / "exp.yaml"
    config.write_text(
        """
name: det
repeat: 2
dataset: {kind: tokens, num_classes: 2, num_instances: 96, vocab: 40, seq_len: 6, rho: 0.8}
eval_instances: 32
corruption: {noise_ratio: 0.1}
train:
  match_mode: full
  epochs: 2
  r3f_lambda: 0.5
  r3f_sigma: 0.01
  encoder: {kind: attention-block, input_dim: 40, hidden_dim: 8, rep_dim: 8}
"""
    )
    dirs = []
    for out in ("a", "b"):
        assert main(["train", "--config", str(config), "--out", str(tmp_path / out)]) == 0
        dirs.append(next((tmp_path / out).glob("det-*")))
    logs = [sorted(d.glob("seed-*/metrics.jsonl")) for d in dirs]
    same = len(logs[0]) == 2 and all(a.read_bytes() == b.read_bytes() for a, b in zip(*logs))
    verdict(12, "determinism", same, f"{len(logs[0])} metrics logs compared byte for byte")
