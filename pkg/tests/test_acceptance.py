"""End-to-end acceptance checks. Each test records one PASS/FAIL line.

The benchmark criteria (4, 5, 8) train full models and dominate the runtime
of the suite (roughly half an hour on one core).
"""

import itertools
import json
import math
import time

import mpmath
import numpy as np
import pytest

from oracles import ari_oracle, auroc_oracle, f1_oracle, nmi_oracle, set_partitions

from protoncd.cli import main as cli_main
from protoncd.data import ToyImageConfig, dumps_dataset, pool_anomaly_map, synth_toy_images, synth_vmf_mixture
from protoncd.discovery import auroc, cluster_eval, estimate_k_new, evaluate_model, evaluate_ood, hungarian, ood_score
from protoncd.encoder import EncoderConfig, RegionGuidanceParams, build_guidance_vector, encoder_forward, init_encoder
from protoncd.losses import refine_pseudo_label
from protoncd.numerics import normalize_unit, softmax, validate_simplex, vmf_log_normalizer
from protoncd.protohead import PrototypeSet, vmf_posterior
from protoncd.trainer import (
    TrainConfig,
    batch_objective,
    benchmark_config,
    checkpoint_to_json,
    estimation_config,
    make_batch_views,
    prepare,
    sample_batch,
    train,
)

SEEDS = range(10)
MIN_PASSING = 8


def benchmark_dataset(seed, n_ood_classes=0):
    return synth_vmf_mixture(5, 16, 20.0, 200, seed=seed, k_base=3, include_normal=True, n_ood_classes=n_ood_classes)


# ---------------------------------------------------------------------------
# 1. gradient fidelity
# ---------------------------------------------------------------------------


def _fd_batch(state, data, idx, views, cfg, rng, per_array=2, step=1e-6):
    """Worst error ratio |fd - analytic| / tol over sampled coordinates."""
    _, enc_grads, dmu = batch_objective(state, data, idx, views, cfg)
    targets = [(state.student.arrays[k], enc_grads[k]) for k in sorted(state.student.arrays)]
    targets.append((state.student_protos.mu, dmu))
    worst, checked = 0.0, 0
    for arr, grad in targets:
        flat = arr.reshape(-1)
        for j in rng.choice(flat.size, min(per_array, flat.size), replace=False):
            orig = flat[j]
            flat[j] = orig + step
            up = batch_objective(state, data, idx, views, cfg)[0].value
            flat[j] = orig - step
            down = batch_objective(state, data, idx, views, cfg)[0].value
            flat[j] = orig
            fd = (up - down) / (2 * step)
            tol = max(1e-4 * abs(fd), 1e-6)
            worst = max(worst, abs(fd - grad.reshape(-1)[j]) / tol)
            checked += 1
    return worst, checked


def test_criterion_1_gradient_fidelity(acceptance):
    t0 = time.perf_counter()
    ds = synth_toy_images(3, 8, seed=0, config=ToyImageConfig(n_per_class=6))
    cfg = TrainConfig(k_new=1, batch_size=6, layers=2, d_model=32)
    ckpt, _ = train(ds, cfg, max_steps=3)
    data = prepare(ds, 1)
    rng = np.random.default_rng(1)
    ratios, total = [], 0
    for _ in range(5):
        idx = sample_batch(data, cfg.batch_size, rng)
        views = make_batch_views(data, idx, cfg, rng)
        worst, n = _fd_batch(ckpt.state, data, idx, views, cfg, rng)
        ratios.append(worst)
        total += n
    elapsed = time.perf_counter() - t0
    ok = max(ratios) <= 1.0 and elapsed < 120
    acceptance(1, ok, f"5 batches, {total} coordinates, worst err/tol {max(ratios):.3f}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. vMF consistency
# ---------------------------------------------------------------------------


def test_criterion_2_vmf_consistency(acceptance):
    worst_ratio = 0.0
    for d in (3, 8):
        rng = np.random.default_rng(d)
        protos = PrototypeSet(normalize_unit(rng.normal(size=(5, d))), 2, 2)
        for tau in (0.05, 0.3, 2.0):
            kappa = 1 / tau
            z = normalize_unit(rng.normal(size=(50, d)))
            logdens = vmf_log_normalizer(d, kappa) + kappa * z @ protos.mu.T
            ratio = np.exp(logdens - logdens.max(axis=1, keepdims=True))
            ratio /= ratio.sum(axis=1, keepdims=True)
            worst_ratio = max(worst_ratio, float(np.abs(vmf_posterior(z, protos, tau) - ratio).max()))
    worst_sinh = 0.0
    for kappa in (1e-3, 0.5, 1.0, 5.0, 20.0, 49.0, 60.0, 200.0):
        with mpmath.workdps(50):
            ref = float(mpmath.log(kappa / (4 * mpmath.pi * mpmath.sinh(kappa))))
        worst_sinh = max(worst_sinh, abs(vmf_log_normalizer(3, kappa) - ref))
    rng = np.random.default_rng(11)
    z = normalize_unit(rng.normal(size=(400_000, 3)))
    mc = max(
        abs(4 * math.pi * np.exp(vmf_log_normalizer(3, k) + k * z[:, 2]).mean() - 1.0) for k in (1.0, 5.0, 20.0)
    )
    ok = worst_ratio <= 1e-9 and worst_sinh <= 1e-9 and mc <= 1e-2
    acceptance(2, ok, f"density ratio {worst_ratio:.1e}, sinh form {worst_sinh:.1e}, Monte Carlo {mc:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 3. metric oracles
# ---------------------------------------------------------------------------


def _truth_profiles(n):
    """Sorted truth labelings, one per ordered block-size profile."""
    out = []
    for k in (1, 2, 3):
        for sizes in np.ndindex(*([n] * k)):
            sizes = [s + 1 for s in sizes]
            if sum(sizes) == n:
                out.append(tuple(b for b, m in enumerate(sizes) for _ in range(m)))
    return out


def test_criterion_3_metric_oracles(acceptance):
    # n <= 6: every (truth, prediction) pair of partitions. n = 7, 8: every
    # prediction partition against every block-size profile of the truth,
    # which reaches every contingency table up to a permutation of the items.
    worst, pairs = 0.0, 0
    for n in range(1, 9):
        parts = set_partitions(n, 3)
        truths = parts if n <= 6 else _truth_profiles(n)
        for t in truths:
            for p in parts:
                ev = cluster_eval(t, p)
                worst = max(
                    worst,
                    abs(ev.nmi - nmi_oracle(t, p)),
                    abs(ev.ari - ari_oracle(t, p)),
                    abs(ev.f1 - f1_oracle(t, p)),
                )
                pairs += 1
    rng = np.random.default_rng(1)
    perms = np.array(list(itertools.permutations(range(7))))
    hung = 0.0
    for _ in range(200):
        c = rng.normal(size=(7, 7))
        best = c[np.arange(7), perms].sum(axis=1).min()
        hung = max(hung, abs(sum(c[i, j] for i, j in hungarian(c)) - best))
    au = 0.0
    for _ in range(200):
        n = int(rng.integers(4, 40))
        s = rng.integers(0, 8, n).astype(float)
        f = rng.uniform(size=n) < 0.5
        f[0], f[1] = True, False
        au = max(au, abs(auroc(s, f) - auroc_oracle(s, f)))
    ok = worst <= 1e-10 and hung <= 1e-9 and au <= 1e-12
    acceptance(3, ok, f"{pairs} partition pairs max err {worst:.1e}; Hungarian {hung:.1e}; AUROC {au:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 4. synthetic discovery benchmark
# ---------------------------------------------------------------------------


def test_criterion_4_discovery_benchmark(acceptance):
    passed, rows = 0, []
    slowest = 0.0
    for seed in SEEDS:
        ds = benchmark_dataset(seed)
        cfg = benchmark_config(seed)
        t0 = time.perf_counter()
        ckpt, _ = train(ds, cfg)
        slowest = max(slowest, time.perf_counter() - t0)
        m = evaluate_model(ckpt.state, ds, cfg)
        good = m["accuracy_novel"] >= 0.9 and m["nmi"] >= 0.85
        passed += good
        rows.append(f"{seed}:{m['accuracy_novel']:.3f}/{m['nmi']:.3f}")
    ok = passed >= MIN_PASSING and slowest < 300
    acceptance(4, ok, f"{passed}/10 seeds pass, slowest {slowest:.0f}s; seed:novel_acc/nmi " + " ".join(rows))
    assert ok


# ---------------------------------------------------------------------------
# 5. class-count estimation
# ---------------------------------------------------------------------------


def test_criterion_5_class_count_estimation(acceptance):
    hits, chosen_all = 0, []
    for seed in SEEDS:
        _, chosen = estimate_k_new(benchmark_dataset(seed), range(1, 7), estimation_config(seed))
        hits += chosen == 2
        chosen_all.append(chosen)
    ok = hits >= MIN_PASSING
    acceptance(5, ok, f"true k_new chosen in {hits}/10 seeds; choices {chosen_all}")
    assert ok


# ---------------------------------------------------------------------------
# 6. region guidance semantics
# ---------------------------------------------------------------------------


def test_criterion_6_region_guidance(acceptance):
    rg = RegionGuidanceParams()
    literal = RegionGuidanceParams(high_branch="paper_literal")
    enc = init_encoder(EncoderConfig(d_in=8), 0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 64, 8))

    plain, _ = encoder_forward(enc, x, None, rg, keep_cache=False)
    zero, _ = encoder_forward(enc, x, np.zeros((3, 64)), rg, keep_cache=False)
    bit_identical = np.array_equal(plain.z, zero.z) and np.array_equal(plain.attention_cls, zero.attention_cls)

    scores = rng.uniform(0, 0.7, size=(3, 64))
    scores[:, 5] = 0.8
    scores[:, 9] = 1.0
    out, _ = encoder_forward(enc, x, build_guidance_vector(scores, literal), literal, keep_cache=False)
    masked = np.all(out.attention_cls[:, :, 6] == 0.0) and np.all(out.attention_cls[:, :, 10] == 0.0)

    eps = 1e-12
    g = lambda s: float(build_guidance_vector(np.array([s]), rg)[0])  # noqa: E731
    continuous = abs(g(rg.tau1) - g(rg.tau1 - eps)) < 1e-9
    band = np.linspace(rg.tau1, rg.tau2 - 1e-9, 200)
    monotone = bool(np.all(np.diff([g(s) for s in band]) > 0))

    toy = synth_toy_images(3, 8, seed=0, config=ToyImageConfig(n_per_class=10))
    anomalous = [s for s in toy.samples if s.gt_label != toy.normal_label]
    xt = np.stack([s.patches.reshape(64, -1) for s in anomalous])
    pooled = np.stack([pool_anomaly_map(s.anomaly_map, 8) for s in anomalous])
    on = pooled >= rg.tau1
    mass = lambda o: float((o.attention_cls.mean(axis=1)[:, 1:] * on).sum(axis=1).mean())  # noqa: E731
    m_plain = mass(encoder_forward(enc, xt, None, rg, keep_cache=False)[0])
    m_guided = mass(encoder_forward(enc, xt, build_guidance_vector(pooled, rg), rg, keep_cache=False)[0])

    ok = bit_identical and masked and continuous and monotone and m_guided > m_plain
    acceptance(
        6, ok,
        f"bit-identical {bit_identical}, literal mask {masked}, continuous {continuous}, monotone {monotone}, "
        f"anomaly attention {m_plain:.4f} -> {m_guided:.4f}",
    )
    assert ok


# ---------------------------------------------------------------------------
# 7. pseudo-label correction
# ---------------------------------------------------------------------------


def test_criterion_7_plc(acceptance):
    rng = np.random.default_rng(0)
    q = softmax(rng.normal(size=(10_000, 6)) * 3)
    identity = all(np.array_equal(refine_pseudo_label(q[:100], s, 5), q[:100]) for s in (0.5, 0.75, 1.0))
    out = refine_pseudo_label(q, rng.uniform(size=10_000), 5)
    try:
        validate_simplex(out)
        simplex = True
    except Exception:
        simplex = False
    grid = np.linspace(0.5, 0.0, 101)
    mass = np.stack([refine_pseudo_label(q[:500], s, 5)[:, 5] for s in grid])
    monotone = bool(np.all(np.diff(mass, axis=0) > 0))
    ok = identity and simplex and monotone
    acceptance(7, ok, f"identity {identity}, 10^4 simplices {simplex}, monotone normal mass {monotone}")
    assert ok


# ---------------------------------------------------------------------------
# 8. OOD extension
# ---------------------------------------------------------------------------


def test_criterion_8_ood(acceptance):
    rng = np.random.default_rng(0)
    lg = rng.normal(size=(20, 5)) * 4
    closed = 0.0
    with mpmath.workdps(50):
        for row in lg:
            ex = [mpmath.e ** mpmath.mpf(v) for v in row]
            closed = max(closed, abs(ood_score(row, "msp") - float(max(ex) / mpmath.fsum(ex))))
            closed = max(closed, abs(ood_score(row, "mls") - float(max(row))))
            ref = 2 * mpmath.log(mpmath.fsum(mpmath.e ** (mpmath.mpf(v) / 2) for v in row))
            closed = max(closed, abs(ood_score(row, "energy", 2.0) - float(ref)))

    ds = benchmark_dataset(0, n_ood_classes=1)
    cfg = benchmark_config(0)
    ckpt, _ = train(ds, cfg)
    results = {r.method: r.auroc for r in evaluate_ood(ckpt.state, ds, cfg)}
    ok = closed <= 1e-12 and all(v >= 0.8 for v in results.values())
    detail = ", ".join(f"{k} auroc {v:.3f}" for k, v in results.items())
    acceptance(8, ok, f"{detail}; closed-form max err {closed:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------


def test_criterion_9_determinism(acceptance, tmp_path, monkeypatch):
    datasets = dumps_dataset(benchmark_dataset(4)) == dumps_dataset(benchmark_dataset(4))
    toy = dumps_dataset(synth_toy_images(3, 8, seed=2)) == dumps_dataset(synth_toy_images(3, 8, seed=2))

    ds = benchmark_dataset(4)
    cfg = benchmark_config(4, epochs=3)
    a, _ = train(ds, cfg)
    b, _ = train(ds, cfg)
    ckpts = checkpoint_to_json(a) == checkpoint_to_json(b)
    half, rows = train(ds, cfg, max_steps=11)
    resumed, _ = train(ds, cfg, resume=half, log_rows=rows)
    resume_ok = checkpoint_to_json(resumed) == checkpoint_to_json(a)

    monkeypatch.chdir(tmp_path)
    cli_main(["synth", "vmf", "--classes", "4", "--dim", "8", "--kappa", "20", "--per-class", "20",
              "--k-base", "2", "--include-normal", "--seed", "5", "--out-dir", "data", "--name", "d"])
    train_cfg = {"epochs": 3, "k_new": 2, "d_model": 16, "d_h": 8}
    (tmp_path / "exp.json").write_text(json.dumps({"dataset": "data/d.jsonl", "output_dir": "run", "train": train_cfg}))
    snapshots = []
    for _ in range(2):
        assert cli_main(["train", "exp.json"]) == 0
        snapshots.append({p: (tmp_path / "run" / p).read_bytes() for p in ("report.json", "checkpoint.json")})
    reports = snapshots[0] == snapshots[1]

    ok = datasets and toy and ckpts and resume_ok and reports
    acceptance(
        9, ok, f"datasets {datasets and toy}, checkpoints {ckpts}, resume {resume_ok}, reports {reports}"
    )
    assert ok
