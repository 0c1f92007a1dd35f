"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]`` or ``[FAIL]`` line with its wall-clock time. The
synthetic-training criterion trains three models with the default toy configuration;
the encoder-reuse and dynamic-sampling criteria reuse those models.
"""

import math
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from diffner.config import TrainConfig
from diffner.corpus import SpanCodec, SyntheticSpec, discretize_spans, encode_boundaries, make_synthetic_corpus
from diffner.corpus import Entity
from diffner.errors import ValidationError
from diffner.evaluation import sweep_gamma, sweep_keval
from diffner.matching import hungarian_match
from diffner.sampler import SamplerConfig, predict
from diffner.schedule import ddim_step, ddim_update, forward_diffuse, make_schedule, make_tau
from diffner.trainer import train
from oracles import GoldOracle, brute_force_match, central_differences, forward_chain, output_from_probs
from oracles import relative_error
from tiny import loss_closure, tiny_model, tiny_problem

SEEDS = (0, 1, 2)


@contextmanager
def criterion(capsys, name, budget_s):
    start = time.perf_counter()
    ok = False
    try:
        yield
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        within = elapsed <= budget_s
        with capsys.disabled():
            status = "PASS" if ok and within else "FAIL"
            print(f"\n[{status}] {name} ({elapsed:.1f}s, budget {budget_s:.0f}s)")
    assert within, f"{name}: {elapsed:.1f}s exceeds the {budget_s:.0f}s budget"


def test_diffusion_math(capsys):
    with criterion(capsys, "diffusion math: chain vs closed form, DDIM identities, tau plan", 60):
        n = 10_000
        x0 = np.array([0.3, -0.8])
        for kind in ("linear", "cosine"):
            sched = make_schedule(kind, 1000)
            for t in (1, 100, 500, 1000):
                ab = sched.alpha_bar[t]
                mean, var = math.sqrt(ab) * x0, 1.0 - ab
                mean_se, var_se = math.sqrt(var / n), var * math.sqrt(2.0 / (n - 1))
                chain = forward_chain(x0, t, sched, np.random.default_rng(t), n)
                eps = np.random.default_rng(t + 7).standard_normal((n, 2))
                closed = forward_diffuse(np.broadcast_to(x0, (n, 2)), t, eps, sched)
                for sample in (chain, closed):
                    assert np.all(np.abs(sample.mean(0) - mean) <= 3 * mean_se)
                    assert np.all(np.abs(sample.var(0, ddof=1) - var) <= 3 * var_se)

        rng = np.random.default_rng(0)
        x, x0_hat = rng.normal(size=(60, 2)), rng.normal(size=(60, 2))
        for ab in (0.9, 0.3, 1e-4):
            assert np.max(np.abs(ddim_update(x, x0_hat, ab, ab) - x)) <= 1e-9
        sched = make_schedule("cosine", 1000)
        x0_true = rng.uniform(-1, 1, size=(60, 2))
        eps = rng.normal(size=(60, 2))
        x_t = forward_diffuse(x0_true, 700, eps, sched)
        assert np.max(np.abs(ddim_step(x_t, x0_true, 700, 0, sched) - x0_true)) <= 1e-9

        for gamma in (1, 5, 10):
            tau = make_tau(1000, gamma).tau
            assert len(tau) == gamma and tau[-1] == 1000 and tau[0] >= 1
            assert all(a < b for a, b in zip(tau, tau[1:]))


def test_codec(capsys):
    with criterion(capsys, "codec: exhaustive round trip and adversarial inputs", 60):
        for scale in (1.0, 2.0):
            for M in range(1, 31):
                codec = SpanCodec(M, scale)
                ents = [Entity(l, r, 0) for l in range(M) for r in range(l, M)]
                x = np.array([encode_boundaries(e, codec) for e in ents])
                back = discretize_spans(x, codec)
                assert back.tolist() == [[e.l, e.r] for e in ents]
        codec = SpanCodec(7, 1.0)
        with pytest.raises(ValidationError):
            discretize_spans(np.array([[np.nan, 0.0]]), codec)
        wild = discretize_spans(np.array([[1e9, -1e9], [-1e9, 1e9], [np.inf, -np.inf]]), codec)
        assert wild.tolist() == [[0, 6], [0, 6], [0, 6]]


def test_matching_oracle(capsys):
    with criterion(capsys, "matching: Hungarian cost equals brute force on 200 instances", 60):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            K = int(rng.integers(1, 7))
            N = int(rng.integers(0, K + 1))
            M, C = int(rng.integers(1, 8)), 3
            p_left, p_right = rng.uniform(size=(K, M)), rng.uniform(size=(K, M))
            p_type = rng.dirichlet(np.ones(C + 1), size=K)
            gold = []
            for _ in range(N):
                l = int(rng.integers(M))
                gold.append(Entity(l, int(rng.integers(l, M)), int(rng.integers(C))))
            m = hungarian_match(output_from_probs(p_left, p_right, p_type), gold)
            best, _ = brute_force_match(p_left, p_right, p_type, gold)
            assert m.total_cost == best


def test_gradient_check(capsys):
    with criterion(capsys, "gradient check: tiny denoiser vs central differences", 300):
        model = tiny_model()
        sentence, gold, x_t = tiny_problem()
        assert (sentence.M, x_t.shape[-2], model.config.hidden_size, model.config.num_types) == (6, 3, 8, 2)
        loss = loss_closure(model, sentence, gold, x_t)
        params = list(model.parameters())
        model.zero_grad()
        loss().backward()
        analytic = [p.grad.clone() for p in params]
        numeric = central_differences(params, loss)
        errors = {n: relative_error(a, b) for (n, _), a, b in zip(model.named_parameters(), analytic, numeric)}
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-4, (worst, errors[worst])


def test_oracle_end_to_end(capsys):
    with criterion(capsys, "oracle end-to-end: gold set recovered at phi in {0, 2.5}", 60):
        data = make_synthetic_corpus(SyntheticSpec(n_sentences=100, seed=77, nesting_rate=0.3))
        sched = make_schedule("cosine", 1000)
        for phi in (0.0, 2.5):
            oracle = GoldOracle({ex.sentence.id: ex.entities for ex in data}, len(data.labels))
            preds = predict(oracle, [ex.sentence for ex in data], SamplerConfig(phi=phi, seed=5), sched, 1.0)
            for ex, p in zip(data, preds):
                assert {c.entity for c in p} == set(ex.entities)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Three seeds of the default toy configuration on the synthetic corpus."""
    train_data = make_synthetic_corpus(SyntheticSpec(n_sentences=2000, seed=1, id_prefix="train"))
    dev = make_synthetic_corpus(SyntheticSpec(n_sentences=300, seed=2, id_prefix="dev"))
    runs, start = [], time.perf_counter()
    for seed in SEEDS:
        cfg = TrainConfig(seed=seed)
        result = train(cfg, train_data, tmp_path_factory.mktemp(f"seed{seed}"), dev=dev)
        runs.append((cfg, result))
    return {"runs": runs, "dev": dev, "seconds": time.perf_counter() - start}


def test_synthetic_training(trained, capsys):
    cfg = trained["runs"][0][0]
    assert (cfg.num_spans, cfg.timesteps, cfg.sampling_steps, cfg.threshold) == (60, 1000, 5, 2.5)
    scores = [result.best_f1 for _, result in trained["runs"]]
    mean = float(np.mean(scores))
    ok = mean >= 0.90 and trained["seconds"] <= 30 * 60
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] synthetic training: mean dev F1 {mean:.4f} over seeds {SEEDS} "
              f"(per seed {[round(s, 4) for s in scores]}), {trained['seconds'] / 60:.1f} min for three runs")
    assert mean >= 0.90
    assert trained["seconds"] <= 30 * 60


def _best_model(result):
    from diffner.checkpoint import load_checkpoint

    return load_checkpoint(result.checkpoint)[0]


def test_encoder_reuse_and_efficiency(trained, capsys):
    cfg, result = trained["runs"][0]
    dev = trained["dev"]
    model = _best_model(result)
    sched = make_schedule(cfg.scheduler, cfg.timesteps)
    sampler = cfg.sampler_config()

    calls = {"n": 0}
    original = model.encode

    def counting(sentences):
        calls["n"] += len(sentences)
        return original(sentences)

    model.encode = counting
    counts = {}
    for gamma in (1, 5, 10):
        calls["n"] = 0
        predict(model, [ex.sentence for ex in dev], replace(sampler, gamma=gamma), sched, cfg.scale_factor,
                batch_size=cfg.eval_batch_size)
        counts[gamma] = calls["n"] / len(dev)
    model.encode = original

    rows = sweep_gamma(model, dev, [1, 10], sampler, sched, cfg.scale_factor, cfg.eval_batch_size, repeats=3)
    ratio = rows[1]["seconds"] / rows[0]["seconds"]
    ok = all(c == 1 for c in counts.values()) and ratio <= 2.5
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] encoder reuse: calls per sentence {counts}; "
              f"wall-clock gamma=10 / gamma=1 = {ratio:.2f} (limit 2.5)")
    assert all(c == 1 for c in counts.values()), counts
    assert ratio <= 2.5, rows


def test_dynamic_sampling(trained, capsys):
    recalls = {10: [], 60: [], 300: []}
    for cfg, result in trained["runs"]:
        model = _best_model(result)
        sched = make_schedule(cfg.scheduler, cfg.timesteps)
        rows = sweep_keval(model, trained["dev"], list(recalls), cfg.sampler_config(), sched, cfg.scale_factor,
                           cfg.eval_batch_size)
        for row in rows:
            recalls[row["k_eval"]].append(row["recall"])
    mean = {k: float(np.mean(v)) for k, v in recalls.items()}
    ok = mean[300] >= mean[10]
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] dynamic sampling: mean recall by K_eval "
              f"{ {k: round(v, 4) for k, v in mean.items()} }")
    assert mean[300] >= mean[10]
