"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line."""
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from oracles import (
    ap_at_k,
    brute_pdbscan,
    central_difference,
    margins_valid,
    rel_error,
)
from test_mining import random_instance
from test_model import SMALL, check_whole_gradient
from photorec.attention import (
    attention_weights,
    build_stack,
    init_attention,
    pool,
    pool_entities,
    pool_entities_backward,
    stack_layout,
)
from photorec.benchmark import s1_run
from photorec.cli import main
from photorec.encoder import encode, encode_backward, init_encoder
from photorec.evaluation import average_precision_at_k, map_at_k
from photorec.metric import (
    ADJACENT_MARGIN,
    ROLES,
    LevelOrder,
    MarginSet,
    mine_quintuplets,
    quintuplet_loss,
    quintuplet_loss_backward,
    validate_margins,
)
from photorec.mining import DEFAULT_TTHR, ClusterConfig, pdbscan
from photorec.model import TrainingConfig
from photorec.wmf import WmfConfig, factorize


def test_criterion_1_margins_and_quintuplet_zero_set(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    grid = np.array([-0.1, 0.0, 0.05, 0.1, 0.2, 0.3, 0.4])
    agree = 0
    for t in range(1000):
        m = rng.choice(grid, size=6) if t % 2 else rng.uniform(-0.05, 0.5, size=6)
        agree += (validate_margins(MarginSet(*m)) is None) == margins_valid(m)
    zero_cases = iff = 0
    for _ in range(1000):
        m = np.sort(rng.uniform(0.02, 0.3, size=3))
        m45 = np.sort(rng.uniform(0.02, 0.3, size=2))
        margins = MarginSet(m[0], m[1], m[2], m45[0], m45[1], rng.uniform(0.02, 0.3))
        dist = np.cumsum(np.concatenate([[rng.uniform(0, 0.5)], rng.uniform(0, 0.45, size=3)]))
        dirs = rng.normal(size=(4, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        F = np.vstack([np.zeros(3), np.sqrt(dist)[:, None] * dirs])
        F += rng.normal(scale=1e-3, size=3)  # anchor away from the origin
        d = ((F[1:] - F[0]) ** 2).sum(axis=1)
        mv = margins.as_array()
        pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
        holds = all(d[i] + mv[k] <= d[j] for k, (i, j) in enumerate(pairs))
        loss = quintuplet_loss(F, margins)[1]
        zero_cases += holds
        iff += (loss == 0.0) == holds
    dt = time.perf_counter() - t0
    ok = agree == 1000 and iff == 1000 and 0 < zero_cases < 1000 and dt < 5
    criterion(1, ok, f"margin validity agrees {agree}/1000; loss==0 iff constraints {iff}/1000 "
                     f"({zero_cases} satisfied); {dt:.2f}s < 5s")


def test_criterion_2_gradient_suite(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = {"encoder": 0.0, "attention": 0.0, "quintuplet": 0.0, "whole-model": 0.0}
    for _ in range(20):
        params = init_encoder(5, d=4, hidden=(3,), rng=rng)
        x, up = rng.normal(size=(6, 5)), rng.normal(size=(6, 4))
        grads, dx = encode_backward(x, params, up)
        arrays = [a for layer in params.layers for a in (layer.weight, layer.bias)] + [x]
        num = central_difference(lambda: float((encode(x, params) * up).sum()), arrays)
        ana = [g for pair in grads for g in pair] + [dx]
        worst["encoder"] = max(worst["encoder"], *(rel_error(a, n) for a, n in zip(ana, num)))
    for _ in range(20):
        n = 12
        F = rng.normal(size=(n, 4))
        groups = [np.arange(0, 4), np.arange(4, 9), np.arange(9, 12)]
        layout = stack_layout(groups, rng.integers(0, 100, size=n), 5, n)
        att = init_attention(4, 3, rng)
        att.w *= 3
        G = rng.normal(size=(3, 4))
        _, cache = pool_entities(F, layout, "attention", att)
        dF, dw, dV = pool_entities_backward(G, F, layout, "attention", cache, att)
        num = central_difference(lambda: float((pool_entities(F, layout, "attention", att)[0] * G).sum()),
                                 [F, att.w, att.V])
        worst["attention"] = max(worst["attention"], *(rel_error(a, b) for a, b in zip((dF, dw, dV), num)))
    for _ in range(20):
        Q = rng.normal(scale=0.3, size=(5, 4))
        g = quintuplet_loss_backward(Q, MarginSet())
        (num,) = central_difference(lambda: quintuplet_loss(Q, MarginSet())[1], [Q])
        worst["quintuplet"] = max(worst["quintuplet"], rel_error(g, num))
    combos = [(v, p) for v in ("MEAL", "no-visual-similarity", "U", "L", "U/L", "U&L")
              for p in ("attention", "average", "max")]
    for t in range(20):
        v, p = combos[t % len(combos)]
        extra = {"head": "mlp", "head_hidden": 3} if t % 3 == 0 else {}
        cfg = TrainingConfig(variant=v, pooling=p, finetune_latents=bool(t % 2), **{**SMALL, **extra})
        worst["whole-model"] = max(worst["whole-model"], check_whole_gradient(cfg, 100 + t))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and dt < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion(2, ok, f"max relative error over 20 instances each: {detail} (< 1e-4); {dt:.1f}s < 60s")


def test_criterion_3_als_monotone_and_reconstructs(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst_rise = -np.inf
    worst_fit = 0.0
    for t in range(50):
        n, m = rng.integers(2, 31, size=2)
        M = rng.poisson(0.4, size=(n, m))
        trace = factorize(M, WmfConfig(f=int(rng.integers(1, 9)), sweeps=15, seed=t)).trace
        worst_rise = max(worst_rise, max(b - a for a, b in zip(trace, trace[1:])))
        fit = factorize(M, WmfConfig(f=int(min(n, m)), lambda1=1e-9, sweeps=200, seed=t))
        worst_fit = max(worst_fit, float(np.abs(fit.HU @ fit.HL.T - (M > 0)).max()))
    dt = time.perf_counter() - t0
    ok = worst_rise <= 1e-9 and worst_fit < 1e-3 and dt < 30
    criterion(3, ok, f"largest objective rise {worst_rise:.2e} (<= 1e-9); rank-adequate fit error "
                     f"{worst_fit:.1e} (< 1e-3); 50 matrices; {dt:.1f}s < 30s")


def test_criterion_4_pdbscan_matches_brute_force(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    equal = 0
    for _ in range(100):
        photos = random_instance(rng, int(rng.integers(5, 201)))
        cfg = ClusterConfig(eps_meters=float(rng.choice([40.0, 100.0, 200.0])), min_users=int(rng.integers(1, 6)))
        want = brute_pdbscan([(p.photo_id, p.user_id, p.lat, p.lon) for p in photos], cfg.eps_meters, cfg.min_users)
        equal += {a.member_photo_ids for a in pdbscan(photos, cfg)} == want
    dt = time.perf_counter() - t0
    criterion(4, equal == 100 and dt < 30, f"exact cluster-set equality on {equal}/100 instances; {dt:.1f}s < 30s")


def test_criterion_5_metric_oracle(criterion):
    rng = np.random.default_rng(5)
    ap = average_precision_at_k([1, 0, 1, 0, 0], 5)
    example = abs(ap - 0.61333333333333) <= 1e-9 and abs(ap - ap_at_k([1, 0, 1, 0, 0], 5)) < 1e-15
    lists = [rng.integers(0, 2, size=int(rng.integers(1, 11))).tolist() for _ in range(1000)]
    base = map_at_k(lists, 5)
    invariant = abs(map_at_k([lists[i] for i in rng.permutation(1000)], 5) - base) < 1e-12
    oracle = all(abs(average_precision_at_k(f, 5) - ap_at_k(f, 5)) < 1e-12 for f in lists)
    monotone = True
    for f in lists:
        a = average_precision_at_k(f, 5)
        zeros = [i for i, v in enumerate(f[:5]) if v == 0]
        if zeros:  # one more relevant item never lowers AP
            g = list(f)
            g[zeros[0]] = 1
            monotone &= average_precision_at_k(g, 5) > a
        for i in range(min(len(f), 5) - 1):  # moving a hit earlier never lowers AP
            if f[i] == 0 and f[i + 1] == 1:
                g = list(f)
                g[i], g[i + 1] = 1, 0
                monotone &= average_precision_at_k(g, 5) > a
    ok = example and invariant and oracle and monotone
    criterion(5, ok, f"AP@5([1,0,1,0,0]) = {ap:.12f}; MAP order invariance {invariant}, "
                     f"oracle agreement {oracle}, monotonicity {monotone} on 1000 lists")


def _brute_mining_check(mined, F, users, atts, margins, order):
    n = len(F)
    D = [[float(((F[i] - F[j]) ** 2).sum()) for j in range(n)] for i in range(n)]
    m = margins.as_array()

    def pool(o, role):
        same_u, same_a = role[0] == "s", role[3] == "s"
        return [j for j in range(n) if j != o and (users[j] == users[o]) == same_u
                and (atts[j] == atts[o]) == same_a]

    expected = {}
    for o in range(n):
        pools = {r: pool(o, r) for r in ROLES}
        if pools["su_sa"] and all(pools[r] for r in order.ranks[1:]):
            expected[o] = sorted(pools["su_sa"])
    seen = {}
    for row, fb in zip(mined.indices.tolist(), mined.fallback.tolist()):
        o = row[0]
        q = dict(zip(ROLES, row[1:]))
        if any(q[r] not in pool(o, r) for r in ROLES):
            return False
        prev = D[o][q[order.ranks[0]]]
        for k, role in enumerate(order.ranks[1:]):
            lo, hi = prev, prev + m[ADJACENT_MARGIN[k]]
            window = [j for j in pool(o, role) if lo < D[o][j] < hi]
            if fb[k]:
                if window or D[o][q[role]] != min(D[o][j] for j in pool(o, role)):
                    return False
            elif not lo < D[o][q[role]] < hi:
                return False
            prev = D[o][q[role]]
        seen.setdefault(o, []).append(q["su_sa"])
    return {o: sorted(v) for o, v in seen.items()} == expected


def test_criterion_6_semi_hard_mining_exhaustive(criterion):
    rng = np.random.default_rng(6)
    ok_count = rows = fallbacks = 0
    orders = [LevelOrder(), LevelOrder(("su_sa", "su_da", "du_sa", "du_da"))]
    for t in range(40):
        n = int(rng.integers(8, 51))
        # mix tight and loose geometries so both window picks and fallbacks occur
        F = rng.normal(scale=[0.1, 0.3][t % 2 if t < 20 else 0], size=(n, 2))
        users = rng.integers(0, 3, size=n)
        atts = rng.integers(0, 3, size=n)
        margins, order = MarginSet(), orders[t % 2]
        mined = mine_quintuplets(np.arange(n), F, users, atts, margins, order, rng)
        rows += len(mined)
        fallbacks += int(mined.fallback.sum())
        ok_count += _brute_mining_check(mined, F, users, atts, margins, order)
    criterion(6, ok_count == 40, f"{ok_count}/40 instances (<= 50 photos) verified exhaustively; "
                                 f"{rows} quintuplets, {fallbacks} fallback picks")


def test_criterion_7_attention_normalisation(criterion):
    rng = np.random.default_rng(7)
    worst_sum = worst_mean = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 8))
        k = int(rng.integers(1, 10))
        stack = build_stack(rng.normal(scale=3.0, size=(k, d)), int(rng.integers(k, 15)))
        params = init_attention(d, 10, rng)
        params.w *= rng.uniform(0.1, 10.0)
        w = attention_weights(stack, params)
        worst_sum = max(worst_sum, abs(w.sum() - 1.0))
        uniform = np.full(stack.capacity, 1.0 / stack.capacity)
        worst_mean = max(worst_mean, float(np.abs(pool(stack, uniform) - stack.real_rows.mean(axis=0)).max()))
    ok = worst_sum <= 1e-9 and worst_mean <= 1e-12
    criterion(7, ok, f"weight-sum error {worst_sum:.1e} (<= 1e-9); uniform pooling vs real-row mean "
                     f"{worst_mean:.1e} (<= 1e-12); 1000 random stacks")


@pytest.mark.slow
def test_criterion_8_s1_directional(criterion):
    t0 = time.perf_counter()
    runs = [s1_run(seed) for seed in range(5)]
    dt = time.perf_counter() - t0
    for seed, r in enumerate(runs):
        print(f"  seed {seed}: " + ", ".join(f"{k} {v:.4f}" for k, v in r.items()))
    wins = sum(r["MEAL"] > r["no-visual-similarity"] for r in runs)
    att = float(np.mean([r["MEAL"] for r in runs]))
    avg = float(np.mean([r["MEAL-average"] for r in runs]))
    ok = wins >= 4 and att >= avg and dt < 600
    criterion(8, ok, f"MEAL > no-visual-similarity in {wins}/5 seeds (>= 4); attention mean MAP@5 {att:.4f} "
                     f">= average {avg:.4f}; {dt:.0f}s < 600s")


def test_criterion_9_pipeline_determinism(criterion, tmp_path):
    data = tmp_path / "data"
    assert main(["gen-synthetic", "--out-dir", str(data), "--n-users", "20", "--seed", "9"]) == 0
    args = ["--photos", str(data / "photos.tsv"), "--features", str(data / "features.tsv"),
            "--f", "4", "--d", "8", "--hidden", "16", "--epochs", "3", "--batch-size", "5", "--seed", "9"]
    for name in ("a", "b"):
        assert main(["run-pipeline", "--out-dir", str(tmp_path / name), *args]) == 0
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("model.json", "report.tsv", "metrics.tsv", "segments.tsv")}
    criterion(9, all(same.values()), "byte-identical across two seeded runs: "
              + ", ".join(f"{k} {v}" for k, v in same.items()))


def test_criterion_10_help_defaults(criterion):
    env = {**os.environ, "COLUMNS": "200"}
    texts = {cmd: " ".join(subprocess.run([sys.executable, "-m", "photorec", cmd, "--help"], capture_output=True,
                                          text=True, check=True, env=env).stdout.split())
             for cmd in ("train", "run-pipeline")}
    needles = {
        "t_thr=6 h": "--tthr TTHR visit grouping threshold in seconds (default 21600 = 6 h)",
        "omega=10": "--omega OMEGA attention weight vector length (default 10)",
        "gamma=15": "--gamma GAMMA confidence weight on visit counts (default 15)",
        "lambda1=0.001": "--lambda1 LAMBDA1 factor regularization (default 0.001)",
        "lambda2=0.0003": "--lambda2 LAMBDA2 parameter regularization (default 0.0003)",
        "margins": "quintuplet margins m1..m6 (default 0.1,0.2,0.3,0.1,0.2,0.1)",
    }
    shown = all(n in t for t in texts.values() for n in needles.values())
    cfg, wmf = TrainingConfig(), WmfConfig()
    actual = (DEFAULT_TTHR == 6 * 3600 and cfg.omega == 10 and wmf.gamma == 15 and wmf.lambda1 == 0.001
              and cfg.lambda2 == 0.0003 and cfg.margins.as_array().tolist() == [0.1, 0.2, 0.3, 0.1, 0.2, 0.1])
    criterion(10, shown and actual, f"--help shows {', '.join(needles)}: {shown}; library defaults agree: {actual}")
