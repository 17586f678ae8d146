"""The ten acceptance criteria; each test prints one PASS/FAIL line.

Criteria 7 to 9 share one toy experiment per seed (MLE pre-training, then
lexical and feature AST fine-tuning, a synthetic-corruption sweep and the
loss ablation), built once per session.
"""

import itertools
import math
import time
import zlib
from collections import Counter
from dataclasses import dataclass, replace

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from oracles import central_difference, multi_bleu_reference, rel_error
from test_autodiff import PRIMITIVES

from astnmt.autodiff import AdamState, Tape, Tensor, ops
from astnmt.bleu import bleu
from astnmt.checkpoint import load_checkpoint
from astnmt.data import N_RESERVED, collate
from astnmt.discriminator import Discriminator
from astnmt.evaluate import ablation_run, synthetic_sweep
from astnmt.model import ModelConfig, Seq2Seq
from astnmt.perturb import (
    PerturbationSpec,
    lexical_distribution,
    perturb_feature,
    perturb_lexical,
)
from astnmt.rng import stream
from astnmt.toy import make_toy_task
from astnmt.trainer import (
    TrainConfig,
    ast_losses,
    ast_train,
    ast_training_step,
    mle_step,
    perturbed_batch,
    train,
)

SEEDS = (0, 1, 2)
MLE_STEPS, MLE_LR = 600, 5e-3
AST_STEPS, AST_LR = 600, 1e-3
ABLATION_STEPS = 300
EVAL_EVERY = 50
SWEEP_OPS = (0, 1, 2)


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# 1 -------------------------------------------------------------------------------------


def _fd_primitive(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    shapes, fn = PRIMITIVES[name]
    inputs = [Tensor(rng.standard_normal(s), requires_grad=True) for s in shapes]
    probe = rng.standard_normal(fn(*inputs).shape)

    def loss():
        return ops.sum_(ops.mul(fn(*inputs), probe))

    with Tape() as tape:
        value = loss()
    tape.backward(value)
    numeric = central_difference(lambda: loss().item(), [t.data for t in inputs])
    return max(rel_error(t.grad, n) for t, n in zip(inputs, numeric))


def _fd_composed(kind):
    """Relative errors of the composed losses' gradients, one finite-difference pass per kind."""
    # a random tiny instance: 4 concepts, short sentences, every parameter drawn at random so no
    # layer norm sits near its variance floor, where finite differences lose accuracy
    task = make_toy_task(n_train=8, n_dev=2, seed=5, n_concepts=4, min_len=3, max_len=5)
    mc = ModelConfig(
        len(task.src_vocab), len(task.tgt_vocab), emb_dim=3, hidden_dim=3, dropout=0.0
    )
    m = Seq2Seq(mc, seed=1)
    disc = Discriminator(3, 2, seed=0)
    rng = np.random.default_rng(7)
    for p in [*m.params.values(), *disc.params.values()]:
        p.data[:] = 0.5 * rng.standard_normal(p.shape)
    batch = collate(task.train.pairs[:2])
    cfg = TrainConfig(seed=3, perturb=PerturbationSpec(kind=kind))
    noisy = (
        perturbed_batch(m, batch, cfg.perturb, stream(0, "fd"))
        if kind == "lexical"
        else None
    )

    def losses():
        out = ast_losses(
            m, disc, batch, cfg, step=0, noisy=noisy, train=False, reverse=False
        )
        return {"L_true": out.L_true, "L_noisy": out.L_noisy, "L_inv": out.adv.total}

    # L_true and L_noisy against the translation model, L_inv against the discriminator
    wrt = {
        "L_true": list(m.params),
        "L_noisy": list(m.params),
        "L_inv": list(disc.params),
    }
    if kind == "feature":
        wrt = {"L_noisy": wrt["L_noisy"]}
    params = {**m.params, **disc.params}
    names = list(dict.fromkeys(n for ns in wrt.values() for n in ns))
    analytic = {}
    for which in wrt:
        for p in params.values():
            p.grad = None
        with Tape() as tape:
            value = losses()[which]
        tape.backward(value)
        analytic[which] = [params[n].grad.copy() for n in wrt[which]]
    order = list(wrt)

    def values():
        out = losses()
        return np.array([out[w].item() for w in order])

    numeric = central_difference(values, [params[n].data for n in names])
    numeric = dict(zip(names, numeric))
    errors = {}
    for j, which in enumerate(order):
        errors[which] = max(
            rel_error(a, numeric[n][..., j])
            for a, n in zip(analytic[which], wrt[which])
        )
    return errors


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    errors = {name: _fd_primitive(name) for name in sorted(PRIMITIVES)}
    lexical = _fd_composed("lexical")
    errors["L_true"] = lexical["L_true"]
    errors["L_noisy (lexical)"] = lexical["L_noisy"]
    errors["L_inv on discriminator"] = lexical["L_inv"]
    errors["L_noisy (feature)"] = _fd_composed("feature")["L_noisy"]
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = errors[worst] <= 1e-4 and elapsed < 60
    verdict(
        1,
        ok,
        f"{len(errors)} checks, worst rel. error {errors[worst]:.1e} ({worst}), {elapsed:.1f}s",
    )


# 2 -------------------------------------------------------------------------------------


def test_criterion_2_gradient_reversal():
    task = make_toy_task(n_train=8, n_dev=2, seed=6)
    mc = ModelConfig(
        len(task.src_vocab), len(task.tgt_vocab), emb_dim=4, hidden_dim=4, dropout=0.0
    )
    m = Seq2Seq(mc, seed=2)
    disc = Discriminator(4, 3, seed=0)
    rng = np.random.default_rng(8)
    for p in disc.params.values():
        p.data[:] = 0.5 * rng.standard_normal(p.shape)
    batch = collate(task.train.pairs[:3])
    cfg = TrainConfig(seed=1)
    noisy = perturbed_batch(m, batch, cfg.perturb, stream(1, "rev"))
    grads = {}
    for reverse in (True, False):
        for p in {**m.params, **disc.params}.values():
            p.grad = None
        with Tape() as tape:
            out = ast_losses(
                m, disc, batch, cfg, step=0, noisy=noisy, train=False, reverse=reverse
            )
        tape.backward(out.adv.total)
        grads[reverse] = {
            n: p.grad.copy() for n, p in m.params.items() if n.startswith("enc.")
        }
    worst = max(np.abs(grads[True][n] + grads[False][n]).max() for n in grads[True])
    nonzero = all(np.abs(g).max() > 0 for g in grads[False].values())
    verdict(
        2,
        worst <= 1e-12 and nonzero,
        f"max |applied + unreversed| = {worst:.1e} over {len(grads[True])} tensors",
    )


# 3 -------------------------------------------------------------------------------------


def test_criterion_3_lexical_pmf():
    worst_sum, zero_ok = 0.0, True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        V = int(rng.integers(N_RESERVED + 2, 201))
        E = rng.standard_normal((V, int(rng.integers(2, 9))))
        w = int(rng.integers(N_RESERVED, V))
        pmf = lexical_distribution(E, w)
        worst_sum = max(worst_sum, abs(pmf.sum() - 1))
        zero_ok &= (
            pmf[w] == 0
            and bool((pmf[:N_RESERVED] == 0).all())
            and bool((pmf >= 0).all())
        )
    E = np.array(
        [
            [0.3, 0.1],
            [0.2, 0.2],
            [0.0, 0.5],
            [0.1, 0.0],
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
        ]
    )
    pmf = lexical_distribution(E, 4)
    rng = stream(5, "mc-lexical")
    draws = Counter(perturb_lexical([4], E, rng)[0] for _ in range(10_000))
    mc_err = max(abs(draws[c] / 10_000 - pmf[c]) / pmf[c] for c in (5, 6))
    ok = worst_sum <= 1e-9 and zero_ok and mc_err <= 0.02 and set(draws) <= {5, 6}
    verdict(
        3,
        ok,
        f"max |sum - 1| = {worst_sum:.1e}, Monte-Carlo max rel. error {100 * mc_err:.2f}%",
    )


# 4 -------------------------------------------------------------------------------------


def test_criterion_4_feature_noise_variance():
    noise = perturb_feature(
        Tensor(np.zeros((10_000, 16))), 0.01, stream(0, "mc-feature")
    ).data
    var = noise.var(axis=0)
    worst = float(np.abs(var / 1e-4 - 1).max())
    verdict(
        4,
        worst <= 0.05,
        f"per-coordinate variance in [{var.min():.3e}, {var.max():.3e}], max deviation {100 * worst:.2f}%",
    )


# 5 -------------------------------------------------------------------------------------


def test_criterion_5_bleu_oracle():
    identity = bleu([list("abcde")], [list("abcde")]).score
    short = bleu([list("abcd")], [list("abcde")]).score
    clip = bleu(
        [["the", "the", "the", "the", "the", "the", "the"]],
        [["the", "cat", "is", "on", "the", "mat"]],
    ).score
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        words = ["a", "b", "c", "d", "e", "f"][: int(rng.integers(2, 7))]
        n = int(rng.integers(1, 6))
        hyps = [list(rng.choice(words, int(rng.integers(1, 10)))) for _ in range(n)]
        refs = [list(rng.choice(words, int(rng.integers(1, 10)))) for _ in range(n)]
        worst = max(
            worst, abs(bleu(hyps, refs).score - multi_bleu_reference(hyps, refs))
        )
    ok = (
        identity == 1.0
        and abs(short - 0.7788) <= 1e-4
        and clip == 0.0
        and worst <= 1e-12
    )
    verdict(
        5,
        ok,
        f"identity {identity}, brevity case {short:.4f}, clipping case {clip}, 50 corpora max diff {worst:.1e}",
    )


# 6 -------------------------------------------------------------------------------------


def test_criterion_6_objective_degeneracy():
    task = make_toy_task(n_train=32, n_dev=2, seed=7)
    mc = ModelConfig(
        len(task.src_vocab), len(task.tgt_vocab), emb_dim=8, hidden_dim=8, dropout=0.1
    )
    base = Seq2Seq(mc, seed=3)
    a, b = base.clone(), base.clone()
    batch = collate(task.train.pairs[:16])
    disc = Discriminator(8, 8, seed=0)
    mle_step(a, batch, AdamState(), 1e-3, seed=4, step=0)
    ast_training_step(
        b,
        disc,
        batch,
        TrainConfig(alpha=0.0, beta=0.0, seed=4),
        AdamState(),
        1e-3,
        step=0,
    )
    same = all(np.array_equal(a.params[n].data, b.params[n].data) for n in base.params)
    changed = any(
        not np.array_equal(a.params[n].data, base.params[n].data) for n in base.params
    )
    verdict(
        6,
        same and changed,
        f"{len(base.params)} parameter tensors bitwise equal after one step",
    )


# shared toy experiment -----------------------------------------------------------------


@dataclass
class SeedRun:
    seed: int
    start_L_inv: float
    start_terms: tuple[float, float]
    heldout: dict  # variant -> [(step, accuracy)]
    sweep: object
    ablation: object
    seconds: float


def _run_seed(seed: int) -> SeedRun:
    t0 = time.perf_counter()
    task = make_toy_task(seed=seed)
    mc = ModelConfig(len(task.src_vocab), len(task.tgt_vocab))
    mle = train(
        Seq2Seq(mc, seed=seed),
        task.train,
        TrainConfig(steps=MLE_STEPS, lr=MLE_LR, seed=seed),
    ).model
    models, heldout, start = {"mle": mle}, {}, None
    for name, kind in (("ast_lex", "lexical"), ("ast_feat", "feature")):
        cfg = TrainConfig(
            steps=AST_STEPS,
            lr=AST_LR,
            seed=seed,
            perturb=PerturbationSpec(kind=kind),
            dev_every=EVAL_EVERY,
            bleu_smooth=True,
        )
        res = ast_train(mle, task.train, cfg, dev=task.dev)
        models[name] = res.model
        heldout[kind] = [
            (r.step + 1, r.heldout_disc_acc)
            for r in res.reports
            if r.heldout_disc_acc is not None
        ]
        if start is None:
            r0 = res.reports[0]
            start = (r0.L_inv, (r0.L_inv_clean_term, r0.L_inv_noisy_term))
    sweep = synthetic_sweep(
        models, task.dev, ops=SWEEP_OPS, beam=1, seed=seed, smooth=True
    )
    seconds = time.perf_counter() - t0
    ab_cfg = TrainConfig(steps=ABLATION_STEPS, lr=AST_LR, seed=seed)
    ablation = ablation_run(mle, task.train, task.dev, ab_cfg, beam=1, smooth=True)
    return SeedRun(seed, start[0], start[1], heldout, sweep, ablation, seconds)


@pytest.fixture(scope="session")
def toy_runs():
    return [_run_seed(s) for s in SEEDS]


def _mean(runs, model, kind, op):
    i = SWEEP_OPS.index(op)
    return float(np.mean([r.sweep.get(model, kind)[i] for r in runs]))


# 7 -------------------------------------------------------------------------------------


def test_criterion_7_equilibrium(toy_runs):
    start_ok = all(
        abs(r.start_L_inv - 2 * math.log(2)) <= 1e-9
        and all(abs(t - math.log(2)) <= 1e-9 for t in r.start_terms)
        for r in toy_runs
    )
    final_third = AST_STEPS - AST_STEPS // 3
    parts, band_ok = [], True
    for kind in ("lexical", "feature"):
        tails = [
            [acc for step, acc in r.heldout[kind] if step > final_third]
            for r in toy_runs
        ]
        lo, hi = min(min(t) for t in tails), max(max(t) for t in tails)
        band_ok &= 0.4 <= lo and hi <= 0.6
        parts.append(f"{kind} held-out accuracy in final third [{lo:.3f}, {hi:.3f}]")
    detail = f"start L_inv = 2 ln 2 {'ok' if start_ok else 'off'}; " + "; ".join(parts)
    verdict(7, start_ok and band_ok, detail)


# 8 -------------------------------------------------------------------------------------


def test_criterion_8_robustness_reproduction(toy_runs):
    clean = {
        m: min(r.sweep.get(m, "swap")[0] for r in toy_runs)
        for m in ("mle", "ast_lex", "ast_feat")
    }
    a = all(v >= 0.90 for v in clean.values())
    gap = {
        op: _mean(toy_runs, "ast_lex", "replace-uniform", op)
        - _mean(toy_runs, "mle", "replace-uniform", op)
        for op in SWEEP_OPS
    }
    b = gap[1] >= 0 and gap[2] >= 0 and gap[2] > gap[0]
    c_vals = {
        (m, k): _mean(toy_runs, m, k, 2) - _mean(toy_runs, "mle", k, 2)
        for m in ("ast_lex", "ast_feat")
        for k in ("swap", "delete")
    }
    c = all(v >= 0 for v in c_vals.values())
    slowest = max(r.seconds for r in toy_runs)
    runtime = slowest < 15 * 60
    detail = (
        f"(a) min clean BLEU {min(clean.values()):.3f}; "
        f"(b) lexical-MLE replace gap {100 * gap[0]:+.2f}/{100 * gap[1]:+.2f}/{100 * gap[2]:+.2f} at 0/1/2 ops; "
        "(c) 2-op gaps "
        + ", ".join(f"{m} {k} {100 * v:+.2f}" for (m, k), v in c_vals.items())
        + f"; slowest seed {slowest:.0f}s"
    )
    verdict(8, a and b and c and runtime, detail)


def test_mle_bleu_falls_with_corruption(toy_runs):
    for kind in ("swap", "replace-uniform", "delete"):
        means = [_mean(toy_runs, "mle", kind, op) for op in SWEEP_OPS]
        assert all(
            later <= earlier + 0.005 for earlier, later in itertools.pairwise(means)
        ), (kind, means)


# 9 -------------------------------------------------------------------------------------


def test_criterion_9_ablation(toy_runs):
    names = [row.name for row in toy_runs[0].ablation.rows]
    full = float(
        np.mean([r.ablation.row("true+noisy+inv").perturbed_bleu for r in toy_runs])
    )
    only = float(np.mean([r.ablation.row("true").perturbed_bleu for r in toy_runs]))
    ok = len(names) == 5 and full >= only
    verdict(
        9,
        ok,
        f"{len(names)} rows; perturbed dev BLEU full {100 * full:.2f} vs L_true only {100 * only:.2f}",
    )


# 10 ------------------------------------------------------------------------------------


def test_criterion_10_determinism_and_persistence(tmp_path):
    task = make_toy_task(n_train=80, n_dev=8, seed=9)
    mc = ModelConfig(len(task.src_vocab), len(task.tgt_vocab), emb_dim=8, hidden_dim=8)
    cfg = TrainConfig(steps=6, batch_size=16, seed=4, dev_every=3)
    for name in ("a", "b"):
        ast_train(
            Seq2Seq(mc, seed=4), task.train, cfg, dev=task.dev, run_dir=tmp_path / name
        )
    csv_same = (tmp_path / "a" / "metrics.csv").read_bytes() == (
        tmp_path / "b" / "metrics.csv"
    ).read_bytes()

    resumed_same = True
    for mode in ("mle", "ast"):

        def run(model, c, mode=mode, **kw):
            if mode == "ast" and "disc" not in kw:
                kw["disc"] = Discriminator(mc.hidden_dim, c.disc_channels, seed=c.seed)
            return train(model, task.train, c, **kw)

        full = run(Seq2Seq(mc, seed=4), cfg)
        d = tmp_path / f"resume-{mode}"
        run(Seq2Seq(mc, seed=4), replace(cfg, steps=3), run_dir=d)
        ck = load_checkpoint(d / "final.ckpt")
        kw = {"adam": ck.adam, "start_step": ck.step}
        if mode == "ast":
            kw["disc"] = ck.disc
        rest = run(ck.model, cfg, **kw)
        resumed_same &= all(
            np.array_equal(rest.model.params[n].data, p.data)
            for n, p in full.model.params.items()
        )
        if mode == "ast":
            resumed_same &= all(
                np.array_equal(rest.disc.params[n].data, p.data)
                for n, p in full.disc.params.items()
            )
    verdict(
        10,
        csv_same and resumed_same,
        f"metrics CSV bitwise {csv_same}; resume equals uninterrupted {resumed_same}",
    )
