"""The ten acceptance criteria, one test each.

Every test gathers its sub-checks, records a one-line verdict in
``conftest.ACCEPTANCE`` (printed in the terminal summary) and then asserts.
Tolerances are the stated ones; nothing here is loosened to make a check pass.
"""
import math
import statistics
import time
from collections import Counter

import numpy as np
import pytest

import conftest
from conftest import randomize_adapters, tiny_config
from gradchecks import GRAPH_MODES, OPS, SEEDS, full_graph_error, gradcheck
from mdml import autodiff as ad
from mdml.autodiff import Tensor
from mdml.corpus import (ALL_SCHEMES, CATEGORIES, OOD_DOMAIN, ParallelExample, SyntheticSpec, Vocab,
                         build_lodo, categorize_task, compose_tags, replace_domain_tag_ood, sample_batches,
                         five_language_condition)
from mdml.desk import run_desk_experiment
from mdml.metrics import (InventoryDetector, corpus_bleu, domain_token_f1, on_target_ratio, tfidf_scores)
from mdml.model import MdmlModel
from mdml.training import (DADrop, LossConfig, kl_divergence, phase1_train, phase2_train_adapters,
                           phase3_train_fusion, soft_label, train_adapter_baseline, uniform_target)
from scenarios import (GOLDEN_DIR, fusion_argmax_rate, plan, render_golden, rerun_matches, small_model,
                       small_setup, write_tiny_config)


def record(n: int, checks: list) -> None:
    """checks: [(label, ok, detail)]. Stores the verdict and fails with every failing sub-check."""
    ok = all(c[1] for c in checks)
    failing = [f"{label}: {detail}" for label, good, detail in checks if not good]
    summary = "; ".join(f"{label} {detail}" for label, _, detail in checks) if ok else "; ".join(failing)
    conftest.ACCEPTANCE[n] = (ok, summary)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {summary}")
    assert ok, summary


# ------------------------------------------------------------------------ 1

def test_criterion_01_gradient_correctness():
    t0 = time.time()
    vocab = Vocab.from_spec(SyntheticSpec())
    op_worst = {name: max(gradcheck(OPS[name], s) for s in SEEDS) for name in sorted(OPS)}
    graph_worst = {m: max(full_graph_error(vocab, m, s, per_tensor=1) for s in SEEDS) for m in GRAPH_MODES}
    elapsed = time.time() - t0
    worst_op = max(op_worst, key=op_worst.get)
    record(1, [
        ("ops", all(v < 1e-4 for v in op_worst.values()),
         f"{len(OPS)} ops x {len(SEEDS)} seeds, worst {worst_op} {op_worst[worst_op]:.1e} < 1e-4"),
        ("loss graph", all(v < 1e-4 for v in graph_worst.values()),
         ", ".join(f"{m} {v:.1e}" for m, v in graph_worst.items()) + " < 1e-4"),
        ("runtime", elapsed < 60, f"{elapsed:.1f}s < 60s"),
    ])


# ------------------------------------------------------------------------ 2

def _encoder_grads(model, ids, labels, mode, lam):
    model.set_trainable(model.partition("backbone"))
    _, pooled, _ = model.encode(ids)
    out = model.discriminate(pooled, mode, lam)
    ad.backward(ad.cross_entropy(out, labels, pad_id=-1))
    grads = {n: p.grad.copy() for n, p in model.params.items()
             if p.requires_grad and n.startswith(("emb.", "enc."))}
    model.zero_grad()
    return out.data, grads


def test_criterion_02_gradient_reversal():
    vocab = Vocab.from_spec(SyntheticSpec())
    checks = []
    x = np.random.default_rng(0).normal(size=(3, 4))
    for lam in (0.5, 1.0, 2.0):
        same = ad.grad_reverse(Tensor(x), lam).data.tobytes() == x.tobytes()
        worst, nonzero, fwd = 0.0, True, same
        for seed in range(5):
            model = MdmlModel(tiny_config(len(vocab), dropout_rate=0.0), seed=seed)
            rng = np.random.default_rng(seed)
            ids = rng.integers(vocab.tag_range[1], len(vocab), size=(3, 6))
            labels = rng.integers(0, 3, size=3)
            out_aw, g_aw = _encoder_grads(model, ids, labels, "aware", lam)
            out_adv, g_adv = _encoder_grads(model, ids, labels, "adversarial", lam)
            fwd &= out_aw.tobytes() == out_adv.tobytes()
            worst = max(worst, max(float(np.max(np.abs(g_adv[n] + lam * g_aw[n]))) for n in g_aw))
            nonzero &= any(np.any(g != 0) for g in g_aw.values())
        checks.append((f"lambda={lam}", fwd and nonzero and worst < 1e-12,
                       f"forward bitwise={fwd}, max|g_adv + lambda g_aware|={worst:.1e} < 1e-12"))
    record(2, checks)


# ------------------------------------------------------------------------ 3

def _bytes(model, names):
    return {n: model.params[n].data.tobytes() for n in names}


def _frozen_ok(model, before, trainable):
    changed = {n for n, b in before.items() if model.params[n].data.tobytes() != b}
    return not (changed - set(trainable)) and bool(changed), len(changed)


def _clone(model):
    other = MdmlModel(model.config)
    other.load_arrays(model.state_arrays())
    other.set_flags(model.flags())
    return other


def test_criterion_03_adapter_identity_and_freezing():
    checks = []
    vocab = Vocab.from_spec(SyntheticSpec())
    model = MdmlModel(tiny_config(len(vocab)), seed=0)
    model.domain_enabled = [True] * 3
    rng = np.random.default_rng(0)
    states, _, mask = model.encode(rng.integers(vocab.tag_range[1], len(vocab), size=(2, 5)))
    dec = rng.integers(vocab.tag_range[1], len(vocab), size=(2, 4))
    plain = model.decode(dec, states, mask)[0].data.tobytes()
    identical = all(model.decode(dec, states, mask, domain_mode="fixed", domains=k)[0].data.tobytes() == plain
                    for k in range(3))
    checks.append(("identity", identical, "zero-initialised adapters leave decoder output bitwise unchanged"))

    setup = small_setup(0, pairs=40)
    base = small_model(setup, 0)
    phase1_train(base, setup.corpus, setup.scheme, setup.vocab, LossConfig(mode="aware"), plan("1", 60))

    m = _clone(base)
    before = _bytes(m, m.params)
    st = phase2_train_adapters(m, setup.corpus, setup.scheme, setup.vocab, LossConfig(), plan("2", 100))
    ok, n = _frozen_ok(m, before, m.partition("domain-adapters"))
    checks.append(("phase 2", ok and st.step >= 100, f"{st.step} steps, {n} trained tensors all domain adapters"))

    before = _bytes(m, m.params)
    st = phase3_train_fusion(m, setup.corpus, setup.scheme, setup.vocab, LossConfig(), plan("3", 100))
    ok, n = _frozen_ok(m, before, m.partition("fusion"))
    checks.append(("phase 3", ok and st.step >= 100, f"{st.step} steps, {n} trained tensors all fusion"))

    m = _clone(base)
    before = _bytes(m, m.params)
    s1, s2, _ = train_adapter_baseline(m, setup.corpus, setup.scheme, setup.vocab, LossConfig(),
                                       plan("baseline", 200, batch_size=8))
    steps = s1.step + sum(s.step for s in s2)
    ok, n = _frozen_ok(m, before, m.partition("language-adapters") + m.partition("domain-adapters"))
    checks.append(("baseline", ok and s1.step >= 100,
                   f"{steps} steps ({s1.step} + {'+'.join(str(s.step) for s in s2)}), {n} trained tensors all adapters"))
    record(3, checks)


# ------------------------------------------------------------------------ 4

def test_criterion_04_fusion_and_kl():
    checks = []
    vocab = Vocab.from_spec(SyntheticSpec())
    worst_row = 0.0
    for seed in range(10):
        model = MdmlModel(tiny_config(len(vocab)), seed=seed)
        model.domain_enabled = [True] * 3
        randomize_adapters(model, np.random.default_rng(seed), scale=1.0)
        _, lp = model.fuse(Tensor(np.random.default_rng(seed).normal(size=(3, 5, 8))), 0)
        worst_row = max(worst_row, float(np.max(np.abs(np.exp(lp.data).sum(-1) - 1))))
    checks.append(("rows", worst_row <= 1e-9, f"max |sum - 1| = {worst_row:.1e}"))

    p = np.array([0.1, 0.6, 0.3])
    checks.append(("KL(p,p)", kl_divergence(p, p) == 0.0, "= 0"))
    kl_err = max(abs(kl_divergence(np.eye(n)[0], uniform_target(n)) - math.log(n)) for n in range(2, 9))
    checks.append(("KL(one-hot,uniform)", kl_err < 1e-12, f"|. - ln n| <= {kl_err:.1e}"))
    sl_err = max(float(np.max(np.abs(soft_label(j, 0.1, 5) - (0.9 * np.eye(5)[j] + 0.02)))) for j in range(5))
    checks.append(("soft label", sl_err < 1e-15, f"eps=0.1 n=5 max error {sl_err:.1e}"))

    rates = [fusion_argmax_rate(seed) for seed in (0, 1, 2)]
    med = statistics.median(rates)
    checks.append(("argmax", med >= 0.9, f"median {100 * med:.1f}% >= 90% (seeds {', '.join(f'{100 * r:.1f}' for r in rates)})"))
    record(4, checks)


# ------------------------------------------------------------------------ 5

def test_criterion_05_data_conditions():
    full = five_language_condition()
    checks = []
    for lo in range(len(full.domains)):
        cond = build_lodo(full, lo)
        counts = Counter(categorize_task(s, t, lo, cond) for s, t in cond.directions())
        sizes = [counts[c] for c in CATEGORIES]
        removed = {(full.pairs[p], d) for p in range(len(full.pairs)) for d in range(len(full.domains))
                   if full.available[p][d] and not cond.available[p][d]}
        expected = {(pair, lo) for pair in full.pairs if full.is_low_pair(pair)}
        checks.append((full.domains[lo], sizes == [6, 2, 2, 4, 4, 2] and len(cond.directions()) == 20
                       and removed == expected,
                       f"groups {'/'.join(map(str, sizes))}, removed {len(removed)} low-resource cells"))
    record(5, checks)


# ------------------------------------------------------------------------ 6

def test_criterion_06_tag_golden_files():
    vocab = Vocab.from_spec(SyntheticSpec())
    checks = []
    for scheme in ALL_SCHEMES:
        golden = render_golden(scheme, vocab).encode("utf-8") == (GOLDEN_DIR / f"{scheme.slug}.txt").read_bytes()
        first = True
        for d in (0, 1, 2, OOD_DOMAIN):
            ex = ParallelExample(("de_001",), ("fr_002",), 1, 2, 0 if d == OOD_DOMAIN else d, tag_domain=d)
            c = compose_tags(ex, scheme, vocab)
            for seq in (c.enc_ids, c.forced_prefix):
                if sum(vocab.is_tag(i) for i in seq) == 2:
                    first &= list(seq[:2]) == [vocab.lang_tag(2), vocab.domain_tag(d)]
        checks.append((scheme.slug, golden and first, "byte-exact" + ("" if first else ", language tag not first")))
    record(6, checks)


# ------------------------------------------------------------------------ 7

def test_criterion_07_sampling_and_knobs():
    checks = []
    sizes = {"a": 9, "b": 1, "c": 40, "d": 400}
    for temperature in (1.0, 5.0):
        stream = sample_batches(sizes, temperature, 1000, seed=0)
        counts = Counter(k for _ in range(100) for k, _ in next(stream))
        z = sum(v ** (1 / temperature) for v in sizes.values())
        err = max(abs(counts[k] / 100_000 - v ** (1 / temperature) / z) for k, v in sizes.items())
        checks.append((f"T={temperature:g}", err <= 0.01, f"max deviation {err:.4f} over 100000 draws"))
    exs = [ParallelExample(("a",), ("b",), 0, 1, i % 3) for i in range(10_000)]
    for p in (0.1, 0.2):
        rate = sum(e.tag_domain == OOD_DOMAIN for e in replace_domain_tag_ood(exs, p, seed=1)) / 10_000
        checks.append((f"OOD p={p}", abs(rate - p) <= 0.01, f"rate {rate:.4f}"))
    drop = DADrop(0.2, seed=0)
    rate = sum(drop() for _ in range(10_000)) / 10_000
    checks.append(("DADrop p=0.2", abs(rate - 0.2) <= 0.01, f"rate {rate:.4f}"))
    record(7, checks)


# ------------------------------------------------------------------------ 8

def test_criterion_08_metric_oracles():
    checks = []
    hyps = [["a", "b", "c", "d", "e"], ["x", "y", "z"], ["p", "q"]]
    same = corpus_bleu(hyps, hyps).score
    checks.append(("BLEU(h,h)", abs(same - 100) < 1e-9, f"{same:.6f}"))
    ex = corpus_bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]]).score
    hand = 100 * math.exp(1 - 5 / 4)
    checks.append(("BLEU example", abs(ex - 77.88) < 0.01 and abs(ex - hand) < 1e-9, f"{ex:.4f}"))

    detect = InventoryDetector({0: {"a1", "a2"}, 1: {"b1", "b2"}})
    mix = [["a1"], ["a2", "a1"], ["b1"], ["a1", "b1"]]
    ratios = (on_target_ratio(mix, 0, detect), on_target_ratio(mix[:2], 0, detect), on_target_ratio(mix, 1, detect))
    checks.append(("on-target", ratios == (50.0, 100.0, 25.0), f"{ratios}"))

    toy = {0: ["x", "x", "y", "s"], 1: ["z", "y", "y", "s", "s"]}
    ln2 = math.log(2)
    scores = tfidf_scores(toy, stopwords={"s"})
    hand = {0: {"x": 2 * ln2, "y": 0.0}, 1: {"z": ln2, "y": 0.0}}
    tf_err = max(abs(scores[d][t] - v) for d in hand for t, v in hand[d].items())
    checks.append(("tf-idf", tf_err < 1e-9 and all(set(scores[d]) == set(hand[d]) for d in hand), f"error {tf_err:.1e}"))
    f1 = domain_token_f1([["x", "x", "y"], ["q"]], [["x"], ["x", "z"]], {"x", "z"})
    # hyp domain tokens: x, x (2); ref: x, x, z (3); clipped matches: 1 + 0 = 1
    expected = 100 * 2 * (1 / 2) * (1 / 3) / (1 / 2 + 1 / 3)
    checks.append(("F1", abs(f1 - expected) < 1e-9, f"{f1:.4f} vs hand {expected:.4f}"))
    record(8, checks)


# ------------------------------------------------------------------------ 9

@pytest.mark.slow
def test_criterion_09_desk_experiment():
    summary = run_desk_experiment((0, 1, 2), 800)
    checks = [(f"({k})", ok, text) for k, (ok, text) in summary.checks.items()]
    checks.append(("budget", summary.seconds < 15 * 60, f"{summary.seconds:.0f}s < 900s"))
    record(9, checks)


# ----------------------------------------------------------------------- 10

def test_criterion_10_determinism(tmp_path):
    config = write_tiny_config(tmp_path / "run.ini", tmp_path / "run")
    ok, detail = rerun_matches(config, tmp_path / "run")
    record(10, [("rerun", ok, detail)])
