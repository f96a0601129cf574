import math
import statistics
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import randomize_adapters, tiny_config
from mdml import autodiff as ad
from mdml.autodiff import Tensor
from mdml.corpus import OOD_DOMAIN, PAD, ParallelExample, TagScheme, replace_domain_tag_ood
from mdml.model import MdmlModel
from mdml.training import (
    DADrop, LossConfig, PhasePlan, PosteriorTarget, TrainingError, collate, fusion_objective, kl_divergence,
    loss_combined, loss_disc, loss_nmt, phase1_train, phase2_train_adapters, phase3_train_fusion, soft_label,
    train_adapter_baseline, uniform_target, validate_plan_order,
)
from oracles import reference_kl
from scenarios import bucket_loss, plan, small_model, small_setup


# ----------------------------------------------------------------- targets

def test_soft_label_example():
    q = soft_label(1, 0.1, 5)
    assert np.allclose(q, [0.02, 0.92, 0.02, 0.02, 0.02], rtol=0, atol=1e-15)
    assert abs(q.sum() - 1) < 1e-15


@given(st.integers(1, 8).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n - 1))),
       st.floats(0.001, 0.999))
def test_soft_label_formula(nj, eps):
    n, j = nj
    e = np.zeros(n)
    e[j] = 1.0
    assert np.max(np.abs(soft_label(j, eps, n) - ((1 - eps) * e + eps / n))) < 1e-15


def test_posterior_targets_and_eps_bounds():
    assert np.array_equal(PosteriorTarget("uniform", 4).distribution(), np.full(4, 0.25))
    assert np.array_equal(PosteriorTarget("soft_label", 5, 2, 0.1).distribution(), soft_label(2, 0.1, 5))
    for eps in (0.0, 1.0, -0.2):
        with pytest.raises(TrainingError):
            soft_label(0, eps, 3)
    with pytest.raises(TrainingError):
        LossConfig(p_unseen=1.5)
    with pytest.raises(TrainingError):
        LossConfig(eps=1.0)


def test_kl_examples():
    p = np.array([0.2, 0.5, 0.3])
    assert kl_divergence(p, p) == 0.0
    for n in (2, 3, 7):
        one_hot = np.eye(n)[0]
        assert abs(kl_divergence(one_hot, uniform_target(n)) - math.log(n)) < 1e-12
    with pytest.raises(TrainingError):
        kl_divergence([0.5, 0.5], [1.0, 0.0])


@given(st.integers(2, 6).flatmap(lambda n: st.tuples(
    st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n).filter(lambda v: sum(v) > 1e-3),
    st.lists(st.floats(0.01, 1.0), min_size=n, max_size=n))))
def test_kl_matches_elementwise_oracle(pq):
    p, q = (np.array(v) / sum(v) for v in pq)
    got = kl_divergence(p, q)
    assert abs(got - reference_kl(p, q)) < 1e-12
    assert got >= -1e-15


# ------------------------------------------------------------------ losses

class StubModel:
    """Returns fixed log-probabilities so the loss formulas can be checked in isolation."""

    def __init__(self, dec_logp=None, disc_logp=None):
        self.dec_logp, self.disc_logp = dec_logp, disc_logp

    def encode(self, ids, rng=None):
        b = np.asarray(ids).shape[0]
        return Tensor(np.zeros((b, 1, 1))), Tensor(np.zeros((b, 1))), np.ones((b, 1), dtype=bool)

    def decode(self, dec_in, states, mask, **kw):
        return Tensor(self.dec_logp), []

    def discriminate(self, h, mode, lambda_rev=1.0):
        return Tensor(self.disc_logp)


def _tiny_batch(vocab, n=3, scheme="t-dec+d-dec", seed=0):
    rng = np.random.default_rng(seed)
    base = vocab.tag_range[1]
    exs = []
    for i in range(n):
        src = tuple(vocab.decode(base + rng.integers(0, 40, size=2 + i)))
        tgt = tuple(vocab.decode(base + rng.integers(0, 40, size=3 + (i % 2))))
        exs.append(ParallelExample(src, tgt, i % 3, (i + 1) % 3, i % 3))
    return collate(exs, TagScheme.parse(scheme), vocab)


def test_nmt_loss_of_exact_one_hot_output_is_zero(vocab):
    batch = _tiny_batch(vocab)
    v = len(vocab)
    logp = np.full(batch.dec_tgt.shape + (v,), -1e4)
    safe = np.where(batch.dec_tgt == PAD, 0, batch.dec_tgt)
    np.put_along_axis(logp, safe[..., None], 0.0, axis=-1)
    assert loss_nmt(StubModel(logp), batch).item() == 0.0


def test_nmt_loss_of_uniform_output_is_log_v(tiny_model, vocab):
    tiny_model.params["out.proj.w"].data[...] = 0.0
    tiny_model.params["out.proj.b"].data[...] = 0.0
    assert abs(loss_nmt(tiny_model, _tiny_batch(vocab)).item() - math.log(len(vocab))) < 1e-12


def test_nmt_loss_matches_per_position_oracle(vocab):
    model = MdmlModel(tiny_config(len(vocab), dropout_rate=0.0), seed=2)
    batch = _tiny_batch(vocab, n=4, seed=2)
    states, _, mask = model.encode(batch.enc_ids)
    logp, _ = model.decode(batch.dec_in, states, mask)
    terms = [-logp.data[b, i, t] for b in range(len(batch)) for i, t in enumerate(batch.dec_tgt[b]) if t != PAD]
    assert abs(loss_nmt(model, batch).item() - sum(terms) / len(terms)) < 1e-10
    # forced decoder tags (two under t-dec+d-dec) are excluded
    assert np.all(batch.dec_tgt[:, :2] == PAD)
    assert batch.token_count == len(terms)


def test_empty_batch_is_rejected(vocab):
    with pytest.raises(TrainingError):
        collate([], TagScheme.parse("t-enc"), vocab)


def test_disc_loss_one_hot_and_uniform():
    domains = np.array([0, 2, 1])
    one_hot = np.full((3, 3), -1e4)
    one_hot[np.arange(3), domains] = 0.0
    nll, ent = loss_disc(StubModel(disc_logp=one_hot), Tensor(np.zeros((3, 1))), domains)
    assert nll.item() == 0.0 and abs(ent.item()) < 1e-300
    nll, ent = loss_disc(StubModel(disc_logp=np.full((3, 3), -math.log(3))), Tensor(np.zeros((3, 1))), domains)
    assert abs(nll.item() - math.log(3)) < 1e-15 and abs(ent.item() - math.log(3)) < 1e-15


def test_disc_loss_matches_hand_summation(tiny_model):
    rng = np.random.default_rng(5)
    h = Tensor(rng.normal(size=(5, 8)))
    domains = np.array([0, 1, 2, 2, 0])
    nll, ent = loss_disc(tiny_model, h, domains)
    logp = tiny_model.discriminate(h, "aware").data
    hand_nll = sum(-logp[i, d] for i, d in enumerate(domains)) / 5
    hand_ent = sum(-np.exp(logp[i, k]) * logp[i, k] for i in range(5) for k in range(3)) / 5
    assert abs(nll.item() - hand_nll) < 1e-10 and abs(ent.item() - hand_ent) < 1e-10


def test_disc_loss_needs_true_labels(tiny_model):
    with pytest.raises(TrainingError):
        loss_disc(tiny_model, Tensor(np.zeros((2, 8))), np.array([0, OOD_DOMAIN]))


def _report(model, batch, **kw):
    return loss_combined(model, batch, LossConfig(**kw), np.random.default_rng(1))


def test_plain_mode_has_no_disc_terms(tiny_model, vocab):
    r, total = _report(tiny_model, _tiny_batch(vocab), mode="plain", lam=3.0)
    assert r.disc_loss == r.entropy_term == 0.0 and r.total == r.nmt_loss == total.item()


@pytest.mark.parametrize("mode", ["aware", "adversarial"])
def test_lambda_zero_and_one(tiny_model, vocab, mode):
    batch = _tiny_batch(vocab)
    r0, _ = _report(tiny_model, batch, mode=mode, lam=0.0)
    assert r0.total == r0.nmt_loss
    for seed in range(20):
        r1, _ = _report(tiny_model, _tiny_batch(vocab, seed=seed), mode=mode, lam=1.0)
        # Exact in the only sense floating point allows: the total is bitwise nmt + disc,
        # and subtracting back recovers disc up to the single rounding of that addition.
        assert r1.total == r1.nmt_loss + r1.disc_loss
        assert abs((r1.total - r1.nmt_loss) - r1.disc_loss) <= np.spacing(r1.total)


@pytest.mark.parametrize("mode", ["plain", "aware", "adversarial"])
@pytest.mark.parametrize("lam,ew", [(0.5, 0.0), (1.0, 0.3), (2.0, 1.7)])
def test_total_reconstructs_from_components(tiny_model, vocab, mode, lam, ew):
    r, total = _report(tiny_model, _tiny_batch(vocab, seed=4), mode=mode, lam=lam, entropy_weight=ew)
    if mode == "plain":
        assert r.total == r.nmt_loss
    else:
        assert r.total == r.nmt_loss + lam * r.disc_loss + ew * r.entropy_term
    assert r.total == total.item()


def test_aware_and_adversarial_reports_are_identical(tiny_model, vocab):
    batch = _tiny_batch(vocab)
    aware, _ = _report(tiny_model, batch, mode="aware", entropy_weight=0.4)
    adv, _ = _report(tiny_model, batch, mode="adversarial", entropy_weight=0.4)
    assert aware == adv


def _grads(model, batch, cfg, names):
    model.set_trainable(names)
    _, total = loss_combined(model, batch, cfg, np.random.default_rng(1))
    ad.backward(total, [model.params[n] for n in names])
    return {n: model.params[n].grad.copy() for n in names}


def test_adversarial_encoder_gradient_is_nmt_minus_disc(vocab):
    """d total/d enc (adversarial) = d nmt/d enc - lambda_rev * lam * d disc/d enc."""
    model = MdmlModel(tiny_config(len(vocab)), seed=4)
    batch = _tiny_batch(vocab, n=4)
    enc = [n for n in model.params if n.startswith("enc.")]
    lam, lrev = 0.7, 1.3
    g_adv = _grads(model, batch, LossConfig(mode="adversarial", lam=lam, lambda_rev=lrev), enc)
    g_nmt = _grads(model, batch, LossConfig(mode="plain"), enc)
    model.set_trainable(enc)
    _, h, _ = model.encode(batch.enc_ids, np.random.default_rng(1))
    disc, _ = loss_disc(model, h, batch.domains, "aware")
    ad.backward(disc, [model.params[n] for n in enc])
    for n in enc:
        expected = g_nmt[n] - lrev * lam * model.params[n].grad
        assert np.max(np.abs(g_adv[n] - expected)) < 1e-12


# --------------------------------------------------------------------- plans

def test_plan_order_rules():
    p = {k: PhasePlan(k) for k in ("1", "2", "3", "baseline")}
    validate_plan_order([p["1"], p["2"], p["3"]])
    validate_plan_order([p["1"], p["baseline"]])
    for bad in ([p["2"]], [p["1"], p["3"]], [p["baseline"]], [p["1"], p["1"]]):
        with pytest.raises(TrainingError):
            validate_plan_order(bad)
    assert PhasePlan("2").trainable == "domain-adapters" and PhasePlan("3").trainable == "fusion"
    assert "backbone" not in PhasePlan("2").trainable and "backbone" not in PhasePlan("3").trainable


def test_learning_rate_warmup():
    p = PhasePlan("1", lr=1e-3, warmup=10)
    assert p.lr_at(1) == pytest.approx(1e-4) and p.lr_at(10) == 1e-3 and p.lr_at(500) == 1e-3


# -------------------------------------------------------------- procedures

def _snapshot(model, names):
    return {n: model.params[n].data.tobytes() for n in names}


def _assert_frozen(model, before, trainable):
    changed = [n for n, b in before.items() if model.params[n].data.tobytes() != b]
    frozen_changed = [n for n in changed if n not in trainable]
    assert not frozen_changed, frozen_changed[:5]
    assert changed, "nothing was trained"


@pytest.fixture(scope="module")
def phase1_model():
    setup = small_setup(0, pairs=40)
    model = small_model(setup, 0)
    phase1_train(model, setup.corpus, setup.scheme, setup.vocab, LossConfig(mode="aware"), plan("1", 60))
    return setup, model


def _clone(model):
    other = MdmlModel(model.config)
    other.load_arrays(model.state_arrays())
    other.set_flags(model.flags())
    return other


def test_phase2_freezes_everything_but_domain_adapters(phase1_model):
    setup, model = phase1_model
    model = _clone(model)
    before = _snapshot(model, model.params)
    phase2_train_adapters(model, setup.corpus, setup.scheme, setup.vocab, LossConfig(), plan("2", 100))
    _assert_frozen(model, before, set(model.partition("domain-adapters")))
    assert model.known_domains == [0, 1, 2]


def test_phase3_freezes_everything_but_fusion(phase1_model):
    setup, model = phase1_model
    model = _clone(model)
    phase2_train_adapters(model, setup.corpus, setup.scheme, setup.vocab, LossConfig(), plan("2", 10))
    before = _snapshot(model, model.params)
    phase3_train_fusion(model, setup.corpus, setup.scheme, setup.vocab, LossConfig(), plan("3", 100))
    _assert_frozen(model, before, set(model.partition("fusion")))


def test_baseline_freezes_backbone_and_stage2_keeps_language_adapters(phase1_model):
    setup, model = phase1_model
    model = _clone(model)
    before = _snapshot(model, model.params)
    lang_after = {}
    orig = train_adapter_baseline.__globals__["run_phase"]

    def spy(m, p, batches, loss_fn, state=None, trainable=None, phase_code=0):
        out = orig(m, p, batches, loss_fn, state, trainable, phase_code)
        if trainable == "language-adapters":
            lang_after.update(_snapshot(m, m.partition("language-adapters")))
        return out

    train_adapter_baseline.__globals__["run_phase"] = spy
    try:
        s1, s2, drop = train_adapter_baseline(model, setup.corpus, setup.scheme, setup.vocab, LossConfig(),
                                              replace(plan("baseline", 200), batch_size=8))
    finally:
        train_adapter_baseline.__globals__["run_phase"] = orig
    assert s1.step == 100 and [s.step for s in s2] == [33, 33, 33]
    _assert_frozen(model, before, set(model.partition("language-adapters")) | set(model.partition("domain-adapters")))
    assert _snapshot(model, model.partition("language-adapters")) == lang_after
    assert 0 < drop.skips < drop.calls == 99


def test_phase2_routes_each_example_to_its_own_adapter(vocab):
    model = MdmlModel(tiny_config(len(vocab)), seed=0)
    model.domain_enabled = [True] * 3
    randomize_adapters(model, np.random.default_rng(0))
    adapters = model.partition("domain-adapters")
    model.set_trainable(adapters)
    batch = _tiny_batch(vocab, n=4)
    batch.domains[:] = 1
    grads = ad.backward(loss_nmt(model, batch, domain_mode="fixed", domains=batch.domains),
                        [model.params[n] for n in adapters])
    for n in adapters:
        own = n.split(".")[3] == "1"
        assert np.any(grads[model.params[n]] != 0) == own, n


def test_phase2_warns_and_keeps_identity_for_empty_domain(phase1_model, caplog):
    setup, model = phase1_model
    model = _clone(model)
    corpus = {k: (v if k[1] != 2 else []) for k, v in setup.corpus.items()}
    phase2_train_adapters(model, corpus, setup.scheme, setup.vocab, LossConfig(), plan("2", 5))
    assert model.known_domains == [0, 1]
    assert "domain 2 has no training examples" in caplog.text
    assert all(np.all(model.params[n].data == 0) for n in model.partition("adapters:2") if n.endswith(".up"))


def test_phase3_requires_adapters(phase1_model):
    setup, model = phase1_model
    with pytest.raises(TrainingError):
        phase3_train_fusion(_clone(model), setup.corpus, setup.scheme, setup.vocab, LossConfig(), plan("3", 1))


def test_unseen_inputs_pull_toward_uniform(vocab):
    """With every input marked unseen, KL term = mean over positions and layers of ln K - H(posterior)."""
    model = MdmlModel(tiny_config(len(vocab), n_dec_layers=2, dropout_rate=0.0), seed=1)
    model.domain_enabled = [True] * 3
    randomize_adapters(model, np.random.default_rng(1), scale=1.0)
    batch = _tiny_batch(vocab, n=4, scheme="t-enc")
    batch.unseen[:] = True
    report, _ = fusion_objective(model, batch, LossConfig(kl_weight=1.0))
    states, _, mask = model.encode(batch.enc_ids)
    _, posts = model.decode(batch.dec_in, states, mask, domain_mode="fusion")
    valid = batch.dec_tgt != PAD
    terms = []
    for lp in posts:
        p = np.exp(lp.data)
        ent = -(p * lp.data).sum(-1)
        terms += list((math.log(3) - ent)[valid])
    assert abs(report.kl_term - np.mean(terms)) < 1e-12
    assert report.total == report.nmt_loss + report.kl_term


def test_fusion_bound_decomposition(vocab):
    """nmt term = -mean q_k (log P(y | z=k) + log q_k) with P from fixed-domain decoding."""
    model = MdmlModel(tiny_config(len(vocab), dropout_rate=0.0), seed=2)
    model.domain_enabled = [True, False, True]
    randomize_adapters(model, np.random.default_rng(2))
    batch = _tiny_batch(vocab, n=3, scheme="t-enc")
    report, _ = fusion_objective(model, batch, LossConfig(kl_weight=0.5, eps=0.2))
    states, _, mask = model.encode(batch.enc_ids)
    _, posts = model.decode(batch.dec_in, states, mask, domain_mode="fusion")
    lq = posts[0].data
    fixed = [model.decode(batch.dec_in, states, mask, domain_mode="fixed", domains=k)[0].data for k in (0, 2)]
    bound, kl, n = 0.0, 0.0, 0
    for b in range(len(batch)):
        target = uniform_target(2) if batch.domains[b] == 1 else soft_label([0, 2].index(batch.domains[b]), 0.2, 2)
        for i, y in enumerate(batch.dec_tgt[b]):
            if y == PAD:
                continue
            n += 1
            q = np.exp(lq[b, i])
            bound -= sum(q[j] * (fixed[j][b, i, y] + lq[b, i, j]) for j in range(2))
            kl += reference_kl(q, target)
    assert abs(report.nmt_loss - bound / n) < 1e-10
    assert abs(report.kl_term - kl / n) < 1e-10


# ---------------------------------------------------------- stochastic knobs

def _examples(n):
    return [ParallelExample(("a",), ("b",), 0, 1, i % 3) for i in range(n)]


@pytest.mark.parametrize("p", [0.1, 0.3])
def test_ood_replacement_rate(p):
    out = list(replace_domain_tag_ood(_examples(10_000), p, seed=0))
    rate = sum(ex.tag_domain == OOD_DOMAIN for ex in out) / len(out)
    assert abs(rate - p) <= 0.01
    assert all(ex.domain == i % 3 for i, ex in enumerate(out))


def test_dadrop_rate_and_zero():
    drop = DADrop(0.2, 0)
    rate = sum(drop() for _ in range(10_000)) / 10_000
    assert abs(rate - 0.2) <= 0.01
    never = DADrop(0.0, 0)
    assert not any(never() for _ in range(1000))


def test_dadrop_zero_applies_a_trained_adapter(vocab):
    model = MdmlModel(tiny_config(len(vocab), dropout_rate=0.0), seed=0)
    model.domain_enabled = [True] * 3
    randomize_adapters(model, np.random.default_rng(0))
    batch = _tiny_batch(vocab)
    applied = loss_nmt(model, batch, domain_mode="fixed", domains=0, skip_domain_adapter=DADrop(0.0, 0)())
    skipped = loss_nmt(model, batch, domain_mode="fixed", domains=0, skip_domain_adapter=True)
    assert applied.item() != skipped.item()


# ----------------------------------------------------------- trained checks

def test_phase1_memorises_single_example():
    setup = small_setup(0, pairs=1)
    key = ((0, 1), 1)
    corpus = {key: setup.corpus[key][:1]}
    model = small_model(setup, 0, dropout_rate=0.0)
    state = phase1_train(model, corpus, setup.scheme, setup.vocab, LossConfig(),
                         replace(plan("1", 500, lr=3e-3), batch_size=1))
    assert float(state.log_lines[-1].split("\t")[2]) < 0.05


def test_phase1_is_deterministic_and_ood_is_ignored_without_domain_tag():
    setup = small_setup(0, pairs=10)

    def run(p_ood):
        model = small_model(setup, 3)
        state = phase1_train(model, setup.corpus, setup.scheme, setup.vocab, LossConfig(mode="aware", p_ood=p_ood),
                             plan("1", 8, seed=3))
        return {n: p.data.tobytes() for n, p in model.params.items()}, state.log_lines

    a, b, c = run(0.1), run(0.1), run(0.0)
    assert a == b and a == c


def test_phase1_logs_one_line_per_step():
    setup = small_setup(0, pairs=10, scheme="t-enc+d-dec")
    state = phase1_train(small_model(setup), setup.corpus, setup.scheme, setup.vocab, LossConfig(), plan("1", 5))
    assert [line.split("\t")[:2] for line in state.log_lines] == [[str(i), "1"] for i in range(1, 6)]
    assert all(len(line.split("\t")) == 9 for line in state.log_lines)


def test_resume_replays_stream_bitwise():
    setup = small_setup(0, pairs=10)
    cfg = LossConfig(mode="adversarial")
    straight = small_model(setup, 1)
    phase1_train(straight, setup.corpus, setup.scheme, setup.vocab, cfg, plan("1", 12))
    split = small_model(setup, 1)
    state = phase1_train(split, setup.corpus, setup.scheme, setup.vocab, cfg, plan("1", 5))
    phase1_train(split, setup.corpus, setup.scheme, setup.vocab, cfg, plan("1", 12), state=state)
    assert all(straight.params[n].data.tobytes() == split.params[n].data.tobytes() for n in straight.params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_step_diagnostics(phase1_model):
    setup, model = phase1_model
    with pytest.raises(TrainingError, match=r"phase 1 diverged at step \d+: non-finite"):
        phase1_train(MdmlModel(model.config), setup.corpus, setup.scheme, setup.vocab, LossConfig(),
                     plan("1", 5, lr=1e300))


def test_phase2_lowers_per_domain_loss():
    """Held-out per-domain loss after phase 2 <= phase-1 loss on the same bucket (median of 3 seeds)."""
    gains = []
    for seed in range(3):
        setup = small_setup(seed, pairs=80)
        model = small_model(setup, seed)
        phase1_train(model, setup.corpus, setup.scheme, setup.vocab, LossConfig(), plan("1", 150, seed))
        held = {d: [ex for (s, t, dd), exs in setup.tests.items() if dd == d and (s, t) in ((0, 1), (1, 0))
                    for ex in exs] for d in range(3)}
        before = {d: bucket_loss(model, setup, held[d]) for d in range(3)}
        phase2_train_adapters(model, setup.corpus, setup.scheme, setup.vocab, LossConfig(), plan("2", 100, seed))
        after = {d: bucket_loss(model, setup, held[d], domain_mode="fixed", domains=d) for d in range(3)}
        gains.append([before[d] - after[d] for d in range(3)])
    for d in range(3):
        assert statistics.median(g[d] for g in gains) >= 0
