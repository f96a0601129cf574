"""End-to-end desk experiment: the directional claims on a small synthetic setup.

Three languages (en hub; de high-resource; fr low-resource, paired with en
only), three domains, 2,000 pairs per available cell, and the first domain
left out for the low-resource pair. Per seed it trains

    MDML with each of the six tag schemes (plain),
    MDML T-ENC with the domain-aware auxiliary task,
    MDBL T-ENC on the en-fr pair only,

and scores the checks

    a) MDML T-ENC on-target % on seen directions               >= 90
    b) MDML T-ENC BLEU on the MDBL pair in the leave-out domain >= MDBL
    c) +aware BLEU on the zero-shot directions in the leave-out
       domain                                                    >= plain
    d) T-DEC D-DEC on-target % on zero-shot directions          <= every other scheme

each on the median over seeds.
"""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field, replace

from .config import DataSettings, ExperimentConfig, ExperimentSettings
from .corpus import ALL_SCHEMES, SyntheticSpec, TagScheme, generate_corpus, generate_test_sets
from .experiment import evaluate_model, train_model, variant_corpus, vocab_for
from .training import LossConfig, PhasePlan

BASE = "t-enc"
TDEC_DDEC = "t-dec+d-dec"


def desk_config(seed: int = 0, steps: int = 800) -> ExperimentConfig:
    """Smallest model that reliably fits the seen directions within the time budget."""
    model = dict(d_model=64, n_heads=4, n_enc_layers=1, n_dec_layers=1, d_ffn=128, adapter_bottleneck=16,
                 dropout_rate=0.1, max_len=16, disc_hidden=64, disc_ood_class=False,
                 adapter_activation="relu", fusion_temperature=1.0)
    plan = PhasePlan("1", steps=steps, lr=2e-3, warmup=100, batch_size=32, temperature=5.0)
    phases = {p: replace(plan, phase=p) for p in ("1", "2", "3", "baseline")}
    return ExperimentConfig(
        experiment=ExperimentSettings(seed=seed, out="", variant="mdml", scheme=BASE, phases=("1",), topk=8),
        data=DataSettings(condition="star", n_high=2, hub=0, leave_out="law", pairs_per_cell=2000,
                          test_per_cell=30),
        synthetic=SyntheticSpec(n_languages=3, n_domains=3),
        model=model, loss=LossConfig(), phase_settings=phases).validate()


@dataclass
class SeedResult:
    seed: int
    seen_on_target: float
    mdml_pair_bleu: float
    mdbl_pair_bleu: float
    zero_shot_lo_bleu: dict            # mode -> BLEU (MDML T-ENC)
    unseen_on_target: dict             # scheme slug -> on-target %
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)


def _runs() -> list:
    runs = [("mdml", s.slug, "plain") for s in ALL_SCHEMES]
    runs += [("mdml", BASE, "aware"), ("mdbl", BASE, "plain")]
    return runs


def run_seed(seed: int, steps: int = 800, echo=None) -> SeedResult:
    t0 = time.time()
    base = desk_config(seed, steps)
    cond, spec = base.condition(), base.synthetic
    corpus = generate_corpus(spec, cond, base.data.pairs_per_cell, seed)
    tests = generate_test_sets(spec, base.data.test_per_cell, seed)
    vocab = vocab_for(base)
    lo = base.leave_out
    a, b = base.mdbl_pair()
    seen = [k for k in tests if cond.pair_seen(k[0], k[1])]
    unseen = [k for k in tests if not cond.pair_seen(k[0], k[1])]
    reports = {}
    for variant, scheme, mode in _runs():
        cfg = replace(base, experiment=replace(base.experiment, variant=variant, scheme=scheme),
                      loss=replace(base.loss, mode=mode)).validate()
        res = train_model(cfg, variant_corpus(cfg, corpus), vocab, save=False)
        reports[(variant, scheme, mode)] = evaluate_model(cfg, res.model, tests, cond)
        if echo:
            echo(f"  seed {seed}: trained {variant} {TagScheme.parse(scheme).name} {mode} "
                 f"({time.time() - t0:.0f}s)")
    plain = reports[("mdml", BASE, "plain")]
    pair_cells = [(a, b, lo), (b, a, lo)]
    zero_lo = [k for k in unseen if k[2] == lo]
    return SeedResult(
        seed=seed,
        seen_on_target=plain.group_average(seen, "on_target"),
        mdml_pair_bleu=plain.pooled_bleu(pair_cells),
        mdbl_pair_bleu=reports[("mdbl", BASE, "plain")].pooled_bleu(pair_cells),
        zero_shot_lo_bleu={m: reports[("mdml", BASE, m)].pooled_bleu(zero_lo) for m in ("plain", "aware")},
        unseen_on_target={s.slug: reports[("mdml", s.slug, "plain")].group_average(unseen, "on_target")
                          for s in ALL_SCHEMES},
        seconds=time.time() - t0,
        extra={"seen_bleu": plain.pooled_bleu(seen), "unseen_bleu": plain.pooled_bleu(unseen)},
    )


@dataclass
class DeskSummary:
    seeds: list
    checks: dict        # name -> (passed, description)
    medians: dict
    seconds: float


def summarize(results: list) -> DeskSummary:
    med = statistics.median
    m = {
        "seen_on_target": med(r.seen_on_target for r in results),
        "mdml_pair_bleu": med(r.mdml_pair_bleu for r in results),
        "mdbl_pair_bleu": med(r.mdbl_pair_bleu for r in results),
        "zero_shot_lo_bleu_plain": med(r.zero_shot_lo_bleu["plain"] for r in results),
        "zero_shot_lo_bleu_aware": med(r.zero_shot_lo_bleu["aware"] for r in results),
    }
    for s in ALL_SCHEMES:
        m[f"unseen_on_target[{s.slug}]"] = med(r.unseen_on_target[s.slug] for r in results)
    tdd = m[f"unseen_on_target[{TDEC_DDEC}]"]
    others = {s.slug: m[f"unseen_on_target[{s.slug}]"] for s in ALL_SCHEMES if s.slug != TDEC_DDEC}
    checks = {
        "a": (m["seen_on_target"] >= 90.0,
              f"seen on-target {m['seen_on_target']:.2f}% >= 90"),
        "b": (m["mdml_pair_bleu"] >= m["mdbl_pair_bleu"],
              f"MDML {m['mdml_pair_bleu']:.2f} >= MDBL {m['mdbl_pair_bleu']:.2f} BLEU (pair, leave-out domain)"),
        "c": (m["zero_shot_lo_bleu_aware"] >= m["zero_shot_lo_bleu_plain"],
              f"+aware {m['zero_shot_lo_bleu_aware']:.2f} >= plain {m['zero_shot_lo_bleu_plain']:.2f} BLEU "
              f"(zero-shot, leave-out domain)"),
        "d": (all(tdd <= v for v in others.values()),
              f"T-DEC D-DEC unseen on-target {tdd:.2f}% <= others "
              + ", ".join(f"{k} {v:.2f}" for k, v in others.items())),
    }
    return DeskSummary(results, checks, m, sum(r.seconds for r in results))


def run_desk_experiment(seeds=(0, 1, 2), steps: int = 800, echo=None) -> DeskSummary:
    return summarize([run_seed(s, steps, echo) for s in seeds])
