"""Training objectives and the phased procedure.

Phase 1 trains backbone + discriminator with NLL and the (aware/adversarial)
domain loss, replacing domain tags with the OOD tag at rate ``p_ood``.
Phase 2 freezes the backbone and trains one adapter per domain, routing each
example to its own domain's adapter. Phase 3 trains only the fusion gates
against the posterior-weighted bound plus a KL pull toward soft-label or
uniform targets. The adapter baseline stacks language and domain adapters on
a frozen backbone.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import OOD_DOMAIN, PAD, TagScheme, Vocab, compose_tags, sample_batches
from .model import MdmlModel, freeze_select, pad_batch

log = logging.getLogger(__name__)

MODES = ("plain", "aware", "adversarial")
PHASES = ("1", "2", "3", "baseline")
LOG_COLUMNS = ("step", "phase", "nmt_loss", "disc_loss", "entropy_term", "kl_term", "total",
               "token_count", "lr")


class TrainingError(RuntimeError):
    pass


# ----------------------------------------------------------------- targets

def soft_label(j: int, eps: float, n: int) -> np.ndarray:
    """(1 - eps) e_j + eps / n."""
    if not 0.0 < eps < 1.0:
        raise TrainingError(f"eps must lie in (0, 1), got {eps}")
    q = np.full(n, eps / n)
    q[j] += 1.0 - eps
    return q


def uniform_target(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


@dataclass(frozen=True)
class PosteriorTarget:
    kind: str           # "soft_label" | "uniform"
    n_domains: int
    domain: int = 0
    eps: float = 0.1

    def distribution(self) -> np.ndarray:
        if self.kind == "uniform":
            return uniform_target(self.n_domains)
        if self.kind == "soft_label":
            return soft_label(self.domain, self.eps, self.n_domains)
        raise TrainingError(f"unknown posterior target {self.kind!r}")


def kl_divergence(p, q) -> float:
    """Σ p log(p/q) with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise TrainingError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    if np.any((q <= 0) & (p > 0)):
        raise TrainingError("q has zero mass where p is positive")
    nz = p > 0
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))


# ------------------------------------------------------------------ batches

@dataclass
class Batch:
    enc_ids: np.ndarray
    dec_in: np.ndarray
    dec_tgt: np.ndarray
    domains: np.ndarray
    src_langs: np.ndarray
    tgt_langs: np.ndarray
    unseen: np.ndarray = None

    def __len__(self):
        return len(self.domains)

    @property
    def token_count(self) -> int:
        return int((self.dec_tgt != PAD).sum())


def collate(examples, scheme: TagScheme, vocab: Vocab, unseen=None) -> Batch:
    if not examples:
        raise TrainingError("empty batch")
    comp = [compose_tags(ex, scheme, vocab) for ex in examples]
    return Batch(
        enc_ids=pad_batch([c.enc_ids for c in comp]),
        dec_in=pad_batch([c.dec_in for c in comp]),
        dec_tgt=pad_batch([c.dec_tgt for c in comp]),
        domains=np.array([ex.domain for ex in examples]),
        src_langs=np.array([ex.source_lang for ex in examples]),
        tgt_langs=np.array([ex.target_lang for ex in examples]),
        unseen=np.zeros(len(examples), dtype=bool) if unseen is None else np.asarray(unseen, dtype=bool),
    )


# ------------------------------------------------------------------- losses

@dataclass
class LossReport:
    nmt_loss: float = 0.0
    disc_loss: float = 0.0
    entropy_term: float = 0.0
    kl_term: float = 0.0
    total: float = 0.0
    token_count: int = 0


@dataclass(frozen=True)
class LossConfig:
    mode: str = "plain"
    lam: float = 1.0
    lambda_rev: float = 1.0
    entropy_weight: float = 0.0
    kl_weight: float = 1.0
    eps: float = 0.1
    p_ood: float = 0.1
    p_unseen: float = 0.2
    label_smoothing: float = 0.0
    dadrop: float = 0.2

    def __post_init__(self):
        if self.mode not in MODES:
            raise TrainingError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.eps < 1.0:
            raise TrainingError(f"eps must lie in (0, 1), got {self.eps}")
        for name in ("p_ood", "p_unseen", "dadrop"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise TrainingError(f"{name} must lie in [0, 1]")


def _nll_from_logp(logp: Tensor, targets: np.ndarray, label_smoothing: float) -> Tensor:
    nll = ad.cross_entropy(logp, targets, PAD)
    if label_smoothing <= 0:
        return nll
    valid = (targets != PAD).astype(np.float64)
    v = logp.shape[-1]
    per_pos = ad.sum(logp, axis=-1)
    smooth = ad.scale(ad.sum(ad.mul_const(per_pos, valid)), -1.0 / (v * valid.sum()))
    return ad.add(ad.scale(nll, 1.0 - label_smoothing), ad.scale(smooth, label_smoothing))


def loss_nmt(model: MdmlModel, batch: Batch, rng=None, enc=None, label_smoothing: float = 0.0,
             **decode_kw) -> Tensor:
    """Mean NLL per non-pad target token; forced tag positions carry PAD targets."""
    if len(batch) == 0:
        raise TrainingError("empty batch")
    states, _, mask = enc if enc is not None else model.encode(batch.enc_ids, rng)
    logp, _ = model.decode(batch.dec_in, states, mask, rng=rng, **decode_kw)
    return _nll_from_logp(logp, batch.dec_tgt, label_smoothing)


def loss_disc(model: MdmlModel, h: Tensor, domains, mode: str = "aware", lambda_rev: float = 1.0):
    """(mean -log Pr(d|h), mean entropy of Pr(.|h))."""
    domains = np.asarray(domains)
    if domains.shape != (h.shape[0],) or np.any(domains < 0):
        raise TrainingError("every example needs its true domain label")
    logp = model.discriminate(h, mode, lambda_rev)
    nll = ad.cross_entropy(logp, domains, pad_id=-1)
    ent = ad.scale(ad.sum(ad.mul(ad.exp(logp), logp)), -1.0 / h.shape[0])
    return nll, ent


def _combine(nmt: Tensor, terms) -> Tensor:
    """nmt + w1*t1 + w2*t2 ..., accumulated left to right."""
    total = nmt
    for w, t in terms:
        total = ad.add(total, ad.scale(t, w))
    return total


def loss_combined(model: MdmlModel, batch: Batch, cfg: LossConfig, rng=None, **decode_kw):
    """NLL plus lam-weighted domain loss. Returns (LossReport, total Tensor)."""
    states, h, mask = model.encode(batch.enc_ids, rng)
    nmt = loss_nmt(model, batch, rng, enc=(states, h, mask), label_smoothing=cfg.label_smoothing, **decode_kw)
    report = LossReport(nmt_loss=float(nmt.data), token_count=batch.token_count)
    if cfg.mode == "plain":
        report.total = float(nmt.data)
        return report, nmt
    disc, ent = loss_disc(model, h, batch.domains, cfg.mode, cfg.lambda_rev)
    terms = [(cfg.lam, disc)]
    if cfg.entropy_weight:
        terms.append((cfg.entropy_weight, ent))
    total = _combine(nmt, terms)
    report.disc_loss = float(disc.data)
    report.entropy_term = float(ent.data)
    report.total = float(total.data)
    return report, total


def fusion_objective(model: MdmlModel, batch: Batch, cfg: LossConfig, rng=None):
    """Posterior-weighted bound + kl_weight * KL(posterior || Q), averaged over layers and tokens.

    For each decoder layer l, position i and known domain k:
        -q_lk (log P(y_i | x, z=k) + log q_lk)
    where P(.|z=k) is the decoder with every layer routed to adapter k (held
    constant: only the gates are trained) and q_l is the fusion posterior.
    """
    known = model.known_domains
    if not known:
        raise TrainingError("phase 3 needs trained domain adapters")
    kn = len(known)
    states, _, mask = model.encode(batch.enc_ids, rng)
    valid = batch.dec_tgt != PAD
    n_tok = valid.sum()
    if n_tok == 0:
        raise TrainingError("empty batch")
    with ad.no_grad():
        tok_logp = []
        for k in known:
            logp, _ = model.decode(batch.dec_in, states, mask, domain_mode="fixed", domains=k, rng=None)
            safe = np.where(valid, batch.dec_tgt, 0)
            tok_logp.append(np.take_along_axis(logp.data, safe[..., None], axis=-1)[..., 0])
    tok_logp = np.stack(tok_logp, axis=-1)           # [B,T,K]
    _, posts = model.decode(batch.dec_in, states, mask, domain_mode="fusion", rng=rng)
    col = {k: i for i, k in enumerate(known)}
    q_target = np.empty((len(batch), kn))
    for b, (d, u) in enumerate(zip(batch.domains, batch.unseen)):
        q_target[b] = uniform_target(kn) if u or d not in col else soft_label(col[int(d)], cfg.eps, kn)
    log_q_target = np.broadcast_to(np.log(q_target)[:, None, :], posts[0].shape)
    w = valid[..., None].astype(np.float64) * np.ones(kn)
    scale = 1.0 / (n_tok * len(posts))
    bound, kl = None, None
    for lp in posts:
        q = ad.exp(lp)
        b_l = ad.sum(ad.mul_const(ad.mul(q, ad.add_const(lp, tok_logp)), w))
        k_l = ad.sum(ad.mul_const(ad.mul(q, ad.add_const(lp, -log_q_target)), w))
        bound = b_l if bound is None else ad.add(bound, b_l)
        kl = k_l if kl is None else ad.add(kl, k_l)
    nmt = ad.scale(bound, -scale)
    kl = ad.scale(kl, scale)
    total = _combine(nmt, [(cfg.kl_weight, kl)])
    report = LossReport(nmt_loss=float(nmt.data), kl_term=float(kl.data), total=float(total.data),
                        token_count=int(n_tok))
    return report, total


# ---------------------------------------------------------------- plans

PHASE_PARTITION = {"1": "backbone+discriminator", "2": "domain-adapters", "3": "fusion",
                   "baseline": "language-adapters"}


@dataclass(frozen=True)
class PhasePlan:
    phase: str
    steps: int = 1000
    lr: float = 1e-3
    warmup: int = 100
    seed: int = 0
    batch_size: int = 32
    temperature: float = 5.0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise TrainingError(f"unknown phase {self.phase!r}")
        if self.steps < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise TrainingError("steps must be >= 0, batch_size and lr positive")

    @property
    def trainable(self) -> str:
        return PHASE_PARTITION[self.phase]

    @property
    def losses(self) -> tuple:
        return {"1": ("nmt", "disc"), "2": ("nmt",), "3": ("bound", "kl"),
                "baseline": ("nmt",)}[self.phase]

    def lr_at(self, step: int) -> float:
        """Constant learning rate after a linear warmup; ``step`` is 1-based."""
        if self.warmup <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup)


def validate_plan_order(plans) -> None:
    """Phase 2 needs an earlier phase 1; phase 3 needs an earlier phase 2."""
    seen = set()
    for p in plans:
        if p.phase == "2" and "1" not in seen:
            raise TrainingError("phase 2 listed before phase 1")
        if p.phase == "3" and "2" not in seen:
            raise TrainingError("phase 3 listed before phase 2")
        if p.phase == "baseline" and "1" not in seen:
            raise TrainingError("baseline adapters need a phase-1 backbone first")
        if p.phase in seen:
            raise TrainingError(f"phase {p.phase} listed twice")
        seen.add(p.phase)


# --------------------------------------------------------------- streams

def bucket_sizes(corpus: dict) -> dict:
    return {k: len(v) for k, v in corpus.items()}


def example_stream(corpus: dict, plan: PhasePlan, homogeneous: bool = False,
                   flip: bool = True) -> Iterator[list]:
    """Batches of examples drawn by temperature sampling; pair buckets yield either direction."""
    sizes = bucket_sizes(corpus)
    flip_rng = np.random.default_rng([plan.seed, 101])
    for picks in sample_batches(sizes, plan.temperature, plan.batch_size, [plan.seed, 100], homogeneous):
        out = []
        for key, i in picks:
            ex = corpus[key][i]
            if flip and flip_rng.random() < 0.5:
                ex = ex.flipped()
            out.append(ex)
        yield out


def directional_buckets(corpus: dict) -> dict:
    """((src, tgt), domain) -> examples; both directions of every pair bucket."""
    out = {}
    for ((a, b), d), exs in corpus.items():
        out[((a, b), d)] = list(exs)
        out[((b, a), d)] = [ex.flipped() for ex in exs]
    return out


def _ood(examples, rng, p):
    return [replace(ex, tag_domain=OOD_DOMAIN) if rng.random() < p else ex for ex in examples]


# ----------------------------------------------------------------- loop

@dataclass
class TrainState:
    optimizer: ad.Adam = field(default_factory=ad.Adam)
    step: int = 0
    log_lines: list = field(default_factory=list)


def format_log_line(step: int, phase: str, r: LossReport, lr: float) -> str:
    return "\t".join([str(step), phase, repr(r.nmt_loss), repr(r.disc_loss), repr(r.entropy_term),
                      repr(r.kl_term), repr(r.total), str(r.token_count), repr(lr)])


def run_phase(model: MdmlModel, plan: PhasePlan, batches: Iterator, loss_fn: Callable,
              state: TrainState | None = None, trainable: str | None = None, phase_code: int = 0) -> TrainState:
    """Generic optimisation loop; resumes from ``state.step`` by replaying the stream."""
    state = state or TrainState()
    names, _ = freeze_select(model, trainable or plan.trainable)
    params = {n: model.params[n] for n in names}
    for _ in range(state.step):
        next(batches)
    while state.step < plan.steps:
        step = state.step + 1
        batch = next(batches)
        rng = np.random.default_rng([plan.seed, phase_code, step])
        model.zero_grad()
        try:
            report, total = loss_fn(batch, rng)
            if not math.isfinite(report.total):
                raise FloatingPointError("non-finite loss")
            ad.backward(total, params.values())
            lr = plan.lr_at(step)
            state.optimizer.step(params, lr)
        except FloatingPointError as exc:
            raise TrainingError(f"phase {plan.phase} diverged at step {step}: {exc}") from exc
        state.log_lines.append(format_log_line(step, plan.phase, report, lr))
        state.step = step
    model.zero_grad()
    return state


# --------------------------------------------------------------- phases

def phase1_train(model: MdmlModel, corpus: dict, scheme: TagScheme, vocab: Vocab, cfg: LossConfig,
                 plan: PhasePlan, state: TrainState | None = None) -> TrainState:
    if any(model.domain_enabled) or model.use_language_adapters:
        raise TrainingError("phase 1 expects adapters to be disabled")
    ood_rng = np.random.default_rng([plan.seed, 102])
    p_ood = cfg.p_ood if scheme.has_domain_tag else 0.0

    def batches():
        for exs in example_stream(corpus, plan):
            yield collate(_ood(exs, ood_rng, p_ood) if p_ood else exs, scheme, vocab)

    def loss_fn(batch, rng):
        return loss_combined(model, batch, cfg, rng)

    return run_phase(model, plan, batches(), loss_fn, state, phase_code=1)


def phase2_train_adapters(model: MdmlModel, corpus: dict, scheme: TagScheme, vocab: Vocab, cfg: LossConfig,
                          plan: PhasePlan, state: TrainState | None = None) -> TrainState:
    """Train every domain's adapters on that domain only (per-example routing)."""
    for k in range(model.config.n_domains):
        has = any(len(v) for (_, d), v in corpus.items() if d == k)
        if not has:
            log.warning("domain %d has no training examples; adapter left at identity", k)
        model.domain_enabled[k] = has
    if not model.known_domains:
        raise TrainingError("no domain has training data")
    nonempty = {key: v for key, v in corpus.items() if v}

    def batches():
        for exs in example_stream(nonempty, plan):
            yield collate(exs, scheme, vocab)

    def loss_fn(batch, rng):
        nll = loss_nmt(model, batch, rng, label_smoothing=cfg.label_smoothing,
                       domain_mode="fixed", domains=batch.domains,
                       target_langs=batch.tgt_langs)
        return LossReport(nmt_loss=float(nll.data), total=float(nll.data), token_count=batch.token_count), nll

    return run_phase(model, plan, batches(), loss_fn, state, phase_code=2)


def phase3_train_fusion(model: MdmlModel, corpus: dict, scheme: TagScheme, vocab: Vocab, cfg: LossConfig,
                        plan: PhasePlan, state: TrainState | None = None) -> TrainState:
    if not model.known_domains:
        raise TrainingError("phase 3 needs a phase-2 checkpoint (no enabled adapters)")
    unseen_rng = np.random.default_rng([plan.seed, 103])
    nonempty = {key: v for key, v in corpus.items() if v}

    def batches():
        for exs in example_stream(nonempty, plan):
            unseen = unseen_rng.random(len(exs)) < cfg.p_unseen
            if scheme.has_domain_tag:
                exs = [replace(ex, tag_domain=OOD_DOMAIN) if u else ex for ex, u in zip(exs, unseen)]
            yield collate(exs, scheme, vocab, unseen=unseen)

    def loss_fn(batch, rng):
        return fusion_objective(model, batch, cfg, rng)

    return run_phase(model, plan, batches(), loss_fn, state, phase_code=3)


class DADrop:
    """Per-forward decision to skip the domain adapter."""

    def __init__(self, p: float, seed):
        if not 0.0 <= p <= 1.0:
            raise TrainingError("DADrop probability must lie in [0, 1]")
        self.p = p
        self.rng = np.random.default_rng(seed)
        self.calls = 0
        self.skips = 0

    def __call__(self) -> bool:
        skip = bool(self.rng.random() < self.p)
        self.calls += 1
        self.skips += skip
        return skip


def train_adapter_baseline(model: MdmlModel, corpus: dict, scheme: TagScheme, vocab: Vocab, cfg: LossConfig,
                           plan: PhasePlan, state: TrainState | None = None):
    """Stage 1: language adapters jointly. Stage 2: each domain adapter on homogeneous
    (direction, domain) batches with DADrop. Backbone frozen throughout.

    ``plan.steps`` is split evenly: half for stage 1, half across domains.
    Returns (stage-1 state, list of stage-2 states, DADrop counter).
    """
    model.use_language_adapters = True
    stage1 = replace(plan, steps=plan.steps // 2)

    def lang_batches():
        for exs in example_stream(corpus, stage1):
            yield collate(exs, scheme, vocab)

    def lang_loss(batch, rng):
        nll = loss_nmt(model, batch, rng, label_smoothing=cfg.label_smoothing, target_langs=batch.tgt_langs)
        return LossReport(nmt_loss=float(nll.data), total=float(nll.data), token_count=batch.token_count), nll

    s1 = run_phase(model, stage1, lang_batches(), lang_loss, state, trainable="language-adapters", phase_code=4)

    drop = DADrop(cfg.dadrop, [plan.seed, 104])
    buckets = directional_buckets(corpus)
    domains = [k for k in range(model.config.n_domains)
               if any(len(v) for (_, d), v in buckets.items() if d == k)]
    per_domain = (plan.steps - stage1.steps) // max(1, len(domains))
    stage2_states = []
    for k in range(model.config.n_domains):
        model.domain_enabled[k] = k in domains
    for k in domains:
        sub = {key: v for key, v in buckets.items() if key[1] == k and v}
        dplan = replace(plan, steps=per_domain, seed=plan.seed * 1000 + k + 1)

        def dom_batches(sub=sub, dplan=dplan):
            for exs in example_stream(sub, dplan, homogeneous=True, flip=False):
                yield collate(exs, scheme, vocab)

        def dom_loss(batch, rng, k=k):
            nll = loss_nmt(model, batch, rng, label_smoothing=cfg.label_smoothing,
                           domain_mode="fixed", domains=k, target_langs=batch.tgt_langs,
                           skip_domain_adapter=drop())
            return LossReport(nmt_loss=float(nll.data), total=float(nll.data), token_count=batch.token_count), nll

        stage2_states.append(run_phase(model, dplan, dom_batches(), dom_loss, None,
                                       trainable=f"adapters:{k}", phase_code=5))
    return s1, stage2_states, drop
