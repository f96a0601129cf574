"""Tagged transformer encoder-decoder with a domain discriminator, per-domain
adapters, language adapters (baseline) and adapter fusion.

Parameters live in one flat ``name -> Tensor`` dict. Name prefixes define the
partitions used for freezing:

    emb. enc. dec. out.      backbone
    disc.                    discriminator head
    adapter.dom.<l>.<k>.     domain adapter, decoder layer l, domain k
    adapter.lang.<l>.<k>.    language adapter (baseline), target language k
    fusion.<l>.              fusion gate of decoder layer l
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import EOS, PAD, TagScheme, Vocab, scheme_tags

NEG_INF = -1e9


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_domains: int
    n_languages: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ffn: int = 128
    adapter_bottleneck: int = 16
    dropout_rate: float = 0.1
    max_len: int = 32
    disc_hidden: int = 64
    disc_ood_class: bool = False
    adapter_activation: str = "relu"
    fusion_temperature: float = 1.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.adapter_activation not in ("relu", "identity"):
            raise ModelError(f"unknown adapter activation {self.adapter_activation!r}")
        if self.fusion_temperature <= 0:
            raise ModelError("fusion temperature must be positive")

    @classmethod
    def full_scale(cls, vocab_size: int, n_domains: int, n_languages: int) -> "ModelConfig":
        """Full-scale sizes (bottleneck and discriminator hidden 1024, dropout 0.3)."""
        return cls(vocab_size, n_domains, n_languages, d_model=1024, n_heads=16, n_enc_layers=12,
                   n_dec_layers=12, d_ffn=4096, adapter_bottleneck=1024, dropout_rate=0.3,
                   max_len=1024, disc_hidden=1024)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PARTITIONS = ("backbone", "backbone+discriminator", "discriminator", "domain-adapters",
              "language-adapters", "fusion")


class MdmlModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.domain_enabled = [False] * config.n_domains
        self.use_language_adapters = False
        rng = np.random.default_rng(seed)
        c = config
        d = c.d_model
        self._emb("emb.tok", (c.vocab_size, d), rng)
        self._emb("emb.pos", (c.max_len, d), rng)
        for l in range(c.n_enc_layers):
            self._attn(f"enc.{l}.self", rng)
            self._ffn(f"enc.{l}.ffn", rng)
            for ln in ("ln1", "ln2"):
                self._ln(f"enc.{l}.{ln}")
        self._ln("enc.ln_f")
        for l in range(c.n_dec_layers):
            self._attn(f"dec.{l}.self", rng)
            self._attn(f"dec.{l}.cross", rng)
            self._ffn(f"dec.{l}.ffn", rng)
            for ln in ("ln1", "ln2", "ln3"):
                self._ln(f"dec.{l}.{ln}")
            for k in range(c.n_domains):
                self._adapter(f"adapter.dom.{l}.{k}", rng)
            for k in range(c.n_languages):
                self._adapter(f"adapter.lang.{l}.{k}", rng)
            self._param(f"fusion.{l}.w", np.zeros((d, c.n_domains)))
            self._param(f"fusion.{l}.b", np.zeros(c.n_domains))
        self._ln("dec.ln_f")
        self._linear("out.proj", d, c.vocab_size, rng)
        n_out = c.n_domains + (1 if c.disc_ood_class else 0)
        self._linear("disc.l1", d, c.disc_hidden, rng)
        self._linear("disc.l2", c.disc_hidden, n_out, rng)

    # ------------------------------------------------------------ parameters

    def _param(self, name, value):
        self.params[name] = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)

    def _emb(self, name, shape, rng):
        self._param(name, rng.normal(0.0, shape[1] ** -0.5, size=shape))

    def _linear(self, name, n_in, n_out, rng):
        bound = math.sqrt(6.0 / (n_in + n_out))
        self._param(f"{name}.w", rng.uniform(-bound, bound, size=(n_in, n_out)))
        self._param(f"{name}.b", np.zeros(n_out))

    def _ln(self, name):
        self._param(f"{name}.g", np.ones(self.config.d_model))
        self._param(f"{name}.b", np.zeros(self.config.d_model))

    def _attn(self, name, rng):
        d = self.config.d_model
        for m in ("q", "k", "v", "o"):
            self._linear(f"{name}.{m}", d, d, rng)

    def _ffn(self, name, rng):
        self._linear(f"{name}.l1", self.config.d_model, self.config.d_ffn, rng)
        self._linear(f"{name}.l2", self.config.d_ffn, self.config.d_model, rng)

    def _adapter(self, name, rng):
        d, b = self.config.d_model, self.config.adapter_bottleneck
        bound = 1.0 / math.sqrt(d)
        self._param(f"{name}.down", rng.uniform(-bound, bound, size=(d, b)))
        self._param(f"{name}.up", np.zeros((b, d)))

    def partition(self, name: str) -> list[str]:
        """Parameter names in a named partition (see ``PARTITIONS``)."""
        prefixes = {
            "backbone": ("emb.", "enc.", "dec.", "out."),
            "discriminator": ("disc.",),
            "backbone+discriminator": ("emb.", "enc.", "dec.", "out.", "disc."),
            "domain-adapters": ("adapter.dom.",),
            "language-adapters": ("adapter.lang.",),
            "fusion": ("fusion.",),
        }
        if name.startswith("adapters:"):
            k = int(name.split(":", 1)[1])
            if not 0 <= k < self.config.n_domains:
                raise ModelError(f"unknown domain {k}")
            return [n for n in self.params if n.startswith("adapter.dom.") and n.split(".")[3] == str(k)]
        if name not in prefixes:
            raise ModelError(f"unknown partition {name!r}")
        return [n for n in self.params if n.startswith(prefixes[name])]

    def set_trainable(self, names):
        names = set(names)
        for n, p in self.params.items():
            p.requires_grad = n in names
            p.grad = None

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict:
        return {n: p.data for n, p in self.params.items()}

    def load_arrays(self, arrays: dict):
        missing = set(self.params) - set(arrays)
        if missing:
            raise ModelError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for n, p in self.params.items():
            if arrays[n].shape != p.shape:
                raise ModelError(f"shape mismatch for {n}: {arrays[n].shape} vs {p.shape}")
            p.data = np.array(arrays[n], dtype=np.float64)

    def flags(self) -> dict:
        return {"domain_enabled": list(self.domain_enabled),
                "use_language_adapters": self.use_language_adapters}

    def set_flags(self, flags: dict):
        self.domain_enabled = list(flags.get("domain_enabled", self.domain_enabled))
        self.use_language_adapters = bool(flags.get("use_language_adapters", False))

    @property
    def known_domains(self) -> list[int]:
        return [k for k, ok in enumerate(self.domain_enabled) if ok]

    # --------------------------------------------------------------- blocks

    def _lin(self, x, name):
        return ad.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _layer_norm(self, x, name):
        return ad.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _attention(self, xq, xkv, mask, name):
        c = self.config
        b, tq, d = xq.shape
        tk = xkv.shape[1]
        h, dh = c.n_heads, d // c.n_heads
        q = ad.transpose(ad.reshape(self._lin(xq, f"{name}.q"), (b, tq, h, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(self._lin(xkv, f"{name}.k"), (b, tk, h, dh)), (0, 2, 3, 1))
        v = ad.transpose(ad.reshape(self._lin(xkv, f"{name}.v"), (b, tk, h, dh)), (0, 2, 1, 3))
        scores = ad.scale(ad.matmul(q, k), 1.0 / math.sqrt(dh))
        scores = ad.add_const(scores, np.broadcast_to(mask[:, None, :, :], scores.shape))
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
        return self._lin(ctx, f"{name}.o")

    def _ffn_apply(self, x, name):
        return self._lin(ad.relu(self._lin(x, f"{name}.l1")), f"{name}.l2")

    def _embed(self, ids):
        b, t = ids.shape
        if t > self.config.max_len:
            raise ModelError(f"sequence length {t} exceeds max_len {self.config.max_len}")
        pos = np.broadcast_to(np.arange(t), (b, t))
        return ad.add(ad.embedding_lookup(self.params["emb.tok"], ids),
                      ad.embedding_lookup(self.params["emb.pos"], pos))

    def _drop(self, x, rng):
        return ad.dropout(x, self.config.dropout_rate, rng)

    # --------------------------------------------------------------- encoder

    def encode(self, source_ids, rng=None):
        """Returns (top-layer states [B,S,D], pooled h [B,D], pad mask [B,S])."""
        ids = np.asarray(source_ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        mask = ids != PAD
        if np.any(mask.sum(axis=1) == 0):
            raise ModelError("empty source after padding removal")
        s = ids.shape[1]
        key_mask = np.where(mask, 0.0, NEG_INF)[:, None, :]
        att_mask = np.broadcast_to(key_mask, (ids.shape[0], s, s))
        x = self._drop(self._embed(ids), rng)
        for l in range(self.config.n_enc_layers):
            p = f"enc.{l}"
            a = self._layer_norm(x, f"{p}.ln1")
            x = ad.add(x, self._drop(self._attention(a, a, att_mask, f"{p}.self"), rng))
            x = ad.add(x, self._drop(self._ffn_apply(self._layer_norm(x, f"{p}.ln2"), f"{p}.ffn"), rng))
        states = self._layer_norm(x, "enc.ln_f")
        return states, ad.mean_pool(states, mask), mask

    # --------------------------------------------------------- discriminator

    def discriminate(self, h: Tensor, mode: str, lambda_rev: float = 1.0) -> Tensor:
        """Log-probabilities over domains from the pooled encoder state."""
        if mode == "adversarial":
            h = ad.grad_reverse(h, lambda_rev)
        elif mode != "aware":
            raise ModelError(f"discriminator unavailable in mode {mode!r}")
        z = ad.relu(self._lin(h, "disc.l1"))
        return ad.log_softmax(self._lin(z, "disc.l2"), axis=-1)

    # -------------------------------------------------------------- adapters

    def _adapter_delta(self, x, prefix):
        z = ad.linear(x, self.params[f"{prefix}.down"])
        if self.config.adapter_activation == "relu":
            z = ad.relu(z)
        return ad.linear(z, self.params[f"{prefix}.up"])

    def adapter_apply(self, h: Tensor, layer: int, domain: int) -> Tensor:
        """h + f(h W_down) W_up with the adapter of ``domain`` at decoder ``layer``."""
        if not 0 <= domain < self.config.n_domains or not self.domain_enabled[domain]:
            raise ModelError(f"domain adapter {domain} is unknown or disabled")
        return ad.add(h, self._adapter_delta(h, f"adapter.dom.{layer}.{domain}"))

    def _routed(self, x, layer, keys, kind):
        """Per-example adapter routing: example b uses adapter keys[b]."""
        keys = np.asarray(keys)
        present = sorted(set(int(k) for k in keys))
        deltas = [self._adapter_delta(x, f"adapter.{kind}.{layer}.{k}") for k in present]
        if len(present) == 1:
            return ad.add(x, deltas[0])
        onehot = (keys[:, None] == np.array(present)[None, :]).astype(np.float64)
        w = Tensor(np.broadcast_to(onehot[:, None, :], x.shape[:2] + (len(present),)).copy())
        return ad.add(x, ad.mix(deltas, w))

    def fuse(self, h: Tensor, layer: int, known_domains=None):
        """Posterior-weighted combination of adapter outputs.

        Returns (mixed [B,T,D], log posterior [B,T,K]) where K = len(known_domains).
        """
        known = self.known_domains if known_domains is None else list(known_domains)
        if not known:
            raise ModelError("fusion needs at least one known domain adapter")
        for k in known:
            if not self.domain_enabled[k]:
                raise ModelError(f"domain adapter {k} is disabled")
        logits = ad.linear(h, self.params[f"fusion.{layer}.w"], self.params[f"fusion.{layer}.b"])
        logits = ad.select_last(logits, known)
        if self.config.fusion_temperature != 1.0:
            logits = ad.scale(logits, 1.0 / self.config.fusion_temperature)
        log_post = ad.log_softmax(logits, axis=-1)
        deltas = [self._adapter_delta(h, f"adapter.dom.{layer}.{k}") for k in known]
        mixed = ad.add(h, ad.mix(deltas, ad.exp(log_post)))
        return mixed, log_post

    # --------------------------------------------------------------- decoder

    def decode(self, dec_in, enc_states: Tensor, enc_mask, domain_mode="none", domains=None,
               target_langs=None, skip_domain_adapter=False, rng=None):
        """Log-probabilities [B,T,V] for every decoder position.

        domain_mode: "none" | "fixed" (route example b to adapter domains[b]) | "fusion".
        Language adapters (baseline) are applied first when enabled, keyed by ``target_langs``.
        Returns (log_probs, log_posteriors) with one [B,T,K] entry per layer under fusion.
        """
        ids = np.asarray(dec_in)
        if ids.ndim == 1:
            ids = ids[None, :]
        b, t = ids.shape
        if domain_mode not in ("none", "fixed", "fusion"):
            raise ModelError(f"unknown domain mode {domain_mode!r}")
        if domain_mode == "fixed":
            doms = np.broadcast_to(np.asarray(domains), (b,))
            for k in set(doms.tolist()):
                if not 0 <= k < self.config.n_domains or not self.domain_enabled[k]:
                    raise ModelError(f"domain adapter {k} is unknown or disabled")
        causal = np.triu(np.full((t, t), NEG_INF), k=1)
        self_mask = causal[None, :, :] + np.where(ids != PAD, 0.0, NEG_INF)[:, None, :]
        self_mask = np.maximum(self_mask, NEG_INF)
        cross_mask = np.broadcast_to(np.where(enc_mask, 0.0, NEG_INF)[:, None, :], (b, t, enc_mask.shape[1]))
        x = self._drop(self._embed(ids), rng)
        posts = []
        for l in range(self.config.n_dec_layers):
            p = f"dec.{l}"
            a = self._layer_norm(x, f"{p}.ln1")
            x = ad.add(x, self._drop(self._attention(a, a, self_mask, f"{p}.self"), rng))
            a = self._layer_norm(x, f"{p}.ln2")
            x = ad.add(x, self._drop(self._attention(a, enc_states, cross_mask, f"{p}.cross"), rng))
            x = ad.add(x, self._drop(self._ffn_apply(self._layer_norm(x, f"{p}.ln3"), f"{p}.ffn"), rng))
            if self.use_language_adapters:
                x = self._routed(x, l, np.broadcast_to(np.asarray(target_langs), (b,)), "lang")
            if domain_mode == "fixed" and not skip_domain_adapter:
                x = self._routed(x, l, doms, "dom")
            elif domain_mode == "fusion":
                x, lp = self.fuse(x, l)
                posts.append(lp)
        x = self._layer_norm(x, "dec.ln_f")
        return ad.log_softmax(self._lin(x, "out.proj"), axis=-1), posts

    def decode_step(self, prefix_ids, enc_states, enc_mask, **kw) -> Tensor:
        """Next-token log-probabilities [B,V] after ``prefix_ids``."""
        logp, _ = self.decode(prefix_ids, enc_states, enc_mask, **kw)
        b, t, v = logp.shape
        return ad.select_last(ad.reshape(logp, (b, t * v)), range((t - 1) * v, t * v))


def pad_batch(seqs, pad=PAD) -> np.ndarray:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def greedy_decode(model: MdmlModel, sources, scheme: TagScheme, target_language: int, domain_tag,
                  vocab: Vocab, max_len: int | None = None, domain_mode: str = "none",
                  adapter_domain: int | None = None, source_language: int | None = None) -> list[list[int]]:
    """Greedy decoding of a batch of token-id sources into one target language.

    ``domain_tag`` is a domain id or ``OOD_DOMAIN``; it is ignored when the
    scheme carries no domain tag. Forced decoder tags are emitted before
    search starts. PAD and tag ids are never generated.
    """
    enc_tags, dec_tags = scheme_tags(scheme, target_language,
                                     domain_tag if scheme.has_domain_tag else None, vocab)
    srcs = [list(enc_tags) + list(s) + [EOS] for s in sources]
    for s in srcs:
        for i in s:
            if not 0 <= i < model.config.vocab_size:
                raise ModelError(f"unknown token id {i}")
    limit = model.config.max_len - 1 - len(dec_tags)
    max_len = limit if max_len is None else min(max_len, limit)
    banned = np.zeros(model.config.vocab_size, dtype=bool)
    banned[PAD] = True
    banned[vocab.tag_range[0]:vocab.tag_range[1]] = True
    kw = {"domain_mode": domain_mode}
    if domain_mode == "fixed":
        kw["domains"] = adapter_domain
    if model.use_language_adapters:
        kw["target_langs"] = target_language
    with ad.no_grad():
        enc_ids = pad_batch(srcs)
        states, _, mask = model.encode(enc_ids)
        n = len(srcs)
        prefix = np.array([[EOS] + list(dec_tags)] * n, dtype=np.int64)
        out = [[] for _ in range(n)]
        done = np.zeros(n, dtype=bool)
        for _ in range(max_len):
            logp, _ = model.decode(prefix, states, mask, **kw)
            last = np.where(banned, -np.inf, logp.data[:, -1, :])
            nxt = last.argmax(axis=-1)
            for i in range(n):
                if not done[i]:
                    if nxt[i] == EOS:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
            if done.all():
                break
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return out


def freeze_select(model: MdmlModel, trainable_set: str) -> tuple[list[str], list[str]]:
    """Split parameter names into (trainable, frozen) and apply it to the model."""
    trainable = model.partition(trainable_set)
    if not trainable:
        raise ModelError(f"partition {trainable_set!r} is empty")
    keep = set(trainable)
    frozen = [n for n in model.params if n not in keep]
    model.set_trainable(trainable)
    return trainable, frozen
