"""Synthetic multilingual multi-domain parallel data.

A sentence is first drawn as a sequence of *concepts* and then rendered into
each language through a token cipher (a bijection over the concept
vocabulary) and a fixed word-order permutation. Language inventories are
disjoint, so a token identifies its language and every translation is exact.

Concepts are split into function words (the stopword set), per-domain
exclusive subsets and a shared pool.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

PAD, EOS = 0, 1
OOD_DOMAIN = -1
FORMAT_VERSION = 1

LANGUAGE_POOL = ("en", "de", "fr", "cs", "pl", "es", "it", "nl")
DOMAIN_POOL = ("law", "it", "koran", "med", "sub", "news", "bio", "fin")
WORD_ORDERS = ("identity", "reverse", "swap_pairs")

SEEN, UNSEEN = "seen", "unseen"
CATEGORIES = (
    (SEEN, "in->in"), (SEEN, "in->out"), (SEEN, "out->in"),
    (UNSEEN, "in->out"), (UNSEEN, "out->in"), (UNSEEN, "out->out"),
)
# Every (seen, side->side) combination. The six above are the groups a
# leave-out domain produces; the other two occur on fully available domains.
ALL_CATEGORIES = tuple((s, f"{a}->{b}") for s in (SEEN, UNSEEN) for a in ("in", "out") for b in ("in", "out"))


class CorpusError(ValueError):
    pass


# --------------------------------------------------------------------- specs

@dataclass(frozen=True)
class SyntheticSpec:
    n_languages: int = 3
    n_domains: int = 3
    concept_vocab_size: int = 48
    cipher_seed: int = 13
    domain_subset_size: int = 8
    min_length: int = 4
    max_length: int = 8
    n_function_tokens: int = 6
    p_function: float = 0.25
    p_domain: float = 0.5
    language_names: tuple = ()
    domain_names: tuple = ()

    def __post_init__(self):
        if not self.language_names:
            object.__setattr__(self, "language_names", LANGUAGE_POOL[:self.n_languages])
        if not self.domain_names:
            object.__setattr__(self, "domain_names", DOMAIN_POOL[:self.n_domains])
        self.validate()

    def validate(self):
        if self.n_languages < 2:
            raise CorpusError("need at least two languages")
        if len(self.language_names) != self.n_languages or len(set(self.language_names)) != self.n_languages:
            raise CorpusError("language_names must list n_languages distinct names")
        if len(self.domain_names) != self.n_domains or len(set(self.domain_names)) != self.n_domains:
            raise CorpusError("domain_names must list n_domains distinct names")
        used = self.n_function_tokens + self.n_domains * self.domain_subset_size
        if used >= self.concept_vocab_size:
            raise CorpusError(
                f"function tokens ({self.n_function_tokens}) + domain subsets "
                f"({self.n_domains}x{self.domain_subset_size}) exceed concept vocabulary "
                f"({self.concept_vocab_size}); the shared pool would be empty")
        if not 1 <= self.min_length <= self.max_length:
            raise CorpusError("invalid sentence-length range")
        if not (0 <= self.p_function <= 1 and 0 <= self.p_domain <= 1):
            raise CorpusError("probabilities must lie in [0, 1]")

    @property
    def function_concepts(self) -> range:
        return range(self.n_function_tokens)

    def domain_concepts(self, d: int) -> range:
        start = self.n_function_tokens + d * self.domain_subset_size
        return range(start, start + self.domain_subset_size)

    @property
    def shared_concepts(self) -> range:
        return range(self.n_function_tokens + self.n_domains * self.domain_subset_size,
                     self.concept_vocab_size)


@dataclass(frozen=True)
class Language:
    code: str
    cipher: np.ndarray = field(compare=False)
    order: str = "identity"

    def token(self, concept: int) -> str:
        return f"{self.code}_{int(self.cipher[concept]):03d}"


def build_languages(spec: SyntheticSpec) -> list[Language]:
    langs = []
    for i, code in enumerate(spec.language_names):
        rng = np.random.default_rng([spec.cipher_seed, i])
        cipher = rng.permutation(spec.concept_vocab_size)
        langs.append(Language(code, cipher, WORD_ORDERS[i % len(WORD_ORDERS)]))
    return langs


def reorder(seq: Sequence, order: str) -> list:
    seq = list(seq)
    if order == "identity":
        return seq
    if order == "reverse":
        return seq[::-1]
    if order == "swap_pairs":
        out = seq[:]
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
        return out
    raise CorpusError(f"unknown word order {order!r}")


def render(concepts: Sequence[int], language: Language) -> tuple:
    """Concept sentence -> surface tokens of ``language``."""
    return tuple(language.token(c) for c in reorder(concepts, language.order))


def render_ids(concepts: Sequence[int], language: Language) -> list[int]:
    """Cipher images only (no language prefix); identity cipher + order leaves input unchanged."""
    return [int(language.cipher[c]) for c in reorder(concepts, language.order)]


def language_inventories(spec: SyntheticSpec) -> dict[int, frozenset]:
    return {i: frozenset(lang.token(c) for c in range(spec.concept_vocab_size))
            for i, lang in enumerate(build_languages(spec))}


def stopwords(spec: SyntheticSpec, lang: int) -> frozenset:
    language = build_languages(spec)[lang]
    return frozenset(language.token(c) for c in spec.function_concepts)


# --------------------------------------------------------------- vocabulary

class Vocab:
    """Token ids: [pad, eos] + language tags + domain tags + ood tag + language tokens."""

    def __init__(self, language_names: Sequence[str], domain_names: Sequence[str], tokens: Sequence[str]):
        self.language_names = tuple(language_names)
        self.domain_names = tuple(domain_names)
        self.itos = ["<pad>", "</s>"]
        self.itos += [f"⟨lang:{c}⟩" for c in self.language_names]
        self.itos += [f"⟨dom:{d}⟩" for d in self.domain_names]
        self.itos.append("⟨dom:ood⟩")
        self.tag_range = (2, len(self.itos))
        self.itos += list(tokens)
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusError("duplicate vocabulary entries")

    @classmethod
    def from_spec(cls, spec: SyntheticSpec) -> "Vocab":
        tokens = [f"{code}_{k:03d}" for code in spec.language_names for k in range(spec.concept_vocab_size)]
        return cls(spec.language_names, spec.domain_names, tokens)

    def __len__(self):
        return len(self.itos)

    @property
    def n_languages(self) -> int:
        return len(self.language_names)

    @property
    def n_domains(self) -> int:
        return len(self.domain_names)

    def lang_tag(self, lang: int) -> int:
        if not 0 <= lang < self.n_languages:
            raise CorpusError(f"unknown language tag {lang}")
        return 2 + lang

    def domain_tag(self, domain: int) -> int:
        if domain == OOD_DOMAIN:
            return self.tag_range[1] - 1
        if not 0 <= domain < self.n_domains:
            raise CorpusError(f"unknown domain tag {domain}")
        return 2 + self.n_languages + domain

    def is_tag(self, i: int) -> bool:
        return self.tag_range[0] <= i < self.tag_range[1]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        try:
            return [self.stoi[t] for t in tokens]
        except KeyError as exc:
            raise CorpusError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]


# ------------------------------------------------------------------ examples

@dataclass(frozen=True)
class ParallelExample:
    source_tokens: tuple
    target_tokens: tuple
    source_lang: int
    target_lang: int
    domain: int
    tag_domain: int | None = None  # None: tag with the true domain

    def __post_init__(self):
        if not self.source_tokens or not self.target_tokens:
            raise CorpusError("empty token sequence")
        if self.source_lang == self.target_lang:
            raise CorpusError("source and target language must differ")

    def flipped(self) -> "ParallelExample":
        return replace(self, source_tokens=self.target_tokens, target_tokens=self.source_tokens,
                       source_lang=self.target_lang, target_lang=self.source_lang)

    @property
    def domain_for_tag(self) -> int:
        return self.domain if self.tag_domain is None else self.tag_domain


# ------------------------------------------------------------ data condition

@dataclass(frozen=True)
class DataCondition:
    """Availability matrix over (language pair, domain)."""

    languages: tuple
    domains: tuple
    pairs: tuple            # ((a, b), ...) language indices, a < b not required
    available: tuple        # available[pair_row][domain] -> bool
    high: frozenset
    low: frozenset

    def _row(self, a: int, b: int) -> int | None:
        for i, (x, y) in enumerate(self.pairs):
            if {x, y} == {a, b}:
                return i
        return None

    def is_available(self, a: int, b: int, d: int) -> bool:
        row = self._row(a, b)
        return row is not None and self.available[row][d]

    def pair_seen(self, a: int, b: int) -> bool:
        row = self._row(a, b)
        return row is not None and any(self.available[row])

    def cells(self) -> list[tuple]:
        return [(pair, d) for pair, row in zip(self.pairs, self.available)
                for d, ok in enumerate(row) if ok]

    def directions(self) -> list[tuple]:
        n = len(self.languages)
        return [(s, t) for s in range(n) for t in range(n) if s != t]

    def is_low_pair(self, pair) -> bool:
        return bool(set(pair) & self.low)

    def with_available(self, available) -> "DataCondition":
        return replace(self, available=tuple(tuple(bool(x) for x in row) for row in available))


def star_condition(languages: Sequence[str], domains: Sequence[str], n_high: int, hub: int = 0) -> DataCondition:
    """High-resource languages are fully connected; each low-resource language pairs only with ``hub``."""
    n = len(languages)
    if not 1 <= n_high <= n or not 0 <= hub < n_high:
        raise CorpusError("invalid high-resource layout")
    high = list(range(n_high))
    low = list(range(n_high, n))
    pairs = []
    for a, b in combinations(high, 2):
        pairs.append((a, b))
    pairs += [(hub, l) for l in low]
    avail = tuple(tuple(True for _ in domains) for _ in pairs)
    return DataCondition(tuple(languages), tuple(domains), tuple(pairs), avail,
                         frozenset(high), frozenset(low))


def five_language_condition() -> DataCondition:
    """En/De/Fr high-resource, Cs/Pl English-centric; five domains; all cells available."""
    langs = ("en", "de", "fr", "cs", "pl")
    doms = ("law", "it", "koran", "med", "sub")
    pairs = ((0, 2), (0, 1), (1, 2), (0, 3), (0, 4))  # En-Fr, En-De, De-Fr, En-Cs, En-Pl
    avail = tuple(tuple(True for _ in doms) for _ in pairs)
    return DataCondition(langs, doms, pairs, avail, frozenset({0, 1, 2}), frozenset({3, 4}))


def build_lodo(full: DataCondition, leave_out: int) -> DataCondition:
    """Drop ``leave_out`` for every pair involving a low-resource language."""
    if not 0 <= leave_out < len(full.domains):
        raise CorpusError(f"unknown domain {leave_out}")
    rows = []
    for pair, row in zip(full.pairs, full.available):
        row = list(row)
        if full.is_low_pair(pair):
            row[leave_out] = False
        rows.append(row)
    return full.with_available(rows)


def categorize_task(src: int, tgt: int, eval_domain: int, condition: DataCondition) -> tuple[str, str]:
    if src == tgt:
        raise CorpusError("source and target language must differ")
    seen = SEEN if condition.pair_seen(src, tgt) else UNSEEN

    def side(lang):
        ok = any(condition.available[i][eval_domain] for i, p in enumerate(condition.pairs) if lang in p)
        return "in" if ok else "out"

    return seen, f"{side(src)}->{side(tgt)}"


def write_condition(path, condition: DataCondition):
    lines = [f"# mdml-condition v{FORMAT_VERSION}",
             "# languages: " + " ".join(condition.languages),
             "# high: " + " ".join(condition.languages[i] for i in sorted(condition.high)),
             "# low: " + " ".join(condition.languages[i] for i in sorted(condition.low)),
             "pair\t" + "\t".join(condition.domains)]
    for (a, b), row in zip(condition.pairs, condition.available):
        name = f"{condition.languages[a]}-{condition.languages[b]}"
        lines.append(name + "\t" + "\t".join("1" if x else "0" for x in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_condition(path) -> DataCondition:
    meta, body = {}, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# "):
            key, _, value = line[2:].partition(":")
            meta[key.strip()] = value.split()
        elif line.strip():
            body.append(line.split("\t"))
    if f"mdml-condition v{FORMAT_VERSION}" not in meta:
        raise CorpusError(f"{path}: missing condition format header")
    langs = tuple(meta["languages"])
    domains = tuple(body[0][1:])
    pairs, avail = [], []
    for cells in body[1:]:
        a, b = cells[0].split("-")
        pairs.append((langs.index(a), langs.index(b)))
        avail.append(tuple(c == "1" for c in cells[1:]))
    return DataCondition(langs, domains, tuple(pairs), tuple(avail),
                         frozenset(langs.index(x) for x in meta["high"]),
                         frozenset(langs.index(x) for x in meta["low"]))


# ---------------------------------------------------------------- generation

def sample_concepts(spec: SyntheticSpec, domain: int, rng: np.random.Generator) -> list[int]:
    n = int(rng.integers(spec.min_length, spec.max_length + 1))
    kinds = rng.random(n)
    out = []
    dom = spec.domain_concepts(domain)
    shared = spec.shared_concepts
    for u in kinds:
        if u < spec.p_function:
            out.append(int(rng.integers(spec.n_function_tokens)))
        elif u < spec.p_function + (1 - spec.p_function) * spec.p_domain:
            out.append(dom[int(rng.integers(len(dom)))])
        else:
            out.append(shared[int(rng.integers(len(shared)))])
    return out


def _make_examples(spec, langs, src, tgt, domain, n, rng) -> list[ParallelExample]:
    out = []
    for _ in range(n):
        concepts = sample_concepts(spec, domain, rng)
        out.append(ParallelExample(render(concepts, langs[src]), render(concepts, langs[tgt]),
                                   src, tgt, domain))
    return out


def generate_corpus(spec: SyntheticSpec, condition: DataCondition, sizes, seed: int) -> dict:
    """Training bitext keyed by ((a, b), domain) for every cell of ``condition``.

    ``sizes`` is an int (used for every available cell) or a mapping
    cell -> int. Unavailable cells are present with zero examples.
    """
    if condition.languages != tuple(spec.language_names) or condition.domains != tuple(spec.domain_names):
        raise CorpusError("condition languages/domains do not match the SyntheticSpec settings")
    langs = build_languages(spec)
    corpus = {}
    for pair in condition.pairs:
        for d in range(spec.n_domains):
            key = (pair, d)
            ok = condition.is_available(*pair, d)
            n = sizes if isinstance(sizes, int) else int(sizes.get(key, 0))
            if not ok:
                if not isinstance(sizes, int) and n:
                    raise CorpusError(f"size given for unavailable cell {key}")
                n = 0
            elif n <= 0:
                raise CorpusError(f"available cell {key} needs a positive size")
            rng = np.random.default_rng([seed, pair[0], pair[1], d])
            corpus[key] = _make_examples(spec, langs, pair[0], pair[1], d, n, rng)
    return corpus


def generate_test_sets(spec: SyntheticSpec, n_per_cell: int, seed: int) -> dict:
    """Held-out sets keyed by (src, tgt, domain) for every direction and domain."""
    langs = build_languages(spec)
    out = {}
    for s in range(spec.n_languages):
        for t in range(spec.n_languages):
            if s == t:
                continue
            for d in range(spec.n_domains):
                rng = np.random.default_rng([seed, 7919, s, t, d])
                out[(s, t, d)] = _make_examples(spec, langs, s, t, d, n_per_cell, rng)
    return out


def write_examples(path, examples: Sequence[ParallelExample], spec: SyntheticSpec):
    ln, dn = spec.language_names, spec.domain_names
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(f"{ln[ex.source_lang]}\t{ln[ex.target_lang]}\t{dn[ex.domain]}\t"
                     f"{' '.join(ex.source_tokens)}\t{' '.join(ex.target_tokens)}\n")


def read_examples(path, spec: SyntheticSpec) -> list[ParallelExample]:
    ln, dn = list(spec.language_names), list(spec.domain_names)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                raise CorpusError(f"{path}:{lineno}: expected 5 tab-separated fields")
            s, t, d, src, tgt = parts
            out.append(ParallelExample(tuple(src.split()), tuple(tgt.split()),
                                       ln.index(s), ln.index(t), dn.index(d)))
    return out


# ------------------------------------------------------------------- tagging

@dataclass(frozen=True)
class TagScheme:
    language_side: str = "enc"       # "enc" | "dec"
    domain_side: str | None = None   # "enc" | "dec" | None

    def __post_init__(self):
        if self.language_side not in ("enc", "dec"):
            raise CorpusError(f"language tag side must be enc or dec, got {self.language_side!r}")
        if self.domain_side not in ("enc", "dec", None):
            raise CorpusError(f"domain tag side must be enc, dec or none, got {self.domain_side!r}")

    @classmethod
    def parse(cls, text: str) -> "TagScheme":
        """Accepts e.g. ``t-enc``, ``t-enc+d-dec``, ``T-DEC D-ENC``, ``t-dec+none``."""
        parts = text.lower().replace("+", " ").replace(",", " ").split()
        if not parts or parts[0] not in ("t-enc", "t-dec"):
            raise CorpusError(f"bad tag scheme {text!r}")
        dom = None
        if len(parts) == 2 and parts[1] != "none":
            if parts[1] not in ("d-enc", "d-dec"):
                raise CorpusError(f"bad tag scheme {text!r}")
            dom = parts[1][2:]
        elif len(parts) > 2:
            raise CorpusError(f"bad tag scheme {text!r}")
        return cls(parts[0][2:], dom)

    @property
    def has_domain_tag(self) -> bool:
        return self.domain_side is not None

    @property
    def name(self) -> str:
        s = f"T-{self.language_side.upper()}"
        return s + (f" D-{self.domain_side.upper()}" if self.domain_side else "")

    @property
    def slug(self) -> str:
        return self.name.lower().replace(" ", "+")


ALL_SCHEMES = tuple(TagScheme(l, d) for l in ("enc", "dec") for d in (None, "enc", "dec"))


@dataclass(frozen=True)
class Composed:
    enc_ids: tuple
    dec_in: tuple
    dec_tgt: tuple
    forced_prefix: tuple


def scheme_tags(scheme: TagScheme, target_lang: int, tag_domain: int | None, vocab: Vocab):
    """(encoder tags, decoder forced tags); language tag precedes domain tag on a shared side."""
    enc, dec = [], []
    (enc if scheme.language_side == "enc" else dec).append(vocab.lang_tag(target_lang))
    if scheme.domain_side is not None:
        if tag_domain is None:
            raise CorpusError("scheme carries a domain tag but no domain was given")
        (enc if scheme.domain_side == "enc" else dec).append(vocab.domain_tag(tag_domain))
    return enc, dec


def compose_tags(example: ParallelExample, scheme: TagScheme, vocab: Vocab) -> Composed:
    enc_tags, dec_tags = scheme_tags(scheme, example.target_lang, example.domain_for_tag, vocab)
    enc = enc_tags + vocab.encode(example.source_tokens) + [EOS]
    full = [EOS] + dec_tags + vocab.encode(example.target_tokens) + [EOS]
    tgt = full[1:]
    for i in range(len(dec_tags)):
        tgt[i] = PAD
    return Composed(tuple(enc), tuple(full[:-1]), tuple(tgt), tuple(dec_tags))


def replace_domain_tag_ood(stream: Iterable[ParallelExample], p_ood: float, seed) -> Iterator[ParallelExample]:
    if not 0.0 <= p_ood <= 1.0:
        raise CorpusError(f"p_ood must lie in [0, 1], got {p_ood}")
    rng = np.random.default_rng(seed)
    for ex in stream:
        if rng.random() < p_ood:
            yield replace(ex, tag_domain=OOD_DOMAIN)
        else:
            yield ex


# ------------------------------------------------------------------ sampling

def bucket_probabilities(sizes: Mapping, temperature: float) -> dict:
    """p(bucket) ∝ size^(1/T) over nonempty buckets; T = inf gives uniform."""
    if not temperature > 0:
        raise CorpusError("temperature must be positive")
    nonempty = {k: v for k, v in sizes.items() if v > 0}
    if not nonempty:
        raise CorpusError("all buckets are empty")
    if math.isinf(temperature):
        w = {k: 1.0 for k in nonempty}
    else:
        w = {k: float(v) ** (1.0 / temperature) for k, v in nonempty.items()}
    z = math.fsum(w.values())
    return {k: v / z for k, v in w.items()}


def epoch_steps(sizes: Mapping, temperature: float, batch_size: int) -> int:
    """Steps for one pass over the largest bucket under temperature sampling."""
    probs = bucket_probabilities(sizes, temperature)
    big = max(probs, key=lambda k: (sizes[k], str(k)))
    return math.ceil(sizes[big] / (batch_size * probs[big]))


def sample_batches(sizes: Mapping, temperature: float, batch_size: int, seed,
                   homogeneous: bool = False) -> Iterator[list]:
    """Endless stream of batches; each batch is a list of (bucket key, index in bucket).

    Buckets are drawn per slot (or once per batch when ``homogeneous``);
    indices come from a per-bucket shuffled order, reshuffled each epoch.
    """
    probs = bucket_probabilities(sizes, temperature)
    keys = sorted(probs, key=str)
    p = np.array([probs[k] for k in keys])
    p = p / p.sum()
    rng = np.random.default_rng(seed)
    orders = {k: [] for k in keys}

    def draw(k):
        if not orders[k]:
            orders[k] = list(rng.permutation(sizes[k])[::-1])
        return int(orders[k].pop())

    while True:
        if homogeneous:
            k = keys[int(rng.choice(len(keys), p=p))]
            yield [(k, draw(k)) for _ in range(batch_size)]
        else:
            picks = rng.choice(len(keys), size=batch_size, p=p)
            yield [(keys[int(i)], draw(keys[int(i)])) for i in picks]
