"""Evaluation: corpus BLEU, on-target ratio, domain-token F1, grouped reports.

BLEU follows the SacreBLEU recipe for one reference, no tokenization and
exponential smoothing (``nrefs:1|tok:none|smooth:exp``); synthetic tokens are
already atomic so sentences are token lists.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .corpus import ALL_CATEGORIES, CATEGORIES, DataCondition, categorize_task

NGRAM_ORDER = 4


class MetricError(ValueError):
    pass


# ---------------------------------------------------------------------- BLEU

@dataclass(frozen=True)
class BleuStats:
    correct: tuple = (0, 0, 0, 0)
    total: tuple = (0, 0, 0, 0)
    sys_len: int = 0
    ref_len: int = 0

    def __add__(self, other: "BleuStats") -> "BleuStats":
        return BleuStats(tuple(a + b for a, b in zip(self.correct, other.correct)),
                         tuple(a + b for a, b in zip(self.total, other.total)),
                         self.sys_len + other.sys_len, self.ref_len + other.ref_len)


@dataclass(frozen=True)
class BleuResult:
    score: float
    precisions: tuple
    brevity_penalty: float
    sys_len: int
    ref_len: int
    stats: BleuStats


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def sentence_stats(hyp: Sequence, ref: Sequence) -> BleuStats:
    correct, total = [], []
    for n in range(1, NGRAM_ORDER + 1):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        correct.append(sum(min(c, r[g]) for g, c in h.items()))
        total.append(max(0, len(hyp) - n + 1))
    return BleuStats(tuple(correct), tuple(total), len(hyp), len(ref))


def bleu_stats(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> BleuStats:
    if len(hypotheses) != len(references):
        raise MetricError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    stats = BleuStats()
    for h, r in zip(hypotheses, references):
        stats = stats + sentence_stats(list(h), list(r))
    return stats


def bleu_from_stats(stats: BleuStats) -> BleuResult:
    """BLEU-4 with exponential smoothing of zero-match orders.

    Orders with no candidate n-grams at all (corpora shorter than n tokens)
    drop out of the geometric mean, so identical text always scores 100.
    """
    precisions = [0.0] * NGRAM_ORDER
    smooth = 1.0
    order = 0
    for n in range(NGRAM_ORDER):
        if stats.total[n] == 0:
            break
        order += 1
        if stats.correct[n] == 0:
            smooth *= 2
            precisions[n] = 100.0 / (smooth * stats.total[n])
        else:
            precisions[n] = 100.0 * stats.correct[n] / stats.total[n]
    bp = 1.0
    if stats.sys_len < stats.ref_len:
        bp = math.exp(1 - stats.ref_len / stats.sys_len) if stats.sys_len > 0 else 0.0
    if order == 0 or bp == 0.0:
        score = 0.0
    else:
        score = bp * math.exp(sum(math.log(p) for p in precisions[:order]) / order)
    return BleuResult(score, tuple(precisions), bp, stats.sys_len, stats.ref_len, stats)


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence]) -> BleuResult:
    if not hypotheses:
        raise MetricError("empty corpus")
    return bleu_from_stats(bleu_stats(hypotheses, references))


# --------------------------------------------------------- language identity

class InventoryDetector:
    """Language whose token inventory covers a strict majority of non-tag tokens."""

    def __init__(self, inventories: Mapping[int, Iterable[str]], ignore: Iterable[str] = ()):
        self.inventories = {k: frozenset(v) for k, v in inventories.items()}
        self.ignore = frozenset(ignore)

    def __call__(self, tokens: Sequence[str]):
        return identify_language(tokens, self.inventories, self.ignore)


def identify_language(tokens: Sequence[str], inventories: Mapping[int, Iterable[str]], ignore=()):
    toks = [t for t in tokens if t not in ignore and not (t.startswith("⟨") and t.endswith("⟩"))]
    if not toks:
        return None
    counts = Counter()
    for lang, inv in inventories.items():
        counts[lang] = sum(t in inv for t in toks)
    lang, best = max(sorted(counts.items()), key=lambda kv: kv[1])
    return lang if 2 * best > len(toks) else None


def on_target_ratio(hypotheses: Sequence[Sequence[str]], target_lang: int, detector: Callable) -> float:
    if not hypotheses:
        raise MetricError("on-target ratio needs at least one hypothesis")
    hits = sum(detector(h) == target_lang for h in hypotheses)
    return 100.0 * hits / len(hypotheses)


# ------------------------------------------------------------ domain tokens

def tfidf_scores(docs: Mapping[int, Sequence[str]], stopwords=frozenset()) -> dict:
    """{domain: {token: tf * ln(N / df)}} with raw counts as tf."""
    tfs = {d: Counter(t for t in toks if t not in stopwords) for d, toks in docs.items()}
    n = len(docs)
    df = Counter()
    for tf in tfs.values():
        df.update(tf.keys())
    return {d: {t: c * math.log(n / df[t]) for t, c in tf.items()} for d, tf in tfs.items()}


def domain_token_extract(docs: Mapping[int, Sequence[str]], k: int, stopwords=frozenset()) -> dict:
    """Top-``k`` tokens per domain document by tf-idf; ties broken lexicographically."""
    if k < 1:
        raise MetricError("k must be at least 1")
    out = {}
    for d, scores in tfidf_scores(docs, stopwords).items():
        ranked = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
        out[d] = [t for t, _ in ranked[:k]]
    return out


@dataclass(frozen=True)
class F1Stats:
    matches: int = 0
    hyp_count: int = 0
    ref_count: int = 0

    def __add__(self, o):
        return F1Stats(self.matches + o.matches, self.hyp_count + o.hyp_count, self.ref_count + o.ref_count)

    @property
    def precision(self) -> float:
        return self.matches / self.hyp_count if self.hyp_count else 0.0

    @property
    def recall(self) -> float:
        return self.matches / self.ref_count if self.ref_count else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 100.0 * 2 * p * r / (p + r) if p + r > 0 else 0.0


def domain_token_stats(hypotheses, references, token_set) -> F1Stats:
    token_set = frozenset(token_set)
    if not token_set:
        raise MetricError("domain token set is empty")
    total = F1Stats()
    for h, r in zip(hypotheses, references):
        hc = Counter(t for t in h if t in token_set)
        rc = Counter(t for t in r if t in token_set)
        total = total + F1Stats(sum((hc & rc).values()), sum(hc.values()), sum(rc.values()))
    return total


def domain_token_f1(hypotheses, references, token_set) -> float:
    return domain_token_stats(hypotheses, references, token_set).f1


# ------------------------------------------------------------------ reports

METRICS = ("bleu", "on_target", "domain_f1")


@dataclass
class CellResult:
    bleu: BleuResult
    on_target: float
    f1: F1Stats
    n: int
    on_target_hits: int = 0


@dataclass
class EvalReport:
    languages: tuple
    domains: tuple
    cells: dict = field(default_factory=dict)       # (src, tgt, domain) -> CellResult
    categories: dict = field(default_factory=dict)  # (src, tgt, domain) -> (seen, cat)

    def group_cells(self, domain: int) -> dict:
        groups = {c: [] for c in ALL_CATEGORIES}
        for key, cat in self.categories.items():
            if key[2] == domain and key in self.cells:
                groups[cat].append(key)
        return groups

    def pooled_bleu(self, keys) -> float:
        keys = list(keys)
        if not keys:
            return float("nan")
        stats = BleuStats()
        for k in keys:
            stats = stats + self.cells[k].bleu.stats
        return bleu_from_stats(stats).score

    def mean_bleu(self, keys) -> float:
        keys = list(keys)
        return sum(self.cells[k].bleu.score for k in keys) / len(keys) if keys else float("nan")

    def group_average(self, keys, metric: str = "bleu", average: str = "pooled") -> float:
        keys = list(keys)
        if not keys:
            return float("nan")
        if metric == "bleu":
            return self.pooled_bleu(keys) if average == "pooled" else self.mean_bleu(keys)
        if metric == "on_target":
            if average == "pooled":
                return 100.0 * sum(self.cells[k].on_target_hits for k in keys) / sum(self.cells[k].n for k in keys)
            return sum(self.cells[k].on_target for k in keys) / len(keys)
        if metric == "domain_f1":
            if average == "pooled":
                s = F1Stats()
                for k in keys:
                    s = s + self.cells[k].f1
                return s.f1
            return sum(self.cells[k].f1.f1 for k in keys) / len(keys)
        raise MetricError(f"unknown metric {metric!r}")

    def group_table(self, domain: int, metric: str = "bleu", average: str = "pooled") -> dict:
        groups = self.group_cells(domain)
        row = {c: self.group_average(keys, metric, average) for c, keys in groups.items()}
        row[("all", "avg")] = self.group_average([k for ks in groups.values() for k in ks], metric, average)
        return row

    def rows(self):
        """(src, tgt, domain, seen, category, metric, value) for every cell and metric."""
        for (s, t, d) in sorted(self.cells):
            c = self.cells[(s, t, d)]
            seen, cat = self.categories[(s, t, d)]
            values = {"bleu": c.bleu.score, "on_target": c.on_target, "domain_f1": c.f1.f1}
            for m in METRICS:
                yield (self.languages[s], self.languages[t], self.domains[d], seen, cat, m, values[m])


def categorize_cells(condition: DataCondition, domains: Iterable[int]) -> dict:
    return {(s, t, d): categorize_task(s, t, d, condition)
            for (s, t) in condition.directions() for d in domains}


def build_report(decode_fn: Callable, test_sets: Mapping, condition: DataCondition, detector: Callable,
                 domain_tokens: Mapping, cells=None) -> EvalReport:
    """Decode every requested (src, tgt, domain) cell and score it.

    ``decode_fn(examples, src, tgt, domain) -> list of token lists``.
    ``domain_tokens[(tgt, domain)]`` is the domain-specific token set of the
    target language.
    """
    if cells is None:
        cells = [(s, t, d) for (s, t) in condition.directions() for d in range(len(condition.domains))]
    report = EvalReport(condition.languages, condition.domains)
    report.categories = categorize_cells(condition, range(len(condition.domains)))
    for key in cells:
        if key not in test_sets:
            raise MetricError(f"missing test set for cell {key}")
        s, t, d = key
        exs = test_sets[key]
        hyps = decode_fn(exs, s, t, d)
        refs = [list(e.target_tokens) for e in exs]
        hits = sum(detector(h) == t for h in hyps)
        toks = domain_tokens.get((t, d)) or ()
        f1 = domain_token_stats(hyps, refs, toks) if toks else F1Stats()
        report.cells[key] = CellResult(corpus_bleu(hyps, refs), 100.0 * hits / len(hyps), f1, len(hyps), hits)
    return report


def write_report_tsv(path, report: EvalReport):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("src\ttgt\tdomain\tseen\tcategory\tmetric\tvalue\n")
        for row in report.rows():
            fh.write("\t".join(row[:-1]) + f"\t{row[-1]:.4f}\n")


def category_label(cat) -> str:
    seen, c = cat
    return f"{seen} {c.replace('->', '→')}"


def table_categories(counts: Mapping) -> list:
    """The six leave-out groups, plus any other group that is nonempty."""
    return [c for c in ALL_CATEGORIES if c in CATEGORIES or counts.get(c)]


def render_table(named_reports: Sequence[tuple], domain: int, metric: str = "bleu",
                 average: str = "pooled") -> str:
    """Text table with the seen/unseen x in/out column layout plus AVG."""
    if not named_reports:
        return ""
    first = named_reports[0][1]
    counts = {c: len({(k[0], k[1]) for k in keys}) for c, keys in first.group_cells(domain).items()}
    cats = table_categories(counts)
    heads = [f"{category_label(c)} ({counts[c]})" for c in cats] + ["AVG"]
    width = max(len(n) for n, _ in named_reports)
    lines = [f"{metric} on {first.domains[domain]}".ljust(width) + " | " + " | ".join(heads)]
    for name, rep in named_reports:
        row = rep.group_table(domain, metric, average)
        vals = [row[c] for c in cats] + [row[("all", "avg")]]
        cells = [f"{v:.2f}".rjust(len(h)) for v, h in zip(vals, heads)]
        lines.append(name.ljust(width) + " | " + " | ".join(cells))
    return "\n".join(lines) + "\n"
