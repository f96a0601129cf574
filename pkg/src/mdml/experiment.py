"""Pipeline commands behind the CLI: generate, train, evaluate, lodo-sweep, report.

A run directory looks like::

    <out>/config.<verb>.ini          frozen copy of the resolved config of each verb
    <out>/data/MANIFEST.tsv          corpus fingerprint + per-file line counts and digests
    <out>/data/condition.tsv         availability matrix
    <out>/data/train/<a>-<b>.<domain>.tsv
    <out>/data/test/<src>-<tgt>.<domain>.tsv
    <out>/checkpoints/phase-<id>.ckpt          (phase-<id>.partial.ckpt while interrupted)
    <out>/logs/phase-<id>.tsv
    <out>/eval/{report,groups,stats}.tsv, tables.txt
    <out>/sweep/results.tsv, tables.txt, lo-<domain>/...   (lodo-sweep)
    <out>/report.txt

Nothing written depends on wall-clock time or on the output path, so a rerun
from the frozen config reproduces every file byte for byte.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from dataclasses import fields as dc_fields
from pathlib import Path
from typing import Callable

from . import checkpoint as ckpt
from .config import ConfigError, ExperimentConfig, dumps
from .corpus import (CorpusError, DataCondition, TagScheme, Vocab, generate_corpus,
                     generate_test_sets, language_inventories, read_condition, read_examples, stopwords,
                     write_condition, write_examples)
from .metrics import (METRICS, BleuStats, CellResult, EvalReport, F1Stats, InventoryDetector,
                      bleu_from_stats, build_report, categorize_cells, domain_token_extract, render_table, table_categories,
                      write_report_tsv)
from .model import MdmlModel, ModelError, greedy_decode
from .training import (LOG_COLUMNS, TrainingError, TrainState, phase1_train, phase2_train_adapters,
                       phase3_train_fusion, train_adapter_baseline)

CORPUS_FORMAT = "mdml-corpus v1"
RUN_FORMAT = "mdml-run v1"

TRAINERS = {"1": phase1_train, "2": phase2_train_adapters, "3": phase3_train_fusion}


class ExperimentError(RuntimeError):
    def __init__(self, message: str, phase: str | None = None):
        super().__init__(message)
        self.phase = phase


# ------------------------------------------------------------------ helpers

def resolved_config_name(verb: str) -> str:
    return f"config.{verb}.ini"


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def vocab_for(cfg: ExperimentConfig) -> Vocab:
    return Vocab.from_spec(cfg.synthetic)


def run_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.experiment.out)


def data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.data.data_dir) if cfg.data.data_dir else run_dir(cfg) / "data"


def freeze_config(cfg: ExperimentConfig, verb: str) -> Path:
    """Write the resolved config of ``verb`` next to its outputs.

    A directory holds one run per verb: rerunning a verb with a different
    config is refused rather than mixing outputs.
    """
    root = run_dir(cfg)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExperimentError(f"cannot create output directory {root}: {exc.strerror}") from None
    path = root / resolved_config_name(verb)
    text = dumps(cfg)
    if path.exists() and path.read_text(encoding="utf-8") != text:
        raise ExperimentError(f"{root} already holds an earlier `{verb}` run with a different config; "
                              f"choose another --out")
    path.write_text(text, encoding="utf-8")
    return path


def data_fingerprint(cfg: ExperimentConfig) -> str:
    """Digest of every setting that changes the generated corpus."""
    d, spec = cfg.data, cfg.synthetic
    fields = [f"{f.name}={getattr(spec, f.name)!r}" for f in dc_fields(spec)]
    fields += [d.condition, str(d.n_high), str(d.hub), str(d.leave_out), str(d.pairs_per_cell),
              str(d.test_per_cell), str(cfg.seed)]
    if d.condition not in ("star", "five-language"):
        fields.append(Path(d.condition).read_text(encoding="utf-8"))
    return _sha("\n".join(fields).encode("utf-8"))


def _cell_name(cond: DataCondition, pair, d: int) -> str:
    a, b = pair
    return f"{cond.languages[a]}-{cond.languages[b]}.{cond.domains[d]}.tsv"


def format_size_table(cond: DataCondition, sizes: dict) -> str:
    """Training sentences per language pair (rows) and domain (columns)."""
    names = [f"{cond.languages[a]}-{cond.languages[b]}" for a, b in cond.pairs]
    w = max(len("pair"), *(len(n) for n in names))
    cols = [max(len(d), 6) for d in cond.domains]
    lines = ["pair".ljust(w) + "  " + "  ".join(d.rjust(c) for d, c in zip(cond.domains, cols)) + "  " + "total".rjust(7)]
    for name, pair in zip(names, cond.pairs):
        row = [sizes.get((pair, d), 0) for d in range(len(cond.domains))]
        lines.append(name.ljust(w) + "  " + "  ".join(str(n).rjust(c) for n, c in zip(row, cols))
                     + "  " + str(sum(row)).rjust(7))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------- generate

def cmd_generate(cfg: ExperimentConfig, echo: Callable = print) -> dict:
    """Write training corpora (one file per pair and domain), test sets, condition and manifest."""
    cfg.validate()
    freeze_config(cfg, "generate")
    spec, cond = cfg.synthetic, cfg.condition()
    root = data_dir(cfg)
    try:
        (root / "train").mkdir(parents=True, exist_ok=True)
        (root / "test").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExperimentError(f"cannot write corpus under {root}: {exc.strerror}") from None
    corpus = generate_corpus(spec, cond, cfg.data.pairs_per_cell, cfg.seed)
    tests = generate_test_sets(spec, cfg.data.test_per_cell, cfg.seed)
    manifest = [f"format\t{CORPUS_FORMAT}", f"fingerprint\t{data_fingerprint(cfg)}",
                f"vocab_size\t{len(vocab_for(cfg))}"]
    files = []
    for (pair, d), exs in sorted(corpus.items()):
        files.append((Path("train") / _cell_name(cond, pair, d), exs))
    for (s, t, d), exs in sorted(tests.items()):
        files.append((Path("test") / f"{spec.language_names[s]}-{spec.language_names[t]}.{spec.domain_names[d]}.tsv",
                      exs))
    for rel, exs in files:
        write_examples(root / rel, exs, spec)
        manifest.append(f"{rel.as_posix()}\t{len(exs)}\t{_sha((root / rel).read_bytes())}")
    write_condition(root / "condition.tsv", cond)
    (root / "MANIFEST.tsv").write_text("\n".join(manifest) + "\n", encoding="utf-8")
    sizes = {k: len(v) for k, v in corpus.items()}
    echo("training sentences per pair and domain")
    echo(format_size_table(cond, sizes).rstrip("\n"))
    return {"data_dir": str(root), "sizes": sizes, "n_files": len(files)}


def _check_manifest(cfg: ExperimentConfig) -> None:
    path = data_dir(cfg) / "MANIFEST.tsv"
    if not path.exists():
        raise ExperimentError(f"no corpus at {data_dir(cfg)}; run `mdml generate` with this config first")
    meta = dict(line.split("\t", 1) for line in path.read_text(encoding="utf-8").splitlines()[:3])
    if meta.get("format") != CORPUS_FORMAT:
        raise ExperimentError(f"{path}: unsupported corpus format {meta.get('format')!r}")
    if meta.get("fingerprint") != data_fingerprint(cfg):
        raise ExperimentError(f"corpus at {data_dir(cfg)} was generated with a different data config")


def load_corpus(cfg: ExperimentConfig) -> tuple[DataCondition, dict]:
    _check_manifest(cfg)
    root = data_dir(cfg)
    cond = read_condition(root / "condition.tsv")
    corpus = {}
    for pair in cond.pairs:
        for d in range(len(cond.domains)):
            corpus[(pair, d)] = read_examples(root / "train" / _cell_name(cond, pair, d), cfg.synthetic)
    return cond, corpus


def load_test_sets(cfg: ExperimentConfig) -> dict:
    _check_manifest(cfg)
    spec = cfg.synthetic
    ln, dn = spec.language_names, spec.domain_names
    out = {}
    for s in range(spec.n_languages):
        for t in range(spec.n_languages):
            if s != t:
                for d in range(spec.n_domains):
                    out[(s, t, d)] = read_examples(data_dir(cfg) / "test" / f"{ln[s]}-{ln[t]}.{dn[d]}.tsv", spec)
    return out


def variant_corpus(cfg: ExperimentConfig, corpus: dict, variant: str | None = None) -> dict:
    """Training buckets seen by a variant: MDBL keeps one pair, SDML one domain."""
    variant = variant or cfg.experiment.variant
    if variant in ("mdml", "baseline-adapter"):
        return dict(corpus)
    if variant == "mdbl":
        pair = set(cfg.mdbl_pair())
        return {k: v for k, v in corpus.items() if set(k[0]) == pair}
    if variant == "sdml":
        d = cfg.sdml_domain()
        return {k: v for k, v in corpus.items() if k[1] == d}
    raise ConfigError(f"unknown variant {variant!r}")


# -------------------------------------------------------------------- train

def _ckpt_path(cfg, phase: str, partial: bool = False) -> Path:
    return run_dir(cfg) / "checkpoints" / f"phase-{phase}{'.partial' if partial else ''}.ckpt"


def _header(cfg: ExperimentConfig, model: MdmlModel, vocab: Vocab, phase: str, step: int,
            complete: bool, optimizer_t: int) -> dict:
    return {"format": RUN_FORMAT, "phase": phase, "step": step, "complete": complete,
            "optimizer_t": optimizer_t, "flags": model.flags(), "model_config": model.config.to_dict(),
            "vocab_size": len(vocab), "tag_range": list(vocab.tag_range), "scheme": cfg.scheme.slug,
            "config": dumps(replace(cfg, experiment=replace(cfg.experiment, out=".")))}


def _save(path: Path, model: MdmlModel, header: dict, optimizer=None):
    arrays = dict(model.state_arrays())
    if optimizer is not None:
        arrays.update({f"optim/{k}": v for k, v in optimizer.state_arrays().items()})
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    ckpt.save(tmp, arrays, header)
    tmp.replace(path)


def _restore(model: MdmlModel, path: Path) -> tuple[dict, dict]:
    arrays, header = ckpt.load(path)
    model.load_arrays({k: v for k, v in arrays.items() if not k.startswith("optim/")})
    model.set_flags(header.get("flags", {}))
    optim = {k[len("optim/"):]: v for k, v in arrays.items() if k.startswith("optim/")}
    return header, optim


def _write_log(cfg, phase: str, lines: list):
    path = run_dir(cfg) / "logs" / f"phase-{phase}.tsv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\t".join(LOG_COLUMNS) + "\n" + "".join(l + "\n" for l in lines), encoding="utf-8")


def _read_log(cfg, phase: str, n: int) -> list:
    path = run_dir(cfg) / "logs" / f"phase-{phase}.tsv"
    if not path.exists():
        raise ExperimentError(f"log for interrupted phase {phase} is missing", phase=phase)
    lines = path.read_text(encoding="utf-8").splitlines()[1:]
    if len(lines) < n:
        raise ExperimentError(f"log for phase {phase} has {len(lines)} rows, checkpoint says {n}", phase=phase)
    return lines[:n]


def build_model(cfg: ExperimentConfig, vocab: Vocab | None = None) -> MdmlModel:
    vocab = vocab or vocab_for(cfg)
    return MdmlModel(cfg.model_config(len(vocab)), seed=cfg.seed)


@dataclass
class TrainResult:
    model: MdmlModel
    completed: list
    interrupted: str | None = None


def train_model(cfg: ExperimentConfig, corpus: dict, vocab: Vocab, model: MdmlModel | None = None,
                max_steps: int | None = None, save: bool = True) -> TrainResult:
    """Run the configured phases in order, resuming from checkpoints under ``<out>`` when ``save``.

    ``max_steps`` caps the optimizer steps taken by this call; an interrupted
    phase leaves a partial checkpoint that the next call resumes from. The
    adapter baseline restarts from its beginning instead (it is never split).
    """
    model = model or build_model(cfg, vocab)
    scheme, loss = cfg.scheme, cfg.loss
    budget = max_steps
    completed = []
    for plan in cfg.plans:
        p = plan.phase
        final, partial = _ckpt_path(cfg, p), _ckpt_path(cfg, p, partial=True)
        if save and final.exists():
            _restore(model, final)
            completed.append(p)
            continue
        try:
            if p == "baseline":
                if budget is not None and budget < plan.steps:
                    return TrainResult(model, completed, interrupted=p)
                s1, s2, _ = train_adapter_baseline(model, corpus, scheme, vocab, loss, plan)
                lines = s1.log_lines + [l for s in s2 for l in s.log_lines]
                optimizer, step = None, plan.steps
                if budget is not None:
                    budget -= plan.steps
            else:
                state = TrainState()
                if save and partial.exists():
                    header, optim = _restore(model, partial)
                    state.optimizer.load_state(int(header["optimizer_t"]), optim)
                    state.step = int(header["step"])
                    state.log_lines = _read_log(cfg, p, state.step)
                start = state.step
                run_plan = plan if budget is None else replace(plan, steps=min(plan.steps, start + budget))
                state = TRAINERS[p](model, corpus, scheme, vocab, loss, run_plan, state)
                if budget is not None:
                    budget -= state.step - start
                lines, optimizer, step = state.log_lines, state.optimizer, state.step
                if step < plan.steps:
                    if save:
                        _save(partial, model, _header(cfg, model, vocab, p, step, False, optimizer.t), optimizer)
                        _write_log(cfg, p, lines)
                    return TrainResult(model, completed, interrupted=p)
        except (TrainingError, ModelError) as exc:
            raise ExperimentError(f"phase {p}: {exc}", phase=p) from None
        if save:
            _save(final, model, _header(cfg, model, vocab, p, step, True, optimizer.t if optimizer else 0), None)
            _write_log(cfg, p, lines)
            if partial.exists():
                partial.unlink()
        completed.append(p)
    return TrainResult(model, completed)


def cmd_train(cfg: ExperimentConfig, max_steps: int | None = None, echo: Callable = print) -> dict:
    cfg.validate()
    freeze_config(cfg, "train")
    _, corpus = load_corpus(cfg)
    corpus = variant_corpus(cfg, corpus)
    vocab = vocab_for(cfg)
    res = train_model(cfg, corpus, vocab, max_steps=max_steps)
    for p in res.completed:
        echo(f"phase {p}: complete ({_ckpt_path(cfg, p)})")
    if res.interrupted:
        echo(f"phase {res.interrupted}: interrupted; rerun the same command to resume")
    return {"completed": res.completed, "interrupted": res.interrupted}


# ----------------------------------------------------------------- evaluate

def domain_token_sets(cfg: ExperimentConfig, test_sets: dict) -> dict:
    """Top-k tf-idf tokens per (target language, domain), from the test references."""
    spec = cfg.synthetic
    out = {}
    for t in range(spec.n_languages):
        docs = {d: [tok for (s, tt, dd), exs in sorted(test_sets.items()) if tt == t and dd == d
                    for e in exs for tok in e.target_tokens] for d in range(spec.n_domains)}
        for d, toks in domain_token_extract(docs, cfg.experiment.topk, stopwords(spec, t)).items():
            out[(t, d)] = frozenset(toks)
    return out


def decode_policy(cfg: ExperimentConfig, model: MdmlModel) -> Callable:
    """Adapter routing at test time for the trained phases."""
    phases = set(cfg.experiment.phases)

    def policy(d: int) -> dict:
        if "3" in phases:
            return {"domain_mode": "fusion"}
        if ("2" in phases or "baseline" in phases) and model.domain_enabled[d]:
            return {"domain_mode": "fixed", "adapter_domain": d}
        return {"domain_mode": "none"}

    return policy


def make_decode_fn(cfg: ExperimentConfig, model: MdmlModel, vocab: Vocab) -> Callable:
    scheme, policy = cfg.scheme, decode_policy(cfg, model)

    def decode_fn(examples, src, tgt, d):
        ids = greedy_decode(model, [vocab.encode(e.source_tokens) for e in examples], scheme, tgt, d, vocab,
                            **policy(d))
        return [vocab.decode(h) for h in ids]

    return decode_fn


def evaluate_model(cfg: ExperimentConfig, model: MdmlModel, test_sets: dict, condition: DataCondition,
                   cells=None) -> EvalReport:
    vocab = vocab_for(cfg)
    detector = InventoryDetector(language_inventories(cfg.synthetic))
    return build_report(make_decode_fn(cfg, model, vocab), test_sets, condition, detector,
                        domain_token_sets(cfg, test_sets), cells)


def _final_checkpoint(cfg: ExperimentConfig) -> Path:
    return _ckpt_path(cfg, cfg.experiment.phases[-1])


def load_checkpoint_model(cfg: ExperimentConfig, path) -> MdmlModel:
    """Rebuild a model from a checkpoint, checking it matches the config and vocabulary."""
    path = Path(path)
    if not path.exists():
        raise ExperimentError(f"checkpoint {path} not found; run `mdml train` first")
    arrays, header = ckpt.load(path)
    vocab = vocab_for(cfg)
    if header.get("format") != RUN_FORMAT:
        raise ExperimentError(f"{path}: not a run checkpoint")
    if header.get("vocab_size") != len(vocab) or header.get("tag_range") != list(vocab.tag_range):
        raise ExperimentError(f"config mismatch: checkpoint vocabulary {header.get('vocab_size')} "
                              f"(tags {header.get('tag_range')}) vs corpus vocabulary {len(vocab)} "
                              f"(tags {list(vocab.tag_range)})")
    expected = cfg.model_config(len(vocab)).to_dict()
    if header.get("model_config") != expected:
        diff = sorted(k for k in expected if header.get("model_config", {}).get(k) != expected[k])
        raise ExperimentError(f"config mismatch: model settings differ in {', '.join(diff)}")
    if header.get("scheme") != cfg.scheme.slug:
        raise ExperimentError(f"config mismatch: checkpoint scheme {header.get('scheme')} vs {cfg.scheme.slug}")
    model = MdmlModel(cfg.model_config(len(vocab)), seed=cfg.seed)
    model.load_arrays({k: v for k, v in arrays.items() if not k.startswith("optim/")})
    model.set_flags(header.get("flags", {}))
    return model


def group_rows(report: EvalReport, average: str = "pooled"):
    """(domain, seen, category, metric, value, n_directions) per group, plus an ``all avg`` row."""
    for d, dname in enumerate(report.domains):
        groups = report.group_cells(d)
        everything = [k for ks in groups.values() for k in ks]
        for cat, keys in list(groups.items()) + [(("all", "avg"), everything)]:
            for m in METRICS:
                yield dname, cat[0], cat[1], m, report.group_average(keys, m, average), len(keys)


def write_stats_tsv(path, report: EvalReport):
    """Raw sufficient statistics per cell, so group averages can be recomputed later."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("src\ttgt\tdomain\tn\ton_target_hits\tcorrect\ttotal\tsys_len\tref_len\t"
                 "f1_matches\tf1_hyp\tf1_ref\n")
        for (s, t, d) in sorted(report.cells):
            c = report.cells[(s, t, d)]
            st = c.bleu.stats
            fh.write("\t".join([report.languages[s], report.languages[t], report.domains[d], str(c.n),
                                str(c.on_target_hits), " ".join(map(str, st.correct)),
                                " ".join(map(str, st.total)), str(st.sys_len), str(st.ref_len),
                                str(c.f1.matches), str(c.f1.hyp_count), str(c.f1.ref_count)]) + "\n")


def read_stats_tsv(path, condition: DataCondition) -> EvalReport:
    report = EvalReport(condition.languages, condition.domains)
    report.categories = categorize_cells(condition, range(len(condition.domains)))
    ln, dn = list(condition.languages), list(condition.domains)
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        s, t, d, n, hits, cor, tot, sl, rl, fm, fh, fr = line.split("\t")
        stats = BleuStats(tuple(map(int, cor.split())), tuple(map(int, tot.split())), int(sl), int(rl))
        n, hits = int(n), int(hits)
        report.cells[(ln.index(s), ln.index(t), dn.index(d))] = CellResult(
            bleu_from_stats(stats), 100.0 * hits / n, F1Stats(int(fm), int(fh), int(fr)), n, hits)
    return report


def report_tables(report: EvalReport, name: str, average: str = "pooled") -> str:
    parts = []
    for m in ("bleu", "on_target", "domain_f1"):
        for d in range(len(report.domains)):
            parts.append(render_table([(name, report)], d, m, average))
    return "\n".join(parts)


def write_eval_outputs(cfg: ExperimentConfig, report: EvalReport, name: str) -> Path:
    out = run_dir(cfg) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    write_report_tsv(out / "report.tsv", report)
    write_stats_tsv(out / "stats.tsv", report)
    with open(out / "groups.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("domain\tseen\tcategory\tmetric\tvalue\tn_directions\n")
        for dname, seen, cat, m, v, n in group_rows(report, cfg.experiment.average):
            fh.write(f"{dname}\t{seen}\t{cat}\t{m}\t{v:.4f}\t{n}\n")
    (out / "tables.txt").write_text(report_tables(report, name, cfg.experiment.average), encoding="utf-8")
    return out


def run_label(cfg: ExperimentConfig) -> str:
    return f"{cfg.experiment.variant} {cfg.scheme.name} {cfg.loss.mode}"


def cmd_evaluate(cfg: ExperimentConfig, checkpoint_path=None, echo: Callable = print) -> dict:
    cfg.validate()
    freeze_config(cfg, "evaluate")
    model = load_checkpoint_model(cfg, checkpoint_path or _final_checkpoint(cfg))
    cond, _ = load_corpus(cfg)
    report = evaluate_model(cfg, model, load_test_sets(cfg), cond)
    out = write_eval_outputs(cfg, report, run_label(cfg))
    echo(render_table([(run_label(cfg), report)], cfg.leave_out or 0, "bleu", cfg.experiment.average).rstrip("\n"))
    return {"eval_dir": str(out), "rows": sum(1 for _ in report.rows())}


# ------------------------------------------------------------------- tables

@dataclass
class Table:
    title: str
    columns: list
    rows: dict          # row name -> list of values (NaN = missing)

    def render(self) -> str:
        width = max([len(self.title)] + [len(r) for r in self.rows])
        heads = [str(c) for c in self.columns]
        out = [self.title.ljust(width) + " | " + " | ".join(heads)]
        for name, vals in self.rows.items():
            cells = ["n/a".rjust(len(h)) if math.isnan(v) else f"{v:.2f}".rjust(len(h))
                     for v, h in zip(vals, heads)]
            out.append(name.ljust(width) + " | " + " | ".join(cells))
        return "\n".join(out) + "\n"


def average_tables(tables: list, title: str) -> Table:
    """Elementwise mean over tables with identical columns; missing entries are skipped."""
    if not tables:
        raise ExperimentError("nothing to average")
    cols = tables[0].columns
    names = []
    for t in tables:
        if t.columns != cols:
            raise ExperimentError("cannot average tables with different columns")
        names += [n for n in t.rows if n not in names]
    rows = {}
    for n in names:
        vals = []
        for j in range(len(cols)):
            xs = [t.rows[n][j] for t in tables if n in t.rows and not math.isnan(t.rows[n][j])]
            vals.append(sum(xs) / len(xs) if xs else float("nan"))
        rows[n] = vals
    return Table(title, list(cols), rows)


def category_table(reports: dict, domain: int, metric: str, average: str, title: str) -> Table:
    """Rows = runs, columns = the six seen/unseen groups plus AVG, for one evaluation domain."""
    first = next(iter(reports.values()))
    cats = table_categories({c: len(k) for c, k in first.group_cells(domain).items()})
    cols = [f"{s} {c}" for s, c in cats] + ["AVG"]
    rows = {}
    for name, rep in reports.items():
        g = rep.group_table(domain, metric, average)
        rows[name] = [g[c] for c in cats] + [g[("all", "avg")]]
    return Table(title, cols, rows)


def sdml_groups(condition: DataCondition, domain: int) -> dict:
    """Directions split by what SDML (trained on ``domain`` only) and MDML have seen."""
    out = {"seen-both": [], "unseen-SDML": [], "unseen-both": []}
    for s, t in condition.directions():
        if condition.is_available(s, t, domain):
            out["seen-both"].append((s, t, domain))
        elif condition.pair_seen(s, t):
            out["unseen-SDML"].append((s, t, domain))
        else:
            out["unseen-both"].append((s, t, domain))
    return out


# -------------------------------------------------------------------- sweep

def _cell_phases(cfg: ExperimentConfig, variant: str) -> tuple:
    if variant == "baseline-adapter":
        return ("1", "baseline")
    if variant in ("mdbl", "sdml"):
        return ("1",)
    return tuple(p for p in cfg.experiment.phases if p != "baseline")


def sweep_cells(cfg: ExperimentConfig) -> list:
    """(leave-out index, variant, scheme, mode) for every cell of the grid."""
    e = cfg.experiment
    cells = []
    for lo in cfg.sweep_leave_outs():
        for v in e.sweep_variants:
            modes = e.sweep_modes if v == "mdml" else ("plain",)
            for sch in e.sweep_schemes:
                for m in modes:
                    cells.append((lo, v, TagScheme.parse(sch).slug, {"adv": "adversarial"}.get(m, m)))
    return cells


def cell_config(cfg: ExperimentConfig, lo: int, variant: str, scheme: str, mode: str) -> ExperimentConfig:
    root = run_dir(cfg) / "sweep" / f"lo-{cfg.synthetic.domain_names[lo]}"
    name = cfg.synthetic.domain_names[lo]
    cell = replace(cfg,
                   experiment=replace(cfg.experiment, out=str(root / variant / f"{scheme}.{mode}"),
                                      variant=variant, scheme=scheme, phases=_cell_phases(cfg, variant)),
                   data=replace(cfg.data, leave_out=name, data_dir=str(root / "data")),
                   loss=replace(cfg.loss, mode=mode))
    return cell


def cell_label(variant: str, scheme: str, mode: str) -> str:
    name = TagScheme.parse(scheme).name
    return f"{variant.upper() if variant != 'baseline-adapter' else 'baseline-adapter'} {name}" + \
        ("" if mode == "plain" else f" +{mode}")


def _append_result(path: Path, fields: list):
    new = not path.exists()
    with open(path, "a", encoding="utf-8", newline="\n") as fh:
        if new:
            fh.write("leave_out\tvariant\tscheme\tmode\tstatus\tdetail\n")
        fh.write("\t".join(str(f).replace("\t", " ").replace("\n", " ") for f in fields) + "\n")


def cmd_lodo_sweep(cfg: ExperimentConfig, echo: Callable = print, max_steps: int | None = None) -> dict:
    """Train and evaluate every grid cell for every leave-out domain.

    Completed cells (a ``DONE`` marker) are never rerun or overwritten; a
    failing cell is recorded in ``results.tsv`` and the sweep moves on.
    """
    cfg.validate()
    freeze_config(cfg, "lodo-sweep")
    root = run_dir(cfg) / "sweep"
    root.mkdir(parents=True, exist_ok=True)
    results = root / "results.tsv"
    status = {}
    generated = set()
    for lo, variant, scheme, mode in sweep_cells(cfg):
        ccfg = cell_config(cfg, lo, variant, scheme, mode)
        dname = cfg.synthetic.domain_names[lo]
        key = (dname, variant, scheme, mode)
        done = run_dir(ccfg) / "DONE"
        if done.exists():
            status[key] = "done"
            continue
        try:
            if lo not in generated:
                gen_cfg = replace(ccfg, experiment=replace(ccfg.experiment, out=str(Path(ccfg.data.data_dir).parent),
                                                           variant="mdml", phases=("1",)),
                                  data=replace(ccfg.data, data_dir=None))
                if not (data_dir(ccfg) / "MANIFEST.tsv").exists():
                    cmd_generate(gen_cfg, echo=lambda *_: None)
                generated.add(lo)
            res = cmd_train(ccfg, max_steps=max_steps, echo=lambda *_: None)
            if res["interrupted"]:
                status[key] = "interrupted"
                _append_result(results, [*key, "interrupted", f"phase {res['interrupted']}"])
                continue
            cmd_evaluate(ccfg, echo=lambda *_: None)
            digest = _sha((run_dir(ccfg) / "eval" / "stats.tsv").read_bytes())
            done.write_text(digest + "\n", encoding="utf-8")
            status[key] = "done"
            _append_result(results, [*key, "done", digest])
            echo(f"[{dname}] {cell_label(variant, scheme, mode)}: done")
        except (ExperimentError, ConfigError, CorpusError, ModelError, TrainingError, ValueError) as exc:
            status[key] = "failed"
            _append_result(results, [*key, "failed", f"{type(exc).__name__}: {exc}"])
            echo(f"[{dname}] {cell_label(variant, scheme, mode)}: FAILED ({exc})")
    text = sweep_report(cfg)
    (root / "tables.txt").write_text(text, encoding="utf-8")
    echo(text.rstrip("\n"))
    return {"cells": len(status), "failed": sum(v == "failed" for v in status.values()),
            "tables": str(root / "tables.txt")}


def load_sweep_reports(cfg: ExperimentConfig) -> dict:
    """{leave-out index: {cell label: EvalReport}} for every completed cell."""
    out = {}
    for lo, variant, scheme, mode in sweep_cells(cfg):
        ccfg = cell_config(cfg, lo, variant, scheme, mode)
        stats = run_dir(ccfg) / "eval" / "stats.tsv"
        if not (run_dir(ccfg) / "DONE").exists() or not stats.exists():
            continue
        out.setdefault(lo, {})[cell_label(variant, scheme, mode)] = read_stats_tsv(stats, ccfg.condition())
    return out


def sweep_tables(cfg: ExperimentConfig, reports: dict) -> list:
    """Per-leave-out tables followed by their averages across leave-out domains."""
    average = cfg.experiment.average
    names = cfg.synthetic.domain_names
    tables, per_lo_cat, per_lo_ot = [], [], []
    for lo in sorted(reports):
        t = category_table(reports[lo], lo, "bleu", average, f"BLEU on leave-out {names[lo]}")
        o = category_table(reports[lo], lo, "on_target", average, f"on-target % on leave-out {names[lo]}")
        tables += [t, o]
        per_lo_cat.append(t)
        per_lo_ot.append(o)
    if per_lo_cat:
        tables.append(average_tables(per_lo_cat, "BLEU averaged over leave-outs"))
        tables.append(average_tables(per_lo_ot, "on-target % averaged over leave-outs"))

    # multi-domain bilingual vs multilingual: the MDBL pair, hub -> low direction, leave-out domain
    if "mdbl" in cfg.experiment.sweep_variants:
        a, b = cfg.mdbl_pair()
        langs = cfg.synthetic.language_names
        cols = [names[lo] for lo in sorted(reports)] + ["AVG"]
        rows = {}
        for j, lo in enumerate(sorted(reports)):
            for name, rep in reports[lo].items():
                vals = rows.setdefault(name, [float("nan")] * len(cols))
                if (a, b, lo) in rep.cells:
                    vals[j] = rep.cells[(a, b, lo)].bleu.score
        for vals in rows.values():
            xs = [v for v in vals[:-1] if not math.isnan(v)]
            vals[-1] = sum(xs) / len(xs) if xs else float("nan")
        tables.append(Table(f"BLEU {langs[a]}->{langs[b]} on leave-out", cols, rows))

    # single-domain vs multi-domain multilingual: direction groups on the leave-out domain
    if "sdml" in cfg.experiment.sweep_variants:
        per_lo = []
        for lo in sorted(reports):
            cond = cell_config(cfg, lo, "mdml", cfg.experiment.sweep_schemes[0], "plain").condition()
            groups = sdml_groups(cond, lo)
            rows = {name: [rep.group_average(keys, "bleu", average) for keys in groups.values()]
                    for name, rep in reports[lo].items()}
            t = Table(f"SDML groups on leave-out {names[lo]}", list(groups), rows)
            tables.append(t)
            per_lo.append(t)
        if per_lo:
            tables.append(average_tables(per_lo, "SDML groups averaged over leave-outs"))
    return tables


def sweep_report(cfg: ExperimentConfig) -> str:
    reports = load_sweep_reports(cfg)
    if not reports:
        return "no completed sweep cells\n"
    return "\n".join(t.render() for t in sweep_tables(cfg, reports))


# ------------------------------------------------------------------- report

def cmd_report(cfg: ExperimentConfig, echo: Callable = print) -> dict:
    """Re-render tables from stored statistics (a sweep if present, else a single run)."""
    cfg.validate()
    root = run_dir(cfg)
    has_sweep = (root / "sweep" / "results.tsv").exists()
    if not has_sweep and not (root / "eval" / "stats.tsv").exists():
        raise ExperimentError(f"no evaluation results under {root}; run `mdml evaluate` first")
    freeze_config(cfg, "report")
    if has_sweep:
        text = sweep_report(cfg)
    else:
        report = read_stats_tsv(root / "eval" / "stats.tsv", cfg.condition())
        text = report_tables(report, run_label(cfg), cfg.experiment.average)
    (root / "report.txt").write_text(text, encoding="utf-8")
    echo(text.rstrip("\n"))
    return {"text": text}
