"""Experiment configuration: one INI file with typed, flat sections.

Layout (every key optional; missing keys take the defaults below)::

    [experiment]   seed, out, variant, scheme, phases, topk, average,
                   sweep_variants, sweep_schemes, sweep_modes, sweep_leave_outs
    [data]         condition, n_high, hub, leave_out, pairs_per_cell,
                   test_per_cell, mdbl_pair, sdml_domain, data_dir
    [synthetic]    SyntheticSpec fields
    [model]        ModelConfig fields except vocab_size/n_domains/n_languages
    [loss]         LossConfig fields (mode: plain | aware | adversarial | adv)
    [phase.<id>]   steps, lr, warmup, batch_size, temperature   (id in 1,2,3,baseline)

Values are parsed by the type of the field's default. Tuples are
whitespace-separated; ``none`` (or an empty value) marks an unset optional.
Unknown sections or keys are errors. ``dump`` writes every field explicitly,
so a dumped file reloads to an identical config.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .corpus import (CorpusError, DataCondition, SyntheticSpec, TagScheme, build_lodo, read_condition,
                     star_condition, five_language_condition)
from .model import ModelConfig
from .training import PHASES, LossConfig, PhasePlan, TrainingError, validate_plan_order

VARIANTS = ("mdml", "mdbl", "sdml", "baseline-adapter")
MODE_ALIASES = {"adv": "adversarial"}
DERIVED_MODEL_FIELDS = ("vocab_size", "n_domains", "n_languages")
PHASE_KEYS = ("steps", "lr", "warmup", "batch_size", "temperature")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSettings:
    seed: int = 0
    out: str = "runs/default"
    variant: str = "mdml"
    scheme: str = "t-enc"
    phases: tuple = ("1",)
    topk: int = 50
    average: str = "pooled"      # pooled | mean  (group averaging of metrics)
    sweep_variants: tuple = VARIANTS
    sweep_schemes: tuple = ("t-enc",)
    sweep_modes: tuple = ("plain",)
    sweep_leave_outs: tuple = ()  # domain names or indices; empty = every domain


@dataclass(frozen=True)
class DataSettings:
    condition: str = "star"      # star | five-language | path to a condition file
    n_high: int = 2
    hub: int = 0
    leave_out: str | None = None  # domain name or index; None = no leave-out
    pairs_per_cell: int = 2000
    test_per_cell: int = 30
    mdbl_pair: str | None = None  # "xx-yy"; None = first low-resource pair (else the first pair)
    sdml_domain: str | None = None  # None = the leave-out domain
    data_dir: str | None = None  # None = <out>/data


def _default_model() -> dict:
    return {f.name: f.default for f in fields(ModelConfig) if f.name not in DERIVED_MODEL_FIELDS}


def _default_phases() -> dict:
    return {p: PhasePlan(p) for p in PHASES}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    data: DataSettings = field(default_factory=DataSettings)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: dict = field(default_factory=_default_model)
    loss: LossConfig = field(default_factory=LossConfig)
    phase_settings: dict = field(default_factory=_default_phases)

    # ------------------------------------------------------------ derived

    @property
    def seed(self) -> int:
        return self.experiment.seed

    @property
    def scheme(self) -> TagScheme:
        return TagScheme.parse(self.experiment.scheme)

    @property
    def plans(self) -> list[PhasePlan]:
        return [replace(self.phase_settings[p], seed=self.seed) for p in self.experiment.phases]

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, n_domains=self.synthetic.n_domains,
                           n_languages=self.synthetic.n_languages, **self.model)

    def domain_index(self, value: str | None) -> int | None:
        if value is None:
            return None
        names = list(self.synthetic.domain_names)
        if value in names:
            return names.index(value)
        if value.isdigit() and int(value) < len(names):
            return int(value)
        raise ConfigError(f"unknown domain {value!r}; known: {', '.join(names)}")

    @property
    def leave_out(self) -> int | None:
        return self.domain_index(self.data.leave_out)

    def full_condition(self) -> DataCondition:
        spec, d = self.synthetic, self.data
        if d.condition == "star":
            cond = star_condition(spec.language_names, spec.domain_names, d.n_high, d.hub)
        elif d.condition == "five-language":
            cond = five_language_condition()
        else:
            cond = read_condition(d.condition)
        if cond.languages != tuple(spec.language_names) or cond.domains != tuple(spec.domain_names):
            raise ConfigError(f"condition {d.condition!r} lists languages {cond.languages} / domains "
                              f"{cond.domains}, synthetic section has {spec.language_names} / {spec.domain_names}")
        return cond

    def condition(self) -> DataCondition:
        cond = self.full_condition()
        lo = self.leave_out
        return cond if lo is None else build_lodo(cond, lo)

    def mdbl_pair(self) -> tuple[int, int]:
        cond = self.full_condition()
        names = list(self.synthetic.language_names)
        if self.data.mdbl_pair is None:
            low = [p for p in cond.pairs if cond.is_low_pair(p)]
            return tuple((low or list(cond.pairs))[0])
        try:
            a, b = (names.index(x) for x in self.data.mdbl_pair.split("-"))
        except ValueError:
            raise ConfigError(f"bad mdbl_pair {self.data.mdbl_pair!r}") from None
        if not cond.pair_seen(a, b):
            raise ConfigError(f"mdbl_pair {self.data.mdbl_pair} is not a pair of the condition")
        return a, b

    def sdml_domain(self) -> int:
        d = self.domain_index(self.data.sdml_domain)
        if d is None:
            d = self.leave_out
        if d is None:
            raise ConfigError("sdml needs sdml_domain or leave_out")
        return d

    def sweep_leave_outs(self) -> list[int]:
        vals = self.experiment.sweep_leave_outs
        if not vals:
            return list(range(self.synthetic.n_domains))
        return [self.domain_index(v) for v in vals]

    # --------------------------------------------------------- validation

    def validate(self) -> "ExperimentConfig":
        e = self.experiment
        try:
            scheme = self.scheme
        except CorpusError as exc:
            raise ConfigError(str(exc)) from None
        if scheme.has_domain_tag and self.synthetic.n_domains == 0:
            raise ConfigError(f"scheme {scheme.name} carries a domain tag but n_domains = 0")
        if e.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {e.variant!r}")
        if e.average not in ("pooled", "mean"):
            raise ConfigError("average must be pooled or mean")
        if e.topk < 1:
            raise ConfigError("topk must be at least 1")
        for p in e.phases:
            if p not in PHASES:
                raise ConfigError(f"unknown phase {p!r}")
        try:
            validate_plan_order(self.plans)
        except TrainingError as exc:
            raise ConfigError(str(exc)) from None
        if "baseline" in e.phases and ({"2", "3"} & set(e.phases)):
            raise ConfigError("the adapter baseline replaces phases 2/3; list either one or the other")
        if e.variant == "baseline-adapter" and "baseline" not in e.phases:
            raise ConfigError("variant baseline-adapter needs phases = 1 baseline")
        if self.loss.mode != "plain" and self.synthetic.n_domains < 2:
            raise ConfigError(f"mode {self.loss.mode} needs at least two domains")
        if self.data.pairs_per_cell < 1 or self.data.test_per_cell < 1:
            raise ConfigError("pairs_per_cell and test_per_cell must be positive")
        try:
            self.condition()
            self.model_config(1)
        except (CorpusError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None
        for v in e.sweep_variants:
            if v not in VARIANTS:
                raise ConfigError(f"sweep variant must be one of {VARIANTS}, got {v!r}")
        for m in e.sweep_modes:
            if MODE_ALIASES.get(m, m) not in ("plain", "aware", "adversarial"):
                raise ConfigError(f"unknown sweep mode {m!r}")
        for text in e.sweep_schemes:
            try:
                sch = TagScheme.parse(text)
            except CorpusError as exc:
                raise ConfigError(str(exc)) from None
            if sch.has_domain_tag and self.synthetic.n_domains == 0:
                raise ConfigError(f"sweep scheme {sch.name} carries a domain tag but n_domains = 0")
        self.sweep_leave_outs()
        if e.variant == "mdbl" or "mdbl" in e.sweep_variants:
            self.mdbl_pair()
        if e.variant == "sdml":
            self.sdml_domain()
        return self

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Override experiment-level knobs (seed, out, scheme, variant, topk), loss mode and leave-out."""
        exp = {k: v for k, v in kw.items() if k in {f.name for f in fields(ExperimentSettings)} and v is not None}
        cfg = replace(self, experiment=replace(self.experiment, **exp))
        if kw.get("mode") is not None:
            cfg = replace(cfg, loss=replace(cfg.loss, mode=MODE_ALIASES.get(kw["mode"], kw["mode"])))
        if kw.get("leave_out") is not None:
            cfg = replace(cfg, data=replace(cfg.data, leave_out=str(kw["leave_out"])))
        return cfg


# ----------------------------------------------------------------- parsing

def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        if default is None or isinstance(default, tuple):
            return None if default is None else ()
        raise ConfigError(f"{key}: a value is required")
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    return str(value)


def _section_values(parser, section: str, defaults: dict) -> dict:
    out = {}
    if not parser.has_section(section):
        return out
    for key, raw in parser.items(section):
        if key not in defaults:
            raise ConfigError(f"[{section}] unknown key {key!r}; allowed: {', '.join(defaults)}")
        out[key] = _parse_value(raw, defaults[key], f"[{section}] {key}")
    return out


def _dc_defaults(cls, skip=()) -> dict:
    inst = cls() if cls is not PhasePlan else PhasePlan("1")
    return {f.name: getattr(inst, f.name) for f in fields(cls) if f.name not in skip}


def loads(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    known = {"experiment", "data", "synthetic", "model", "loss"} | {f"phase.{p}" for p in PHASES}
    for s in parser.sections():
        if s not in known:
            raise ConfigError(f"unknown section [{s}]")

    exp_defaults = _dc_defaults(ExperimentSettings)
    experiment = ExperimentSettings(**_section_values(parser, "experiment", exp_defaults))
    data = DataSettings(**_section_values(parser, "data", _dc_defaults(DataSettings)))

    syn_defaults = {f.name: f.default for f in fields(SyntheticSpec)}
    syn = _section_values(parser, "synthetic", syn_defaults)
    model = _default_model()
    model.update(_section_values(parser, "model", model))
    loss_vals = _section_values(parser, "loss", _dc_defaults(LossConfig))
    if "mode" in loss_vals:
        loss_vals["mode"] = MODE_ALIASES.get(loss_vals["mode"], loss_vals["mode"])

    plan_defaults = {k: v for k, v in _dc_defaults(PhasePlan).items() if k in PHASE_KEYS}
    phase_settings = {}
    for p in PHASES:
        phase_settings[p] = PhasePlan(p, **_section_values(parser, f"phase.{p}", plan_defaults))
    try:
        return ExperimentConfig(experiment, data, SyntheticSpec(**syn), model, LossConfig(**loss_vals),
                                phase_settings)
    except (CorpusError, TrainingError) as exc:
        raise ConfigError(str(exc)) from None


def load(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text)


def dumps(cfg: ExperimentConfig) -> str:
    """Every field written explicitly, in a fixed order."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    sections = [
        ("experiment", {f.name: getattr(cfg.experiment, f.name) for f in fields(ExperimentSettings)}),
        ("data", {f.name: getattr(cfg.data, f.name) for f in fields(DataSettings)}),
        ("synthetic", {f.name: getattr(cfg.synthetic, f.name) for f in fields(SyntheticSpec)}),
        ("model", dict(cfg.model)),
        ("loss", {f.name: getattr(cfg.loss, f.name) for f in fields(LossConfig)}),
    ]
    for p in PHASES:
        plan = cfg.phase_settings[p]
        sections.append((f"phase.{p}", {k: getattr(plan, k) for k in PHASE_KEYS}))
    for name, values in sections:
        parser[name] = {k: _format_value(v) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def dump(cfg: ExperimentConfig, path):
    Path(path).write_text(dumps(cfg), encoding="utf-8")
