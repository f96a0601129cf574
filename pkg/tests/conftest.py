import pytest
from hypothesis import HealthCheck, settings

from mdml.corpus import SyntheticSpec, Vocab
from mdml.model import MdmlModel, ModelConfig

settings.register_profile("mdml", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mdml")


@pytest.fixture
def spec():
    return SyntheticSpec()


@pytest.fixture
def vocab(spec):
    return Vocab.from_spec(spec)


def tiny_config(vocab_size, n_domains=3, n_languages=3, **kw):
    base = dict(d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, d_ffn=12, adapter_bottleneck=3,
                dropout_rate=0.1, max_len=16, disc_hidden=6)
    base.update(kw)
    return ModelConfig(vocab_size, n_domains, n_languages, **base)


@pytest.fixture
def tiny_model(vocab):
    return MdmlModel(tiny_config(len(vocab)), seed=0)


def randomize_adapters(model, rng, scale=0.3):
    """Give adapters and fusion gates nonzero weights so their paths are exercised."""
    for name, p in model.params.items():
        if name.startswith(("adapter.", "fusion.")):
            p.data = rng.normal(0, scale, size=p.shape)


# ---------------------------------------------------------- acceptance summary

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
