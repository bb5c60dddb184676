"""Shared fixtures: 64-bit mode, tiny model configs and small synthetic corpora."""
import numpy as np
import pytest

from rome import tensor as tn
from rome.data import FUNCTION_WORDS, load_word_embeddings, synth_corpus, synthetic_lexicon
from rome.model import ModelConfig, init_params


@pytest.fixture
def f64():
    with tn.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(**changes):
    base = dict(model_dim=8, word_dim=4, heads=2, ff_dim=16, d2=6, d3=6, droi=6, features="split",
                weighting="both")
    base.update(changes)
    return ModelConfig(**base)


def tiny_table(word_dim=4, seed=0, vocab_size=20):
    verbs, nouns = synthetic_lexicon(vocab_size)
    return load_word_embeddings(None, word_dim, list(FUNCTION_WORDS) + verbs + nouns, random_seed=seed)


@pytest.fixture
def tiny_params(f64):
    cfg = tiny_model_config()
    table = tiny_table()
    return cfg, table, init_params(cfg, table, np.random.default_rng(0))


@pytest.fixture(scope="session")
def small_corpus():
    return synth_corpus(7, 24, d2=8, d3=8, vocab_size=40, n_classes=6)


# -- acceptance reporting ----------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line in the terminal
# summary; details recorded with ``record_detail`` are appended to it.

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def record_detail(request):
    def record(text):
        request.node.user_properties.append(("detail", text))
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    if rep.when == "setup" and rep.passed:
        return
    number, title = mark.args
    details = "; ".join(v for k, v in item.user_properties if k == "detail")
    if rep.failed:
        first = str(rep.longrepr).strip().splitlines()[-1] if rep.longrepr else ""
        details = "; ".join(x for x in (details, first) if x)
    _CRITERIA[number] = (title, "PASS" if rep.passed else "FAIL", details)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, verdict, details = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number} {verdict}: {title}" + (f" ({details})" if details else ""))
