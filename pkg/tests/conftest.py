import os

import pytest

from goalunlearn.harness import CACHE_ENV, ExperimentConfig, build_corpora, load_or_pretrain


@pytest.fixture(scope="session")
def cache_dir(pytestconfig):
    """Pretrained base models are cached across sessions (about 2.5 min each to rebuild)."""
    return os.environ.get(CACHE_ENV) or str(pytestconfig.cache.mkdir("goalunlearn-base"))


@pytest.fixture(scope="session")
def toy_setup(cache_dir):
    """Default toy setup for seed 0: (resolved config, corpora, base model)."""
    return make_setup(0, cache_dir)


def make_setup(seed, cache_dir, **overrides):
    cfg = ExperimentConfig(seed=seed, **overrides).resolved()
    corpora = build_corpora(cfg)
    return cfg, corpora, load_or_pretrain(cfg, corpora, cache_dir)


@pytest.fixture(scope="session")
def seed_setup(cache_dir):
    """``seed -> (resolved config, corpora, base)`` for the default toy setup."""
    cache = {}

    def get(seed):
        if seed not in cache:
            cache[seed] = make_setup(seed, cache_dir)
        return cache[seed]

    return get


# ---------------------------------------------------------------- acceptance summary


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): numbered acceptance criterion")
    config.stash[_CRITERIA] = {}


_CRITERIA = pytest.StashKey[dict]()


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark and (rep.when == "call" or rep.failed):
        detail = dict(item.user_properties).get("detail", "")
        item.config.stash[_CRITERIA][mark.args[0]] = (rep.passed, detail)


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_CRITERIA]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
