import numpy as np
import pytest

from react_emg.config import desk_config, tiny_config
from react_emg.data import generate_corpus
from react_emg.data.corpus import Corpus
from react_emg.model import build_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_ps(tiny_cfg):
    return build_params(tiny_cfg, seed=3)


@pytest.fixture(scope="session")
def desk_cfg():
    return desk_config()


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    """4 users x 2 stages x 2 sessions of 4 s: every split is populated."""
    root = tmp_path_factory.mktemp("corpus")
    generate_corpus(root, users=4, stages=2, sessions=2, seconds=4.0, seed=5)
    return root


@pytest.fixture
def small_corpus(small_corpus_dir):
    return Corpus(small_corpus_dir)


def perturb_conditioning(ps, seed=0, scale=0.3):
    """Give the zero-initialised FiLM output layer generic weights."""
    r = np.random.default_rng(seed)
    for name in ("cond.film.fc2.w", "cond.film.fc2.b"):
        ps[name].data = scale * r.standard_normal(ps[name].shape)


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE[number] = (passed, detail)
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
