import numpy as np
import pytest

from entalign.knowledge import TextEmbedder
from entalign.reports import ReportGrammar
from entalign.world import WorldSpec, generate_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def spec():
    return WorldSpec()


@pytest.fixture(scope="session")
def kb(spec):
    return spec.knowledge_base()


@pytest.fixture(scope="session")
def grammar(kb):
    return ReportGrammar.for_knowledge_base(kb)


@pytest.fixture(scope="session")
def embedder():
    return TextEmbedder(64, seed=0)


@pytest.fixture(scope="session")
def small_dataset(spec, kb, grammar):
    return generate_dataset(spec, 60, 3, kb, grammar)
