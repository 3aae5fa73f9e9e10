import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from uasparse import embeddings, preprocess, synthetic  # noqa: E402


@pytest.fixture(scope="session")
def small_corpus():
    return synthetic.generate(40, "software", seed=5) + synthetic.generate(40, "os", seed=6)


@pytest.fixture(scope="session")
def small_embeddings(small_corpus):
    config = embeddings.EmbeddingConfig(dim=8, bucket_count=4096, epochs=2, seed=3)
    return embeddings.train_embeddings([preprocess.tokenize(r["ua"]) for r in small_corpus], config)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
