import pytest

from asl.scenes import CorpusConfig, generate_corpus
from asl.segmodel import init_model, train_supervised


@pytest.fixture(scope="session")
def default_corpus():
    return generate_corpus(CorpusConfig(seed=0))


@pytest.fixture(scope="session")
def pretrained(default_corpus):
    """Seed-0 model pre-trained on the default corpus with the pipeline defaults."""
    model = init_model(3, 12, 1, (32, 32), seed=0)
    return train_supervised(model, default_corpus.train, epochs=10, lr=0.1, batch=256, seed=0).model


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request, capsys):
    """Print one PASS/FAIL line for a criterion, inline and again in the summary."""
    def emit(criterion: int, ok: bool, detail: str):
        line = f"CRITERION {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
        request.config.stash.setdefault(ACCEPTANCE, []).append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
