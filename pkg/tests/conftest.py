import pytest

from finegrain.estimator import FineGrainClassifier
from finegrain.synth import GeneratorConfig, generate

TINY = dict(tokenizer="word", channels=8, length=24, n_blocks=1, hidden=8, max_epochs=3, batch_size=16)


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate(GeneratorConfig(seed=21, split_sizes=(160, 40, 40)))


@pytest.fixture(scope="session")
def tiny_model(tiny_corpus):
    c = tiny_corpus
    return FineGrainClassifier(**TINY, random_state=3).fit(c.splits["train"], X_val=c.splits["val"])


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}")
