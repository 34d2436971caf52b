import numpy as np
import pytest

from irisstyle.backbone import init_backbone
from irisstyle.data import generate_synthetic_corpus
from irisstyle.features import CNN_KIND, STYLE_KIND, extract_features
from irisstyle.imaging import extract_iris
from irisstyle.recognition import TrainConfig, train_classifier


@pytest.fixture(scope="session")
def corpus():
    return generate_synthetic_corpus(10, 10, (200, 320), seed=42)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(4, 4, (120, 192), seed=7)


@pytest.fixture(scope="session")
def backbone():
    return init_backbone(42)


@pytest.fixture(scope="session")
def crops(corpus):
    return {s.record_id: extract_iris(s.pixels, s.mask) for s in corpus.samples}


@pytest.fixture(scope="session")
def features(corpus, backbone, crops):
    out = {STYLE_KIND: [], CNN_KIND: []}
    for s in corpus.samples:
        f = extract_features(backbone, crops[s.record_id])
        out[STYLE_KIND].append(f[STYLE_KIND])
        out[CNN_KIND].append(f[CNN_KIND])
    return {k: np.stack(v) for k, v in out.items()}


def _train(corpus, feats, epochs=100):
    tr = np.array([s.split == "train" for s in corpus.samples])
    labels = np.array([s.label for s in corpus.samples])
    return train_classifier(feats[tr], labels[tr], TrainConfig(epochs=epochs), feats[~tr], labels[~tr],
                            num_classes=len(corpus.classes))


@pytest.fixture(scope="session")
def style_head(corpus, features):
    return _train(corpus, features[STYLE_KIND])


@pytest.fixture(scope="session")
def cnn_head(corpus, features):
    return _train(corpus, features[CNN_KIND])


@pytest.fixture(scope="session")
def test_samples(corpus):
    return corpus.split("test")


@pytest.fixture(scope="session")
def train_samples(corpus):
    return corpus.split("train")


_VERDICTS: list[tuple[int, str]] = []


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def record(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}: {detail}"
        _VERDICTS.append((number, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
