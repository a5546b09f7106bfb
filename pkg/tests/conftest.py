import numpy as np
import pytest

from vldebias.embed_store import LabeledEmbeddingSet, SampleLabel
from vldebias.synthgen import SynthConfig, generate

# filled by test_acceptance, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def make_set(rows, labels, vocab=None, **kw) -> LabeledEmbeddingSet:
    """Build a set from raw rows (normalized) and ``(id, modality, concept, attrs[, cf])`` tuples."""
    rows = np.asarray(rows, dtype=np.float64)
    rows = rows / np.linalg.norm(rows, axis=1, keepdims=True)
    labs = []
    for t in labels:
        cf = t[4] if len(t) > 4 else None
        labs.append(SampleLabel(id=t[0], modality=t[1], concept=t[2], attributes=dict(t[3]),
                                counterfactual_of=cf))
    if vocab is None:
        vocab = {}
        for lab in labs:
            for a, v in lab.attributes.items():
                vocab.setdefault(a, [])
                if v not in vocab[a]:
                    vocab[a].append(v)
    return LabeledEmbeddingSet(labels=tuple(labs), matrix=rows, attribute_vocab=vocab, **kw)


@pytest.fixture(scope="session")
def small_synth():
    """Small gender-biased corpus; cheap enough for many short training runs."""
    return generate(SynthConfig(dim=16, concepts=4, samples_per_concept=24,
                                gallery_per_concept=30, seed=3))


@pytest.fixture(scope="session")
def default_synth():
    return generate(SynthConfig())
