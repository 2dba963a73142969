import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from onomas.data import synth_corpus
from onomas.taxonomy import Taxonomy

settings.register_profile(
    "onomas", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "onomas"))


@pytest.fixture(scope="session")
def small_corpus():
    tax = Taxonomy.grouped(4, 2)
    return tax, synth_corpus(tax, 40, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_small():
    """A quickly trained float32 model on a small synthetic corpus, plus held-out records."""
    from onomas.data import AugmentConfig, Vocab, class_weights
    from onomas.model import ModelConfig, OnomasCNN
    from onomas.train import OptimConfig, StagePlan, Trainer

    tax = Taxonomy.grouped(4, 2)
    train = synth_corpus(tax, 100, seed=7)
    held = synth_corpus(tax, 50, seed=7, sample_seed=77)
    vocab = Vocab.from_characters(r.raw for r in train)
    cfg = ModelConfig(embed_dim=32, vocab_size=len(vocab), max_len=32, kernel_sizes=(1, 2, 3),
                      filter_counts=(24, 24, 24), groups=4, num_clusters=2, seed=3)
    model = OnomasCNN(cfg, tax, vocab)
    trainer = Trainer(model, train, held[:64], StagePlan.progressive((2, 2, 3)), OptimConfig(peak_lr=1e-2),
                      AugmentConfig(seed=5), class_weights=class_weights(train, tax))
    return trainer.fit().model, held


def pytest_terminal_summary(terminalreporter):
    from .helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
