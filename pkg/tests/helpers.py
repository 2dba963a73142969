import numpy as np

from onomas.data import Vocab
from onomas.model import ModelConfig, OnomasCNN
from onomas.taxonomy import Taxonomy


def tiny_model(seed=0, dtype="float64", n_langs=2, n_clusters=2, **overrides):
    tax = Taxonomy.grouped(n_langs, n_clusters)
    vocab = Vocab.from_characters(["abcdef"])
    kw = dict(
        embed_dim=4,
        vocab_size=len(vocab),
        max_len=8,
        kernel_sizes=(1, 2, 3),
        filter_counts=(3, 3, 3),
        groups=2,
        num_clusters=n_clusters,
        dtype=dtype,
        seed=seed,
    )
    kw.update(overrides)
    return OnomasCNN(ModelConfig(**kw), tax, vocab)


def random_batch(rng, batch, length, vocab_size, min_len=1):
    lengths = rng.integers(min_len, length + 1, size=batch)
    lengths[0] = length
    ids = rng.integers(4, vocab_size, size=(batch, length))
    ids[np.arange(length)[None, :] >= lengths[:, None]] = 0
    return ids, lengths


def metric_trial(rng):
    """Small random scoring instance; probabilities are coarse so ties and bin-edge hits occur."""
    n = int(rng.integers(1, 21))
    k = int(rng.integers(2, 6))
    counts = rng.integers(0, 5, size=(n, k)).astype(np.float64)
    counts[counts.sum(1) == 0, 0] = 1.0
    probs = counts / counts.sum(1, keepdims=True)
    targets = rng.integers(0, k, size=n)
    n_bins = int(rng.integers(1, 16))
    return probs, targets, k, n_bins


def check_metrics_against_oracles(probs, targets, k, n_bins):
    """Returns the names of metrics that disagree with their brute-force references."""
    from onomas import metrics

    from . import oracles

    preds = probs.argmax(1)
    conf = probs[np.arange(len(preds)), preds]
    bad = []
    if metrics.accuracy(preds, targets, k) != oracles.brute_accuracy(preds, targets):
        bad.append("accuracy")
    if abs(metrics.macro_f1(preds, targets, k) - oracles.brute_macro_f1(preds, targets, k)) > 1e-12:
        bad.append("macro_f1")
    if abs(metrics.mcc(preds, targets, k) - oracles.brute_mcc(preds, targets, k)) > 1e-12:
        bad.append("mcc")
    if abs(metrics.ece(conf, preds == targets, n_bins) - oracles.brute_ece(probs, targets, n_bins)) > 1e-12:
        bad.append("ece")
    if abs(metrics.brier(probs, targets) - oracles.brute_brier(probs, targets)) > 1e-12:
        bad.append("brier")
    return bad


ACCEPTANCE_LINES: dict[int, str] = {}


class criterion:
    """Context manager that records one PASS/FAIL line per acceptance criterion."""

    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if kind is None:
            status, detail = "PASS", self.detail
        else:
            status = "FAIL"
            detail = f"{kind.__name__}: {str(exc).strip().splitlines()[0] if str(exc).strip() else ''}"
            if self.detail:
                detail = f"{self.detail}; {detail}"
        line = f"criterion {self.number:>2} {status}  {self.title}  [{detail}]"
        ACCEPTANCE_LINES[self.number] = line
        print(line)
        return False
