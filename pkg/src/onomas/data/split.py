"""Deduplicated stratified splits and balanced test sets; class weights."""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import networkx as nx
import numpy as np

from ..taxonomy import Taxonomy
from .corpus import NameRecord, dedup

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val_a", "val_b", "test")


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.98
    val_a_fraction: float = 0.005
    val_b_fraction: float = 0.005
    test_fraction: float = 0.01
    stratify: bool = True
    seed: int = 0

    def __post_init__(self):
        fr = self.fractions
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-12:
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {fr}")

    @property
    def fractions(self) -> tuple[float, float, float, float]:
        return (self.train_fraction, self.val_a_fraction, self.val_b_fraction, self.test_fraction)


@dataclass
class Splits:
    train: list[NameRecord]
    val_a: list[NameRecord]
    val_b: list[NameRecord]
    test: list[NameRecord]
    warnings: list[str] = field(default_factory=list)

    def as_tuple(self):
        return (self.train, self.val_a, self.val_b, self.test)


def apportion(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder rounding of ``n * f``; each part is within 1 of exact."""
    exact = [n * f for f in fractions]
    counts = [math.floor(e) for e in exact]
    order = sorted(range(len(exact)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _controlled_rounding(sizes: list[int], fractions: Sequence[float]) -> np.ndarray:
    """Per-class split counts, each within 1 of exact, with column totals apportioned globally."""
    exact = np.outer(sizes, fractions)
    floors = np.floor(exact).astype(int)
    row_need = np.array(sizes) - floors.sum(axis=1)
    col_total = np.array(apportion(int(sum(sizes)), fractions))
    col_need = col_total - floors.sum(axis=0)
    if (col_need < 0).any():
        return np.array([apportion(n, fractions) for n in sizes])

    g = nx.DiGraph()
    for c, need in enumerate(row_need):
        g.add_edge("src", ("c", c), capacity=int(need), weight=0)
        for s in range(len(fractions)):
            frac = exact[c, s] - floors[c, s]
            if frac > 0:
                g.add_edge(("c", c), ("s", s), capacity=1, weight=-int(round(frac * 1e6)))
    for s, need in enumerate(col_need):
        g.add_edge(("s", s), "snk", capacity=int(need), weight=0)
    flow = nx.max_flow_min_cost(g, "src", "snk")
    if sum(flow["src"].values()) != row_need.sum():
        return np.array([apportion(n, fractions) for n in sizes])
    out = floors.copy()
    for c in range(len(sizes)):
        for s in range(len(fractions)):
            out[c, s] += flow.get(("c", c), {}).get(("s", s), 0)
    return out


def stratified_split(records: Iterable[NameRecord], spec: SplitSpec, taxonomy: Taxonomy | None = None) -> Splits:
    """Dedup by normalized string, then split each class by ``spec`` fractions.

    Classes with fewer than four unique names go entirely to train.
    """
    unique = dedup(records)
    warnings: list[str] = []
    if not spec.stratify:
        rng = np.random.default_rng([spec.seed, 0xA11])
        order = rng.permutation(len(unique))
        counts = apportion(len(unique), spec.fractions)
        parts = np.split(order, np.cumsum(counts)[:-1])
        return Splits(*[[unique[i] for i in p] for p in parts], warnings=warnings)

    def label(r: NameRecord):
        return r.class_id(taxonomy) if taxonomy is not None else (r.language, r.entity_type)

    by_class: dict = defaultdict(list)
    for r in unique:
        by_class[label(r)].append(r)
    keys = sorted(by_class, key=lambda k: (str(type(k)), k))

    small = [k for k in keys if len(by_class[k]) < 4]
    for k in small:
        msg = f"class {k} has {len(by_class[k])} unique names (< 4); all go to train"
        log.warning(msg)
        warnings.append(msg)
    strat = [k for k in keys if k not in small]
    table = _controlled_rounding([len(by_class[k]) for k in strat], spec.fractions) if strat else []

    out: list[list[NameRecord]] = [[], [], [], []]
    for k in small:
        out[0].extend(by_class[k])
    for ci, k in enumerate(strat):
        members = by_class[k]
        rng = np.random.default_rng([spec.seed, ci])
        perm = rng.permutation(len(members))
        bounds = np.cumsum([0, *table[ci]])
        for s in range(4):
            out[s].extend(members[i] for i in perm[bounds[s] : bounds[s + 1]])
    return Splits(*out, warnings=warnings)


@dataclass
class BalancedTest:
    records: list[NameRecord]
    per_class: dict
    shortfall: dict


def build_balanced_test(
    records: Iterable[NameRecord],
    per_class_quota: int,
    taxonomy: Taxonomy,
    exclude: Iterable[NameRecord] = (),
    seed: int = 0,
) -> BalancedTest:
    """``min(quota, available)`` names per class, none shared with ``exclude``."""
    if per_class_quota < 1:
        raise ValueError("quota must be >= 1")
    banned = {r.key for r in exclude}
    by_class: dict[int, list[NameRecord]] = defaultdict(list)
    for r in dedup(records):
        if r.key not in banned:
            by_class[r.class_id(taxonomy)].append(r)
    chosen, per_class, shortfall = [], {}, {}
    for c in range(taxonomy.n_classes):
        members = by_class.get(c, [])
        rng = np.random.default_rng([seed, 0xBA1, c])
        take = min(per_class_quota, len(members))
        idx = np.sort(rng.permutation(len(members))[:take])
        chosen.extend(members[i] for i in idx)
        per_class[c] = take
        if take < per_class_quota:
            shortfall[c] = per_class_quota - take
    return BalancedTest(chosen, per_class, shortfall)


def class_weights(
    train_records: Iterable[NameRecord],
    taxonomy: Taxonomy,
    clip: tuple[float, float] = (0.1, 10.0),
) -> np.ndarray:
    """Inverse frequency ``N / (K * count_c)`` over the K seen classes, clipped.

    Unseen classes get the upper clip bound.
    """
    counts = np.zeros(taxonomy.n_classes, dtype=np.float64)
    for r in train_records:
        counts[r.class_id(taxonomy)] += 1
    seen = counts > 0
    n, k = counts.sum(), seen.sum()
    w = np.full(taxonomy.n_classes, clip[1])
    if k:
        w[seen] = np.clip(n / (k * counts[seen]), *clip)
    return w
