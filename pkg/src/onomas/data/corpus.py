"""Labelled name records and the TSV corpus format (``name<TAB>language<TAB>type``)."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

from ..taxonomy import Taxonomy
from .text import NormalizationError, normalize


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class NameRecord:
    raw: str
    language: str
    entity_type: str

    @property
    def key(self) -> str:
        """Normalized string used for dedup and split disjointness."""
        return normalize(self.raw)

    def class_id(self, taxonomy: Taxonomy) -> int:
        return taxonomy.encode(self.language, self.entity_type)


def iter_tsv(path: str | Path) -> Iterator[NameRecord]:
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CorpusError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            yield NameRecord(*parts)


def read_tsv(path: str | Path, taxonomy: Taxonomy | None = None) -> list[NameRecord]:
    out = []
    for rec in iter_tsv(path):
        try:
            normalize(rec.raw)
        except NormalizationError as exc:
            raise CorpusError(f"{path}: {exc}") from exc
        if taxonomy is not None:
            taxonomy.encode(rec.language, rec.entity_type)
        out.append(rec)
    return out


def write_tsv(records: Iterable[NameRecord], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            if "\t" in r.raw or "\n" in r.raw:
                raise CorpusError(f"name contains a tab or newline: {r.raw!r}")
            fh.write(f"{r.raw}\t{r.language}\t{r.entity_type}\n")
            n += 1
    return n


def dedup(records: Iterable[NameRecord]) -> list[NameRecord]:
    """Keep the first record for every normalized string."""
    seen: set[str] = set()
    out = []
    for r in records:
        k = r.key
        if k not in seen:
            seen.add(k)
            out.append(r)
    return out


def taxonomy_from_records(records: Iterable[NameRecord], n_clusters: int = 1) -> Taxonomy:
    """Languages in first-seen order, split into contiguous clusters."""
    langs: list[str] = []
    for r in records:
        if r.language not in langs:
            langs.append(r.language)
    n_clusters = max(1, min(n_clusters, len(langs)))
    base = Taxonomy.grouped(len(langs), n_clusters)
    cluster_of = {lang: base.cluster_of[code] for lang, code in zip(langs, base.languages)}
    return Taxonomy(languages=tuple(langs), cluster_of=cluster_of)
