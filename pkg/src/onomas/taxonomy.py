"""Label space: (language, entity type) leaves grouped into language clusters."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

ENTITY_TYPES = ("person", "organization", "location", "other")


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class Taxonomy:
    languages: tuple[str, ...]
    cluster_of: dict[str, int]
    entity_types: tuple[str, ...] = ENTITY_TYPES
    cluster_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "languages", tuple(self.languages))
        object.__setattr__(self, "entity_types", tuple(self.entity_types))
        if len(set(self.languages)) != len(self.languages) or not self.languages:
            raise TaxonomyError("languages must be a non-empty list of unique codes")
        if len(set(self.entity_types)) != len(self.entity_types) or not self.entity_types:
            raise TaxonomyError("entity types must be non-empty and unique")
        missing = [lang for lang in self.languages if lang not in self.cluster_of]
        if missing:
            raise TaxonomyError(f"no cluster for languages {missing}")
        ids = sorted({int(self.cluster_of[lang]) for lang in self.languages})
        if ids != list(range(len(ids))):
            raise TaxonomyError(f"cluster ids must be contiguous from 0, got {ids}")
        if self.cluster_names and len(self.cluster_names) != len(ids):
            raise TaxonomyError("cluster_names must name every cluster")
        object.__setattr__(self, "cluster_of", {lang: int(self.cluster_of[lang]) for lang in self.languages})
        object.__setattr__(self, "cluster_names", tuple(self.cluster_names))

    @property
    def n_classes(self) -> int:
        return len(self.languages) * len(self.entity_types)

    @property
    def n_clusters(self) -> int:
        return 1 + max(self.cluster_of.values())

    @cached_property
    def _lang_index(self) -> dict[str, int]:
        return {lang: i for i, lang in enumerate(self.languages)}

    @cached_property
    def _type_index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.entity_types)}

    def encode(self, language: str, entity_type: str) -> int:
        try:
            return self._lang_index[language] * len(self.entity_types) + self._type_index[entity_type]
        except KeyError as exc:
            raise TaxonomyError(f"unknown label ({language!r}, {entity_type!r})") from exc

    def decode(self, class_id: int) -> tuple[str, str]:
        if not 0 <= class_id < self.n_classes:
            raise TaxonomyError(f"class id {class_id} outside [0, {self.n_classes})")
        li, ti = divmod(int(class_id), len(self.entity_types))
        return self.languages[li], self.entity_types[ti]

    def label(self, class_id: int) -> str:
        lang, etype = self.decode(class_id)
        return f"{lang}/{etype}"

    @cached_property
    def class_cluster(self) -> np.ndarray:
        """Cluster id of every class."""
        nt = len(self.entity_types)
        return np.array([self.cluster_of[self.languages[c // nt]] for c in range(self.n_classes)], dtype=np.int64)

    @cached_property
    def leaf_index(self) -> list[np.ndarray]:
        """Global class ids of each cluster, ascending."""
        return [np.flatnonzero(self.class_cluster == k) for k in range(self.n_clusters)]

    @cached_property
    def local_index(self) -> np.ndarray:
        """Column of each class inside its cluster head."""
        local = np.empty(self.n_classes, dtype=np.int64)
        for idx in self.leaf_index:
            local[idx] = np.arange(idx.size)
        return local

    def to_dict(self) -> dict:
        return {
            "languages": list(self.languages),
            "entity_types": list(self.entity_types),
            "cluster_of": dict(self.cluster_of),
            "cluster_names": list(self.cluster_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Taxonomy":
        return cls(
            languages=tuple(d["languages"]),
            cluster_of={k: int(v) for k, v in d["cluster_of"].items()},
            entity_types=tuple(d.get("entity_types", ENTITY_TYPES)),
            cluster_names=tuple(d.get("cluster_names", ())),
        )

    @classmethod
    def grouped(cls, n_languages: int, n_clusters: int, prefix: str = "l") -> "Taxonomy":
        """Synthetic codes split into contiguous, near-equal clusters."""
        if not 1 <= n_clusters <= n_languages:
            raise TaxonomyError("need 1 <= n_clusters <= n_languages")
        width = len(str(n_languages - 1))
        langs = tuple(f"{prefix}{i:0{width}d}" for i in range(n_languages))
        bounds = np.linspace(0, n_languages, n_clusters + 1).round().astype(int)
        cluster_of = {}
        for k, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
            for lang in langs[lo:hi]:
                cluster_of[lang] = k
        return cls(languages=langs, cluster_of=cluster_of)

    @classmethod
    def full_scale(cls) -> "Taxonomy":
        """104 languages x 4 types in 24 clusters: the production-size label space."""
        return cls.grouped(104, 24)
