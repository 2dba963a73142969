"""Synthetic multilingual name corpus with learnable class structure.

Each synthetic language draws syllables from its cluster's script with its
own consonant subset and word endings; each entity type has a structural
template plus a language-specific marker word or affix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..taxonomy import ENTITY_TYPES, Taxonomy
from .corpus import NameRecord

# (consonants, vowels) per script; clusters take scripts round-robin
SCRIPTS = (
    ("bcdfghjklmnprstvwz", "aeiou"),
    ("бвгджзклмнпрстфхцш", "аеиоуя"),
    ("βγδζθκλμνξπρστφχψ", "αεηιουω"),
    ("ბგდვზთკლმნპჟრსტფქღყშჩცძწჭხ", "აეიოუ"),
    ("բգդզթժլխծկհձղճմյնշչպջռսվտրցփք", "աեէըիոօ"),
    ("בגדהוזחטכלמנסעפצקרשת", "אוי"),
)


@dataclass(frozen=True)
class _Lang:
    consonants: str
    vowels: str
    endings: tuple[str, ...]
    pattern: str  # syllable template, e.g. "CV" or "CVC"
    markers: dict[str, str]


def _syllable(lang: _Lang, rng: np.random.Generator) -> str:
    out = []
    for slot in lang.pattern:
        pool = lang.consonants if slot == "C" else lang.vowels
        out.append(pool[int(rng.integers(len(pool)))])
    return "".join(out)


def _stem(lang: _Lang, rng: np.random.Generator, lo: int = 1, hi: int = 3) -> str:
    n = int(rng.integers(lo, hi + 1))
    word = "".join(_syllable(lang, rng) for _ in range(n))
    return word + lang.endings[int(rng.integers(len(lang.endings)))]


def _build_languages(taxonomy: Taxonomy, seed: int) -> dict[str, _Lang]:
    langs = {}
    for li, code in enumerate(taxonomy.languages):
        rng = np.random.default_rng([seed, 0x5EED, li])
        cons, vows = SCRIPTS[taxonomy.cluster_of[code] % len(SCRIPTS)]
        k = max(6, int(len(cons) * 0.6))
        c_sub = "".join(sorted(rng.choice(list(cons), size=k, replace=False)))
        v_sub = "".join(sorted(rng.choice(list(vows), size=max(2, len(vows) - 1), replace=False)))
        pattern = ("CV", "CVC", "VC", "CVV")[li % 4]
        seed_lang = _Lang(c_sub, v_sub, ("",), pattern, {})
        endings = tuple(_syllable(seed_lang, rng) for _ in range(3))
        markers = {}
        for t in taxonomy.entity_types:
            markers[t] = _syllable(seed_lang, rng) + _syllable(seed_lang, rng)
        langs[code] = _Lang(c_sub, v_sub, endings, pattern, markers)
    return langs


def _name(lang: _Lang, etype: str, mark: str, rng: np.random.Generator) -> str:
    def cap(w: str) -> str:
        return w[:1].upper() + w[1:]

    if etype == "person":
        return f"{cap(_stem(lang, rng))} {cap(_stem(lang, rng, 2, 3))}"
    if etype == "organization":
        words = " ".join(cap(_stem(lang, rng)) for _ in range(int(rng.integers(1, 3))))
        return f"{words} {cap(mark)}"
    if etype == "location":
        return f"{cap(_stem(lang, rng, 1, 2))}{mark}"
    number = int(rng.integers(1, 1000))
    return f"{mark}-{_stem(lang, rng, 1, 2)} {number}"


def synth_corpus(
    taxonomy: Taxonomy,
    per_class: int | dict[int, int],
    seed: int = 0,
    sample_seed: int | None = None,
) -> list[NameRecord]:
    """Exactly ``per_class`` distinct names for every class, deterministic in ``seed``.

    ``seed`` fixes the synthetic languages; ``sample_seed`` (default ``seed``)
    draws the names, so fresh held-out samples of the same languages are
    one call away. Generic types beyond the four standard ones reuse the
    "other" template.
    """
    langs = _build_languages(taxonomy, seed)
    records = []
    for c in range(taxonomy.n_classes):
        lang_code, etype = taxonomy.decode(c)
        want = per_class if isinstance(per_class, int) else per_class.get(c, 0)
        rng = np.random.default_rng([seed if sample_seed is None else sample_seed, c])
        template = etype if etype in ENTITY_TYPES else "other"
        seen: set[str] = set()
        attempts = 0
        while len(seen) < want:
            attempts += 1
            if attempts > 50 * want + 1000:
                raise RuntimeError(f"could not generate {want} distinct names for class {c}")
            name = _name(langs[lang_code], template, langs[lang_code].markers[etype], rng)
            if name not in seen:
                seen.add(name)
                records.append(NameRecord(name, lang_code, etype))
    return records
