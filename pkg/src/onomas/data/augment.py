"""Training-time name perturbations: case, title/abbreviation, character noise."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import NameRecord

DEFAULT_TITLES = ("Dr.", "Mr.", "Mrs.", "Ms.", "Prof.")

LOCALE_TITLES: dict[str, tuple[str, ...]] = {
    "en": ("Mr.", "Mrs.", "Ms.", "Dr.", "Prof.", "Sir"),
    "de": ("Herr", "Frau", "Dr.", "Prof."),
    "fr": ("M.", "Mme", "Mlle", "Dr"),
    "es": ("Sr.", "Sra.", "Srta.", "Dr."),
    "it": ("Sig.", "Sig.ra", "Dott.", "Prof."),
    "pt": ("Sr.", "Sra.", "Dr.", "Dra."),
    "nl": ("Dhr.", "Mevr.", "Dr."),
    "hr": ("g.", "gđa", "dr.", "prof."),
    "ru": ("г-н", "г-жа", "д-р"),
}

CASE_OPS = ("lower", "upper", "title")
TITLE_OPS = ("prepend_title", "abbreviate")
NOISE_OPS = ("swap", "delete", "duplicate")


@dataclass(frozen=True)
class AugmentConfig:
    cap_rate: float = 0.30
    title_abbrev_rate: float = 0.20
    noise_rate: float = 0.10
    seed: int = 0
    titles: dict[str, tuple[str, ...]] = field(default_factory=lambda: dict(LOCALE_TITLES))

    def __post_init__(self):
        for name in ("cap_rate", "title_abbrev_rate", "noise_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    def titles_for(self, language: str) -> tuple[str, ...]:
        return self.titles.get(language) or self.titles.get(language.split("-")[0]) or DEFAULT_TITLES


def _case(text: str, op: str) -> str:
    return {"lower": str.lower, "upper": str.upper, "title": str.title}[op](text)


def _title_abbrev(text: str, op: str, language: str, cfg: AugmentConfig, rng: np.random.Generator) -> str:
    words = text.split(" ")
    candidates = [i for i, w in enumerate(words[:-1]) if len(w) > 1]
    if op == "abbreviate" and candidates:
        i = candidates[int(rng.integers(len(candidates)))]
        words[i] = words[i][0] + "."
        return " ".join(words)
    titles = cfg.titles_for(language)
    return f"{titles[int(rng.integers(len(titles)))]} {text}"


def _noise(text: str, op: str, rng: np.random.Generator) -> str:
    if len(text) < 2 and op in ("swap", "delete"):
        op = "duplicate"
    if op == "swap":
        i = int(rng.integers(len(text) - 1))
        return text[:i] + text[i + 1] + text[i] + text[i + 2 :]
    i = int(rng.integers(len(text)))
    if op == "delete":
        return text[:i] + text[i + 1 :]
    return text[: i + 1] + text[i] + text[i + 1 :]


def augment_trace(
    record: NameRecord, config: AugmentConfig, rng: np.random.Generator
) -> tuple[NameRecord, list[tuple[str, str, str]]]:
    """Apply the three families in order; also return ``(family, op, text)`` per applied stage.

    The three gate draws are always consumed so streams stay aligned
    regardless of which families fire.
    """
    gates = rng.random(3)
    text = record.raw
    trace = []
    if gates[0] < config.cap_rate:
        op = CASE_OPS[int(rng.integers(3))]
        text = _case(text, op)
        trace.append(("case", op, text))
    if gates[1] < config.title_abbrev_rate:
        op = TITLE_OPS[int(rng.integers(2))]
        text = _title_abbrev(text, op, record.language, config, rng)
        trace.append(("title", op, text))
    if gates[2] < config.noise_rate:
        op = NOISE_OPS[int(rng.integers(3))]
        noisy = _noise(text, op, rng)
        if noisy.strip():
            text = noisy
            trace.append(("noise", op, text))
    return replace(record, raw=text), trace


def augment(record: NameRecord, config: AugmentConfig, rng: np.random.Generator) -> NameRecord:
    return augment_trace(record, config, rng)[0]


def record_rng(seed: int, epoch: int, uid: int) -> np.random.Generator:
    """Per-record stream, independent of how records are batched."""
    return np.random.default_rng([seed, epoch, uid])
