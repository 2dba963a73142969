"""Name normalization and tokenization."""
from __future__ import annotations

import unicodedata
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")


class NormalizationError(ValueError):
    pass


def normalize(raw: str) -> str:
    """NFC with edges trimmed. Everything inside the name is kept as is."""
    out = unicodedata.normalize("NFC", raw).strip()
    if not out:
        raise NormalizationError(f"name is empty after normalization: {raw!r}")
    return out


class Vocab:
    """Token <-> id mapping with pad/begin/end/unknown ids.

    Tokenization is greedy longest-match over the token strings, which
    reduces to per-character lookup for a character inventory.
    """

    def __init__(
        self,
        token_to_id: dict[str, int],
        pad_id: int = 0,
        begin_id: int = 1,
        end_id: int = 2,
        unk_id: int = 3,
        size: int | None = None,
    ):
        self.token_to_id = dict(token_to_id)
        self.pad_id, self.begin_id, self.end_id, self.unk_id = pad_id, begin_id, end_id, unk_id
        top = max([pad_id, begin_id, end_id, unk_id, *self.token_to_id.values()])
        self.size = top + 1 if size is None else size
        if self.size <= top:
            raise ValueError(f"vocab size {self.size} too small for id {top}")
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}
        self.max_token_len = max((len(t) for t in self.token_to_id), default=1)

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.to_lines() == other.to_lines()

    @classmethod
    def from_characters(cls, names: Iterable[str]) -> "Vocab":
        chars = sorted({ch for name in names for ch in name})
        return cls({ch: i + len(SPECIAL_TOKENS) for i, ch in enumerate(chars)})

    # external file: one token per line, line number == id, four reserved lines first
    def to_lines(self) -> list[str]:
        lines = [""] * self.size
        for i, tok in zip((self.pad_id, self.begin_id, self.end_id, self.unk_id), SPECIAL_TOKENS):
            lines[i] = tok
        for tok, i in self.token_to_id.items():
            lines[i] = tok
        return lines

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> "Vocab":
        if len(lines) < len(SPECIAL_TOKENS):
            raise ValueError("vocabulary needs the four reserved header lines")
        mapping = {}
        for i, tok in enumerate(lines[len(SPECIAL_TOKENS) :], start=len(SPECIAL_TOKENS)):
            if tok and tok not in mapping:
                mapping[tok] = i
        return cls(mapping, 0, 1, 2, 3, size=len(lines))

    def save(self, path: str | Path) -> None:
        for tok in self.token_to_id:
            if "\n" in tok:
                raise ValueError("tokens cannot contain newlines")
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls.from_lines(lines)

    def pieces(self, text: str) -> list[int]:
        ids = []
        i, n = 0, len(text)
        while i < n:
            for width in range(min(self.max_token_len, n - i), 0, -1):
                tid = self.token_to_id.get(text[i : i + width])
                if tid is not None:
                    ids.append(tid)
                    i += width
                    break
            else:
                ids.append(self.unk_id)
                i += 1
        return ids


def tokenize(name: str, vocab: Vocab, max_len: int = 50) -> tuple[list[int], int]:
    """``begin + pieces + end``, truncated so the end token always survives."""
    if max_len < 3:
        raise ValueError("max_len must be at least 3 (begin marker, one piece, end marker)")
    text = normalize(name)
    body = vocab.pieces(text)[: max_len - 2]
    ids = [vocab.begin_id, *body, vocab.end_id]
    return ids, len(ids)


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    special = {vocab.pad_id, vocab.begin_id, vocab.end_id}
    return "".join(vocab.id_to_token.get(i, "�") for i in ids if i not in special)


def encode_batch(names: Sequence[str], vocab: Vocab, max_len: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Token matrix padded to the longest row, plus valid lengths."""
    rows = [tokenize(n, vocab, max_len)[0] for n in names]
    width = max((len(r) for r in rows), default=1)
    ids = np.full((len(rows), width), vocab.pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
    return ids, np.array([len(r) for r in rows], dtype=np.int64)
