"""Binary model files.

Layout (all integers little-endian)::

    magic    4 bytes  b"ONMX"
    version  u16
    flags    u16      bit0 quantized, bit1 float64 params, bit2 checkpoint
    section* tag (4 ASCII bytes), u64 payload length, payload
    checksum 8 bytes  BLAKE2b-64 of every preceding byte

Sections: CONF (config JSON), TAXO (taxonomy JSON), VOCB (vocabulary, one
token per line), META (JSON), PARM/QPRM/OPTM (tensor blocks), TRST
(training state JSON). Unknown tags are skipped by length.

Tensor block payload: u16 name length, UTF-8 name, u8 dtype tag, u8 ndim,
ndim x u64 dims, u8 pad length, pad zero bytes (so the data starts on a
64-byte file offset), raw little-endian data.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.text import Vocab
from .model import ModelConfig, OnomasCNN
from .taxonomy import Taxonomy

MAGIC = b"ONMX"
VERSION = 1
ALIGN = 64
CHECKSUM_BYTES = 8

FLAG_QUANTIZED = 1
FLAG_FLOAT64 = 2
FLAG_CHECKPOINT = 4

DTYPE_TAGS = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("i1"): 3,
    np.dtype("<i4"): 4,
    np.dtype("<i8"): 5,
    np.dtype("<u8"): 6,
}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class ModelFileError(Exception):
    pass


class NotAModelFile(ModelFileError):
    pass


class CorruptModelFile(ModelFileError):
    pass


class UnsupportedVersion(ModelFileError):
    pass


def checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=CHECKSUM_BYTES).digest()


@dataclass
class ModelFile:
    flags: int
    config: dict
    taxonomy: dict
    vocab: list[str] | None = None
    meta: dict = field(default_factory=dict)
    params: dict[str, np.ndarray] = field(default_factory=dict)
    qparams: dict[str, np.ndarray] = field(default_factory=dict)
    optim: dict[str, np.ndarray] = field(default_factory=dict)
    train_state: dict | None = None
    version: int = VERSION
    size: int = 0


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    @property
    def offset(self) -> int:
        return self.buf.tell()

    def raw(self, b: bytes) -> None:
        self.buf.write(b)

    def section(self, tag: bytes, payload: bytes) -> None:
        self.raw(tag + struct.pack("<Q", len(payload)))
        self.raw(payload)

    def tensor_section(self, tag: bytes, name: str, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in DTYPE_TAGS:
            raise ModelFileError(f"unsupported dtype {arr.dtype} for {name}")
        enc = name.encode("utf-8")
        head = struct.pack("<H", len(enc)) + enc + struct.pack("<BB", DTYPE_TAGS[np.dtype(dt)], arr.ndim)
        head += b"".join(struct.pack("<Q", d) for d in arr.shape)
        data_start = self.offset + 12 + len(head) + 1
        pad = (-data_start) % ALIGN
        payload = head + struct.pack("<B", pad) + b"\0" * pad + arr.astype(dt, copy=False).tobytes()
        self.section(tag, payload)


def _json(d) -> bytes:
    return json.dumps(d, sort_keys=True, ensure_ascii=False).encode("utf-8")


def encode(mf: ModelFile) -> bytes:
    w = _Writer()
    w.raw(MAGIC + struct.pack("<HH", mf.version, mf.flags))
    w.section(b"CONF", _json(mf.config))
    w.section(b"TAXO", _json(mf.taxonomy))
    if mf.vocab is not None:
        w.section(b"VOCB", "\n".join(mf.vocab).encode("utf-8"))
    if mf.meta:
        w.section(b"META", _json(mf.meta))
    for name, arr in mf.params.items():
        w.tensor_section(b"PARM", name, arr)
    for name, arr in mf.qparams.items():
        w.tensor_section(b"QPRM", name, arr)
    for name, arr in mf.optim.items():
        w.tensor_section(b"OPTM", name, arr)
    if mf.train_state is not None:
        w.section(b"TRST", _json(mf.train_state))
    body = w.buf.getvalue()
    return body + checksum(body)


def _tensor(payload, copy: bool) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack_from("<H", payload, 0)
    pos = 2
    name = bytes(payload[pos : pos + nlen]).decode("utf-8")
    pos += nlen
    tag, ndim = struct.unpack_from("<BB", payload, pos)
    pos += 2
    shape = struct.unpack_from("<" + "Q" * ndim, payload, pos)
    pos += 8 * ndim
    (pad,) = struct.unpack_from("<B", payload, pos)
    pos += 1 + pad
    if tag not in TAG_DTYPES:
        raise CorruptModelFile(f"unknown dtype tag {tag} in block {name!r}")
    dt = TAG_DTYPES[tag]
    count = int(np.prod(shape)) if shape else 1
    if len(payload) - pos != count * dt.itemsize:
        raise CorruptModelFile(f"block {name!r} payload has the wrong length")
    arr = np.frombuffer(payload, dtype=dt, count=count, offset=pos).reshape(shape)
    return name, (arr.copy() if copy else arr)


def decode(blob: bytes) -> ModelFile:
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise NotAModelFile("not a model file")
    version, flags = struct.unpack_from("<HH", blob, 4)
    if version > VERSION:
        raise UnsupportedVersion(f"file format version {version} is newer than supported version {VERSION}")
    if len(blob) < 8 + CHECKSUM_BYTES or checksum(blob[:-CHECKSUM_BYTES]) != blob[-CHECKSUM_BYTES:]:
        raise CorruptModelFile("checksum mismatch: file is truncated or corrupted")
    mf = ModelFile(flags=flags, config={}, taxonomy={}, version=version, size=len(blob))
    seen: set[tuple[bytes, str]] = set()
    view = memoryview(blob)
    pos, end = 8, len(blob) - CHECKSUM_BYTES
    got_conf = got_taxo = False
    while pos < end:
        if pos + 12 > end:
            raise CorruptModelFile("truncated section header")
        tag = blob[pos : pos + 4]
        (n,) = struct.unpack_from("<Q", blob, pos + 4)
        pos += 12
        if pos + n > end:
            raise CorruptModelFile(f"section {tag!r} runs past the end of the file")
        payload = view[pos : pos + n]
        pos += n
        if tag == b"CONF":
            mf.config, got_conf = json.loads(bytes(payload)), True
        elif tag == b"TAXO":
            mf.taxonomy, got_taxo = json.loads(bytes(payload)), True
        elif tag == b"VOCB":
            mf.vocab = bytes(payload).decode("utf-8").split("\n")
        elif tag == b"META":
            mf.meta = json.loads(bytes(payload))
        elif tag == b"TRST":
            mf.train_state = json.loads(bytes(payload))
        elif tag in (b"PARM", b"QPRM", b"OPTM"):
            name, arr = _tensor(payload, copy=True)
            if (tag, name) in seen:
                raise CorruptModelFile(f"duplicate block {name!r}")
            seen.add((tag, name))
            {b"PARM": mf.params, b"QPRM": mf.qparams, b"OPTM": mf.optim}[tag][name] = arr
        # unknown tags: skipped
    if not (got_conf and got_taxo):
        raise CorruptModelFile("missing config or taxonomy section")
    return mf


def write_atomic(path: str | Path, blob: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_file(path: str | Path) -> ModelFile:
    return decode(Path(path).read_bytes())


# ------------------------------------------------------------- model level


def model_file(model: OnomasCNN, flags: int = 0) -> ModelFile:
    if model.config.dtype == "float64":
        flags |= FLAG_FLOAT64
    return ModelFile(
        flags=flags,
        config=model.config.to_dict(),
        taxonomy=model.taxonomy.to_dict(),
        vocab=None if model.vocab is None else model.vocab.to_lines(),
        meta={"fingerprint": model.fingerprint()},
        params={n: p.data for n, p in model.params.items()},
    )


def build_model(mf: ModelFile) -> OnomasCNN:
    config = ModelConfig.from_dict(mf.config)
    taxonomy = Taxonomy.from_dict(mf.taxonomy)
    vocab = Vocab.from_lines(mf.vocab) if mf.vocab is not None else None
    model = OnomasCNN(config, taxonomy, vocab, init=False)
    expected = model.expected_shapes()
    missing = sorted(set(expected) - set(mf.params))
    extra = sorted(set(mf.params) - set(expected))
    if missing or extra:
        raise CorruptModelFile(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        arr = mf.params[name]
        if arr.shape != shape or arr.dtype != config.np_dtype:
            raise CorruptModelFile(f"{name}: stored {arr.dtype}{arr.shape}, expected {config.dtype}{shape}")
        model.params[name].data = arr
        model.params[name].zero_grad()
    return model


def save(model, path: str | Path) -> int:
    """Write a float or quantized model atomically; returns the file size."""
    from .quant import QuantizedModel

    mf = model.to_file() if isinstance(model, QuantizedModel) else model_file(model)
    blob = encode(mf)
    write_atomic(path, blob)
    return len(blob)


def load(path: str | Path):
    """Load whatever model the file holds (float or quantized)."""
    mf = read_file(path)
    if mf.flags & FLAG_QUANTIZED:
        from .quant import QuantizedModel

        return QuantizedModel.from_file(mf)
    return build_model(mf)


def expected_size(model: OnomasCNN) -> dict:
    """Byte accounting of a float model file, for comparison with the written size."""
    mf = model_file(model)
    fixed = 8 + CHECKSUM_BYTES
    sections = {
        "CONF": 12 + len(_json(mf.config)),
        "TAXO": 12 + len(_json(mf.taxonomy)),
        "VOCB": 0 if mf.vocab is None else 12 + len("\n".join(mf.vocab).encode("utf-8")),
        "META": 12 + len(_json(mf.meta)),
    }
    param_bytes = sum(a.nbytes for a in mf.params.values())
    block_headers = sum(
        12 + 2 + len(n.encode()) + 2 + 8 * a.ndim + 1 for n, a in mf.params.items()
    )
    return {
        "fixed": fixed,
        "sections": sections,
        "param_bytes": param_bytes,
        "block_headers": block_headers,
        "max_padding": (ALIGN - 1) * len(mf.params),
        "lower_bound": fixed + sum(sections.values()) + param_bytes + block_headers,
    }
