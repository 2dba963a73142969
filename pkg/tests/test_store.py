import struct

import numpy as np
import pytest

from onomas import store
from onomas.model import ModelConfig, OnomasCNN, param_report
from onomas.taxonomy import Taxonomy

from .helpers import tiny_model


@pytest.fixture(scope="module")
def default_model():
    return OnomasCNN(ModelConfig(vocab_size=300, num_clusters=2), Taxonomy.grouped(4, 2))


def _assert_same(a, b):
    assert a.config == b.config and a.taxonomy == b.taxonomy
    assert set(a.params) == set(b.params)
    for n, p in a.params.items():
        assert p.data.dtype == b.params[n].data.dtype
        assert p.data.tobytes() == b.params[n].data.tobytes(), n


def test_default_model_round_trip(default_model, tmp_path):
    path = tmp_path / "m.onmx"
    size = store.save(default_model, path)
    assert size == path.stat().st_size
    back = store.load(path)
    _assert_same(default_model, back)
    assert back.fingerprint() == default_model.fingerprint()


def test_float64_round_trip_with_vocab(tmp_path):
    m = tiny_model(3, dtype="float64")
    store.save(m, tmp_path / "m.onmx")
    back = store.load(tmp_path / "m.onmx")
    _assert_same(m, back)
    assert back.vocab == m.vocab
    assert store.read_file(tmp_path / "m.onmx").flags & store.FLAG_FLOAT64


def test_size_accounting(default_model, tmp_path):
    size = store.save(default_model, tmp_path / "m.onmx")
    acc = store.expected_size(default_model)
    assert acc["lower_bound"] <= size <= acc["lower_bound"] + acc["max_padding"]
    assert acc["param_bytes"] == param_report(default_model)["total"] * 4


def test_blocks_are_aligned(default_model, tmp_path):
    path = tmp_path / "m.onmx"
    store.save(default_model, path)
    blob = path.read_bytes()
    pos, end, seen = 8, len(blob) - store.CHECKSUM_BYTES, 0
    while pos < end:
        tag, (n,) = blob[pos : pos + 4], struct.unpack_from("<Q", blob, pos + 4)
        if tag == b"PARM":
            p = pos + 12
            (nlen,) = struct.unpack_from("<H", blob, p)
            ndim = blob[p + 2 + nlen + 1]
            pad_at = p + 2 + nlen + 2 + 8 * ndim
            assert (pad_at + 1 + blob[pad_at]) % store.ALIGN == 0
            seen += 1
        pos += 12 + n
    assert seen == len(default_model.params)


def test_thousand_random_corruptions_detected(tmp_path):
    m = tiny_model(1, dtype="float32")
    blob = store.encode(store.model_file(m))
    rng = np.random.default_rng(99)
    for _ in range(1000):
        i = int(rng.integers(0, len(blob)))
        bad = bytearray(blob)
        bad[i] ^= int(rng.integers(1, 256))
        with pytest.raises(store.ModelFileError):
            store.decode(bytes(bad))


def test_truncation_and_header_errors(tmp_path):
    blob = store.encode(store.model_file(tiny_model(0)))
    for cut in (0, 3, 8, len(blob) // 2, len(blob) - 1):
        with pytest.raises(store.ModelFileError):
            store.decode(blob[:cut])
    with pytest.raises(store.CorruptModelFile):
        store.decode(blob[:-1])
    with pytest.raises(store.NotAModelFile, match="not a model file"):
        store.decode(b"GGUF" + blob[4:])
    newer = bytearray(blob)
    newer[4:6] = struct.pack("<H", store.VERSION + 1)
    with pytest.raises(store.UnsupportedVersion, match="newer"):
        store.decode(bytes(newer))
    (tmp_path / "t.onmx").write_bytes(blob[:100])
    with pytest.raises(store.CorruptModelFile):
        store.load(tmp_path / "t.onmx")


def test_unknown_sections_are_skipped():
    blob = store.encode(store.model_file(tiny_model(0)))
    body = blob[: -store.CHECKSUM_BYTES]
    extra = b"XTRA" + struct.pack("<Q", 5) + b"hello"
    patched = body + extra
    mf = store.decode(patched + store.checksum(patched))
    _assert_same(store.build_model(mf), tiny_model(0))


def test_parameter_set_is_checked():
    mf = store.model_file(tiny_model(0))
    del mf.params["cluster_head.bias"]
    with pytest.raises(store.CorruptModelFile, match="missing"):
        store.build_model(store.decode(store.encode(mf)))
    mf = store.model_file(tiny_model(0))
    mf.params["cluster_head.bias"] = mf.params["cluster_head.bias"][:1]
    with pytest.raises(store.CorruptModelFile):
        store.build_model(mf)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    store.save(tiny_model(0), tmp_path / "m.onmx")
    store.save(tiny_model(1), tmp_path / "m.onmx")
    assert [p.name for p in tmp_path.iterdir()] == ["m.onmx"]
    _assert_same(store.load(tmp_path / "m.onmx"), tiny_model(1))
