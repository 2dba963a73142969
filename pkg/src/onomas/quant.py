"""Post-training INT8 weight quantization and the quantized inference path.

Conv and linear weights are stored as int8 with one symmetric scale per
output channel. Everything else (embeddings, biases, pooling parameters)
stays float. Three interchangeable GEMM backends run the quantized layers:

``dequant``    float GEMM against ``q * scale`` (weight-only semantics)
``reference``  int8 activations, exact integer multiply-accumulate,
               rescaled per channel (pure numpy)
``fbgemm``     torch int8 kernels: ``_int_mm`` for the grouped depth
               stage, fbgemm dynamic-quantized linear for the rest (optional)

Depth-stage activations are quantized once per (sequence, group) so every
branch reads the same int8 windows; pointwise and head activations are
quantized per row (reference) or per tensor (fbgemm).
"""
from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import store
from .data.text import Vocab
from .infer import Engine, depth_group_rows, float_linear
from .model import ModelConfig, OnomasCNN
from .taxonomy import Taxonomy

QMAX = 127
ACC_LIMIT = 2**31
BACKENDS = ("fbgemm", "reference", "dequant")


class QuantizationError(ValueError):
    pass


@functools.lru_cache(maxsize=1)
def _torch():
    try:
        import torch
    except ImportError:
        return None
    try:
        torch.ops.quantized.linear_dynamic  # noqa: B018
    except (AttributeError, RuntimeError):
        return None
    return torch


def fbgemm_available() -> bool:
    return _torch() is not None


def default_backend() -> str:
    return "fbgemm" if fbgemm_available() else "reference"


@dataclass(frozen=True)
class QuantizedTensor:
    """int8 payload in the float layout, with per-output-channel (axis 0) scales."""

    q: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if self.q.dtype != np.int8:
            raise QuantizationError("payload must be int8")
        if self.scale.shape != (self.q.shape[0],) or not (self.scale > 0).all():
            raise QuantizationError("need one positive scale per output channel")
        if (self.q == -128).any():
            raise QuantizationError("payload values must lie in [-127, 127]")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.q.shape

    def dequantize(self) -> np.ndarray:
        s = self.scale.reshape((-1,) + (1,) * (self.q.ndim - 1))
        return self.q.astype(self.scale.dtype) * s

    @property
    def nbytes(self) -> int:
        return self.q.nbytes + self.scale.nbytes


def quantize_tensor(w: np.ndarray, name: str = "weight") -> QuantizedTensor:
    """Symmetric per-output-channel quantization, round half to even.

    The scale is held in the weight's own precision; the rounding is done
    against that stored scale, so ``|w - q*scale| <= scale/2`` holds for
    every weight exactly.
    """
    w = np.asarray(w)
    if not np.isfinite(w).all():
        raise QuantizationError(f"non-finite weight in layer {name!r}")
    flat = w.reshape(w.shape[0], -1).astype(np.float64)
    max_abs = np.abs(flat).max(axis=1) if flat.shape[1] else np.zeros(w.shape[0])
    scale = np.where(max_abs > 0, max_abs / QMAX, 1.0).astype(w.dtype)
    q = np.clip(np.rint(flat / scale.astype(np.float64)[:, None]), -QMAX, QMAX)
    return QuantizedTensor(q.astype(np.int8).reshape(w.shape), scale)


def quantize_activations(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row symmetric int8 quantization of a ``[rows, K]`` activation block."""
    max_abs = np.abs(x).max(axis=1)
    scale = np.where(max_abs > 0, max_abs / QMAX, 1.0)
    return np.clip(np.rint(x / scale[:, None]), -QMAX, QMAX), scale


def accumulator_bound(k: int) -> int:
    """Largest possible |int32 accumulator| for a dot product of length ``k``."""
    return k * QMAX * QMAX


def quantized_layer_names(config: ModelConfig, taxonomy: Taxonomy) -> list[str]:
    names = []
    for b in range(len(config.kernel_sizes)):
        names += [f"branch{b}.depth.weight", f"branch{b}.point.weight"]
    names.append("cluster_head.weight")
    names += [f"leaf_head{k}.weight" for k in range(taxonomy.n_clusters)]
    return names


class _Int8Depth:
    """Depth-stage GEMM over int8 windows with int32 accumulation."""

    int8_input = True

    def __init__(self, w2d: np.ndarray, scale: np.ndarray, bias: np.ndarray, use_torch: bool):
        self.scale = scale
        self.bias = bias
        self.torch = _torch() if use_torch else None
        if self.torch is not None:
            self.wt = self.torch.from_numpy(np.ascontiguousarray(w2d.T))
        else:
            self.wt = np.ascontiguousarray(w2d.T.astype(np.float64))
        self.bind_activation_scale(1.0)

    def bind_activation_scale(self, act_scale: float) -> None:
        self.out_scale = (self.scale.astype(np.float64) * act_scale).astype(self.scale.dtype)
        if self.torch is not None:
            self._ts = self.torch.from_numpy(self.out_scale)
            self._tb = self.torch.from_numpy(np.ascontiguousarray(self.bias, dtype=self.scale.dtype))

    def accumulate(self, xq: np.ndarray) -> np.ndarray:
        """Exact int32 accumulators ``xq @ q.T``."""
        if self.torch is not None:
            return self.torch._int_mm(self.torch.from_numpy(xq), self.wt).numpy()
        return (xq.astype(np.float64) @ self.wt).astype(np.int32)  # integer valued, exact in float64

    def __call__(self, xq: np.ndarray, out: np.ndarray) -> np.ndarray:
        if self.torch is not None:
            t = self.torch
            o = t.from_numpy(out)
            t.mul(t._int_mm(t.from_numpy(xq), self.wt), self._ts, out=o)
            o.add_(self._tb)
            return out
        np.multiply(self.accumulate(xq).astype(self.scale.dtype), self.out_scale, out=out)
        out += self.bias
        return out


def _linear(w2d: np.ndarray, scale: np.ndarray, bias: np.ndarray | None, backend: str):
    """One quantized GEMM ``x[rows, K] @ W[N, K].T + bias`` on the chosen backend."""
    if backend == "dequant":
        w = (w2d.astype(np.float64) * scale.astype(np.float64)[:, None]).astype(scale.dtype)
        return float_linear(w, bias)
    if backend == "reference":
        qf_t = np.ascontiguousarray(w2d.T.astype(np.float64))
        s64 = scale.astype(np.float64)

        def run(x):
            xq, xs = quantize_activations(x.astype(np.float64))
            out = (xq @ qf_t) * xs[:, None] * s64  # integer-valued GEMM, exact in float64
            if bias is not None:
                out += bias
            return out.astype(x.dtype)

        return run
    torch = _torch()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # deprecation notice for quantized tensor creation
        qw = torch._make_per_channel_quantized_tensor(
            torch.from_numpy(np.ascontiguousarray(w2d)),
            torch.from_numpy(scale.astype(np.float64)),
            torch.zeros(len(scale), dtype=torch.long),
            0,
        )
    tb = None if bias is None else torch.from_numpy(np.ascontiguousarray(bias, dtype=np.float32))
    packed = torch.ops.quantized.linear_prepack(qw, tb)
    op = torch.ops.quantized.linear_dynamic

    def run(x):
        return op(torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)), packed, False).numpy()

    return run


class QuantizedModel:
    """Immutable quantized twin of an :class:`OnomasCNN`."""

    def __init__(
        self,
        config: ModelConfig,
        taxonomy: Taxonomy,
        vocab: Vocab | None,
        floats: dict[str, np.ndarray],
        qweights: dict[str, QuantizedTensor],
        source_hash: str,
        backend: str | None = None,
    ):
        self.config = config
        self.taxonomy = taxonomy
        self.vocab = vocab
        self.floats = floats
        self.qweights = qweights
        self.source_hash = source_hash
        self.check_accumulators()
        self.set_backend(backend or default_backend())

    def set_backend(self, backend: str) -> None:
        if backend not in BACKENDS:
            raise ValueError(f"unknown backend {backend!r}; choose from {BACKENDS}")
        if backend == "fbgemm" and not fbgemm_available():
            raise RuntimeError("the fbgemm backend needs torch with quantized ops")
        if backend == "fbgemm" and self.config.dtype != "float32":
            backend = "reference"
        self.backend = backend
        g = self.config.groups

        def make(name, qt, bias):
            if name.endswith("depth.weight"):
                j, qt = qt
                og = qt.shape[0] // g
                rows, sc = depth_group_rows(qt.q, g, j), qt.scale[j * og : (j + 1) * og]
                if backend == "dequant":
                    return _linear(rows, sc, bias, backend)
                return _Int8Depth(rows, sc, bias, backend == "fbgemm")
            return _linear(qt.q.reshape(qt.shape[0], -1), qt.scale, bias, backend)

        self.engine = Engine(self.config, self.taxonomy, self.floats, self.qweights, make)

    def check_accumulators(self) -> None:
        for name, qt in self.qweights.items():
            k = int(np.prod(qt.shape[1:]))
            if accumulator_bound(k) >= ACC_LIMIT:
                raise QuantizationError(
                    f"{name}: dot products of length {k} could overflow a 32-bit accumulator"
                )

    def inference_engine(self) -> Engine:
        return self.engine

    def payload_bytes(self) -> int:
        return sum(qt.nbytes for qt in self.qweights.values())

    def features(self, ids: np.ndarray, lengths: np.ndarray | None = None) -> np.ndarray:
        return self.engine.features(ids, lengths)

    def forward(self, ids: np.ndarray, lengths: np.ndarray | None = None) -> tuple[np.ndarray, list[np.ndarray]]:
        return self.engine.logits(ids, lengths)

    def predict_proba(self, ids: np.ndarray, lengths: np.ndarray | None = None) -> np.ndarray:
        return self.engine.predict_proba(ids, lengths)

    # ---------------------------------------------------------- persistence

    def to_file(self) -> store.ModelFile:
        flags = store.FLAG_QUANTIZED | (store.FLAG_FLOAT64 if self.config.dtype == "float64" else 0)
        qparams = {}
        for name, qt in self.qweights.items():
            qparams[f"{name}.q"] = qt.q
            qparams[f"{name}.scale"] = qt.scale
        return store.ModelFile(
            flags=flags,
            config=self.config.to_dict(),
            taxonomy=self.taxonomy.to_dict(),
            vocab=None if self.vocab is None else self.vocab.to_lines(),
            meta={"source_hash": self.source_hash},
            params=dict(self.floats),
            qparams=qparams,
        )

    @classmethod
    def from_file(cls, mf: store.ModelFile, backend: str | None = None) -> "QuantizedModel":
        config = ModelConfig.from_dict(mf.config)
        taxonomy = Taxonomy.from_dict(mf.taxonomy)
        vocab = Vocab.from_lines(mf.vocab) if mf.vocab is not None else None
        shapes = OnomasCNN(config, taxonomy, vocab, init=False).expected_shapes()
        qnames = quantized_layer_names(config, taxonomy)
        want_float = {n: s for n, s in shapes.items() if n not in qnames}
        if set(mf.params) != set(want_float):
            raise store.CorruptModelFile("float parameter set does not match the architecture")
        want_q = {f"{n}.{part}" for n in qnames for part in ("q", "scale")}
        if set(mf.qparams) != want_q:
            raise store.CorruptModelFile("quantized parameter set does not match the architecture")
        for n, s in want_float.items():
            if mf.params[n].shape != s:
                raise store.CorruptModelFile(f"{n}: stored shape {mf.params[n].shape}, expected {s}")
        qweights = {}
        for n in qnames:
            q, s = mf.qparams[f"{n}.q"], mf.qparams[f"{n}.scale"]
            if q.shape != shapes[n] or q.dtype != np.int8:
                raise store.CorruptModelFile(f"{n}: bad quantized payload {q.dtype}{q.shape}")
            try:
                qweights[n] = QuantizedTensor(q, s)
            except QuantizationError as exc:
                raise store.CorruptModelFile(f"{n}: {exc}") from exc
        return cls(config, taxonomy, vocab, dict(mf.params), qweights, mf.meta.get("source_hash", ""), backend)

    def verify_source(self, model: OnomasCNN) -> bool:
        return model.fingerprint() == self.source_hash


def quantize_weights(model: OnomasCNN, backend: str | None = None) -> QuantizedModel:
    """Quantize every conv and linear weight of a trained float model."""
    qnames = quantized_layer_names(model.config, model.taxonomy)
    qweights = {n: quantize_tensor(model.params[n].data, n) for n in qnames}
    floats = {n: p.data.copy() for n, p in model.params.items() if n not in qweights}
    for n, v in floats.items():
        if not np.isfinite(v).all():
            raise QuantizationError(f"non-finite weight in layer {n!r}")
    return QuantizedModel(
        model.config, model.taxonomy, model.vocab, floats, qweights, model.fingerprint(), backend
    )


def conv_linear_bytes(model: OnomasCNN) -> int:
    """Float bytes of the layers that get quantized."""
    return sum(model.params[n].data.nbytes for n in quantized_layer_names(model.config, model.taxonomy))


def argmax_agreement(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.argmax(a, axis=1) == np.argmax(b, axis=1)))


def layer_errors(model: OnomasCNN, qmodel: QuantizedModel) -> dict[str, float]:
    """Max-abs weight reconstruction error per quantized layer, in units of its scale."""
    out = {}
    for n, qt in qmodel.qweights.items():
        err = np.abs(model.params[n].data.astype(np.float64) - qt.dequantize().astype(np.float64))
        s = qt.scale.astype(np.float64).reshape((-1,) + (1,) * (err.ndim - 1))
        out[n] = float((err / s).max())
    return out


__all__: Sequence[str] = (
    "BACKENDS",
    "QuantizationError",
    "QuantizedModel",
    "QuantizedTensor",
    "accumulator_bound",
    "argmax_agreement",
    "conv_linear_bytes",
    "default_backend",
    "fbgemm_available",
    "layer_errors",
    "quantize_activations",
    "quantize_tensor",
    "quantize_weights",
    "quantized_layer_names",
)
