"""The classifier: embeddings, parallel separable branches, pooling fusion, two-stage head."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data.text import NormalizationError, Vocab, encode_batch, tokenize
from .nn import functional as F
from .nn.functional import ConfigError
from .nn.rng import derive_key
from .nn.tensor import PaddingMask, Parameter, Tensor
from .taxonomy import Taxonomy

PARAM_GROUPS = ("embedding", "branches", "fusion", "cluster_head", "leaf_heads")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 384
    vocab_size: int = 250_002
    max_len: int = 50
    kernel_sizes: tuple[int, ...] = (1, 2, 3, 4, 5)
    filter_counts: tuple[int, ...] = (128, 152, 181, 215, 256)
    groups: int = 8
    embed_dropout: float = 0.05
    head_dropout: float = 0.5
    num_clusters: int = 24
    taxonomy_ref: str = ""
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "filter_counts", tuple(int(f) for f in self.filter_counts))
        if len(self.kernel_sizes) != len(self.filter_counts):
            raise ConfigError("kernel_sizes and filter_counts must have equal length")
        if any(k < 1 for k in self.kernel_sizes) or any(f < 1 for f in self.filter_counts):
            raise ConfigError("kernel sizes and filter counts must be positive")
        # the grouped stage runs over the embedding channels; filter counts feed the 1x1 stage
        if self.groups < 1 or self.embed_dim % self.groups:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by groups {self.groups}")
        if self.max_len < 3 or self.vocab_size < 5:
            raise ConfigError("max_len must be >= 3 and vocab_size >= 5")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype}")
        for rate in (self.embed_dropout, self.head_dropout):
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"dropout rate {rate} outside [0, 1)")

    @property
    def feature_dim(self) -> int:
        return sum(self.filter_counts)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_sizes"] = list(self.kernel_sizes)
        d["filter_counts"] = list(self.filter_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def branch_filter_counts(base: int, n_branches: int, explicit: Sequence[int] | None = None) -> list[int]:
    """Explicit counts when given, else ``round_half_up(base * 1.5 ** (i / 2))``."""
    if explicit is not None:
        return [int(c) for c in explicit]
    if base <= 0 or n_branches < 1:
        raise ValueError("base must be positive and n_branches >= 1")
    return [int(math.floor(base * 1.5 ** (i * 0.5) + 0.5)) for i in range(n_branches)]


def sinusoidal_positions(length: int, dim: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / max(dim, 1))
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


def separable_param_count(k: int, cin: int, cout: int, groups: int, bias: bool = False) -> int:
    n = k * (cin // groups) * cin + cin * cout
    return n + (cin + cout if bias else 0)


def standard_param_count(k: int, cin: int, cout: int, bias: bool = False) -> int:
    return k * cin * cout + (cout if bias else 0)


def param_group(name: str) -> str:
    if name.startswith("embedding"):
        return "embedding"
    if name.endswith("fusion"):
        return "fusion"
    if name.startswith("branch"):
        return "branches"
    if name.startswith("cluster_head"):
        return "cluster_head"
    if name.startswith("leaf_head"):
        return "leaf_heads"
    raise KeyError(name)


class OnomasCNN:
    """Parameters plus the forward pass. Immutable during inference."""

    def __init__(self, config: ModelConfig, taxonomy: Taxonomy, vocab: Vocab | None = None, init: bool = True):
        if config.num_clusters != taxonomy.n_clusters:
            raise ConfigError(
                f"config expects {config.num_clusters} clusters, taxonomy defines {taxonomy.n_clusters}"
            )
        if vocab is not None and len(vocab) > config.vocab_size:
            raise ConfigError(f"vocab has {len(vocab)} ids but the embedding holds {config.vocab_size}")
        self.config = config
        self.taxonomy = taxonomy
        self.vocab = vocab
        self.params: dict[str, Parameter] = {}
        self._pe = sinusoidal_positions(config.max_len, config.embed_dim, config.np_dtype)
        self._build(init)

    # ------------------------------------------------------------- structure

    def _shapes(self) -> list[tuple[str, tuple[int, ...], str, float]]:
        """(name, shape, init kind, scale) in canonical order."""
        c = self.config
        d = c.embed_dim
        out = [("embedding.table", (c.vocab_size, d), "normal", 1.0)]
        for b, (k, f) in enumerate(zip(c.kernel_sizes, c.filter_counts)):
            cg = d // c.groups
            out += [
                (f"branch{b}.depth.weight", (d, cg, k), "normal", math.sqrt(2.0 / (cg * k))),
                (f"branch{b}.depth.bias", (d,), "zeros", 0.0),
                (f"branch{b}.point.weight", (f, d, 1), "normal", math.sqrt(2.0 / d)),
                (f"branch{b}.point.bias", (f,), "zeros", 0.0),
                (f"branch{b}.attn.query", (f,), "zeros", 0.0),
                (f"branch{b}.fusion", (3,), "const", 1.0 / 3.0),
            ]
        fd = c.feature_dim
        head_std = math.sqrt(1.0 / max(fd, 1))
        out += [
            ("cluster_head.weight", (c.num_clusters, fd), "normal", head_std),
            ("cluster_head.bias", (c.num_clusters,), "zeros", 0.0),
        ]
        for k, idx in enumerate(self.taxonomy.leaf_index):
            out += [
                (f"leaf_head{k}.weight", (idx.size, fd), "normal", head_std),
                (f"leaf_head{k}.bias", (idx.size,), "zeros", 0.0),
            ]
        return out

    def _build(self, init: bool) -> None:
        dt = self.config.np_dtype
        rng = np.random.default_rng([self.config.seed, 0x0C44])
        for name, shape, kind, s in self._shapes():
            if not init:
                value = np.zeros(shape, dtype=dt)
            elif kind == "normal":
                value = (rng.standard_normal(shape) * s).astype(dt)
            elif kind == "const":
                value = np.full(shape, s, dtype=dt)
            else:
                value = np.zeros(shape, dtype=dt)
            self.params[name] = Parameter(value, name=name)

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: shape for name, shape, _, _ in self._shapes()}

    def named_parameters(self):
        return self.params.items()

    def group(self, group: str) -> list[Parameter]:
        return [p for n, p in self.params.items() if param_group(n) == group]

    def set_trainable(self, groups: Sequence[str], trainable: bool) -> None:
        for g in groups:
            for p in self.group(g):
                p.trainable = trainable

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            if n not in state:
                raise KeyError(f"missing parameter {n}")
            if state[n].shape != p.shape:
                raise ConfigError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=p.dtype)
            p.zero_grad()

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for n, p in self.params.items():
            h.update(n.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    # --------------------------------------------------------------- forward

    def _mask(self, ids: np.ndarray, lengths: np.ndarray | None) -> PaddingMask:
        batch, length = ids.shape
        if length > self.config.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.config.max_len}")
        if lengths is None:
            lengths = np.full(batch, length)
        return PaddingMask(np.asarray(lengths), length)

    def features(
        self,
        ids: np.ndarray,
        lengths: np.ndarray | None = None,
        training: bool = False,
        step_key: int = 0,
        row_keys: np.ndarray | None = None,
    ) -> Tensor:
        """Concatenated fused branch vectors, ``[batch, sum(filter_counts)]``."""
        c, p = self.config, self.params
        ids = np.asarray(ids)
        mask = self._mask(ids, lengths)
        x = F.embedding(ids, p["embedding.table"])
        x = F.add(x, Tensor(self._pe[: ids.shape[1]]))
        x = F.dropout(x, c.embed_dropout, training, derive_key(step_key, 1), row_keys)
        x = F.mask_positions(x, mask)
        fused = []
        for b in range(len(c.kernel_sizes)):
            h = F.separable_block(
                x,
                p[f"branch{b}.depth.weight"],
                p[f"branch{b}.depth.bias"],
                p[f"branch{b}.point.weight"],
                p[f"branch{b}.point.bias"],
                c.groups,
                mask,
            )
            fused.append(
                F.fuse_pools(
                    F.pool_max(h, mask),
                    F.pool_avg(h, mask),
                    F.pool_attn(h, p[f"branch{b}.attn.query"], mask),
                    p[f"branch{b}.fusion"],
                )
            )
        if not fused:
            return Tensor(np.zeros((ids.shape[0], 0), dtype=c.np_dtype))
        feat = F.concat(fused, axis=-1)
        return F.dropout(feat, c.head_dropout, training, derive_key(step_key, 2), row_keys)

    def forward(
        self,
        ids: np.ndarray,
        lengths: np.ndarray | None = None,
        training: bool = False,
        step_key: int = 0,
        row_keys: np.ndarray | None = None,
    ) -> tuple[Tensor, list[Tensor]]:
        """Cluster logits ``[batch, num_clusters]`` and one leaf-logit block per cluster."""
        feat = self.features(ids, lengths, training, step_key, row_keys)
        p = self.params
        cluster_logits = F.linear(feat, p["cluster_head.weight"], p["cluster_head.bias"])
        leaf = [
            F.linear(feat, p[f"leaf_head{k}.weight"], p[f"leaf_head{k}.bias"])
            for k in range(self.taxonomy.n_clusters)
        ]
        return cluster_logits, leaf

    def probs(self, ids, lengths=None, training=False, step_key=0, row_keys=None) -> Tensor:
        cl, leaf = self.forward(ids, lengths, training, step_key, row_keys)
        return F.hierarchical_probs(cl, leaf, self.taxonomy.leaf_index, self.taxonomy.n_classes)

    def inference_engine(self):
        """Tape-free inference pass over the current parameter values."""
        from .infer import float_engine

        return float_engine(self.config, self.taxonomy, {n: p.data for n, p in self.params.items()})

    def predict_proba(self, ids: np.ndarray, lengths: np.ndarray | None = None) -> np.ndarray:
        return self.inference_engine().predict_proba(ids, lengths)

    def predict_fast(self, ids: np.ndarray, lengths: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Class ids and confidences evaluating only the argmax cluster's head per row."""
        p = self.params
        feat = self.inference_engine().features(ids, lengths)
        cl = feat @ p["cluster_head.weight"].data.T + p["cluster_head.bias"].data
        pc = F.softmax_np(cl)
        best = np.argmax(pc, axis=1)
        classes = np.empty(len(best), dtype=np.int64)
        conf = np.empty(len(best), dtype=np.float64)
        for k in np.unique(best):
            rows = np.flatnonzero(best == k)
            pl = F.softmax_np(feat[rows] @ p[f"leaf_head{k}.weight"].data.T + p[f"leaf_head{k}.bias"].data)
            j = np.argmax(pl, axis=1)
            classes[rows] = self.taxonomy.leaf_index[k][j]
            conf[rows] = pc[rows, k] * pl[np.arange(rows.size), j]
        return classes, conf


# ------------------------------------------------------------------ inference


@dataclass(frozen=True)
class Prediction:
    name: str
    class_id: int
    language: str
    entity_type: str
    cluster_id: int
    confidence: float
    distribution: np.ndarray | None = field(default=None, compare=False, repr=False)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _failed(name: str, msg: str) -> Prediction:
    return Prediction(name, -1, "", "", -1, 0.0, None, msg)


def decide(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax with lowest-id tie-break, and the winning probability."""
    cls = np.argmax(probs, axis=1)  # numpy returns the first maximum
    return cls, probs[np.arange(len(cls)), cls]


def predict(
    model: OnomasCNN,
    names: Sequence[str],
    vocab: Vocab | None = None,
    with_distribution: bool = False,
    fast: bool = False,
    predict_fn=None,
) -> list[Prediction]:
    """Names in, labels out. Bad rows yield error results in place."""
    vocab = vocab or model.vocab
    if vocab is None:
        raise ValueError("a vocabulary is required")
    if len(vocab) > model.config.vocab_size:
        raise ConfigError("tokenizer and model disagree on vocabulary size")
    good, bad = [], {}
    for i, name in enumerate(names):
        try:
            tokenize(name, vocab, model.config.max_len)
            good.append(i)
        except NormalizationError as exc:
            bad[i] = str(exc)
    results: list[Prediction | None] = [None] * len(names)
    for i, msg in bad.items():
        results[i] = _failed(names[i], msg)
    if good:
        ids, lengths = encode_batch([names[i] for i in good], vocab, model.config.max_len)
        tax = model.taxonomy
        dist = None
        if fast:
            cls, conf = model.predict_fast(ids, lengths)
        else:
            probs = (predict_fn or model.predict_proba)(ids, lengths)
            cls, conf = decide(probs)
            dist = probs if with_distribution else None
        for j, i in enumerate(good):
            c = int(cls[j])
            lang, etype = tax.decode(c)
            results[i] = Prediction(
                names[i], c, lang, etype, int(tax.class_cluster[c]), float(conf[j]),
                None if dist is None else dist[j].copy(),
            )
    return results  # type: ignore[return-value]


# ----------------------------------------------------------------- accounting


def param_report(model: OnomasCNN, bytes_per_scalar: int | None = None) -> dict:
    """Parameter counts per layer, plus separable-vs-standard ratios per branch."""
    c = model.config
    layers = {n: int(p.size) for n, p in model.params.items()}
    groups: dict[str, int] = {}
    for n, size in layers.items():
        groups[param_group(n)] = groups.get(param_group(n), 0) + size
    branches = []
    for b, (k, f) in enumerate(zip(c.kernel_sizes, c.filter_counts)):
        sep = layers[f"branch{b}.depth.weight"] + layers[f"branch{b}.point.weight"]
        std = standard_param_count(k, c.embed_dim, f)
        branches.append(
            {
                "branch": b,
                "kernel": k,
                "filters": f,
                "depthwise": layers[f"branch{b}.depth.weight"],
                "pointwise": layers[f"branch{b}.point.weight"],
                "separable": sep,
                "standard": std,
                "reduction": std / sep if sep else float("nan"),
            }
        )
    total = sum(layers.values())
    sep_all = sum(b["separable"] for b in branches)
    std_all = sum(b["standard"] for b in branches)
    width = bytes_per_scalar or c.np_dtype.itemsize
    return {
        "layers": layers,
        "groups": groups,
        "branches": branches,
        "total": total,
        "separable_total": sep_all,
        "standard_total": std_all,
        "reduction": std_all / sep_all if sep_all else float("nan"),
        "bytes_per_scalar": width,
        "serialized_bytes_estimate": total * width,
    }
