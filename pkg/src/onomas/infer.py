"""Inference-only forward pass shared by the float and quantized models.

Same math as the differentiable path, minus the tape. Only valid (unpadded)
positions are pushed through the convolutions, grouped windows are gathered
in one copy straight into GEMM layout, and the GEMMs themselves are
pluggable so the float and int8 models differ only there.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .model import ModelConfig, sinusoidal_positions
from .nn import functional as F
from .nn.tensor import PaddingMask
from .taxonomy import Taxonomy

def float_linear(w2d: np.ndarray, bias: np.ndarray | None):
    w_t = w2d.T  # BLAS takes the transposed view directly

    def run(x, out=None):
        if out is None:
            res = x @ w_t
            if bias is not None:
                res += bias
            return res
        np.matmul(x, w_t, out=out)
        if bias is not None:
            out += bias
        return out

    return run


def depth_group_rows(w: np.ndarray, groups: int, j: int) -> np.ndarray:
    """Group ``j`` of a ``[D, cg, k]`` depth weight as ``[og, k*cg]`` GEMM rows (tap-major)."""
    og = w.shape[0] // groups
    return np.ascontiguousarray(w[j * og : (j + 1) * og].transpose(0, 2, 1)).reshape(og, -1)


def activation_bound(table: np.ndarray, pe: np.ndarray, groups: int) -> np.ndarray:
    """Per-group bound on |embedding + position| over every token and position.

    Depth-stage inputs are exactly such sums (or padding zeros), so a static
    int8 scale of ``bound / 127`` never clips and needs no calibration data.
    """
    per_channel = np.abs(table).max(axis=0).astype(np.float64) + np.abs(pe).max(axis=0)
    return per_channel.reshape(groups, -1).max(axis=1)


class Engine:
    def __init__(
        self,
        config: ModelConfig,
        taxonomy: Taxonomy,
        floats: Mapping[str, np.ndarray],
        weights: Mapping[str, object],
        make_linear: Callable[[str, object, "np.ndarray | None"], Callable[[np.ndarray], np.ndarray]],
    ):
        """``weights`` maps every conv/linear layer name to whatever ``make_linear`` consumes.

        ``make_linear(name, w, bias)`` is called once per GEMM: per group for
        the depth stage (``w`` is then a ``(group, rows)`` pair) and once per
        pointwise or head layer. Depth ops are called as ``op(x, out)`` and
        write into ``out``; ops flagged ``int8_input`` receive int8 windows
        quantized with the static scale handed to ``bind_activation_scale``.
        """
        c = config
        self.config = config
        self.taxonomy = taxonomy
        self.table = floats["embedding.table"]
        self.pe = sinusoidal_positions(c.max_len, c.embed_dim, c.np_dtype)
        self.kmax = max(c.kernel_sizes, default=1)
        self.branches = []
        for b, k in enumerate(c.kernel_sizes):
            depth_b = floats[f"branch{b}.depth.bias"]
            og = c.embed_dim // c.groups
            depth = [
                make_linear(f"branch{b}.depth.weight", (j, weights[f"branch{b}.depth.weight"]), depth_b[j * og : (j + 1) * og])
                for j in range(c.groups)
            ]
            point = make_linear(f"branch{b}.point.weight", weights[f"branch{b}.point.weight"], floats[f"branch{b}.point.bias"])
            self.branches.append(
                (k, depth, point, floats[f"branch{b}.attn.query"], floats[f"branch{b}.fusion"])
            )
        self.int8_depth = bool(self.branches) and all(
            getattr(op, "int8_input", False) for br in self.branches for op in br[1]
        )
        if self.int8_depth:
            act = activation_bound(self.table, self.pe, c.groups)
            act_scale = np.where(act > 0, act / 127.0, 1.0)
            self.act_inv_scale = np.repeat(1.0 / act_scale, c.embed_dim // c.groups).astype(c.np_dtype)
            for br in self.branches:
                for j, op in enumerate(br[1]):
                    op.bind_activation_scale(act_scale[j])
        self.cluster = make_linear("cluster_head.weight", weights["cluster_head.weight"], floats["cluster_head.bias"])
        self.leaves = [
            make_linear(f"leaf_head{k}.weight", weights[f"leaf_head{k}.weight"], floats[f"leaf_head{k}.bias"])
            for k in range(taxonomy.n_clusters)
        ]

    def features(self, ids: np.ndarray, lengths: np.ndarray | None = None) -> np.ndarray:
        c = self.config
        ids = np.asarray(ids)
        batch, length = ids.shape
        if length > c.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {c.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.shape[0]):
            raise IndexError("token id outside the embedding table")
        mask = PaddingMask(np.full(batch, length) if lengths is None else np.asarray(lengths), length)
        lens = mask.lengths.astype(np.int64)
        d, g = c.embed_dim, c.groups
        cg = d // g
        lmax = (self.kmax - 1) // 2
        lp = length + self.kmax - 1
        # only valid positions go through the convolutions; rows ordered by (sequence, position)
        seq = np.repeat(np.arange(batch), lens)
        pos = np.arange(seq.size) - np.repeat(np.cumsum(lens) - lens, lens)
        emb = self.table[ids[seq, pos]] + self.pe[pos]
        if self.int8_depth:
            emb = np.rint(emb * self.act_inv_scale).astype(np.int8)
        # group-major padded layout: a conv window of one group is one contiguous run
        xg = np.zeros((g, batch, lp, cg), dtype=emb.dtype)
        xg[:, seq, lmax + pos] = emb.reshape(-1, g, cg).transpose(1, 0, 2)
        kw = self.kmax * cg
        og = d // g
        rows = seq.size
        depth_out = [np.empty((rows, d), dtype=c.np_dtype) for _ in self.branches]
        # group-major: one kmax-wide window gather per group feeds every branch while it is cache-hot
        for j in range(g):
            step = xg.itemsize
            cols = np.lib.stride_tricks.as_strided(
                xg[j], shape=(batch, length, kw), strides=(lp * cg * step, cg * step, step), writeable=False
            )[seq, pos]
            for out, (k, depth, *_rest) in zip(depth_out, self.branches):
                lo = (lmax - (k - 1) // 2) * cg
                x = cols[:, lo : lo + k * cg]
                depth[j](x, out[:, j * og : (j + 1) * og])
        valid = mask.valid
        n_valid = lens[:, None].astype(c.np_dtype)
        hp = None
        fused = []
        for h_depth, (k, depth, point, query, fusion) in zip(depth_out, self.branches):
            h = point(h_depth)
            np.maximum(h, 0.0, out=h)
            if hp is None or hp.shape[2] != h.shape[1]:
                hp = np.zeros((batch, length, h.shape[1]), dtype=h.dtype)
            hp[seq, pos] = h
            # post-ReLU values are >= 0 and padding is 0, so the plain max is the masked max
            mx = hp.max(axis=1)
            avg = hp.sum(axis=1) / n_valid
            scores = np.where(valid, hp @ query, -np.inf)
            scores -= scores.max(axis=1, keepdims=True)
            a = np.exp(scores)
            a /= a.sum(axis=1, keepdims=True)
            attn = np.matmul(a[:, None, :], hp)[:, 0, :]
            fused.append(fusion[0] * mx + fusion[1] * avg + fusion[2] * attn)
        return np.concatenate(fused, axis=1)

    def logits(self, ids, lengths=None) -> tuple[np.ndarray, list[np.ndarray]]:
        feat = self.features(ids, lengths)
        return self.cluster(feat), [op(feat) for op in self.leaves]

    def predict_proba(self, ids, lengths=None) -> np.ndarray:
        cl, leaf = self.logits(ids, lengths)
        pc = F.softmax_np(cl)
        out = np.zeros((cl.shape[0], self.taxonomy.n_classes), dtype=cl.dtype)
        for k, (lg, idx) in enumerate(zip(leaf, self.taxonomy.leaf_index)):
            out[:, idx] = pc[:, k : k + 1] * F.softmax_np(lg)
        return out


def float_engine(config: ModelConfig, taxonomy: Taxonomy, params: Mapping[str, np.ndarray]) -> Engine:
    def make(name, w, bias):
        if name.endswith("depth.weight"):
            j, full = w
            return float_linear(depth_group_rows(full, config.groups, j), bias)
        return float_linear(w.reshape(w.shape[0], -1), bias)

    return Engine(config, taxonomy, params, params, make)
