"""Differentiable ops used by the classifier.

Sequence activations are channels-last, ``[batch, length, channels]``, so
every convolution reduces to one contiguous GEMM per group.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import rng
from .tensor import PaddingMask, Tensor, grad_enabled


class ConfigError(ValueError):
    """Incompatible shapes or hyperparameters."""


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _valid(mask: PaddingMask | None, batch: int, length: int) -> np.ndarray | None:
    if mask is None:
        return None
    if mask.max_len != length or mask.lengths.shape[0] != batch:
        raise ConfigError(
            f"mask covers [{mask.lengths.shape[0]}, {mask.max_len}], input is [{batch}, {length}]"
        )
    return mask.valid


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        a.accumulate(_unbroadcast(g * b.data, a.shape))
        b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: x.accumulate(g * c))


def tsum(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), (x,), lambda g: x.accumulate(np.broadcast_to(g, x.shape).copy()))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _result(np.where(on, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: x.accumulate(g * on))


def dropout(
    x: Tensor,
    p: float,
    training: bool,
    key: int = 0,
    row_keys: np.ndarray | None = None,
) -> Tensor:
    """Inverted dropout; mask bits come from ``(key, row key, element index)``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    batch = x.shape[0]
    if row_keys is None:
        row_keys = np.arange(batch, dtype=np.uint64)
    per_row = x.data[0].size
    u = rng.row_uniforms(np.uint64(key), row_keys, per_row).reshape(x.shape)
    keep = (u >= p).astype(x.dtype) * (1.0 / (1.0 - p))
    return _result(x.data * keep, (x,), lambda g: x.accumulate(g * keep))


def mask_positions(x: Tensor, mask: PaddingMask | None) -> Tensor:
    """Zero every padded position of a ``[B, L, C]`` tensor."""
    valid = _valid(mask, x.shape[0], x.shape[1])
    if valid is None:
        return x
    v = valid[:, :, None]
    return _result(np.where(v, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: x.accumulate(g * v))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate(g[tuple(idx)])

    return _result(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


# ------------------------------------------------------------------- lookups


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ConfigError("token ids must be a [batch, seq] matrix")
    vocab = table.shape[0]
    bad = (ids < 0) | (ids >= vocab)
    if bad.any():
        b, t = map(int, np.argwhere(bad)[0])
        raise IndexError(f"token id {int(ids[b, t])} at (batch={b}, pos={t}) outside [0, {vocab})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table.accumulate(gt)

    return _result(table.data[ids], (table,), backward)


# -------------------------------------------------------------- convolution


def same_padding(k: int) -> tuple[int, int]:
    """Left/right zero padding that keeps the length; extra pad goes right for even k."""
    left = (k - 1) // 2
    return left, k - 1 - left


def im2col(x: np.ndarray, k: int) -> np.ndarray:
    """``[B, L, C] -> [B, L, k, C]`` windows under same zero padding."""
    batch, length, ch = x.shape
    if k == 1:
        return x[:, :, None, :]
    left, _ = same_padding(k)
    cols = np.zeros((batch, length, k, ch), dtype=x.dtype)
    for j in range(k):
        s = j - left
        t0, t1 = max(0, -s), min(length, length - s)
        if t1 > t0:
            cols[:, t0:t1, j, :] = x[:, t0 + s : t1 + s, :]
    return cols


def col2im(gcols: np.ndarray, k: int) -> np.ndarray:
    """Adjoint of :func:`im2col`."""
    if k == 1:
        return gcols[:, :, 0, :].copy()
    batch, length, _, ch = gcols.shape
    left, _ = same_padding(k)
    gx = np.zeros((batch, length, ch), dtype=gcols.dtype)
    for j in range(k):
        s = j - left
        t0, t1 = max(0, -s), min(length, length - s)
        if t1 > t0:
            gx[:, t0 + s : t1 + s, :] += gcols[:, t0:t1, j, :]
    return gx


def check_conv_shapes(cin: int, w_shape: tuple[int, ...], groups: int) -> None:
    cout, cg, _ = w_shape
    if groups < 1 or cin % groups:
        raise ConfigError(f"input channels {cin} not divisible by groups {groups}")
    if cout % groups:
        raise ConfigError(f"output channels {cout} not divisible by groups {groups}")
    if cg != cin // groups:
        raise ConfigError(f"weight expects {cg} channels per group, input gives {cin // groups}")


def grouped_weight(w: np.ndarray, groups: int) -> np.ndarray:
    """``[Cout, Cin/g, k] -> [g, k*Cin/g, Cout/g]`` GEMM layout."""
    cout, cg, k = w.shape
    og = cout // groups
    return w.reshape(groups, og, cg, k).transpose(0, 3, 2, 1).reshape(groups, k * cg, og)


def group_cols(cols: np.ndarray, groups: int) -> np.ndarray:
    """``[B, L, k, C] -> [g, B*L, k*C/g]``."""
    batch, length, k, ch = cols.shape
    cg = ch // groups
    if groups == 1:
        return cols.reshape(1, batch * length, k * ch)
    return (
        cols.reshape(batch * length, k, groups, cg)
        .transpose(2, 0, 1, 3)
        .reshape(groups, batch * length, k * cg)
    )


def conv1d_grouped(
    x: Tensor,
    w: Tensor,
    b: Tensor | None,
    groups: int = 1,
    mask: PaddingMask | None = None,
) -> Tensor:
    """Grouped 1-D convolution with same padding over ``[B, L, Cin]``.

    ``w`` has shape ``[Cout, Cin/groups, k]``. Output channel ``c`` of group
    ``j`` only reads input channels of group ``j``. With a mask, padded
    output positions are zeroed.
    """
    batch, length, cin = x.shape
    check_conv_shapes(cin, w.shape, groups)
    cout, cg, k = w.shape
    og = cout // groups

    colsg = group_cols(im2col(x.data, k), groups)
    wg = grouped_weight(w.data, groups)
    out = np.matmul(colsg, wg)  # [g, B*L, og]
    out = out.transpose(1, 0, 2).reshape(batch, length, cout)
    if b is not None:
        out = out + b.data
    valid = _valid(mask, batch, length)
    if valid is not None:
        out = np.where(valid[:, :, None], out, 0.0).astype(x.dtype, copy=False)

    def backward(g):
        if valid is not None:
            g = g * valid[:, :, None]
        gg = g.reshape(batch * length, groups, og).transpose(1, 0, 2)
        if w.requires_grad:
            gw = np.matmul(colsg.transpose(0, 2, 1), gg)  # [g, k*cg, og]
            w.accumulate(gw.reshape(groups, k, cg, og).transpose(0, 3, 2, 1).reshape(cout, cg, k))
        if b is not None and b.requires_grad:
            b.accumulate(g.sum(axis=(0, 1)))
        if x.requires_grad:
            gcols = np.matmul(gg, wg.transpose(0, 2, 1))  # [g, B*L, k*cg]
            gcols = gcols.reshape(groups, batch, length, k, cg).transpose(1, 2, 3, 0, 4)
            x.accumulate(col2im(gcols.reshape(batch, length, k, cin), k))

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


def separable_block(
    x: Tensor,
    depth_w: Tensor,
    depth_b: Tensor | None,
    point_w: Tensor,
    point_b: Tensor | None,
    groups: int,
    mask: PaddingMask | None = None,
) -> Tensor:
    """Grouped spatial conv, then 1x1 pointwise conv, then ReLU."""
    if point_w.shape[2] != 1:
        raise ConfigError("pointwise stage must have kernel size 1")
    if point_w.shape[1] != depth_w.shape[0]:
        raise ConfigError(
            f"pointwise stage expects {point_w.shape[1]} channels, depth stage gives {depth_w.shape[0]}"
        )
    h = conv1d_grouped(x, depth_w, depth_b, groups)
    h = conv1d_grouped(h, point_w, point_b, 1, mask)
    return mask_positions(relu(h), mask)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped ``[out, in]``."""
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        if w.requires_grad:
            w.accumulate(g.T @ x.data)
        if b is not None and b.requires_grad:
            b.accumulate(g.sum(axis=0))
        if x.requires_grad:
            x.accumulate(g @ w.data)

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


# ------------------------------------------------------------------- pooling


def _pool_valid(x: Tensor, mask: PaddingMask | None) -> np.ndarray:
    batch, length, _ = x.shape
    valid = _valid(mask, batch, length)
    if valid is None:
        valid = np.ones((batch, length), dtype=bool)
    if not valid.any(axis=1).all():
        raise ValueError("every sequence needs at least one valid position")
    return valid


def pool_max(x: Tensor, mask: PaddingMask | None = None) -> Tensor:
    valid = _pool_valid(x, mask)
    xm = np.where(valid[:, :, None], x.data, -np.inf)
    idx = np.argmax(xm, axis=1)[:, None, :]  # first occurrence on ties
    out = np.take_along_axis(x.data, idx, axis=1)[:, 0, :]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g[:, None, :], axis=1)
        x.accumulate(gx)

    return _result(out, (x,), backward)


def pool_avg(x: Tensor, mask: PaddingMask | None = None) -> Tensor:
    valid = _pool_valid(x, mask)
    v = valid[:, :, None]
    n = valid.sum(axis=1).astype(x.dtype)[:, None]
    out = np.where(v, x.data, 0.0).sum(axis=1) / n

    def backward(g):
        x.accumulate(np.where(v, (g / n)[:, None, :], 0.0).astype(x.dtype, copy=False))

    return _result(out.astype(x.dtype, copy=False), (x,), backward)


def pool_attn(x: Tensor, query: Tensor, mask: PaddingMask | None = None) -> Tensor:
    """Masked softmax over ``x @ query`` scores, then the weighted sum of positions."""
    valid = _pool_valid(x, mask)
    xd = np.where(valid[:, :, None], x.data, 0.0).astype(x.dtype, copy=False)
    scores = np.where(valid, xd @ query.data, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    a = np.exp(scores)
    a /= a.sum(axis=1, keepdims=True)
    out = np.einsum("bl,blc->bc", a, xd)

    def backward(g):
        ga = np.einsum("blc,bc->bl", xd, g)
        gs = a * (ga - (a * ga).sum(axis=1, keepdims=True))
        if query.requires_grad:
            query.accumulate(np.einsum("bl,blc->c", gs, xd))
        if x.requires_grad:
            gx = a[:, :, None] * g[:, None, :] + gs[:, :, None] * query.data[None, None, :]
            x.accumulate(np.where(valid[:, :, None], gx, 0.0).astype(x.dtype, copy=False))

    return _result(out, (x, query), backward)


def fuse_pools(max_v: Tensor, avg_v: Tensor, attn_v: Tensor, weights: Tensor) -> Tensor:
    """``w[0]*max + w[1]*avg + w[2]*attn`` with one scalar triple."""
    if not (max_v.shape == avg_v.shape == attn_v.shape):
        raise ConfigError(f"pool shapes differ: {max_v.shape}, {avg_v.shape}, {attn_v.shape}")
    if weights.shape != (3,):
        raise ConfigError("fusion weights must be a length-3 vector")
    w = weights.data
    out = w[0] * max_v.data + w[1] * avg_v.data + w[2] * attn_v.data

    def backward(g):
        if weights.requires_grad:
            weights.accumulate(
                np.array([(g * max_v.data).sum(), (g * avg_v.data).sum(), (g * attn_v.data).sum()], dtype=w.dtype)
            )
        max_v.accumulate(g * w[0])
        avg_v.accumulate(g * w[1])
        attn_v.accumulate(g * w[2])

    return _result(out, (max_v, avg_v, attn_v, weights), backward)


# ------------------------------------------------------------ probabilities


def softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    p = softmax_np(x.data)

    def backward(g):
        x.accumulate(p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _result(p, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def backward(g):
        x.accumulate(g - np.exp(out) * g.sum(axis=-1, keepdims=True))

    return _result(out, (x,), backward)


def hierarchical_probs(
    cluster_logits: Tensor,
    leaf_logits: Sequence[Tensor],
    leaf_index: Sequence[np.ndarray],
    n_classes: int,
) -> Tensor:
    """Leaf distribution ``p(cluster) * p(leaf | cluster)``.

    ``leaf_index[k]`` lists the global class ids of cluster ``k`` in the
    column order of ``leaf_logits[k]``.
    """
    if len(leaf_logits) != cluster_logits.shape[1] or len(leaf_index) != len(leaf_logits):
        raise ConfigError("one leaf head per cluster is required")
    pc = softmax_np(cluster_logits.data)
    pls = [softmax_np(t.data) for t in leaf_logits]
    out = np.zeros((cluster_logits.shape[0], n_classes), dtype=cluster_logits.dtype)
    for k, (pl, idx) in enumerate(zip(pls, leaf_index)):
        out[:, idx] = pc[:, k : k + 1] * pl

    def backward(g):
        gpc = np.empty_like(pc)
        for k, (t, pl, idx) in enumerate(zip(leaf_logits, pls, leaf_index)):
            gk = g[:, idx]
            gpc[:, k] = (gk * pl).sum(axis=1)
            if t.requires_grad:
                gpl = gk * pc[:, k : k + 1]
                t.accumulate(pl * (gpl - (gpl * pl).sum(axis=1, keepdims=True)))
        cluster_logits.accumulate(pc * (gpc - (gpc * pc).sum(axis=1, keepdims=True)))

    return _result(out, (cluster_logits, *leaf_logits), backward)


def focal_loss(
    probs: Tensor,
    targets: np.ndarray,
    alpha: float = 0.25,
    gamma: float = 2.0,
    class_weights: np.ndarray | None = None,
    floor: float = 1e-12,
) -> Tensor:
    """Batch mean of ``-w_t * alpha * (1 - p_t)**gamma * log(p_t)``."""
    targets = np.asarray(targets, dtype=np.int64)
    batch, n = probs.shape
    if targets.shape != (batch,):
        raise ConfigError("targets must have one entry per row")
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        bad = targets[(targets < 0) | (targets >= n)][0]
        raise IndexError(f"target id {int(bad)} outside [0, {n})")
    rows = np.arange(batch)
    p = probs.data[rows, targets].astype(np.float64)
    w = alpha * (np.ones(batch) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[targets])
    pc = np.maximum(p, floor)
    log_p = np.log(pc)
    one_m = np.clip(1.0 - p, 0.0, None)
    mod = one_m**gamma
    loss = float(np.mean(-w * mod * log_p))

    def backward(g):
        # d/dp of -(1-p)^gamma * log(p); the log term is constant below the floor
        dlog = np.where(p > floor, 1.0 / pc, 0.0)
        if gamma == 0:
            dmod = np.zeros_like(p)
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                dmod = np.where(one_m > 0, -gamma * one_m ** (gamma - 1.0), 0.0)
        dp = -w * (dmod * log_p + mod * dlog) / batch
        gp = np.zeros_like(probs.data)
        gp[rows, targets] = float(g) * dp
        probs.accumulate(gp)

    return _result(np.asarray(loss, dtype=probs.dtype), (probs,), backward)
