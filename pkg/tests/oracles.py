"""Slow, independent reference implementations used to check the fast paths."""
import math
from fractions import Fraction

import numpy as np


def naive_conv1d(x, w, b, groups):
    """Direct loop over (batch, out channel, position, in channel, tap) with same zero padding."""
    batch, length, cin = x.shape
    cout, cg, k = w.shape
    og = cout // groups
    left = (k - 1) // 2
    out = np.zeros((batch, length, cout))
    for n in range(batch):
        for o in range(cout):
            g = o // og
            for t in range(length):
                acc = 0.0 if b is None else b[o]
                for c in range(cg):
                    for j in range(k):
                        src = t + j - left
                        if 0 <= src < length:
                            acc += w[o, c, j] * x[n, src, g * cg + c]
                out[n, t, o] = acc
    return out


def brute_accuracy(preds, targets):
    return sum(1 for p, t in zip(preds, targets) if p == t) / len(preds)


def brute_macro_f1(preds, targets, n_classes):
    scores = []
    for c in range(n_classes):
        tp = sum(1 for p, t in zip(preds, targets) if p == c and t == c)
        fp = sum(1 for p, t in zip(preds, targets) if p == c and t != c)
        fn = sum(1 for p, t in zip(preds, targets) if p != c and t == c)
        if tp + fp + fn:
            scores.append(2 * tp / (2 * tp + fp + fn))
    return sum(scores) / len(scores)


def brute_mcc(preds, targets, n_classes):
    """Covariance form over one-hot indicator matrices, in exact rationals."""
    n = len(preds)
    X = [[1 if p == k else 0 for k in range(n_classes)] for p in preds]
    Y = [[1 if t == k else 0 for k in range(n_classes)] for t in targets]

    def cov(A, B):
        total = Fraction(0)
        for k in range(n_classes):
            ma = Fraction(sum(r[k] for r in A), n)
            mb = Fraction(sum(r[k] for r in B), n)
            total += sum((A[s][k] - ma) * (B[s][k] - mb) for s in range(n))
        return total

    den = cov(X, X) * cov(Y, Y)
    if den == 0:
        return 0.0
    return float(cov(X, Y)) / math.sqrt(den)


def brute_ece(probs, targets, n_bins):
    rows = []
    for row, t in zip(probs, targets):
        best = 0
        for k in range(len(row)):
            if row[k] > row[best]:
                best = k
        rows.append((float(row[best]), best == t))
    total = 0.0
    for b in range(n_bins):
        lo, hi = b / n_bins, (b + 1) / n_bins
        members = [(c, h) for c, h in rows if (lo < c <= hi) or (b == 0 and c == 0.0)]
        if members:
            conf = sum(c for c, _ in members) / len(members)
            acc = sum(1 for _, h in members if h) / len(members)
            total += len(members) / len(rows) * abs(acc - conf)
    return total


def brute_brier(probs, targets):
    total = 0.0
    for row, t in zip(probs, targets):
        total += sum((p - (1.0 if k == t else 0.0)) ** 2 for k, p in enumerate(row))
    return total / len(probs)


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g
