"""Brute-force reference implementations, deliberately naive."""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def dense_gaussian(img: np.ndarray, sigma: float, radius: int) -> np.ndarray:
    """Direct 2-D convolution with a (2r+1)^2 Gaussian and edge-repeating borders."""
    h, w = img.shape
    taps = range(-radius, radius + 1)
    weights = {(dy, dx): math.exp(-(dy * dy + dx * dx) / (2 * sigma * sigma)) for dy in taps for dx in taps}
    total = sum(weights.values())

    def at(y, x):
        # half-sample symmetric reflection: ... b a | a b c ... c | c b ...
        while y < 0 or y >= h:
            y = -y - 1 if y < 0 else 2 * h - y - 1
        while x < 0 or x >= w:
            x = -x - 1 if x < 0 else 2 * w - x - 1
        return img[y, x]

    out = np.empty_like(img, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            out[y, x] = sum(wt * at(y + dy, x + dx) for (dy, dx), wt in weights.items()) / total
    return out


def counted_metrics(preds, truths, positive):
    """Exact metrics by counting, as Fractions (None when undefined)."""
    tp = sum(1 for p, t in zip(preds, truths) if p == positive and t == positive)
    tn = sum(1 for p, t in zip(preds, truths) if p != positive and t != positive)
    fp = sum(1 for p, t in zip(preds, truths) if p == positive and t != positive)
    fn = sum(1 for p, t in zip(preds, truths) if p != positive and t == positive)
    acc = Fraction(tp + tn, len(preds))
    prec = Fraction(tp, tp + fp) if tp + fp else None
    rec = Fraction(tp, tp + fn) if tp + fn else None
    f1 = 2 * prec * rec / (prec + rec) if prec is not None and rec is not None and prec + rec else None
    return (tp, tn, fp, fn), acc, prec, rec, f1


def pairwise_auc(pos_scores, neg_scores) -> float:
    """P(pos > neg) + 0.5 P(pos == neg) over all pairs."""
    wins = ties = 0
    for p in pos_scores:
        for n in neg_scores:
            if p > n:
                wins += 1
            elif p == n:
                ties += 1
    return (wins + 0.5 * ties) / (len(pos_scores) * len(neg_scores))


def threshold_sweep(scores, is_pos):
    """(fpr, tpr) for the +inf sentinel and every distinct score, high to low."""
    n_pos = sum(is_pos)
    n_neg = len(is_pos) - n_pos
    pts = [(0.0, 0.0)]
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, is_pos) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, is_pos) if s >= t and not y)
        pts.append((fp / n_neg, tp / n_pos))
    return pts
