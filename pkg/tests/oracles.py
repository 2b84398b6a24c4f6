"""Independent brute-force oracles: plain Python loops, no numpy/torch on the hot path."""

import math


def focal_loop(pred, true, alpha, gamma, clamp=1e-7):
    """pred/true: nested lists [pixel][class]. Sum over classes, mean over pixels."""
    total = 0.0
    for p_row, t_row in zip(pred, true):
        for c, (p, t) in enumerate(zip(p_row, t_row)):
            total += -alpha[c] * t * math.log(min(max(p, clamp), 1.0)) * (1.0 - p) ** gamma
    return total / len(pred)


def dice_loop(pred, true, eps):
    inter = union = 0.0
    for p_row, t_row in zip(pred, true):
        for p, t in zip(p_row, t_row):
            inter += p * t
            union += p + t
    return 1.0 - (2.0 * inter + eps) / (union + eps)


def total_loop(pred, true, alpha, gamma, eps, w):
    return w * dice_loop(pred, true, eps) + (1.0 - w) * focal_loop(pred, true, alpha, gamma)


def central_difference(f, pred, h=1e-4):
    """Gradient of f(pred) for pred a list of per-pixel class lists."""
    grad = []
    for i, row in enumerate(pred):
        g_row = []
        for c in range(len(row)):
            up = [list(r) for r in pred]
            dn = [list(r) for r in pred]
            up[i][c] += h
            dn[i][c] -= h
            g_row.append((f(up) - f(dn)) / (2 * h))
        grad.append(g_row)
    return grad


def iou_bruteforce(truth, pred, num_classes):
    """Per-class IoU by set intersection/union of pixel coordinates; None if both empty."""
    out = []
    for c in range(num_classes):
        t = {(i, j) for i, row in enumerate(truth) for j, v in enumerate(row) if v == c}
        p = {(i, j) for i, row in enumerate(pred) for j, v in enumerate(row) if v == c}
        union = t | p
        out.append(None if not union else len(t & p) / len(union))
    return out


def alpha_loop(counts, beta=None, floor=1e-6):
    inv = [1.0 / (c + floor) for c in counts]
    s = sum(inv)
    beta = beta or [0.0] * len(counts)
    return [v / s + b for v, b in zip(inv, beta)]
