"""Brute-force reference implementations used as test oracles.

Everything here is written with plain loops and shares no code with the
package, so an agreement between the two is meaningful.
"""

from __future__ import annotations

import math

import numpy as np


def integral_loops(a: np.ndarray) -> np.ndarray:
    h, w = a.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            s = 0.0
            for yy in range(y + 1):
                for xx in range(x + 1):
                    s += a[yy, xx]
            out[y, x] = s
    return out


def box_sum_loops(a: np.ndarray, x0: int, y0: int, x1: int, y1: int) -> float:
    s = 0.0
    for y in range(y0, y1 + 1):
        for x in range(x0, x1 + 1):
            s += a[y, x]
    return s


def mean_filter_loops(a: np.ndarray, k: int) -> np.ndarray:
    h, w = a.shape
    r = k // 2
    out = np.zeros_like(a)
    for y in range(h):
        for x in range(w):
            s = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    s += a[yy, xx]
            out[y, x] = s / (k * k)
    return out


def hessian_loops(a: np.ndarray, x: int, y: int, L: int, w: float = 0.9):
    """Box-filter Dxx, Dyy, Dxy at (x, y) for filter side L, summed pixel by pixel."""
    lobe = L // 3
    half = (L - 1) // 2
    mid = lobe // 2  # half-width of the short side of the Dxx/Dyy lobes
    dxx = dyy = dxy = 0.0
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            v = a[y + dy, x + dx]
            # Dxx: band of height 2*lobe-1 rows, three lobes along x with weights +1, -2, +1
            if abs(dy) <= lobe - 1:
                if -half <= dx < -half + lobe or half - lobe < dx <= half:
                    dxx += v
                elif abs(dx) <= mid:
                    dxx -= 2 * v
            if abs(dx) <= lobe - 1:
                if -half <= dy < -half + lobe or half - lobe < dy <= half:
                    dyy += v
                elif abs(dy) <= mid:
                    dyy -= 2 * v
            # Dxy: four lobe x lobe squares separated by a one-pixel cross
            if 1 <= abs(dx) <= lobe and 1 <= abs(dy) <= lobe:
                dxy += v if dx * dy > 0 else -v
    n = 1.0 / (L * L)
    dxx, dyy, dxy = dxx * n, dyy * n, dxy * n
    return dxx * dyy - (w * dxy) ** 2, dxx, dyy, dxy


def metrics_loops(I: np.ndarray, G: np.ndarray, i_max: float = 1.0) -> dict[str, float]:
    h, w = I.shape
    sq = ab = sig = 0.0
    for y in range(h):
        for x in range(w):
            d = I[y, x] - G[y, x]
            sq += d * d
            ab += abs(d)
            sig += I[y, x] * I[y, x]
    n = h * w
    return {
        "mse": sq / n,
        "rmse": math.sqrt(sq / n),
        "mae": ab / n,
        "pfe": 100.0 * math.sqrt(sq) / math.sqrt(sig),
        "snr": 10.0 * math.log10(sig / sq) if sq else math.inf,
        "psnr": 10.0 * math.log10(i_max * i_max / sq) if sq else math.inf,
        "psnr_conv": 10.0 * math.log10(i_max * i_max / (sq / n)) if sq else math.inf,
    }


def _first_max(values, labels):
    """Index of the largest value; ties to the smallest label."""
    best = None
    for c in range(len(values)):
        if best is None or values[c] > values[best] or (values[c] == values[best] and labels[c] < labels[best]):
            best = c
    return best


def fuse_brute(S, rule: str, weights, labels):
    """Reference fusion straight from the rule text; returns the winning label."""
    M, C = len(S), len(S[0])
    if rule == "WSUM":
        fused = [sum(weights[i] * S[i][c] for i in range(M)) for c in range(C)]
        return labels[_first_max(fused, labels)]
    if rule == "PROD":
        fused = [sum(math.log(max(S[i][c], 1e-12)) for i in range(M)) for c in range(C)]
        return labels[_first_max(fused, labels)]
    if rule == "MV":
        votes = [0] * C
        for i in range(M):
            votes[_first_max(S[i], labels)] += 1
        top = max(votes)
        tied = [c for c in range(C) if votes[c] == top]
        sums = [sum(S[i][c] for i in range(M)) for c in range(C)]
        best = max(sums[c] for c in tied)
        tied = [c for c in tied if sums[c] == best]
        return min((labels[c] for c in tied))
    if rule == "BORDA":
        points = [0] * C
        for i in range(M):
            remaining = list(range(C))
            rank = 0
            while remaining:
                c = _first_max([S[i][r] for r in remaining], [labels[r] for r in remaining])
                points[remaining[c]] += C - 1 - rank
                remaining.pop(c)
                rank += 1
        top = max(points)
        tied = [c for c in range(C) if points[c] == top]
        ws = [sum(weights[i] * S[i][c] for i in range(M)) for c in range(C)]
        best = max(ws[c] for c in tied)
        tied = [c for c in tied if ws[c] == best]
        return min(labels[c] for c in tied)
    raise ValueError(rule)


def mlp_forward_loops(x, mean, std, w1, b1, w2, b2):
    d, h = w1.shape
    c = w2.shape[1]
    z = [(x[i] - mean[i]) / std[i] for i in range(d)]
    hidden = []
    for j in range(h):
        s = b1[j]
        for i in range(d):
            s += z[i] * w1[i, j]
        hidden.append(1.0 / (1.0 + math.exp(-s)))
    logits = []
    for k in range(c):
        s = b2[k]
        for j in range(h):
            s += hidden[j] * w2[j, k]
        logits.append(s)
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    t = sum(e)
    return [v / t for v in e]


def rbf_forward_loops(x, centers, widths, weights):
    k, d = centers.shape
    phi = []
    for j in range(k):
        s = 0.0
        for i in range(d):
            s += (x[i] - centers[j, i]) ** 2
        phi.append(math.exp(-s / (2.0 * widths[j] ** 2)))
    phi.append(1.0)
    out = []
    for c in range(weights.shape[1]):
        out.append(sum(phi[j] * weights[j, c] for j in range(k + 1)))
    m = max(out)
    e = [math.exp(v - m) for v in out]
    t = sum(e)
    return [v / t for v in e]


def match_brute(a, b, ratio):
    """(i, j) pairs passing the ratio test with Laplacian-sign gating."""
    pairs = []
    for i, (pa, da) in enumerate(a):
        dists = []
        for j, (pb, db) in enumerate(b):
            if pa.laplacian_sign != pb.laplacian_sign:
                continue
            dists.append((math.sqrt(sum((float(u) - float(v)) ** 2 for u, v in zip(da.values, db.values))), j))
        if not dists:
            continue
        dists.sort()
        second = dists[1][0] if len(dists) > 1 else math.inf
        if dists[0][0] <= ratio * second:
            pairs.append((i, dists[0][1]))
    return pairs
