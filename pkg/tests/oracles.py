"""Brute-force reference implementations, written with plain loops.

They deliberately share no code with the package so that agreement is
evidence of correctness.
"""

import math


def conv1d_loops(x, w, b, left):
    """x[c][i], w[j][c][d], b[j]; zero outside [0, L)."""
    c_in, length = len(x), len(x[0])
    c_out, k = len(w), len(w[0][0])
    out = [[0.0] * length for _ in range(c_out)]
    for j in range(c_out):
        for i in range(length):
            acc = b[j]
            for c in range(c_in):
                for d in range(k):
                    pos = i + d - left
                    if 0 <= pos < length:
                        acc += x[c][pos] * w[j][c][d]
            out[j][i] = acc
    return out


def conv2d_loops(x, w, b):
    """x[c][r][s], w[j][c][dy][dx] with odd kernels, same zero padding."""
    c_in, h, wd = len(x), len(x[0]), len(x[0][0])
    c_out, kh, kw = len(w), len(w[0][0]), len(w[0][0][0])
    out = [[[0.0] * wd for _ in range(h)] for _ in range(c_out)]
    for j in range(c_out):
        for r in range(h):
            for s in range(wd):
                acc = b[j]
                for c in range(c_in):
                    for dy in range(kh):
                        for dx in range(kw):
                            rr, ss = r + dy - kh // 2, s + dx - kw // 2
                            if 0 <= rr < h and 0 <= ss < wd:
                                acc += x[c][rr][ss] * w[j][c][dy][dx]
                out[j][r][s] = acc
    return out


def maxpool_loops(row, window, stride):
    out, start = [], 0
    while start + window <= len(row):
        out.append(max(row[start:start + window]))
        start += stride
    return out


def attention_loops(q, k, v):
    """Single-head attention; returns (output rows, weight rows)."""
    d = len(k[0])
    outs, weights = [], []
    for qi in q:
        scores = [sum(a * b for a, b in zip(qi, kj)) / math.sqrt(d) for kj in k]
        top = max(scores)
        e = [math.exp(s - top) for s in scores]
        z = sum(e)
        wts = [x / z for x in e]
        weights.append(wts)
        outs.append([sum(wts[j] * v[j][c] for j in range(len(v))) for c in range(len(v[0]))])
    return outs, weights


def matmul_loops(a, b):
    return [[sum(a[i][t] * b[t][j] for t in range(len(b))) for j in range(len(b[0]))]
            for i in range(len(a))]


def cosine_law_km(lat1, lon1, lat2, lon2, radius=6371.0088):
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dl = math.radians(lon2 - lon1)
    c = math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(dl)
    return radius * math.acos(max(-1.0, min(1.0, c)))


def vincenty_sphere_km(lat1, lon1, lat2, lon2, radius=6371.0088):
    """atan2 form of the great-circle angle; stable for all separations."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dl = math.radians(lon2 - lon1)
    num = math.hypot(math.cos(p2) * math.sin(dl),
                     math.cos(p1) * math.sin(p2) - math.sin(p1) * math.cos(p2) * math.cos(dl))
    den = math.sin(p1) * math.sin(p2) + math.cos(p1) * math.cos(p2) * math.cos(dl)
    return radius * math.atan2(num, den)
