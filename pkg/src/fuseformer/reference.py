"""Naive loop implementations used as independent oracles.

Everything here is plain Python loops over scalars and shares no code with
the vectorised implementations it is compared against. Used by the test
suite and by ``fuseformer selftest``.
"""

import math

import numpy as np


def conv2d_loops(x, w, stride=1, padding=0):
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((cin, h + 2 * padding, wd + 2 * padding))
    xp[:, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            acc += xp[c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                out[o, i, j] = acc
    return out


def matmul_loops(a, b):
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def gaussian_loops(size, sigma):
    c = (size - 1) / 2.0
    g = [[math.exp(-((i - c) ** 2 + (j - c) ** 2) / (2 * sigma * sigma)) for j in range(size)]
         for i in range(size)]
    total = sum(sum(r) for r in g)
    return [[v / total for v in r] for r in g]


def ssim_loops(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """Per-window SSIM, averaged; weighted moments computed directly per window."""
    g = gaussian_loops(window, sigma)
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    h, w = a.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            ma = mb = 0.0
            for u in range(window):
                for v in range(window):
                    ma += g[u][v] * a[i + u, j + v]
                    mb += g[u][v] * b[i + u, j + v]
            va = vb = cov = 0.0
            for u in range(window):
                for v in range(window):
                    da = a[i + u, j + v] - ma
                    db = b[i + u, j + v] - mb
                    va += g[u][v] * da * da
                    vb += g[u][v] * db * db
                    cov += g[u][v] * da * db
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def _bin(p, bins):
    return min(int(math.floor(p * bins)), bins - 1)


def entropy_loops(img, bins=256):
    counts = {}
    n = 0
    for p in np.asarray(img).ravel():
        b = _bin(p, bins)
        counts[b] = counts.get(b, 0) + 1
        n += 1
    return -sum((c / n) * math.log2(c / n) for c in counts.values())


def mi_loops(a, b, bins=256):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    n = len(a)
    joint, pa, pb = {}, {}, {}
    for x, y in zip(a, b):
        i, j = _bin(x, bins), _bin(y, bins)
        joint[(i, j)] = joint.get((i, j), 0) + 1
        pa[i] = pa.get(i, 0) + 1
        pb[j] = pb.get(j, 0) + 1
    total = 0.0
    for (i, j), c in joint.items():
        pxy = c / n
        total += pxy * math.log2(pxy / ((pa[i] / n) * (pb[j] / n)))
    return total


def pearson_loops(a, b):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    sab = saa = sbb = 0.0
    for x, y in zip(a, b):
        sab += (x - ma) * (y - mb)
        saa += (x - ma) ** 2
        sbb += (y - mb) ** 2
    if saa / n < 1e-15 or sbb / n < 1e-15:
        return 0.0
    return sab / math.sqrt(saa * sbb)


def scd_loops(f, v, i):
    f, v, i = (np.asarray(t, dtype=float) for t in (f, v, i))
    return pearson_loops(f - v, i) + pearson_loops(f - i, v)


def full_attention_loops(tokens, wq, wk, wv, wo, heads):
    """Plain multi-head self-attention over a [L, C] token list, plus residual."""
    L, c = tokens.shape
    inner = wq.shape[1]
    d = inner // heads
    q, k, v = tokens @ wq, tokens @ wk, tokens @ wv
    mixed = np.zeros((L, inner))
    weights = np.zeros((heads, L, L))
    for h in range(heads):
        sl = slice(h * d, (h + 1) * d)
        for i in range(L):
            logits = [sum(q[i, sl] * k[j, sl]) / math.sqrt(d) for j in range(L)]
            top = max(logits)
            ex = [math.exp(z - top) for z in logits]
            s = sum(ex)
            for j in range(L):
                weights[h, i, j] = ex[j] / s
                mixed[i, sl] += weights[h, i, j] * v[j, sl]
    return tokens + mixed @ wo, weights
