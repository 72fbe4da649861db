"""Slow, obviously-correct reference implementations used as test oracles."""

import numpy as np


def matmul_loops(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def conv2d_loops(x, w, bias, stride=1, pad=0):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for s in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = bias[o]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[s, ch, i * stride + u, j * stride + v] * w[o, ch, u, v]
                    out[s, o, i, j] = acc
    return out


def maxpool_loops(x, k, stride):
    n, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for s in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = -np.inf
                    for u in range(k):
                        for v in range(k):
                            best = max(best, x[s, ch, i * stride + u, j * stride + v])
                    out[s, ch, i, j] = best
    return out


def ssim_loops(a, b, window, L=1.0):
    """Per-window SSIM with population statistics, averaged over valid windows."""
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    h, w = a.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            pa = a[i:i + window, j:j + window].ravel()
            pb = b[i:i + window, j:j + window].ravel()
            ma, mb = sum(pa) / pa.size, sum(pb) / pb.size
            va = sum((p - ma) ** 2 for p in pa) / pa.size
            vb = sum((p - mb) ** 2 for p in pb) / pb.size
            cov = sum((p - ma) * (q - mb) for p, q in zip(pa, pb)) / pa.size
            vals.append((2 * ma * mb + c1) * (2 * cov + c2)
                        / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def log_softmax_rows(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    for r, row in enumerate(z):
        m = max(row)
        s = sum(np.exp(v - m) for v in row)
        out[r] = [v - m - np.log(s) for v in row]
    return out


def topk_brute(perturbed, k):
    """Share of the k most frequent classes, by explicit counting."""
    counts = {}
    for p in perturbed:
        counts[p] = counts.get(p, 0) + 1
    top = sorted(counts.values(), reverse=True)[:k]
    return sum(top) / len(perturbed)


def adam_reference(grads, lr=0.01, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written out step by step, one value per step."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        out.append(-lr * mh / (np.sqrt(vh) + eps))
    return out
