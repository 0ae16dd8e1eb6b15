"""Brute-force quality-score reference in plain Python (lists and math only).

Kept deliberately naive and independent of ``treemoa.metricq``: explicit
loops for the Gram product, the correlation normalisation and the Frobenius
inner product, and the literal triangular double sums for W and P.
"""

import math


def gram(rows):
    h = len(rows[0])
    return [[sum(r[a] * r[b] for r in rows) for b in range(h)] for a in range(h)]


def correlation(g, eps=1e-12):
    h = len(g)
    out = [[0.0] * h for _ in range(h)]
    for a in range(h):
        for b in range(h):
            if g[a][a] > eps and g[b][b] > eps:
                out[a][b] = g[a][b] / math.sqrt(g[a][a] * g[b][b])
    for a in range(h):
        out[a][a] = 1.0 if g[a][a] > eps else 0.0
    return out


def frob_inner(x, y):
    # trace(X^T Y)
    h = len(x)
    return sum(sum(x[k][i] * y[k][i] for k in range(h)) for i in range(h))


def fcs(u, v):
    cu, cv = correlation(u), correlation(v)
    return frob_inner(cu, cv) / (math.sqrt(frob_inner(cu, cu)) * math.sqrt(frob_inner(cv, cv)))


def reference_quality(logprob_lists, sim, tau=0.7):
    """Returns dict with C list, Cbar, W, P, B, Q given a precomputed Sim matrix."""
    confs = [math.exp(sum(lp) / len(lp)) for lp in logprob_lists]
    n = len(confs)
    cbar = math.sqrt(sum(c * c for c in confs) / n)
    w = 0.0
    acc = 0.0
    for i in range(n):
        for j in range(i + 1):
            w += confs[i] * confs[j]
            acc += confs[i] * confs[j] * sim[i][j]
    p = acc / w
    b = 1 - abs(p - tau) / tau
    b = max(0.0, min(1.0, b))
    q = math.sqrt(cbar * b)
    return {"C": confs, "Cbar": cbar, "W": w, "P": p, "B": b, "Q": q}


def reference_from_embeddings(embeddings, logprob_lists, tau=0.7):
    n = len(embeddings)
    grams = [gram(t) for t in embeddings]
    sim = [[fcs(grams[i], grams[j]) for j in range(n)] for i in range(n)]
    out = reference_quality(logprob_lists, sim, tau)
    out["Sim"] = sim
    return out
