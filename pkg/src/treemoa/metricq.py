"""Confidence- and agreement-based early-exit scoring for an agent cluster.

Given the outputs that have finished so far, the score combines

* per-output confidence: geometric mean of token probabilities,
* an RMS aggregate of those confidences,
* pairwise similarity: cosine similarity under the Frobenius inner product
  between the correlation-normalised feature Gram matrices of the outputs'
  token embeddings (length-agnostic, scale-free),
* a confidence-weighted similarity ``P`` calibrated against a preferred
  agreement level ``tau`` (agreement that is too high is penalised as much as
  agreement that is too low),

into ``Q = sqrt(Cbar * B)``, which is then used as an exit probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

DEFAULT_TAU = 0.7
DEGENERATE_EPS = 1e-12


class MetricQError(ValueError):
    pass


class DegenerateMatrixError(MetricQError):
    """Every feature column of a Gram matrix has (near) zero energy."""


def geometric_mean_confidence(logprobs: Sequence[float]) -> float:
    values = np.asarray(logprobs, dtype=float)
    if values.size == 0:
        raise MetricQError("confidence needs at least one token log-probability")
    if not np.all(np.isfinite(values)) or np.any(values > 0):
        raise MetricQError("token log-probabilities must be finite and <= 0")
    return float(math.exp(values.mean()))


def rms_aggregate(confidences: Sequence[float]) -> float:
    c = np.asarray(confidences, dtype=float)
    if c.size == 0:
        raise MetricQError("rms_aggregate needs at least one confidence")
    return float(math.sqrt(np.mean(c * c)))


def gram(embedding: np.ndarray) -> np.ndarray:
    t = np.asarray(embedding, dtype=float)
    if t.ndim != 2:
        raise MetricQError(f"embedding must be 2-D (tokens x hidden), got shape {t.shape}")
    return t.T @ t


def corr(g: np.ndarray, eps: float = DEGENERATE_EPS) -> np.ndarray:
    """Normalise a Gram matrix to correlation form.

    Columns whose diagonal energy is at most ``eps`` are degenerate: their
    row/column is zeroed, diagonal included.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise MetricQError(f"corr needs a square matrix, got shape {g.shape}")
    d = np.diag(g).copy()
    live = d > eps
    scale = np.zeros_like(d)
    scale[live] = 1.0 / np.sqrt(d[live])
    out = g * scale[:, None] * scale[None, :]
    np.fill_diagonal(out, live.astype(float))
    return np.clip(out, -1.0, 1.0)


def frobenius_inner(a: np.ndarray, b: np.ndarray) -> float:
    # trace(A^T B) without forming the product
    return float(np.sum(a * b))


def frob_cos_sim(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise MetricQError(f"shape mismatch {u.shape} vs {v.shape}")
    cu, cv = corr(u), corr(v)
    nu, nv = math.sqrt(frobenius_inner(cu, cu)), math.sqrt(frobenius_inner(cv, cv))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateMatrixError("all feature columns are degenerate")
    s = frobenius_inner(cu, cv) / (nu * nv)
    return min(1.0, max(-1.0, s))


def _pair_sim(gi: np.ndarray, gj: np.ndarray) -> float:
    try:
        return frob_cos_sim(gi, gj)
    except DegenerateMatrixError:
        return 0.0


def sim_matrix(embeddings: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise similarity of token-embedding matrices (rows may differ, hidden size may not)."""
    if not embeddings:
        raise MetricQError("sim_matrix needs at least one embedding")
    widths = {np.shape(t)[1] for t in embeddings}
    if len(widths) != 1:
        raise MetricQError(f"embeddings disagree on hidden size: {sorted(widths)}")
    grams = [gram(t) for t in embeddings]
    n = len(grams)
    sim = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            sim[i, j] = sim[j, i] = _pair_sim(grams[i], grams[j])
    return sim


def weighted_similarity(
    confidences: Sequence[float], sim: np.ndarray, include_diagonal: bool = True
) -> tuple[float, float]:
    """Confidence-weighted mean of the lower triangle of ``sim``.

    The triangle includes the diagonal by default. With ``include_diagonal``
    off and a single output there are no pairs; the diagonal is used then.
    """
    c = np.asarray(confidences, dtype=float)
    sim = np.asarray(sim, dtype=float)
    if sim.shape != (c.size, c.size):
        raise MetricQError(f"sim is {sim.shape} but there are {c.size} confidences")
    weights = np.tril(np.outer(c, c), k=0 if include_diagonal or c.size == 1 else -1)
    w = float(weights.sum())
    if w <= 0:
        raise MetricQError("weights sum to zero")
    return w, float((weights * sim).sum() / w)


def calibrate(p: float, tau: float = DEFAULT_TAU) -> float:
    if not 0 < tau <= 1:
        raise MetricQError(f"tau must lie in (0, 1], got {tau}")
    return max(0.0, min(1.0, 1.0 - abs(p - tau) / tau))


def quality(cbar: float, b: float) -> float:
    return math.sqrt(max(0.0, cbar * b))


@dataclass(frozen=True)
class ExitDecision:
    q: float
    exited: bool
    draw: float
    stream: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {"q": self.q, "exited": self.exited, "draw": self.draw, "stream": self.stream}


def decide_exit(q: float, rng: np.random.Generator, stream: str = "") -> ExitDecision:
    """One Bernoulli(q) draw. q = 0 never exits and q = 1 always does."""
    draw = float(rng.random())
    return ExitDecision(q=q, exited=draw < q, draw=draw, stream=stream)


@dataclass
class QualityScore:
    confidences: list[float]
    cbar: float
    sim: list[list[float]]
    w: float
    p: float
    b: float
    q: float
    tau: float = DEFAULT_TAU
    members: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "C": list(self.confidences),
            "Cbar": self.cbar,
            "Sim": [list(r) for r in self.sim],
            "W": self.w,
            "P": self.p,
            "B": self.b,
            "Q": self.q,
            "tau": self.tau,
            "members": list(self.members),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "QualityScore":
        return cls(d["C"], d["Cbar"], d["Sim"], d["W"], d["P"], d["B"], d["Q"], d.get("tau", DEFAULT_TAU),
                   d.get("members", []))


def score_from_parts(
    confidences: Sequence[float],
    sim: np.ndarray,
    tau: float = DEFAULT_TAU,
    include_diagonal: bool = True,
    members: Sequence[str] = (),
) -> QualityScore:
    cbar = rms_aggregate(confidences)
    w, p = weighted_similarity(confidences, sim, include_diagonal)
    b = calibrate(p, tau)
    return QualityScore(
        confidences=[float(c) for c in confidences],
        cbar=cbar,
        sim=np.asarray(sim, dtype=float).tolist(),
        w=w,
        p=p,
        b=b,
        q=quality(cbar, b),
        tau=tau,
        members=list(members),
    )


def metric_q(
    outputs: Sequence[Any],
    logprobs: Sequence[Sequence[float]],
    tau: float = DEFAULT_TAU,
    provider: Any = None,
    rng: np.random.Generator | None = None,
    include_diagonal: bool = True,
) -> tuple[QualityScore, ExitDecision | None]:
    """Score the completed outputs ``O_1..O_l`` and draw the exit decision.

    ``provider`` maps an output to its token-embedding matrix. When ``rng``
    is None no draw is made and the decision is None.
    """
    if not outputs:
        raise MetricQError("metric_q needs at least one completed output")
    if len(outputs) != len(logprobs):
        raise MetricQError(f"{len(outputs)} outputs but {len(logprobs)} log-probability lists")
    if provider is None:
        raise MetricQError("metric_q needs an embedding provider")
    confidences = [geometric_mean_confidence(lp) for lp in logprobs]
    sim = sim_matrix([provider.embed(o) for o in outputs])
    score = score_from_parts(confidences, sim, tau, include_diagonal)
    decision = decide_exit(score.q, rng) if rng is not None else None
    return score, decision


class MetricQState:
    """Incremental scorer for one exit scope.

    Each completed output is embedded and its confidence computed once, when it
    arrives; earlier confidences and Gram matrices are retained.
    """

    def __init__(self, provider: Any, tau: float = DEFAULT_TAU, include_diagonal: bool = True) -> None:
        self.provider = provider
        self.tau = tau
        self.include_diagonal = include_diagonal
        self.members: list[str] = []
        self.confidences: list[float] = []
        self._grams: list[np.ndarray] = []
        self._sim = np.zeros((0, 0))

    def add(self, key: str, output: Any, logprobs: Sequence[float]) -> QualityScore:
        g = gram(self.provider.embed(output))
        if self._grams and g.shape != self._grams[0].shape:
            raise MetricQError("embedding hidden size changed between outputs")
        n = len(self._grams)
        sim = np.zeros((n + 1, n + 1))
        sim[:n, :n] = self._sim
        for i, gi in enumerate(self._grams):
            sim[i, n] = sim[n, i] = _pair_sim(gi, g)
        sim[n, n] = _pair_sim(g, g)
        self._sim = sim
        self._grams.append(g)
        self.members.append(key)
        self.confidences.append(geometric_mean_confidence(logprobs))
        return score_from_parts(self.confidences, self._sim, self.tau, self.include_diagonal, self.members)
