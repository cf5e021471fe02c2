"""Lattice-free sequence-discriminative criteria for multi-output models.

All four criteria share one evaluation path, parameterized by the
de-correlation weight and the two boosting factors, so that setting those
to zero reproduces plain LF-MMI bit for bit.  Values are log-posterior
style objectives (to be maximized); :func:`seq_pit` turns them into a
permutation invariant loss.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .graphlm import SenoneGraph, forward_backward, numerator_fb
from .pitloss import LossResult, permutations


@dataclass(frozen=True)
class SeqLossConfig:
    kappa: float = 0.1
    lambda_dc: float = 0.1
    boost_b: float = 0.1
    boost_b_hat: float = 0.2

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not 0.0 <= self.lambda_dc < 1.0:
            raise ValueError("lambda_dc must lie in [0, 1)")
        if self.boost_b < 0 or self.boost_b_hat < 0:
            raise ValueError("boosting factors must be non-negative")


@dataclass
class StreamBundle:
    """Per-stream acoustic log-likelihoods, references and the shared graph."""

    loglik: np.ndarray      # N x T x S
    references: np.ndarray  # N x T
    graph: SenoneGraph

    def __post_init__(self):
        self.loglik = np.asarray(self.loglik, dtype=np.float64)
        self.references = np.asarray(self.references, dtype=np.int64)
        if self.loglik.ndim == 2:
            self.loglik = self.loglik[None]
        if self.references.ndim == 1:
            self.references = self.references[None]
        if self.loglik.shape[:2] != self.references.shape:
            raise ValueError(f"streams must share T: loglik {self.loglik.shape} vs references {self.references.shape}")

    @property
    def arity(self) -> int:
        return self.loglik.shape[0]


def loglik_from_posteriors(log_post: np.ndarray, log_prior: np.ndarray) -> np.ndarray:
    """Hybrid conversion: scaled likelihood = log-posterior minus log-prior."""
    return np.asarray(log_post) - np.asarray(log_prior)


def senone_log_priors(alignments: Sequence[Sequence[int]], num_senones: int, floor: float = 1.0) -> np.ndarray:
    """Log relative frequencies of senones in training alignments (add-``floor``)."""
    counts = np.full(num_senones, float(floor))
    for a in alignments:
        counts += np.bincount(np.asarray(a, dtype=np.int64), minlength=num_senones)[:num_senones]
    return np.log(counts / counts.sum())


def _criterion(bundle: StreamBundle, n: int, pairing, config: SeqLossConfig, lam: float, b: float, b_hat: float):
    N = bundle.arity
    if pairing is None:
        pairing = tuple(range(N))
    graph = bundle.graph
    ll = bundle.loglik[n]
    T, S = ll.shape
    ref = bundle.references[pairing[n]]
    others = [bundle.references[pairing[m]] for m in range(N) if m != n]
    kappa = config.kappa

    log_num, num_occ = numerator_fb(graph, ref, ll, kappa)

    adjust = None
    frames = np.arange(T)
    if b:
        adjust = np.zeros((T, S))
        adjust[frames, ref] -= b
    if b_hat and others:
        if adjust is None:
            adjust = np.zeros((T, S))
        mismatch = np.zeros((T, S))
        for o in others:
            hit = np.zeros((T, S))
            hit[frames, o] = 1.0
            mismatch += 1.0 - hit
        adjust -= b_hat * mismatch / len(others)
    log_den, den_occ = forward_backward(graph, ll, kappa, adjust=adjust)

    if lam and others:
        scores = [numerator_fb(graph, o, ll, kappa) for o in others]
        vals = np.array([s[0] for s in scores])
        shift = vals.max()
        w = np.exp(vals - shift)
        log_other = float(np.log(w.sum() / len(others)) + shift)
        other_occ = sum(wi * s[1].senones for wi, s in zip(w / w.sum(), scores))
    else:
        log_other = 0.0
        other_occ = 0.0
    lam_eff = lam if others else 0.0

    value = log_num - ((1.0 - lam_eff) * log_den + lam_eff * log_other)
    grad = kappa * (num_occ.senones - (1.0 - lam_eff) * den_occ.senones - lam_eff * other_occ)
    return float(value), grad


def lf_mmi(bundle: StreamBundle, n: int, config: SeqLossConfig, pairing=None):
    """``log Num - log Den`` for stream ``n``; returns ``(value, d value / d loglik[n])``.

    Args:
        bundle: streams, references and graph.
        n: output stream index.
        config: only ``kappa`` is used.
        pairing: permutation assigning references to streams (identity by default).
    """
    return _criterion(bundle, n, pairing, config, 0.0, 0.0, 0.0)


def lf_dc_mmi(bundle: StreamBundle, n: int, config: SeqLossConfig, pairing=None):
    """De-correlated MMI: the competing streams' reference scores join the
    denominator with weight ``lambda_dc``.  With more than one competing
    stream their scores are log-averaged."""
    return _criterion(bundle, n, pairing, config, config.lambda_dc, 0.0, 0.0)


def lf_bmmi(bundle: StreamBundle, n: int, config: SeqLossConfig, pairing=None):
    """Boosted MMI with frame-level accuracy: denominator arcs that agree with
    the stream's reference at that frame are scaled down by ``exp(-b)``."""
    return _criterion(bundle, n, pairing, config, 0.0, config.boost_b, 0.0)


def lf_dc_bmmi(bundle: StreamBundle, n: int, config: SeqLossConfig, pairing=None):
    """Boosted MMI plus a penalty ``-b_hat`` on arcs that disagree with the
    competing stream's reference (averaged over competitors when N > 2)."""
    return _criterion(bundle, n, pairing, config, 0.0, config.boost_b, config.boost_b_hat)


CRITERIA: dict[str, Callable] = {
    "lf-mmi": lf_mmi,
    "lf-dc-mmi": lf_dc_mmi,
    "lf-bmmi": lf_bmmi,
    "lf-dc-bmmi": lf_dc_bmmi,
}


def get_criterion(name: str) -> Callable:
    try:
        return CRITERIA[name]
    except KeyError:
        raise ValueError(f"unknown criterion {name!r}; choose from {sorted(CRITERIA)}") from None


def seq_pit(bundle: StreamBundle, criterion: str | Callable, config: SeqLossConfig) -> LossResult:
    """Permutation invariant sequence loss ``min_p (1/N) sum_n -J(stream n, ref p[n])``.

    The gradient (w.r.t. the ``N x T x S`` log-likelihoods) flows through the
    winning permutation only; ties go to the lexicographically smallest one.
    """
    fn = get_criterion(criterion) if isinstance(criterion, str) else criterion
    N = bundle.arity
    perms = permutations(N)
    vals = np.empty(len(perms))
    grads = []
    for k, p in enumerate(perms):
        g = np.empty_like(bundle.loglik)
        total = 0.0
        for n in range(N):
            v, gn = fn(bundle, n, config, pairing=p)
            total += -v
            g[n] = -gn / N
        vals[k] = total / N
        grads.append(g)
    k = int(np.argmin(vals))
    return LossResult(
        value=float(vals[k]),
        grad=grads[k],
        permutation=perms[k],
        permutations=perms,
        perm_values=vals,
        grad_for=lambda p: grads[perms.index(p)],
    )


def with_overrides(config: SeqLossConfig, **kw) -> SeqLossConfig:
    return replace(config, **kw)
