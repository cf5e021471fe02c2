"""Permutation invariant objectives over N output streams.

Utterance-level losses are built from an ``N x N`` pair-cost matrix
``cost[n, r]`` (output stream ``n`` scored against reference ``r``); the
value of a permutation ``p`` is ``(1/N) * sum_n cost[n, p[n]]``.  A
permutation is a tuple mapping output index to reference index.

Gradients flow only through the winning pairing.  Ties go to the
lexicographically smallest permutation, which is also the first one
``itertools.permutations`` yields.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

MAX_STREAMS = 6

Permutation = tuple


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    permutation: Permutation | list[Permutation]
    permutations: list[Permutation] = field(default_factory=list)
    perm_values: np.ndarray | None = None
    # gradient of the utterance loss under an arbitrary pairing
    grad_for: Callable[[Permutation], np.ndarray] | None = field(default=None, repr=False)


def permutations(n: int) -> list[Permutation]:
    if n > MAX_STREAMS:
        raise ValueError(f"exhaustive search supports at most {MAX_STREAMS} streams, got {n}")
    return list(itertools.permutations(range(n)))


def _argmin_first(values: np.ndarray) -> int:
    # np.argmin returns the first minimum, i.e. the lexicographic tie-break
    return int(np.argmin(values))


def perm_values_from_costs(cost: np.ndarray) -> tuple[list[Permutation], np.ndarray]:
    n = cost.shape[0]
    perms = permutations(n)
    vals = np.array([sum(cost[i, p[i]] for i in range(n)) / n for p in perms])
    return perms, vals


def best_permutation(pair_scores: np.ndarray) -> Permutation:
    """Exhaustive minimum-cost assignment of outputs (rows) to references (columns)."""
    pair_scores = np.asarray(pair_scores, dtype=np.float64)
    if pair_scores.ndim != 2 or pair_scores.shape[0] != pair_scores.shape[1]:
        raise ValueError(f"pair_scores must be square, got {pair_scores.shape}")
    if not np.all(np.isfinite(pair_scores)):
        raise ValueError("pair_scores must be finite")
    n = pair_scores.shape[0]
    perms = permutations(n)
    totals = np.array([sum(pair_scores[i, p[i]] for i in range(n)) for p in perms])
    return perms[_argmin_first(totals)]


def _check_same(outputs, refs):
    if outputs.shape != refs.shape:
        raise ValueError(f"shape mismatch: outputs {outputs.shape} vs refs {refs.shape}")
    if outputs.ndim != 3:
        raise ValueError(f"expected N x T x D arrays, got {outputs.shape}")
    if outputs.shape[0] > MAX_STREAMS:
        raise ValueError(f"at most {MAX_STREAMS} streams supported")


def mse_pit_frame(outputs: np.ndarray, refs: np.ndarray) -> LossResult:
    """Frame-wise PIT: the best permutation is chosen independently per frame.

    ``value = sum_t (1/N) min_p sum_n mean_d (o[n,t] - r[p[n],t])^2``
    """
    outputs = np.asarray(outputs, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    _check_same(outputs, refs)
    N, T, D = outputs.shape
    perms = permutations(N)
    # frame_cost[t, n, r]
    diff = outputs[:, None, :, :] - refs[None, :, :, :]
    frame_cost = np.mean(diff * diff, axis=-1).transpose(2, 0, 1)
    per_perm = np.stack([sum(frame_cost[:, i, p[i]] for i in range(N)) for p in perms], axis=1)
    winners = np.argmin(per_perm, axis=1)
    value = float(np.sum(per_perm[np.arange(T), winners]) / N)
    grad = np.zeros_like(outputs)
    frame_perms = []
    for t in range(T):
        p = perms[winners[t]]
        frame_perms.append(p)
        for i in range(N):
            grad[i, t] = 2.0 * (outputs[i, t] - refs[p[i], t]) / (D * N)
    return LossResult(value=value, grad=grad, permutation=frame_perms, permutations=perms)


def _utterance_result(cost: np.ndarray, grad_for: Callable[[Permutation], np.ndarray]) -> LossResult:
    perms, vals = perm_values_from_costs(cost)
    k = _argmin_first(vals)
    return LossResult(
        value=float(vals[k]),
        grad=grad_for(perms[k]),
        permutation=perms[k],
        permutations=perms,
        perm_values=vals,
        grad_for=grad_for,
    )


def mse_pit_utt(outputs: np.ndarray, refs: np.ndarray) -> LossResult:
    """Utterance-level PIT with one permutation for the whole utterance."""
    outputs = np.asarray(outputs, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    _check_same(outputs, refs)
    N, T, D = outputs.shape
    diff = outputs[:, None, :, :] - refs[None, :, :, :]
    cost = np.sum(np.mean(diff * diff, axis=-1), axis=-1)

    def grad_for(p):
        g = np.empty_like(outputs)
        for i in range(N):
            g[i] = 2.0 * (outputs[i] - refs[p[i]]) / (D * N)
        return g

    return _utterance_result(cost, grad_for)


def ce_pit(log_posteriors: np.ndarray, labels: np.ndarray) -> LossResult:
    """Cross-entropy PIT against hard frame labels.

    Args:
        log_posteriors: ``N x T x S`` normalized log-posteriors.
        labels: ``N x T`` integer senone labels, one row per reference.
    """
    lp = np.asarray(log_posteriors, dtype=np.float64)
    labels = np.asarray(labels)
    if lp.ndim != 3 or labels.shape != lp.shape[:2]:
        raise ValueError(f"shape mismatch: log_posteriors {lp.shape} vs labels {labels.shape}")
    N, T, S = lp.shape
    if N > MAX_STREAMS:
        raise ValueError(f"at most {MAX_STREAMS} streams supported")
    if labels.size and (labels.min() < 0 or labels.max() >= S):
        raise ValueError(f"labels must lie in [0, {S})")
    frames = np.arange(T)
    cost = np.empty((N, N))
    for n in range(N):
        for r in range(N):
            cost[n, r] = -np.sum(lp[n, frames, labels[r]])

    def grad_for(p):
        g = np.zeros_like(lp)
        for i in range(N):
            g[i, frames, labels[p[i]]] = -1.0 / N
        return g

    return _utterance_result(cost, grad_for)


def _check_normalized(lp: np.ndarray, name: str, tol: float = 1e-6):
    with np.errstate(invalid="ignore"):
        m = np.max(lp, axis=-1, keepdims=True)
        lse = np.log(np.sum(np.exp(lp - m), axis=-1)) + m[..., 0]
    if not np.all(np.abs(lse) <= tol):
        raise ValueError(f"{name} rows are not normalized log-distributions (tolerance {tol})")


def teacher_entropy(teacher_log_post: np.ndarray) -> float:
    """``(1/N) sum_n sum_t H(teacher[n, t])``, the constant dropped from the KLD."""
    tl = np.asarray(teacher_log_post, dtype=np.float64)
    p = np.exp(tl)
    plogp = np.where(p > 0, p * np.where(p > 0, tl, 0.0), 0.0)
    return float(-np.sum(plogp) / tl.shape[0])


def kld_pit(student_log_post: np.ndarray, teacher_log_post: np.ndarray) -> LossResult:
    """Soft-label PIT: ``sum_i -y_teacher[i] * log y_student[i]`` per frame.

    This is the KL divergence without the teacher entropy term, so the value
    is bounded below by :func:`teacher_entropy`.  The teacher is constant.
    """
    sl = np.asarray(student_log_post, dtype=np.float64)
    tl = np.asarray(teacher_log_post, dtype=np.float64)
    if sl.shape != tl.shape or sl.ndim != 3:
        raise ValueError(f"shape mismatch: student {sl.shape} vs teacher {tl.shape}")
    N = sl.shape[0]
    if N > MAX_STREAMS:
        raise ValueError(f"at most {MAX_STREAMS} streams supported")
    _check_normalized(sl, "student")
    _check_normalized(tl, "teacher")
    tp = np.exp(tl)
    cost = np.empty((N, N))
    for n in range(N):
        for r in range(N):
            cost[n, r] = -np.sum(np.sum(tp[r] * sl[n], axis=-1))

    def grad_for(p):
        g = np.empty_like(sl)
        for i in range(N):
            g[i] = -tp[p[i]] / N
        return g

    return _utterance_result(cost, grad_for)


def interpolate(hard: LossResult, soft: LossResult, w: float) -> LossResult:
    """``w * hard + (1 - w) * soft`` with one jointly chosen permutation.

    The permutation minimizes the interpolated objective itself, so both
    terms are evaluated under the same pairing.
    """
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"interpolation weight must lie in [0, 1], got {w}")
    if hard.perm_values is None or soft.perm_values is None:
        raise ValueError("interpolate needs utterance-level results from ce_pit and kld_pit")
    if hard.permutations != soft.permutations or hard.grad.shape != soft.grad.shape:
        raise ValueError("hard and soft losses were computed on different shapes")
    joint = w * hard.perm_values + (1.0 - w) * soft.perm_values
    k = _argmin_first(joint)
    p = hard.permutations[k]

    def grad_for(q):
        return w * hard.grad_for(q) + (1.0 - w) * soft.grad_for(q)

    return LossResult(
        value=float(joint[k]),
        grad=grad_for(p),
        permutation=p,
        permutations=hard.permutations,
        perm_values=joint,
        grad_for=grad_for,
    )
