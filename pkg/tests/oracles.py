"""Independent reference implementations used by the tests.

Everything here is deliberately naive: explicit enumeration of paths,
alignments and permutations, and central finite differences.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from pitlab.graphlm import SenoneGraph


def logsumexp(values) -> float:
    values = [v for v in values if v != -math.inf]
    if not values:
        return -math.inf
    m = max(values)
    return m + math.log(sum(math.exp(v - m) for v in values))


# --- graphs ---------------------------------------------------------------

def random_graph(rng, states: int, senones: int, arcs_per_state: int = 2, normalized: bool = False) -> SenoneGraph:
    """Random acceptor; may be non-deterministic and have dead ends."""
    src, dst, lab, wt = [], [], [], []
    for q in range(states):
        for _ in range(arcs_per_state):
            src.append(q)
            dst.append(int(rng.integers(states)))
            lab.append(int(rng.integers(senones)))
            wt.append(float(rng.normal()))
    wt = np.array(wt)
    if normalized:
        src_a = np.array(src)
        for q in range(states):
            sel = src_a == q
            wt[sel] -= np.log(np.sum(np.exp(wt[sel])))
    final = np.where(rng.random(states) < 0.7, rng.normal(size=states), -np.inf)
    final[int(rng.integers(states))] = 0.0
    return SenoneGraph(states, 0, src, dst, lab, wt, final, senones)


def paths(graph: SenoneGraph, T: int):
    """All complete length-``T`` arc sequences from the start state."""
    out = []

    def walk(q, prefix):
        if len(prefix) == T:
            if np.isfinite(graph.final[q]):
                out.append(tuple(prefix))
            return
        for a in range(graph.num_arcs):
            if graph.src[a] == q:
                walk(int(graph.dst[a]), prefix + [a])

    walk(graph.start, [])
    return out


def path_score(graph, path, loglik, kappa, adjust=None) -> float:
    s = 0.0
    for t, a in enumerate(path):
        lab = graph.label[a]
        s += graph.weight[a] + kappa * loglik[t, lab]
        if adjust is not None:
            s += adjust[t, lab]
    end = graph.dst[path[-1]] if path else graph.start
    return float(s + graph.final[end])


def enum_forward_backward(graph, loglik, kappa, adjust=None):
    """``(logZ, arc posteriors T x A, senone marginals T x S)`` by enumeration."""
    T = loglik.shape[0]
    ps = paths(graph, T)
    scores = [path_score(graph, p, loglik, kappa, adjust) for p in ps]
    log_z = logsumexp(scores)
    arcs = np.zeros((T, graph.num_arcs))
    sen = np.zeros((T, graph.num_labels))
    for p, s in zip(ps, scores):
        w = math.exp(s - log_z)
        for t, a in enumerate(p):
            arcs[t, a] += w
            sen[t, graph.label[a]] += w
    return log_z, arcs, sen


def enum_reference_weight(graph, ref) -> float:
    """Log summed LM weight of the paths whose labels spell ``ref``."""
    zero = np.zeros((len(ref), graph.num_labels))
    return logsumexp(
        path_score(graph, p, zero, 1.0) for p in paths(graph, len(ref))
        if [graph.label[a] for a in p] == list(ref)
    )


def enum_criterion(graph, loglik, ref, others, kappa, lam=0.0, b=0.0, b_hat=0.0) -> float:
    """Sequence criterion value computed from whole-path scores.

    Boosting is applied per path: ``-b * (#frames matching ref)`` and
    ``-b_hat * mean over others of (#frames not matching that reference)``.
    """
    T = loglik.shape[0]
    ac = lambda r: kappa * sum(loglik[t, r[t]] for t in range(T))  # noqa: E731
    log_num = ac(ref) + enum_reference_weight(graph, ref)
    den = []
    for p in paths(graph, T):
        labels = [graph.label[a] for a in p]
        s = path_score(graph, p, loglik, kappa)
        s -= b * sum(labels[t] == ref[t] for t in range(T))
        if others:
            s -= b_hat * np.mean([sum(labels[t] != o[t] for t in range(T)) for o in others])
        den.append(s)
    log_den = logsumexp(den)
    if lam and others:
        other = [ac(o) + enum_reference_weight(graph, o) for o in others]
        log_other = logsumexp(other) - math.log(len(others))
        return log_num - ((1 - lam) * log_den + lam * log_other)
    return log_num - log_den


# --- edit distance --------------------------------------------------------

def all_alignments(ref, hyp):
    """Every alignment as a list of ops in {'C', 'S', 'D', 'I'}."""
    if not ref and not hyp:
        return [[]]
    out = []
    if ref and hyp:
        op = "C" if ref[0] == hyp[0] else "S"
        out += [[op] + rest for rest in all_alignments(ref[1:], hyp[1:])]
    if ref:
        out += [["D"] + rest for rest in all_alignments(ref[1:], hyp)]
    if hyp:
        out += [["I"] + rest for rest in all_alignments(ref, hyp[1:])]
    return out


def brute_edit_distance(ref, hyp):
    """``(S, D, I, C)`` of the minimum ``(cost, I, D)`` alignment by enumeration."""
    best = None
    for ops in all_alignments(list(ref), list(hyp)):
        s, d, i, c = (ops.count(k) for k in "SDIC")
        key = (s + d + i, i, d)
        if best is None or key < best[0]:
            best = (key, (s, d, i, c))
    return best[1]


# --- permutations ---------------------------------------------------------

def brute_pit(cost_fn, n: int):
    """``(value, permutation)`` minimizing ``(1/n) sum_i cost_fn(i, p[i])``; first minimum wins."""
    best = None
    for p in itertools.permutations(range(n)):
        v = sum(cost_fn(i, p[i]) for i in range(n)) / n
        if best is None or v < best[0]:
            best = (v, p)
    return best


# --- finite differences ---------------------------------------------------

def central_difference(f, x: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (only at ``coords`` if given)."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(x.shape)


def floored_relative_error(analytic, numeric, floor_fraction: float = 1e-4) -> float:
    """Max elementwise relative error with denominators floored at
    ``floor_fraction * max|numeric|``."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    floor = floor_fraction * max(np.max(np.abs(n)), 1e-300)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))
