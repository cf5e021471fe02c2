"""Senone n-gram language model, swapped-word augmentation and the
frame-synchronous senone acceptor used as the shared denominator graph.

Every arc consumes exactly one frame and carries one senone label; there are
no epsilon arcs.  Arc scores at frame ``t`` are
``weight + kappa * loglik[t, label] + adjust[t, label]`` and all recursions
run in log space.
"""
from __future__ import annotations

import itertools
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NEG_INF = -np.inf


# --- n-gram estimation ----------------------------------------------------

@dataclass
class NGramModel:
    """Add-k smoothed n-gram with full backoff for unseen histories.

    ``tables[m]`` maps each history of length ``m`` seen in training to a
    conditional log-distribution over ``vocab`` (aligned with ``vocab``).
    A history missing from ``tables[m]`` backs off to its suffix of length
    ``m - 1`` with backoff weight 1, which keeps every conditional normalized.
    """

    order: int
    vocab: tuple[int, ...]
    k: float
    tables: list[dict[tuple[int, ...], np.ndarray]]

    def __post_init__(self):
        self._index = {w: i for i, w in enumerate(self.vocab)}

    def distribution(self, history: Sequence[int]) -> np.ndarray:
        """Log-distribution over ``vocab`` given up to ``order - 1`` previous symbols."""
        h = tuple(history)[-(self.order - 1):] if self.order > 1 else ()
        while True:
            table = self.tables[len(h)]
            if h in table:
                return table[h]
            h = h[1:]

    def backoff_weight(self, history: Sequence[int]) -> float:
        """Log backoff weight: 0 for every history (full backoff when unseen)."""
        return 0.0

    def logprob(self, word: int, history: Sequence[int]) -> float:
        return float(self.distribution(history)[self._index[word]])

    def score(self, sequence: Sequence[int]) -> float:
        """Chain-rule log-probability with histories truncated at the start."""
        total = 0.0
        for i, w in enumerate(sequence):
            lo = max(0, i - self.order + 1)
            total += self.logprob(int(w), sequence[lo:i])
        return total


def train_ngram(
    transcripts: Iterable[Sequence[int]],
    order: int = 3,
    vocab: Iterable[int] | None = None,
    k: float = 0.1,
) -> NGramModel:
    """Estimate an add-k n-gram from frame-level senone transcriptions.

    Args:
        transcripts: senone sequences.
        order: n-gram order (3 = trigram).
        vocab: symbol inventory; defaults to the observed symbols.  Pass the
            full senone range so that every string has nonzero probability.
        k: additive smoothing constant.
    """
    transcripts = [tuple(int(x) for x in t) for t in transcripts]
    if not transcripts or not any(transcripts):
        raise ValueError("empty corpus")
    if order < 1:
        raise ValueError("order must be >= 1")
    observed = sorted({w for t in transcripts for w in t})
    vocab_t = tuple(sorted({int(v) for v in vocab})) if vocab is not None else tuple(observed)
    missing = set(observed) - set(vocab_t)
    if missing:
        raise ValueError(f"symbols outside vocabulary: {sorted(missing)}")
    index = {w: i for i, w in enumerate(vocab_t)}
    V = len(vocab_t)

    counts: list[dict[tuple[int, ...], Counter]] = [defaultdict(Counter) for _ in range(order)]
    for seq in transcripts:
        for i, w in enumerate(seq):
            for m in range(order):
                if i >= m:
                    counts[m][seq[i - m:i]][w] += 1

    tables: list[dict[tuple[int, ...], np.ndarray]] = []
    for m in range(order):
        table = {}
        for h in sorted(counts[m]):
            c = counts[m][h]
            vec = np.full(V, k)
            for w, n in c.items():
                vec[index[w]] += n
            table[h] = np.log(vec / vec.sum())
        tables.append(table)
    if () not in tables[0]:
        raise ValueError("empty corpus")
    return NGramModel(order=order, vocab=vocab_t, k=k, tables=tables)


# --- swapped-word augmentation -------------------------------------------

def sample_swap_events(length: int, alpha: float, beta: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of swapped frames.

    Each frame swaps with probability ``alpha`` unless it falls within the
    ``beta`` frames following the previous swap.
    """
    mask = np.zeros(length, dtype=bool)
    draws = rng.random(length)
    lock = 0
    for t in range(length):
        if lock:
            lock -= 1
            continue
        if draws[t] < alpha:
            mask[t] = True
            lock = beta
    return mask


def augment_swapped(
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
    alpha: float,
    beta: int,
    gamma: int,
    seed: int,
) -> list[np.ndarray]:
    """Originals plus ``gamma`` artificially swapped copies of each pair.

    A swap exchanges the two parallel streams' senones at one frame, silence
    included.  Output order: for each pair, the two originals followed by the
    copies, each copy contributing its two streams.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if beta < 0 or gamma < 0:
        raise ValueError("beta and gamma must be non-negative")
    rng = np.random.default_rng(seed)
    out: list[np.ndarray] = []
    for a, b in pairs:
        a = np.asarray(a, dtype=np.int64)
        b = np.asarray(b, dtype=np.int64)
        if a.shape != b.shape:
            raise ValueError(f"pair streams must be frame-aligned, got lengths {a.shape[0]} and {b.shape[0]}")
        out.extend([a.copy(), b.copy()])
        for _ in range(gamma):
            mask = sample_swap_events(a.shape[0], alpha, beta, rng)
            out.append(np.where(mask, b, a))
            out.append(np.where(mask, a, b))
    return out


# --- acceptor -------------------------------------------------------------

@dataclass
class SenoneGraph:
    num_states: int
    start: int
    src: np.ndarray
    dst: np.ndarray
    label: np.ndarray
    weight: np.ndarray
    final: np.ndarray
    num_labels: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.label = np.asarray(self.label, dtype=np.int64)
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.final = np.asarray(self.final, dtype=np.float64)
        if self.label.size and (self.label.min() < 0 or self.label.max() >= self.num_labels):
            raise ValueError("arc labels must lie in [0, num_labels)")

    @property
    def num_arcs(self) -> int:
        return self.src.shape[0]

    def _groups(self, key: str):
        """Arcs sorted (stably) by ``src`` or ``dst`` with reduceat group starts."""
        if key not in self._cache:
            idx = getattr(self, key)
            order = np.argsort(idx, kind="stable")
            sorted_idx = idx[order]
            states, starts = np.unique(sorted_idx, return_index=True)
            self._cache[key] = (order, states, starts)
        return self._cache[key]

    def transition_table(self) -> np.ndarray | None:
        """``table[q, s]`` = the arc leaving ``q`` with label ``s`` (-1 if none),
        or ``None`` when some state has two arcs with the same label."""
        if "table" not in self._cache:
            table = np.full((self.num_states, self.num_labels), -1, dtype=np.int64)
            table[self.src, self.label] = np.arange(self.num_arcs)
            unique = np.count_nonzero(table >= 0) == self.num_arcs
            self._cache["table"] = table if unique else None
        return self._cache["table"]

    def label_matrix(self) -> np.ndarray:
        if "onehot" not in self._cache:
            m = np.zeros((self.num_arcs, self.num_labels))
            m[np.arange(self.num_arcs), self.label] = 1.0
            self._cache["onehot"] = m
        return self._cache["onehot"]

    def dump(self, path: str | os.PathLike) -> None:
        """Write the textual arc list with header lines."""
        lines = [
            f"states {self.num_states}",
            f"labels {self.num_labels}",
            f"start {self.start}",
        ]
        for q in range(self.num_states):
            if np.isfinite(self.final[q]):
                lines.append(f"final {q} {float(self.final[q])!r}")
        lines.append("arcs")
        for a in range(self.num_arcs):
            lines.append(f"{self.src[a]} {self.dst[a]} {self.label[a]} {float(self.weight[a])!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SenoneGraph":
        lines = Path(path).read_text().splitlines()
        header = {}
        finals = []
        i = 0
        while lines[i] != "arcs":
            parts = lines[i].split()
            if parts[0] == "final":
                finals.append((int(parts[1]), float(parts[2])))
            else:
                header[parts[0]] = int(parts[1])
            i += 1
        arcs = [ln.split() for ln in lines[i + 1:] if ln.strip()]
        final = np.full(header["states"], NEG_INF)
        for q, w in finals:
            final[q] = w
        return cls(
            num_states=header["states"],
            start=header["start"],
            src=[int(a[0]) for a in arcs],
            dst=[int(a[1]) for a in arcs],
            label=[int(a[2]) for a in arcs],
            weight=[float(a[3]) for a in arcs],
            final=final,
            num_labels=header["labels"],
        )


def compile_graph(ngram: NGramModel, num_labels: int | None = None) -> SenoneGraph:
    """Expand the n-gram into a deterministic acceptor.

    States are histories of length ``0 .. order-1`` over the vocabulary; the
    empty history is the start state.  Backoff is resolved at compile time,
    so each state has one outgoing arc per vocabulary symbol.  Every state is
    final with weight 0: strings of a fixed length carry total mass 1.
    """
    vocab = ngram.vocab
    n_hist = max(ngram.order - 1, 0)
    states: list[tuple[int, ...]] = []
    for m in range(n_hist + 1):
        states.extend(itertools.product(vocab, repeat=m))
    sid = {h: i for i, h in enumerate(states)}
    src, dst, lab, wt = [], [], [], []
    for h in states:
        dist = ngram.distribution(h)
        for j, w in enumerate(vocab):
            nxt = h + (w,)
            if len(nxt) > n_hist:
                nxt = nxt[len(nxt) - n_hist:] if n_hist else ()
            src.append(sid[h])
            dst.append(sid[nxt])
            lab.append(w)
            wt.append(dist[j])
    if num_labels is None:
        num_labels = max(vocab) + 1
    return SenoneGraph(
        num_states=len(states),
        start=sid[()],
        src=src,
        dst=dst,
        label=lab,
        weight=wt,
        final=np.zeros(len(states)),
        num_labels=num_labels,
    )


# --- forward-backward -----------------------------------------------------

@dataclass
class OccupancyGrid:
    arcs: np.ndarray     # T x A arc posteriors
    senones: np.ndarray  # T x S per-frame senone marginals


def arc_scores(graph: SenoneGraph, loglik: np.ndarray, kappa: float, adjust: np.ndarray | None = None) -> np.ndarray:
    loglik = np.asarray(loglik, dtype=np.float64)
    if loglik.ndim != 2 or loglik.shape[1] != graph.num_labels:
        raise ValueError(f"loglik must be T x {graph.num_labels}, got {loglik.shape}")
    per_label = kappa * loglik
    if adjust is not None:
        per_label = per_label + adjust
    return graph.weight[None, :] + per_label[:, graph.label]


def _segment_logsumexp(values: np.ndarray, order, groups, starts, size: int) -> np.ndarray:
    v = values[order]
    m = np.maximum.reduceat(v, starts)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    counts = np.diff(np.append(starts, v.shape[0]))
    with np.errstate(divide="ignore"):
        s = np.log(np.add.reduceat(np.exp(v - np.repeat(m_safe, counts)), starts)) + m_safe
    out = np.full(size, NEG_INF)
    out[groups] = s
    return out


def forward_pass(graph: SenoneGraph, scores: np.ndarray) -> np.ndarray:
    """``alpha[t, q]``: log total weight of length-``t`` prefixes ending in ``q``."""
    T = scores.shape[0]
    order, groups, starts = graph._groups("dst")
    alpha = np.full((T + 1, graph.num_states), NEG_INF)
    alpha[0, graph.start] = 0.0
    for t in range(T):
        alpha[t + 1] = _segment_logsumexp(alpha[t][graph.src] + scores[t], order, groups, starts, graph.num_states)
    return alpha


def backward_pass(graph: SenoneGraph, scores: np.ndarray) -> np.ndarray:
    """``beta[t, q]``: log total weight of suffixes from ``q`` at frame ``t`` to a final state."""
    T = scores.shape[0]
    order, groups, starts = graph._groups("src")
    beta = np.full((T + 1, graph.num_states), NEG_INF)
    beta[T] = graph.final
    for t in range(T - 1, -1, -1):
        beta[t] = _segment_logsumexp(scores[t] + beta[t + 1][graph.dst], order, groups, starts, graph.num_states)
    return beta


def _logsumexp(x: np.ndarray) -> float:
    m = np.max(x)
    if not np.isfinite(m):
        return float(m)
    return float(np.log(np.sum(np.exp(x - m))) + m)


def _posteriors(graph, scores, alpha, beta, log_z):
    occ = np.exp(alpha[:-1][:, graph.src] + scores + beta[1:][:, graph.dst] - log_z)
    return OccupancyGrid(arcs=occ, senones=occ @ graph.label_matrix())


def forward_backward(
    graph: SenoneGraph,
    loglik: np.ndarray,
    kappa: float,
    adjust: np.ndarray | None = None,
) -> tuple[float, OccupancyGrid]:
    """Total log weight of all length-T paths and exact arc/senone posteriors.

    Args:
        graph: the acceptor.
        loglik: ``T x S`` acoustic log-likelihoods.
        kappa: acoustic scale, applied to ``loglik`` only.
        adjust: optional ``T x S`` additive per-frame score offsets (boosting).
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    loglik = np.asarray(loglik, dtype=np.float64)
    if loglik.shape[0] == 0:
        raise ValueError("empty utterance (T=0)")
    if not np.all(np.isfinite(loglik)):
        raise ValueError("loglik must be finite")
    scores = arc_scores(graph, loglik, kappa, adjust)
    alpha = forward_pass(graph, scores)
    beta = backward_pass(graph, scores)
    log_z = _logsumexp(alpha[-1] + graph.final)
    if not np.isfinite(log_z):
        raise ValueError("no complete path of the requested length")
    return log_z, _posteriors(graph, scores, alpha, beta, log_z)


def _reference_path(graph: SenoneGraph, ref: np.ndarray) -> np.ndarray | None:
    """Arc indices of the unique path emitting ``ref`` in a deterministic graph
    (empty array if there is none), or ``None`` for non-deterministic graphs."""
    table = graph.transition_table()
    if table is None:
        return None
    arcs = np.empty(ref.shape[0], dtype=np.int64)
    q = graph.start
    for t, s in enumerate(ref):
        a = table[q, s]
        if a < 0:
            return arcs[:0]
        arcs[t] = a
        q = graph.dst[a]
    return arcs


def _path_weight(graph: SenoneGraph, path: np.ndarray, T: int) -> float:
    if path.shape[0] != T:
        return NEG_INF
    end = graph.dst[path[-1]] if T else graph.start
    return float(np.sum(graph.weight[path]) + graph.final[end])


def reference_log_weight(graph: SenoneGraph, reference: Sequence[int]) -> float:
    """Log of the summed LM weight of all paths that emit ``reference``."""
    ref = np.asarray(reference, dtype=np.int64)
    path = _reference_path(graph, ref)
    if path is not None:
        return _path_weight(graph, path, ref.shape[0])
    T = ref.shape[0]
    scores = np.where(graph.label[None, :] == ref[:, None], graph.weight[None, :], NEG_INF)
    alpha = forward_pass(graph, scores)
    return _logsumexp(alpha[-1] + graph.final)


def numerator_fb(
    graph: SenoneGraph,
    reference: Sequence[int],
    loglik: np.ndarray,
    kappa: float,
) -> tuple[float, OccupancyGrid]:
    """Score of the single reference labelling.

    ``logNum = kappa * sum_t loglik[t, ref_t] + LM(ref)``; the senone
    occupancy is one-hot at the reference.
    """
    ref = np.asarray(reference, dtype=np.int64)
    loglik = np.asarray(loglik, dtype=np.float64)
    if loglik.ndim != 2 or ref.shape[0] != loglik.shape[0]:
        raise ValueError(f"reference length {ref.shape[0]} does not match loglik {loglik.shape}")
    T = ref.shape[0]
    lm = reference_log_weight(graph, ref)
    if not np.isfinite(lm):
        raise ValueError("reference is outside the graph's support")
    log_num = kappa * float(np.sum(loglik[np.arange(T), ref])) + lm
    senones = np.zeros((T, graph.num_labels))
    senones[np.arange(T), ref] = 1.0
    path = _reference_path(graph, ref)
    if path is not None:
        arcs = np.zeros((T, graph.num_arcs))
        arcs[np.arange(T), path] = 1.0
        return log_num, OccupancyGrid(arcs=arcs, senones=senones)
    # arc posteriors restricted to reference-matching arcs
    scores = np.where(graph.label[None, :] == ref[:, None], graph.weight[None, :], NEG_INF)
    alpha = forward_pass(graph, scores)
    beta = backward_pass(graph, scores)
    with np.errstate(invalid="ignore"):
        arcs = np.exp(alpha[:-1][:, graph.src] + scores + beta[1:][:, graph.dst] - lm)
    arcs = np.nan_to_num(arcs, nan=0.0)
    return log_num, OccupancyGrid(arcs=arcs, senones=senones)
