"""Viterbi decoding, label collapsing and pairwise WER scoring."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .graphlm import NEG_INF, SenoneGraph, arc_scores
from .pitloss import permutations
from .synthdata import collapse_labels


def best_path(graph: SenoneGraph, loglik: np.ndarray, kappa: float) -> tuple[np.ndarray, float]:
    """Highest scoring length-T path; returns ``(labels, score)``.

    Ties are broken towards the smallest arc index at each step and the
    smallest state index at the end.
    """
    loglik = np.asarray(loglik, dtype=np.float64)
    if loglik.ndim != 2 or loglik.shape[0] == 0:
        raise ValueError("empty utterance (T=0)")
    if not np.all(np.isfinite(loglik)):
        raise ValueError("loglik must be finite")
    scores = arc_scores(graph, loglik, kappa)
    T = scores.shape[0]
    order, groups, starts = graph._groups("dst")
    counts = np.diff(np.append(starts, graph.num_arcs))
    sorted_arcs = order  # arcs grouped by dst, original index ascending inside a group
    delta = np.full(graph.num_states, NEG_INF)
    delta[graph.start] = 0.0
    back = np.full((T, graph.num_states), -1, dtype=np.int64)
    big = np.iinfo(np.int64).max
    for t in range(T):
        v = (delta[graph.src] + scores[t])[sorted_arcs]
        m = np.maximum.reduceat(v, starts)
        hit = v == np.repeat(m, counts)
        hit &= np.isfinite(v)
        first = np.minimum.reduceat(np.where(hit, sorted_arcs, big), starts)
        new = np.full(graph.num_states, NEG_INF)
        new[groups] = m
        bp = np.full(graph.num_states, -1, dtype=np.int64)
        bp[groups] = np.where(first == big, -1, first)
        delta = new
        back[t] = bp
    total = delta + graph.final
    q = int(np.argmax(total))
    score = float(total[q])
    if not np.isfinite(score):
        raise ValueError("no complete path of the requested length")
    labels = np.empty(T, dtype=np.int64)
    for t in range(T - 1, -1, -1):
        a = back[t, q]
        labels[t] = graph.label[a]
        q = graph.src[a]
    return labels, score


def viterbi(graph: SenoneGraph, loglik: np.ndarray, kappa: float) -> np.ndarray:
    """Senone sequence of the best path under ``kappa * loglik + LM``."""
    return best_path(graph, loglik, kappa)[0]


def collapse(senones: Sequence[int]) -> list[int]:
    """Merge consecutive duplicates, then drop silence (label 0)."""
    return collapse_labels(senones)


def edit_distance(reference: Sequence, hypothesis: Sequence) -> tuple[int, int, int, int]:
    """Unit-cost alignment counts ``(S, D, I, C)``.

    Among minimum-cost alignments the one with fewest insertions, then fewest
    deletions, is reported.
    """
    ref, hyp = list(reference), list(hypothesis)
    R, H = len(ref), len(hyp)
    # cell = (cost, insertions, deletions), compared lexicographically
    prev = [(j, j, 0) for j in range(H + 1)]
    for i in range(1, R + 1):
        cur = [(i, 0, i)]
        for j in range(1, H + 1):
            c, ins, dels = prev[j - 1]
            diag = (c + (ref[i - 1] != hyp[j - 1]), ins, dels)
            c, ins, dels = prev[j]
            up = (c + 1, ins, dels + 1)
            c, ins, dels = cur[j - 1]
            left = (c + 1, ins + 1, dels)
            cur.append(min(diag, up, left))
        prev = cur
    cost, ins, dels = prev[H]
    subs = cost - ins - dels
    return subs, dels, ins, R - subs - dels


@dataclass
class WerReport:
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    correct: int = 0
    ref_count: int = 0
    utt_id: str = ""
    assignment: tuple = ()
    # summary reports aggregate several utterances
    utterances: list["WerReport"] = field(default_factory=list)

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def wer(self) -> float:
        if self.ref_count == 0:
            return 0.0 if self.errors == 0 else float("inf")
        return self.errors / self.ref_count


def pairwise_wer(references: Sequence[Sequence], hypotheses: Sequence[Sequence], utt_id: str = "") -> WerReport:
    """Score every hypothesis-to-reference bijection and keep the best one.

    ``assignment[n]`` is the reference index given to hypothesis ``n``.
    Equal totals resolve to the lexicographically first assignment, which is
    the identity when it is among the best.
    """
    N = len(references)
    if len(hypotheses) != N:
        raise ValueError(f"{len(hypotheses)} hypotheses for {N} references")
    if N < 1:
        raise ValueError("need at least one stream")
    perms = permutations(N)
    table = {
        (n, r): edit_distance(references[r], hypotheses[n]) for n in range(N) for r in range(N)
    }
    best = None
    for p in perms:
        counts = [table[(n, p[n])] for n in range(N)]
        total = sum(s + d + i for s, d, i, _ in counts)
        if best is None or total < best[0]:
            best = (total, p, counts)
    _, p, counts = best
    return WerReport(
        substitutions=sum(c[0] for c in counts),
        deletions=sum(c[1] for c in counts),
        insertions=sum(c[2] for c in counts),
        correct=sum(c[3] for c in counts),
        ref_count=sum(len(r) for r in references),
        utt_id=utt_id,
        assignment=p,
    )


def aggregate(reports: Sequence[WerReport]) -> WerReport:
    """Corpus-level report: counts are summed before dividing."""
    return WerReport(
        substitutions=sum(r.substitutions for r in reports),
        deletions=sum(r.deletions for r in reports),
        insertions=sum(r.insertions for r in reports),
        correct=sum(r.correct for r in reports),
        ref_count=sum(r.ref_count for r in reports),
        utt_id="TOTAL",
        utterances=list(reports),
    )


SCORE_FIELDS = ["id", "assignment", "S", "D", "I", "C", "WER"]


def _rows(summary: WerReport):
    for r in list(summary.utterances) + [summary]:
        yield [
            r.utt_id,
            "-".join(str(x) for x in r.assignment) if r.assignment else "",
            r.substitutions,
            r.deletions,
            r.insertions,
            r.correct,
            f"{r.wer:.6f}",
        ]


def write_score_report(summary: WerReport, path: str | os.PathLike) -> tuple[Path, Path]:
    """Write a fixed-width text table and a CSV twin (``<path>.csv``)."""
    path = Path(path)
    rows = list(_rows(summary))
    widths = [max(len(str(x)) for x in col) for col in zip(SCORE_FIELDS, *rows)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*SCORE_FIELDS)]
    lines += [fmt.format(*map(str, r)) for r in rows[:-1]]
    lines.append(
        f"SUMMARY utterances={len(summary.utterances)} ref={summary.ref_count} "
        f"S={summary.substitutions} D={summary.deletions} I={summary.insertions} "
        f"C={summary.correct} WER={summary.wer:.6f}"
    )
    path.write_text("\n".join(lines) + "\n")
    csv_path = path.with_suffix(path.suffix + ".csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SCORE_FIELDS)
        w.writerows(rows)
    return path, csv_path
