"""Progressive training regimen, teacher management, evaluation and curves.

Stages and what they train:

========== ======= ==========================================================
stage      graph   objective
========== ======= ==========================================================
frame      b       frame-level PIT-MSE of the frame-wise heads
trace      c       utterance-level PIT-MSE of the tracing module
asr        d       cross-entropy of the recognition module on clean streams
teacher-mmi d      LF-MMI fine-tuning of the clean teacher
joint      e       utterance-level CE-PIT
transfer   e       interpolated CE-PIT / KLD-PIT against a clean teacher
seqdisc    e       SEQ-PIT with an LF sequence criterion
========== ======= ==========================================================

All objectives are reported per frame (utterance totals divided by the
number of mixed frames).  Updates use momentum SGD on the frame-averaged
batch gradient.
"""
from __future__ import annotations

import csv
import math
import os
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as M
from .config import ConfigError, ExperimentConfig, StageConfig
from .decode import WerReport, aggregate, collapse, pairwise_wer, viterbi, write_score_report
from .graphlm import SenoneGraph, augment_swapped, compile_graph, train_ngram
from .pitloss import ce_pit, interpolate, kld_pit, mse_pit_frame, mse_pit_utt
from .seqdisc import SeqLossConfig, StreamBundle, get_criterion, lf_mmi, seq_pit, senone_log_priors
from .synthdata import Corpus, CorpusConfig, MixedUtterance, SynthConfig, build_corpus, gen_speaker

STAGE_GRAPH = {
    "frame": "b", "trace": "c", "asr": "d", "teacher-mmi": "d",
    "joint": "e", "transfer": "e", "seqdisc": "e",
}
CURVE_HEADER = ["stage", "epoch", "train_obj", "valid_obj", "valid_wer"]


def derive_seed(*parts) -> int:
    return zlib.crc32(":".join(str(p) for p in parts).encode())


# --- training curves ------------------------------------------------------

def _sig9(x: float | None) -> float | None:
    return None if x is None else float(f"{x:.9g}")


@dataclass(frozen=True)
class CurveRow:
    stage: str
    epoch: int
    train_obj: float
    valid_obj: float
    valid_wer: float | None = None


@dataclass
class TrainingCurve:
    rows: list[CurveRow] = field(default_factory=list)

    def append(self, stage: str, epoch: int, train_obj: float, valid_obj: float, valid_wer: float | None = None):
        last = next((r.epoch for r in reversed(self.rows) if r.stage == stage), None)
        if last is not None and epoch <= last:
            raise ValueError(f"epochs must increase within stage {stage}: {epoch} after {last}")
        # stored at the precision written to disk so that files round-trip exactly
        self.rows.append(CurveRow(stage, int(epoch), _sig9(train_obj), _sig9(valid_obj), _sig9(valid_wer)))

    def extend(self, other: "TrainingCurve") -> "TrainingCurve":
        for r in other.rows:
            self.append(r.stage, r.epoch, r.train_obj, r.valid_obj, r.valid_wer)
        return self

    def stage_rows(self, stage: str) -> list[CurveRow]:
        return [r for r in self.rows if r.stage == stage]

    def __len__(self) -> int:
        return len(self.rows)


def _fmt(x: float | None) -> str:
    return "" if x is None else f"{x:.9g}"


def emit_curves(curve: TrainingCurve, path: str | os.PathLike) -> Path:
    """Append curve rows to a CSV file, writing the header if the file is new or empty."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as f:
            w = csv.writer(f)
            if fresh:
                w.writerow(CURVE_HEADER)
            for r in curve.rows:
                w.writerow([r.stage, r.epoch, _fmt(r.train_obj), _fmt(r.valid_obj), _fmt(r.valid_wer)])
    except OSError as e:
        raise OSError(f"cannot write curves to {path}: {e}") from e
    return path


def read_curves(path: str | os.PathLike) -> TrainingCurve:
    path = Path(path)
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise OSError(f"cannot read curves from {path}: {e}") from e
    if not rows or rows[0] != CURVE_HEADER:
        raise ValueError(f"{path}: missing curve header")
    curve = TrainingCurve()
    for r in rows[1:]:
        curve.rows.append(CurveRow(r[0], int(r[1]), float(r[2]), float(r[3]), float(r[4]) if r[4] else None))
    return curve


# --- data -----------------------------------------------------------------

@dataclass
class DataSplits:
    train: Corpus
    valid: Corpus
    test: Corpus


def synth_config(config: ExperimentConfig) -> SynthConfig:
    c = config.corpus
    return SynthConfig(dim=c.dim, senone_count=c.senones, inventory_seed=c.inventory_seed,
                       emission_noise=c.emission_noise)


def make_corpora(config: ExperimentConfig) -> DataSplits:
    """Train / validation / test corpora drawn from disjoint speaker pools.

    With fewer than two validation speakers the validation utterances come
    from the training pool (fresh segments, same speakers).
    """
    c, seed = config.corpus, config.seed
    sc = synth_config(config)

    def pool(name, count):
        return [gen_speaker(sc, derive_seed(seed, name, i), speaker_id=f"{name}{i:02d}") for i in range(count)]

    train_pool = pool("tr", c.train_speakers)
    valid_pool = pool("va", c.valid_speakers) if c.valid_speakers >= 2 else train_pool
    test_pool = pool("te", c.test_speakers)
    n_valid = max(1, round(c.train_utts * c.valid_fraction))

    def corpus(models, utts, name):
        cc = CorpusConfig(segments=2 * utts, min_len=c.min_len, max_len=c.max_len, seed=derive_seed(seed, name))
        return build_corpus(models, cc, prefix=f"{name}-")

    return DataSplits(
        train=corpus(train_pool, c.train_utts, "train"),
        valid=corpus(valid_pool, n_valid, "valid"),
        test=corpus(test_pool, c.test_utts, "test"),
    )


def training_alignments(corpus: Corpus) -> list[np.ndarray]:
    return [a for u in corpus for a in u.padded_alignments]


def log_priors(corpus: Corpus, senones: int) -> np.ndarray:
    return senone_log_priors(training_alignments(corpus), senones)


def decoding_graph(corpus: Corpus, senones: int, order: int = 3) -> SenoneGraph:
    """Senone n-gram acceptor estimated on the training alignments."""
    lm = train_ngram(training_alignments(corpus), order=order, vocab=range(senones))
    return compile_graph(lm, senones)


def sequence_graph(corpus: Corpus, config: ExperimentConfig) -> SenoneGraph:
    """Denominator graph for sequence training, optionally with swapped copies."""
    S, seq = config.corpus.senones, config.seq
    if not seq.augment:
        return decoding_graph(corpus, S, seq.ngram_order)
    if any(u.arity != 2 for u in corpus):
        raise ConfigError("swap augmentation needs two-stream utterances")
    pairs = [(u.padded_alignments[0], u.padded_alignments[1]) for u in corpus]
    texts = augment_swapped(pairs, seq.alpha, seq.beta, seq.gamma, seed=derive_seed(config.seed, "swap"))
    return compile_graph(train_ngram(texts, order=seq.ngram_order, vocab=range(S)), S)


@dataclass
class PipelineData:
    """Corpora plus the derived priors and graphs shared by several stages."""

    splits: DataSplits
    config: ExperimentConfig
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def priors(self) -> np.ndarray:
        if "priors" not in self._cache:
            self._cache["priors"] = log_priors(self.splits.train, self.config.corpus.senones)
        return self._cache["priors"]

    @property
    def decode_graph(self) -> SenoneGraph:
        if "decode" not in self._cache:
            self._cache["decode"] = decoding_graph(self.splits.train, self.config.corpus.senones, self.config.seq.ngram_order)
        return self._cache["decode"]

    @property
    def seq_graph(self) -> SenoneGraph:
        if "seq" not in self._cache:
            self._cache["seq"] = sequence_graph(self.splits.train, self.config)
        return self._cache["seq"]


# --- tasks ----------------------------------------------------------------

@dataclass
class _Item:
    inputs: np.ndarray            # T x D (mixed or clean)
    target: object                # task-specific reference
    aux: object = None

    @property
    def length(self) -> int:
        return self.inputs.shape[0]


@dataclass
class Task:
    """A model forward function plus a per-utterance loss on its output."""

    forward: Callable
    utt_loss: Callable  # (output, item) -> (value, d value / d output)


def _ce_clean(logp, item):
    T = logp.shape[0]
    frames = np.arange(T)
    grad = np.zeros_like(logp)
    grad[frames, item.target] = -1.0
    return -float(np.sum(logp[frames, item.target])), grad


def _pit(fn):
    def loss(out, item):
        r = fn(out, item.target)
        return r.value, r.grad
    return loss


def mixed_items(corpus: Corpus, target: str = "alignment") -> list[_Item]:
    items = []
    for u in corpus:
        tgt = u.clean_features() if target == "features" else np.asarray(u.padded_alignments)
        items.append(_Item(u.mixed_features, tgt))
    return items


def clean_items(corpus: Corpus) -> list[_Item]:
    """Every padded clean stream as a single-speaker utterance."""
    return [_Item(s.features, np.asarray(a)) for u in corpus for s, a in zip(u.streams, u.padded_alignments)]


def teacher_posteriors(teacher: M.ModelGraph, utt: MixedUtterance) -> np.ndarray:
    """``N x T x S`` teacher log-posteriors on the parallel clean streams."""
    return M.forward_recognition(teacher, utt.clean_features())


def make_task(stage: str, config: ExperimentConfig, data: PipelineData) -> Task:
    if stage == "frame":
        return Task(M.forward_framewise, _pit(mse_pit_frame))
    if stage == "trace":
        return Task(M.forward_tracing, _pit(mse_pit_utt))
    if stage == "asr":
        return Task(M.forward_recognition, _ce_clean)
    if stage == "joint":
        return Task(M.forward_joint, _pit(ce_pit))
    if stage == "transfer":
        w = config.transfer_weight

        def transfer_loss(out, item):
            r = interpolate(ce_pit(out, item.target), kld_pit(out, item.aux), w)
            return r.value, r.grad
        return Task(M.forward_joint, transfer_loss)
    priors = data.priors
    if stage == "teacher-mmi":
        cfg = SeqLossConfig(kappa=config.seq.kappa, lambda_dc=0.0, boost_b=0.0, boost_b_hat=0.0)
        graph = data.decode_graph

        def mmi_loss(logp, item):
            v, g = lf_mmi(StreamBundle(logp - priors, item.target, graph), 0, cfg)
            return -v, -g
        return Task(M.forward_recognition, mmi_loss)
    if stage == "seqdisc":
        s = config.seq
        cfg = SeqLossConfig(kappa=s.kappa, lambda_dc=s.lambda_dc, boost_b=s.boost_b, boost_b_hat=s.boost_b_hat)
        crit = get_criterion(s.criterion)
        graph = data.seq_graph

        def seq_loss(out, item):
            r = seq_pit(StreamBundle(out - priors[None, None, :], item.target, graph), crit, cfg)
            return r.value, r.grad
        return Task(M.forward_joint, seq_loss)
    raise ConfigError(f"unknown stage {stage!r}")


def stage_items(stage: str, corpus: Corpus, teacher: M.ModelGraph | None = None) -> list[_Item]:
    if stage in ("frame", "trace"):
        return mixed_items(corpus, "features")
    if stage in ("asr", "teacher-mmi"):
        return clean_items(corpus)
    items = mixed_items(corpus)
    if stage == "transfer":
        if teacher is None:
            raise M.StageError("transfer needs a teacher")
        for it, u in zip(items, corpus):
            it.aux = teacher_posteriors(teacher, u)
    return items


def _pad(items: Sequence[_Item]):
    T = max(it.length for it in items)
    D = items[0].inputs.shape[1]
    x = np.zeros((len(items), T, D))
    for b, it in enumerate(items):
        x[b, :it.length] = it.inputs
    return x, np.array([it.length for it in items], dtype=np.int64)


def batch_loss(task: Task, graph: M.ModelGraph, items: Sequence[_Item], want_grad: bool = True):
    """Summed loss over ``items``, its parameter gradient and the frame count."""
    x, lengths = _pad(items)
    if want_grad:
        out, tape = task.forward(graph, x, lengths, record=True)
        upstream = np.zeros_like(out)
    else:
        out = task.forward(graph, x, lengths)
    total = 0.0
    for b, it in enumerate(items):
        L = it.length
        value, grad = task.utt_loss(out[b][..., :L, :], it)
        total += value
        if want_grad:
            upstream[b][..., :L, :] = grad
    frames = int(lengths.sum())
    if not want_grad:
        return total, None, frames
    return total, M.backward(tape, upstream), frames


def _length_batches(items: Sequence[_Item], size: int) -> list[list[int]]:
    order = sorted(range(len(items)), key=lambda i: (items[i].length, i))
    return [order[i:i + size] for i in range(0, len(order), size)]


def objective(task: Task, graph: M.ModelGraph, items: Sequence[_Item], batch: int = 16) -> float:
    """Per-frame objective over ``items`` (no gradient)."""
    total, frames = 0.0, 0
    for idx in _length_batches(items, batch):
        v, _, f = batch_loss(task, graph, [items[i] for i in idx], want_grad=False)
        total += v
        frames += f
    return total / frames


def sgd_train(
    graph: M.ModelGraph,
    task: Task,
    train: Sequence[_Item],
    valid: Sequence[_Item],
    sc: StageConfig,
    seed: int,
    label: str,
    evaluate_fn: Callable[[M.ModelGraph], float] | None = None,
) -> tuple[M.ModelGraph, TrainingCurve]:
    """Momentum SGD for ``sc.epochs`` passes; returns a new graph and its curve.

    Batches group utterances of similar length; the batch order is reshuffled
    every epoch from ``seed``.
    """
    graph = graph.copy()
    rng = np.random.default_rng(seed)
    batches = _length_batches(train, max(1, sc.batch))
    velocity = np.zeros_like(graph.params)
    curve = TrainingCurve()
    for epoch in range(1, sc.epochs + 1):
        total, frames = 0.0, 0
        for k in rng.permutation(len(batches)):
            value, grad, f = batch_loss(task, graph, [train[i] for i in batches[k]])
            if not math.isfinite(value):
                raise FloatingPointError(f"{label}: non-finite objective in epoch {epoch}")
            total += value
            frames += f
            grad /= f
            if sc.clip > 0:
                norm = float(np.linalg.norm(grad))
                if norm > sc.clip:
                    grad *= sc.clip / norm
            velocity = sc.momentum * velocity - sc.lr * grad
            graph.params += velocity
        valid_obj = objective(task, graph, valid) if valid else float("nan")
        wer = evaluate_fn(graph) if evaluate_fn is not None else None
        curve.append(label, epoch, total / frames, valid_obj, wer)
    return graph, curve


# --- stages ---------------------------------------------------------------

def _stage_config(config: ExperimentConfig, stage: str) -> StageConfig:
    return getattr(config, stage.replace("-", "_"))


def _require(graph, stages, what):
    if graph is None:
        raise M.StageError(f"{what} is required")
    if graph.stage not in stages:
        raise M.StageError(f"{what} must be a stage-{'/'.join(stages)} model, got stage {graph.stage}")


def initial_graph(stage: str, config: ExperimentConfig, init=None, teacher=None, asr=None) -> M.ModelGraph:
    """Starting point of a stage, assembled from the available pretrained parts.

    ``init`` is the previous stage's model; ``asr`` (or, for transfer, the
    teacher) supplies the recognition block when ``init`` lacks one.
    """
    shape, seed = config.model, derive_seed(config.seed, "init", stage)
    target = STAGE_GRAPH[stage]
    if stage == "frame":
        return init if init is not None and init.stage == "b" else M.init_graph(shape, "b", seed)
    if stage == "trace":
        _require(init, ("b", "c"), "trace input")
        return init if init.stage == "c" else M.assemble("c", [init], shape, seed)
    if stage == "asr":
        return init if init is not None and init.stage == "d" else M.init_graph(shape, "d", seed)
    if stage == "teacher-mmi":
        _require(init, ("d",), "teacher-mmi input")
        return init
    if stage == "seqdisc":
        _require(init, ("e",), "seqdisc input")
        return init
    if stage == "transfer":
        _require(teacher, ("d",), "transfer teacher")
        _require(init, ("c", "e"), "transfer input")
        # the student's recognition block starts as an exact copy of the teacher
        return init if init.stage == "e" else M.assemble(target, [init, teacher], shape, seed)
    # joint: progressive when pretrained parts exist, flat otherwise
    if init is not None and init.stage == "e":
        return init
    parts = [p for p in (init, asr) if p is not None]
    for p in parts:
        if p.stage not in ("b", "c", "d"):
            raise M.StageError(f"joint stage cannot start from a stage-{p.stage} model")
    return M.assemble("e", parts, shape, seed) if parts else M.init_graph(shape, "e", seed)


def wer_evaluator(data: PipelineData, corpus: Corpus) -> Callable[[M.ModelGraph], float]:
    def fn(graph):
        return evaluate(graph, corpus, data.decode_graph, data.priors, data.config.decode_kappa).wer
    return fn


def run_stage(
    config: ExperimentConfig,
    stage: str,
    data: PipelineData,
    init: M.ModelGraph | None = None,
    teacher: M.ModelGraph | None = None,
    asr: M.ModelGraph | None = None,
    label: str | None = None,
    out_path: str | os.PathLike | None = None,
) -> tuple[M.ModelGraph, TrainingCurve]:
    """Train one stage and optionally write its checkpoint (atomically).

    Args:
        config: experiment settings; the stage's epochs/lr/batch come from it.
        stage: one of the stage names.
        data: corpora plus priors and graphs.
        init: previous-stage model (see :func:`initial_graph`).
        teacher: clean stage-d model for transfer stages.
        asr: pretrained recognition module for progressive joint training.
        label: stage name written to the curve (defaults to ``stage``).
        out_path: checkpoint destination.
    """
    graph = initial_graph(stage, config, init, teacher, asr)
    task = make_task(stage, config, data)
    train = stage_items(stage, data.splits.train, teacher)
    valid = stage_items(stage, data.splits.valid, teacher)
    evaluate_fn = wer_evaluator(data, data.splits.valid) if config.eval_wer and graph.stage == "e" else None
    graph, curve = sgd_train(graph, task, train, valid, _stage_config(config, stage),
                             derive_seed(config.seed, "sgd", label or stage), label or stage, evaluate_fn)
    if out_path is not None:
        extras = {"stage_name": stage}
        if graph.stage in ("d", "e"):
            extras["log_priors"] = [float(p) for p in data.priors]
        M.save_checkpoint(graph, out_path, extras)
    return graph, curve


def train_teacher(config: ExperimentConfig, data: PipelineData, mmi: bool = False,
                  out_path=None) -> tuple[M.ModelGraph, TrainingCurve]:
    """Clean-speech teacher: CE training, optionally followed by MMI fine-tuning."""
    teacher, curve = run_stage(config, "asr", data, out_path=None if mmi else out_path)
    if mmi:
        teacher, c2 = run_stage(config, "teacher-mmi", data, init=teacher, out_path=out_path)
        curve.extend(c2)
    return teacher, curve


def transfer_ensemble(
    config: ExperimentConfig,
    data: PipelineData,
    init: M.ModelGraph,
    teachers: Sequence[M.ModelGraph],
    out_path=None,
) -> tuple[M.ModelGraph, TrainingCurve]:
    """Learn from each teacher one by one, in list order.

    Each teacher gets one transfer stage; curve segments are labelled
    ``transfer`` for a single teacher and ``transfer-1``, ``transfer-2``, ...
    otherwise.
    """
    if not teachers:
        raise ValueError("transfer_ensemble needs at least one teacher")
    curve = TrainingCurve()
    graph = init
    for k, t in enumerate(teachers):
        label = "transfer" if len(teachers) == 1 else f"transfer-{k + 1}"
        last = k == len(teachers) - 1
        graph, c = run_stage(config, "transfer", data, init=graph, teacher=t, label=label,
                             out_path=out_path if last else None)
        curve.extend(c)
    return graph, curve


# --- evaluation -----------------------------------------------------------

def decode_corpus(graph: M.ModelGraph, corpus: Corpus, decode_graph: SenoneGraph,
                  log_priors: np.ndarray, kappa: float, batch: int = 16) -> dict[str, list[list[int]]]:
    """Collapsed hypotheses per utterance id, one list per output stream."""
    if graph.stage != "e":
        raise M.StageError(f"evaluation needs a stage-e model, got stage {graph.stage}")
    items = mixed_items(corpus)
    hyps = {}
    for idx in _length_batches(items, batch):
        x, lengths = _pad([items[i] for i in idx])
        out = M.forward_joint(graph, x, lengths)
        for b, i in enumerate(idx):
            L = lengths[b]
            hyps[corpus[i].id] = [collapse(viterbi(decode_graph, out[b, n, :L] - log_priors, kappa))
                                  for n in range(graph.arity)]
    return {u.id: hyps[u.id] for u in corpus}


def score_hypotheses(corpus: Corpus, hyps: dict[str, list[list[int]]]) -> WerReport:
    reports = []
    for u in corpus:
        if u.id not in hyps:
            raise KeyError(f"no hypotheses for utterance {u.id}")
        refs = [collapse(a) for a in u.padded_alignments]
        reports.append(pairwise_wer(refs, hyps[u.id], utt_id=u.id))
    return aggregate(reports)


def evaluate(graph: M.ModelGraph, corpus: Corpus, decode_graph: SenoneGraph,
             log_priors: np.ndarray, kappa: float = 0.1) -> WerReport:
    """Decode both streams of every utterance and aggregate pairwise WER."""
    return score_hypotheses(corpus, decode_corpus(graph, corpus, decode_graph, log_priors, kappa))


def frame_accuracy(graph: M.ModelGraph, items: Sequence[_Item]) -> float:
    """Frame classification accuracy of a stage-d model on clean items."""
    hit = total = 0
    for it in items:
        pred = np.argmax(M.forward_recognition(graph, it.inputs), axis=-1)
        hit += int(np.sum(pred == it.target))
        total += it.length
    return hit / total


# --- full pipeline --------------------------------------------------------

def run_pipeline(config: ExperimentConfig, outdir: str | os.PathLike,
                 data: PipelineData | None = None) -> dict[str, Path]:
    """Run ``config.stages`` in order, writing checkpoints, curves and a test report.

    Returns the written paths keyed by stage name (plus ``curves`` and
    ``score`` when a stage-e model was produced).
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    data = data or PipelineData(make_corpora(config), config)
    curves_path = outdir / "curves.csv"
    if curves_path.exists():
        curves_path.unlink()
    paths: dict[str, Path] = {}
    models: dict[str, M.ModelGraph] = {}
    current = None
    teachers = [M.load_checkpoint(p)[0] for p in config.teachers]
    for stage in config.stages:
        path = outdir / f"{stage}.ckpt"
        if stage == "frame":
            g, c = run_stage(config, stage, data, out_path=path)
        elif stage == "trace":
            g, c = run_stage(config, stage, data, init=models.get("frame"), out_path=path)
        elif stage in ("asr", "teacher-mmi"):
            g, c = run_stage(config, stage, data, init=models.get("asr"), out_path=path)
        elif stage == "joint":
            g, c = run_stage(config, stage, data, init=models.get("trace"),
                             asr=models.get("teacher-mmi", models.get("asr")), out_path=path)
        elif stage == "transfer":
            ts = teachers or [models.get("teacher-mmi", models.get("asr"))]
            start = current if current is not None and current.stage == "e" else models.get("trace")
            g, c = transfer_ensemble(config, data, start, ts, out_path=path)
        else:  # seqdisc
            g, c = run_stage(config, stage, data, init=current, out_path=path)
        models[stage] = g
        if g.stage == "e":
            current = g
        paths[stage] = path
        emit_curves(c, curves_path)
    paths["curves"] = curves_path
    if current is not None:
        report = evaluate(current, data.splits.test, data.decode_graph, data.priors, config.decode_kappa)
        paths["score"] = write_score_report(report, outdir / "score.txt")[0]
    return paths
