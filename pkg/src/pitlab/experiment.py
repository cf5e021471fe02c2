"""Desk-scale directional experiment.

For one seed, trains on a synthetic two-speaker corpus:

* a progressive model (frame-wise and tracing pretraining, clean ASR
  pretraining, joint CE-PIT) and a flat model (joint CE-PIT from random
  initialization) with the same joint budget;
* a self-transfer model (interpolated CE/KLD with ``w = 0.5`` and the clean
  ASR model as teacher) started from the same pretrained modules;
* an LF-DC-bMMI fine-tuned copy of the progressive model.

It then reports validation CE-PIT and test pairwise WER.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

from . import harness as H
from .config import ExperimentConfig, parse_config

DIRECTIONAL_SETTINGS = """\
corpus.train_utts=200
corpus.test_utts=100
frame.epochs=5
frame.lr=0.02
frame.batch=8
trace.epochs=8
trace.lr=0.02
trace.batch=8
asr.epochs=5
asr.lr=0.05
asr.batch=8
joint.epochs=12
joint.lr=0.01
joint.batch=8
transfer.epochs=12
transfer.lr=0.01
transfer.batch=8
transfer_weight=0.5
seqdisc.epochs=3
seqdisc.lr=0.05
seqdisc.batch=8
seq.criterion=lf-dc-bmmi
decode_kappa=1.0
stages=frame,trace,asr,joint,seqdisc
"""


def directional_config(seed: int) -> ExperimentConfig:
    return parse_config(DIRECTIONAL_SETTINGS + f"seed={seed}\n")


@dataclass
class DirectionalResult:
    seed: int
    progressive_valid: float   # final validation CE-PIT per frame
    flat_valid: float
    wer_ce: float              # test pairwise WER of the progressive CE-PIT model
    wer_transfer: float
    wer_seqdisc: float
    seconds: float

    @property
    def progressive_wins(self) -> bool:
        return self.progressive_valid < self.flat_valid

    @property
    def transfer_wins(self) -> bool:
        return self.wer_transfer < self.wer_ce

    @property
    def seqdisc_wins(self) -> bool:
        return self.wer_seqdisc < self.wer_ce


def run_directional(seed: int, config: ExperimentConfig | None = None) -> DirectionalResult:
    start = time.perf_counter()
    config = config or directional_config(seed)
    data = H.PipelineData(H.make_corpora(config), config)

    frame, _ = H.run_stage(config, "frame", data)
    trace, _ = H.run_stage(config, "trace", data, init=frame)
    teacher, _ = H.run_stage(config, "asr", data)
    progressive, prog_curve = H.run_stage(config, "joint", data, init=trace, asr=teacher)
    _, flat_curve = H.run_stage(config, "joint", data, label="joint-flat")
    transfer, _ = H.run_stage(config, "transfer", data, init=trace, teacher=teacher)
    seqdisc, _ = H.run_stage(config, "seqdisc", data, init=progressive)

    def wer(graph):
        return H.evaluate(graph, data.splits.test, data.decode_graph, data.priors, config.decode_kappa).wer

    return DirectionalResult(
        seed=seed,
        progressive_valid=prog_curve.rows[-1].valid_obj,
        flat_valid=flat_curve.rows[-1].valid_obj,
        wer_ce=wer(progressive),
        wer_transfer=wer(transfer),
        wer_seqdisc=wer(seqdisc),
        seconds=time.perf_counter() - start,
    )
