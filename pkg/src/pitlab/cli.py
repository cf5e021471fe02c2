"""Command-line entry point: ``pitlab <subcommand> ...``.

Relative output paths are resolved under ``$PITLAB_OUTDIR`` when it is set.
Exit codes: 0 success, 1 usage error, 2 configuration or invariant
violation, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import harness as H
from . import model as M
from .config import OUTDIR_ENV, ConfigError, dump_config, load_config, set_key, validate
from .decode import write_score_report
from .synthdata import read_corpus, write_corpus

EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def out_path(path: str) -> Path:
    p = Path(path)
    base = os.environ.get(OUTDIR_ENV)
    return p if p.is_absolute() or not base else Path(base) / p


def _config(args):
    config = load_config(args.config)
    for kv in args.set or []:
        if "=" not in kv:
            raise UsageError(f"--set expects key=value, got {kv!r}")
        key, value = kv.split("=", 1)
        config = set_key(config, key.strip(), value.strip())
    validate(config)
    return config


def _data(args, config) -> H.PipelineData:
    root = Path(args.data)
    splits = H.DataSplits(*(read_corpus(root / name) for name in ("train", "valid", "test")))
    return H.PipelineData(splits, config)


def _load(path) -> M.ModelGraph:
    if not Path(path).exists():
        raise FileNotFoundError(f"missing checkpoint {path}")
    return M.load_checkpoint(path)[0]


def _finish_stage(args, graph_curve):
    _, curve = graph_curve
    if args.curves:
        H.emit_curves(curve, out_path(args.curves))
    last = curve.rows[-1] if curve.rows else None
    if last is not None:
        print(f"{last.stage} epoch {last.epoch}: train {last.train_obj:.6g} valid {last.valid_obj:.6g}")
    print(f"wrote {out_path(args.out)}")


def cmd_synth(args):
    config = _config(args)
    root = out_path(args.out)
    splits = H.make_corpora(config)
    for name in ("train", "valid", "test"):
        write_corpus(getattr(splits, name), root / name)
    (root / "config.txt").write_text(dump_config(config))
    print(f"wrote {len(splits.train)}/{len(splits.valid)}/{len(splits.test)} utterances to {root}")


def _stage_cmd(stage):
    def run(args):
        config = _config(args)
        data = _data(args, config)
        init = _load(args.init) if getattr(args, "init", None) else None
        asr = _load(args.asr) if getattr(args, "asr", None) else None
        result = H.run_stage(config, stage, data, init=init, asr=asr, out_path=out_path(args.out))
        _finish_stage(args, result)
    return run


def cmd_train_teacher(args):
    config = _config(args)
    data = _data(args, config)
    result = H.train_teacher(config, data, mmi=args.mmi, out_path=out_path(args.out))
    _finish_stage(args, result)


def cmd_train_transfer(args):
    config = _config(args)
    data = _data(args, config)
    teachers = [_load(t) for t in (args.teacher or config.teachers)]
    if not teachers:
        raise ConfigError("train-transfer needs --teacher or the teachers config key")
    result = H.transfer_ensemble(config, data, _load(args.init), teachers, out_path=out_path(args.out))
    _finish_stage(args, result)


def _priors(path, data) -> np.ndarray:
    extras = M.load_checkpoint(path)[1]
    return np.array(extras["log_priors"]) if "log_priors" in extras else data.priors


def write_hypotheses(hyps: dict[str, list[list[int]]], path: Path) -> None:
    lines = [f"{uid}\t{n}\t{' '.join(map(str, h))}" for uid, streams in hyps.items() for n, h in enumerate(streams)]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def read_hypotheses(path: Path) -> dict[str, list[list[int]]]:
    hyps: dict[str, dict[int, list[int]]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'id<TAB>stream<TAB>tokens'")
        hyps.setdefault(parts[0], {})[int(parts[1])] = [int(t) for t in parts[2].split()]
    return {uid: [s[n] for n in sorted(s)] for uid, s in hyps.items()}


def cmd_decode(args):
    config = _config(args)
    data = _data(args, config)
    graph = _load(args.model)
    corpus = getattr(data.splits, args.split)
    hyps = H.decode_corpus(graph, corpus, data.decode_graph, _priors(args.model, data), config.decode_kappa)
    write_hypotheses(hyps, out_path(args.out))
    print(f"wrote {out_path(args.out)}")


def cmd_score(args):
    corpus = read_corpus(Path(args.data) / args.split)
    report = H.score_hypotheses(corpus, read_hypotheses(Path(args.hyps)))
    write_score_report(report, out_path(args.out))
    print(f"WER {report.wer:.6f} ({report.errors}/{report.ref_count})")


def cmd_curves(args):
    merged = H.TrainingCurve()
    for path in args.inputs:
        merged.extend(H.read_curves(path))
    dest = out_path(args.out)
    if dest.exists():
        dest.unlink()
    H.emit_curves(merged, dest)
    print(f"wrote {len(merged)} rows to {dest}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pitlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_, data=True, out_help="output path"):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key=value config file (defaults apply otherwise)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if data:
            p.add_argument("--data", required=True, help="corpus directory written by 'synth'")
        p.add_argument("--out", required=True, help=out_help)
        p.set_defaults(func=fn)
        return p

    add("synth", cmd_synth, "generate train/valid/test corpora", data=False, out_help="output directory")
    stage_help = {
        "pretrain-frame": ("frame", "frame-wise separation pretraining (stage b)"),
        "pretrain-trace": ("trace", "speaker tracing pretraining (stage c)"),
        "pretrain-asr": ("asr", "clean speech recognition pretraining (stage d)"),
        "train-joint": ("joint", "joint CE-PIT training (stage e)"),
        "train-seqdisc": ("seqdisc", "sequence-discriminative fine-tuning"),
    }
    for name, (stage, help_) in stage_help.items():
        p = add(name, _stage_cmd(stage), help_, out_help="checkpoint to write")
        p.add_argument("--curves", help="append training-curve rows to this CSV")
        if stage != "frame" and stage != "asr":
            p.add_argument("--init", required=stage in ("trace", "seqdisc"), help="input checkpoint")
        if stage == "joint":
            p.add_argument("--asr", help="pretrained recognition module (stage d)")

    p = add("train-teacher", cmd_train_teacher, "train a clean-speech teacher", out_help="checkpoint to write")
    p.add_argument("--mmi", action="store_true", help="fine-tune the CE teacher with LF-MMI")
    p.add_argument("--curves")
    p = add("train-transfer", cmd_train_transfer, "self-transfer from one or more teachers", out_help="checkpoint to write")
    p.add_argument("--init", required=True, help="stage-c or stage-e checkpoint")
    p.add_argument("--teacher", action="append", help="teacher checkpoint (repeat for an ensemble, used in order)")
    p.add_argument("--curves")
    p = add("decode", cmd_decode, "Viterbi-decode both output streams", out_help="hypothesis file")
    p.add_argument("--model", required=True, help="stage-e checkpoint")
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))

    p = sub.add_parser("score", help="pairwise WER report for a hypothesis file")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--hyps", required=True)
    p.add_argument("--out", required=True, help="report path (a .csv twin is written next to it)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("curves", help="concatenate curve CSVs in order")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curves)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    except (ConfigError, M.StageError, M.IncompatibleError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except Exception as e:  # noqa: BLE001 - reported as a runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
