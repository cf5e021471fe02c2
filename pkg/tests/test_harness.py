import numpy as np
import pytest

from pitlab import harness as H
from pitlab import model as M
from pitlab.config import (
    KEY_DOCS, ConfigError, ExperimentConfig, dump_config, load_config, parse_config, set_key, validate_stage_order,
)
from pitlab.pitloss import ce_pit, kld_pit

TINY = """\
corpus.dim=4
corpus.senones=5
model.dim=4
model.senones=5
model.frame_width=6
model.trace_width=4
model.trace_layers=1
model.recog_width=4
model.recog_layers=1
corpus.train_speakers=3
corpus.valid_speakers=2
corpus.test_speakers=2
corpus.train_utts=10
corpus.test_utts=4
corpus.min_len=3
corpus.max_len=6
frame.batch=4
trace.batch=4
asr.batch=4
joint.batch=4
transfer.batch=4
seqdisc.batch=4
teacher_mmi.batch=4
frame.epochs=1
trace.epochs=1
asr.epochs=2
teacher_mmi.epochs=2
joint.epochs=2
transfer.epochs=1
seqdisc.epochs=1
seq.ngram_order=2
"""


@pytest.fixture(scope="module")
def tiny():
    config = parse_config(TINY)
    return config, H.PipelineData(H.make_corpora(config), config)


# --- config ---------------------------------------------------------------

@pytest.mark.parametrize("stages", [
    "trace,frame", "frame,trace,joint,asr", "frame,trace,asr,seqdisc", "frame,trace,asr,joint,joint",
    "frame,trace,asr,transfer,teacher-mmi", "teacher-mmi", "frame,bogus",
])
def test_stage_order_rejections(stages):
    with pytest.raises(ConfigError):
        validate_stage_order(stages.split(","))


@pytest.mark.parametrize("stages", [
    "frame,trace,asr,joint,seqdisc", "frame,trace,asr,teacher-mmi,transfer,seqdisc", "asr", "frame,trace",
    "frame,trace,asr,joint,transfer,seqdisc",
])
def test_stage_order_accepts(stages):
    validate_stage_order(stages.split(","))


def test_transfer_needs_a_teacher_source():
    with pytest.raises(ConfigError):
        parse_config("stages=frame,trace,transfer")
    parse_config("stages=frame,trace,transfer\nteachers=t.ckpt")


def test_config_errors():
    with pytest.raises(ConfigError):
        parse_config("nope=1")
    with pytest.raises(ConfigError):
        parse_config("joint.epochs=many")
    with pytest.raises(ConfigError):
        parse_config("corpus.dim=8")
    with pytest.raises(ConfigError):
        parse_config("seq.criterion=mpe")
    with pytest.raises(ConfigError):
        parse_config("just words")


def test_config_dump_parse_round_trip(tmp_path):
    c = parse_config("# comment\nseed=3\njoint.lr=0.5  # trailing\nseq.augment=false\nstages=frame,trace")
    assert c.seed == 3 and c.joint.lr == 0.5 and c.seq.augment is False and c.stages == ("frame", "trace")
    text = dump_config(c)
    assert parse_config(text) == c
    (tmp_path / "c.txt").write_text(text)
    assert load_config(tmp_path / "c.txt") == c
    assert load_config(None) == ExperimentConfig()
    assert [line.split("=")[0] for line in text.splitlines()] == list(KEY_DOCS)


def test_set_key_returns_copy():
    c = ExperimentConfig()
    d = set_key(c, "teacher_mmi.epochs", "3")
    assert d.teacher_mmi.epochs == 3 and c.teacher_mmi.epochs == 1


# --- curves ---------------------------------------------------------------

def test_curve_round_trip(tmp_path):
    c = H.TrainingCurve()
    c.append("joint", 1, 1 / 3, 2 / 3, None)
    c.append("joint", 2, 0.123456789012, 0.5, 0.25)
    path = H.emit_curves(c, tmp_path / "c.csv")
    assert path.read_text().splitlines()[0] == "stage,epoch,train_obj,valid_obj,valid_wer"
    assert path.read_text().splitlines()[1] == "joint,1,0.333333333,0.666666667,"
    assert H.read_curves(path).rows == c.rows


def test_empty_curve_is_header_only(tmp_path):
    path = H.emit_curves(H.TrainingCurve(), tmp_path / "e.csv")
    assert path.read_text() == "stage,epoch,train_obj,valid_obj,valid_wer\n"


def test_curves_append_in_order(tmp_path):
    a, b = H.TrainingCurve(), H.TrainingCurve()
    a.append("frame", 1, 1.0, 1.0)
    a.append("frame", 2, 0.5, 0.6)
    b.append("trace", 1, 2.0, 2.0)
    path = tmp_path / "c.csv"
    H.emit_curves(a, path)
    H.emit_curves(b, path)
    rows = H.read_curves(path).rows
    assert [(r.stage, r.epoch) for r in rows] == [("frame", 1), ("frame", 2), ("trace", 1)]


def test_curve_epochs_increase():
    c = H.TrainingCurve()
    c.append("joint", 1, 1.0, 1.0)
    with pytest.raises(ValueError):
        c.append("joint", 1, 1.0, 1.0)


def test_curve_io_errors_name_the_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        H.emit_curves(H.TrainingCurve(), blocker / "c.csv")
    with pytest.raises(OSError, match="missing.csv"):
        H.read_curves(tmp_path / "missing.csv")


# --- data -----------------------------------------------------------------

def test_corpora_use_disjoint_speakers(tiny):
    _, data = tiny
    s = data.splits
    assert (len(s.train), len(s.valid), len(s.test)) == (10, 1, 4)
    spk = {name: {x for u in getattr(s, name) for x in u.speakers} for name in ("train", "valid", "test")}
    assert not spk["train"] & spk["valid"] and not spk["train"] & spk["test"]


def test_sequence_graph_is_normalized(tiny):
    _, data = tiny
    g = data.seq_graph
    for q in range(g.num_states):
        assert abs(np.exp(g.weight[g.src == q]).sum() - 1) <= 1e-9


# --- stages ---------------------------------------------------------------

def test_joint_two_epochs(tiny):
    config, data = tiny
    g, curve = H.run_stage(config, "joint", data)
    assert len(curve) == 2 and all(np.isfinite([r.train_obj, r.valid_obj]).all() for r in curve.rows)
    assert g.stage == "e"


def test_stage_writes_checkpoint(tiny, tmp_path):
    config, data = tiny
    g, _ = H.run_stage(config, "asr", data, out_path=tmp_path / "asr.ckpt")
    h, extras = M.load_checkpoint(tmp_path / "asr.ckpt")
    assert np.array_equal(h.params, g.params)
    assert extras["stage_name"] == "asr" and np.allclose(extras["log_priors"], data.priors)


def test_stage_prerequisites(tiny):
    config, data = tiny
    with pytest.raises(M.StageError):
        H.run_stage(config, "trace", data)
    with pytest.raises(M.StageError):
        H.run_stage(config, "seqdisc", data)
    with pytest.raises(M.StageError):
        H.run_stage(config, "transfer", data, init=M.init_graph(config.model, "c"))


def pretrained_tracing(config):
    return M.assemble("c", [M.init_graph(config.model, "b")], config.model)


def test_transfer_starts_from_teacher_copy(tiny):
    config, data = tiny
    teacher, _ = H.run_stage(config, "asr", data)
    student = H.initial_graph("transfer", config, init=pretrained_tracing(config), teacher=teacher)
    for name in teacher.slices:
        assert np.array_equal(student.param(name), teacher.param(name))
    # identity tracing: feeding the clean streams straight to the student's
    # recognition module reproduces the teacher posteriors exactly
    u = data.splits.train[0]
    clean = u.clean_features()
    for n in range(2):
        assert np.array_equal(M.forward_recognition(student, clean[n], instance=n),
                              M.forward_recognition(teacher, clean[n]))
    # the step-0 KLD term then equals the teacher entropy
    post = np.stack([M.forward_recognition(student, clean[n]) for n in range(2)])
    t = H.teacher_posteriors(teacher, u)
    assert kld_pit(post, t).value == pytest.approx(-np.sum(np.exp(t) * t) / 2, abs=1e-12)


def test_transfer_ensemble_labels_and_errors(tiny):
    config, data = tiny
    teacher, _ = H.run_stage(config, "asr", data)
    c = H.initial_graph("joint", config)
    with pytest.raises(ValueError):
        H.transfer_ensemble(config, data, c, [])
    single, curve1 = H.transfer_ensemble(config, data, c, [teacher])
    direct, _ = H.run_stage(config, "transfer", data, init=c, teacher=teacher)
    assert np.array_equal(single.params, direct.params)
    assert {r.stage for r in curve1.rows} == {"transfer"}
    _, curve3 = H.transfer_ensemble(config, data, c, [teacher] * 3)
    assert [r.stage for r in curve3.rows] == ["transfer-1", "transfer-2", "transfer-3"]


def test_transfer_ensemble_lowers_training_objective(tiny):
    config, data = tiny
    teacher, _ = H.run_stage(config, "asr", data)
    start = H.initial_graph("joint", config)
    task = H.make_task("transfer", config, data)
    items = H.stage_items("transfer", data.splits.train, teacher)
    before = H.objective(task, start, items)
    cfg = set_key(set_key(config, "transfer.epochs", "3"), "transfer.lr", "0.05")
    end, _ = H.transfer_ensemble(cfg, data, start, [teacher, teacher])
    assert H.objective(task, end, items) <= before


def test_teacher_mmi_does_not_lower_mmi_objective(tiny):
    config, data = tiny
    ce, _ = H.run_stage(config, "asr", data)
    task = H.make_task("teacher-mmi", config, data)
    items = H.stage_items("teacher-mmi", data.splits.train)
    mmi, _ = H.train_teacher(config, data, mmi=True)
    assert H.objective(task, mmi, items) <= H.objective(task, ce, items)


def test_teacher_is_bit_stable(tiny):
    config, data = tiny
    a, _ = H.train_teacher(config, data)
    b, _ = H.train_teacher(config, data)
    x = data.splits.test[0].clean_features()[0]
    assert np.array_equal(M.forward_recognition(a, x), M.forward_recognition(b, x))


def test_evaluate_requires_joint_model(tiny):
    config, data = tiny
    with pytest.raises(M.StageError):
        H.evaluate(M.init_graph(config.model, "d"), data.splits.test, data.decode_graph, data.priors)


def test_evaluate_is_deterministic(tiny):
    config, data = tiny
    g = M.init_graph(config.model, "e", 1)
    a = H.evaluate(g, data.splits.test, data.decode_graph, data.priors, 1.0)
    b = H.evaluate(g, data.splits.test, data.decode_graph, data.priors, 1.0)
    assert (a.errors, a.ref_count) == (b.errors, b.ref_count) and len(a.utterances) == 4


def test_seqdisc_stage_runs(tiny):
    config, data = tiny
    joint, _ = H.run_stage(config, "joint", data)
    g, curve = H.run_stage(config, "seqdisc", data, init=joint)
    assert len(curve) == 1 and np.isfinite(curve.rows[0].train_obj)


def test_batched_loss_matches_per_utterance(tiny):
    config, data = tiny
    g = M.init_graph(config.model, "e", 2)
    task = H.make_task("joint", config, data)
    items = H.stage_items("joint", data.splits.train)[:4]
    total, grad, frames = H.batch_loss(task, g, items)
    parts = [H.batch_loss(task, g, [it]) for it in items]
    assert abs(total - sum(p[0] for p in parts)) <= 1e-9
    assert np.allclose(grad, sum(p[1] for p in parts), atol=1e-10)
    assert frames == sum(it.length for it in items)
    out = M.forward_joint(g, items[0].inputs)
    assert parts[0][0] == pytest.approx(ce_pit(out, items[0].target).value, abs=1e-9)


def test_pipeline_writes_outputs(tiny, tmp_path):
    config, data = tiny
    config = set_key(config, "stages", "frame,trace,asr,joint")
    paths = H.run_pipeline(config, tmp_path, data)
    for stage in ("frame", "trace", "asr", "joint"):
        assert paths[stage].exists()
    rows = H.read_curves(paths["curves"]).rows
    assert [r.stage for r in rows] == ["frame", "trace", "asr", "asr", "joint", "joint"]
    assert paths["score"].read_text().splitlines()[-1].startswith("SUMMARY")
