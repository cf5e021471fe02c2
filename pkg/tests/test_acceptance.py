"""Acceptance suite.

Each test checks one numbered acceptance criterion at its stated tolerance
and prints a single ``criterion N PASS/FAIL`` line to the terminal.
"""
import filecmp
import itertools
import math
import time

import numpy as np
import pytest

from oracles import (
    brute_edit_distance, brute_pit, central_difference, enum_forward_backward, floored_relative_error, paths,
    random_graph,
)
from pitlab import model as M
from pitlab.config import parse_config
from pitlab.decode import pairwise_wer
from pitlab.experiment import run_directional
from pitlab.graphlm import (
    augment_swapped, backward_pass, arc_scores, compile_graph, forward_backward, forward_pass, train_ngram,
)
from pitlab.harness import run_pipeline
from pitlab.pitloss import ce_pit, interpolate, kld_pit, mse_pit_frame, mse_pit_utt
from pitlab.seqdisc import (
    SeqLossConfig, StreamBundle, lf_bmmi, lf_dc_bmmi, lf_dc_mmi, lf_mmi, senone_log_priors, seq_pit,
)
from test_harness import TINY


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def log_softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


# --- 1: gradients through the full joint model ----------------------------

GRAD_SHAPE = M.ModelShape(dim=4, senones=5, arity=2, frame_layers=2, frame_width=5, context_radius=1,
                          trace_layers=2, trace_width=4, recog_layers=1, recog_width=4)
GRAD_TOL = 1e-5
# Central differences at step 1e-5 carry about eps*|loss|/h ~ 1e-10 of roundoff,
# so components far below the largest gradient cannot be resolved to GRAD_TOL;
# relative errors are floored at this fraction of max|numeric|.
GRAD_FLOOR = 1e-3


def gradient_case(seed):
    """Random stage-e model, input, targets and one closure per loss.

    Each closure maps the model to ``(value, upstream)`` where ``upstream`` is
    the gradient of the value with respect to the forward output it consumes.
    """
    rng = np.random.default_rng(seed)
    S, N = GRAD_SHAPE.senones, GRAD_SHAPE.arity
    T = int(rng.integers(3, 7))
    g = M.init_graph(GRAD_SHAPE, "e", seed)
    g.params[:] = rng.normal(scale=0.5, size=g.params.shape)
    x = rng.normal(size=(T, GRAD_SHAPE.dim))
    clean = rng.normal(size=(N, T, GRAD_SHAPE.trace_width))
    labels = rng.integers(0, S, size=(N, T))
    teacher = log_softmax(2.0 * rng.normal(size=(N, T, S)))
    priors = senone_log_priors([rng.integers(0, S, size=12) for _ in range(4)], S)
    lm = compile_graph(train_ngram([rng.integers(0, S, size=10) for _ in range(4)], order=2, vocab=range(S)))
    cfg = SeqLossConfig()

    def tracing_loss(fn):
        return "trace", lambda out: (lambda r: (r.value, r.grad))(fn(out, clean))

    def joint_loss(fn):
        return "joint", lambda out: (lambda r: (r.value, r.grad))(fn(out))

    def stream_criterion(fn):
        def run(out):
            v, grad = fn(StreamBundle(out - priors, labels, lm), 0, cfg)
            up = np.zeros_like(out)
            up[0] = grad
            return v, up
        return "joint", run

    def seq(out):
        r = seq_pit(StreamBundle(out - priors, labels, lm), "lf-dc-bmmi", cfg)
        return r.value, r.grad

    losses = {
        "F-PIT": tracing_loss(mse_pit_frame),
        "U-PIT": tracing_loss(mse_pit_utt),
        "CE-PIT": joint_loss(lambda o: ce_pit(o, labels)),
        "KLD-PIT": joint_loss(lambda o: kld_pit(o, teacher)),
        "interpolated": joint_loss(lambda o: interpolate(ce_pit(o, labels), kld_pit(o, teacher), 0.5)),
        "LF-MMI": stream_criterion(lf_mmi),
        "LF-DC-MMI": stream_criterion(lf_dc_mmi),
        "LF-bMMI": stream_criterion(lf_bmmi),
        "LF-DC-bMMI": stream_criterion(lf_dc_bmmi),
        "SEQ-PIT": ("joint", seq),
    }
    return g, x, losses


def forward(kind, g, x, record=False):
    return M.forward_tracing(g, x, record=record) if kind == "trace" else M.forward_joint(g, x, record=record)


def test_criterion_1_gradient_suite(report):
    start = time.perf_counter()
    worst, tight = {}, {}
    for seed in range(5):
        g, x, losses = gradient_case(seed)
        for name, (kind, loss) in losses.items():
            out, tape = forward(kind, g, x, record=True)
            analytic = M.backward(tape, loss(out)[1])

            def value(p):
                old = g.params.copy()
                g.params[:] = p
                try:
                    return loss(forward(kind, g, x))[0]
                finally:
                    g.params[:] = old
            numeric = central_difference(value, g.params.copy(), h=1e-5)
            err = floored_relative_error(analytic, numeric, GRAD_FLOOR)
            worst[name] = max(worst.get(name, 0.0), err)
            tight[name] = max(tight.get(name, 0.0), floored_relative_error(analytic, numeric, 1e-4))
    seconds = time.perf_counter() - start
    ok = max(worst.values()) < GRAD_TOL and seconds < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, ok, f"max relative error per loss over 5 seeds: {detail}; "
                  f"worst with a 1e-4 floor {max(tight.values()):.1e}; {seconds:.0f}s")


# --- 2: permutation oracles -------------------------------------------------

def mse(a, b):
    return float(np.mean((a - b) ** 2))


def pit_instance_errors(rng, N):
    """Worst value error of every PIT loss and pairwise WER on one random instance."""
    T, S, D = int(rng.integers(1, 6)), 4, 3
    o, r = rng.normal(size=(N, T, D)), rng.normal(size=(N, T, D))
    lp, t = log_softmax(rng.normal(size=(N, T, S))), log_softmax(rng.normal(size=(N, T, S)))
    lab = rng.integers(0, S, size=(N, T))
    errs, perms_ok = {}, True

    def check(name, result, value, perm):
        nonlocal perms_ok
        errs[name] = abs(result.value - value)
        perms_ok &= result.permutation == perm

    frames = [brute_pit(lambda i, j: mse(o[i, k], r[j, k]), N) for k in range(T)]
    check("F-PIT", mse_pit_frame(o, r), sum(v for v, _ in frames), [p for _, p in frames])
    check("U-PIT", mse_pit_utt(o, r), *brute_pit(lambda i, j: sum(mse(o[i, k], r[j, k]) for k in range(T)), N))
    ce = lambda i, j: -sum(lp[i, k, lab[j, k]] for k in range(T))  # noqa: E731
    kl = lambda i, j: -float(np.sum(np.exp(t[j]) * lp[i]))  # noqa: E731
    check("CE-PIT", ce_pit(lp, lab), *brute_pit(ce, N))
    check("KLD-PIT", kld_pit(lp, t), *brute_pit(kl, N))
    check("interpolated", interpolate(ce_pit(lp, lab), kld_pit(lp, t), 0.5),
          *brute_pit(lambda i, j: 0.5 * ce(i, j) + 0.5 * kl(i, j), N))

    refs = [rng.integers(1, 4, size=int(rng.integers(1, 5))).tolist() for _ in range(N)]
    hyps = [rng.integers(1, 4, size=int(rng.integers(0, 5))).tolist() for _ in range(N)]
    totals = {p: sum(sum(brute_edit_distance(refs[p[n]], hyps[n])[:3]) for n in range(N))
              for p in itertools.permutations(range(N))}
    w = pairwise_wer(refs, hyps)
    errs["pairwise WER"] = abs(w.errors - min(totals.values()))
    perms_ok &= w.assignment == min(totals, key=lambda p: (totals[p], p))
    return errs, perms_ok


def seq_pit_error(rng, N):
    S, T = 4, int(rng.integers(2, 5))
    lm = compile_graph(train_ngram([rng.integers(0, S, size=8) for _ in range(3)], order=2, vocab=range(S)))
    b = StreamBundle(rng.normal(size=(N, T, S)), rng.integers(0, S, size=(N, T)), lm)
    cfg = SeqLossConfig()
    # the criterion for stream i depends on the whole pairing through the DC terms
    best = None
    for p in itertools.permutations(range(N)):
        v = -sum(lf_dc_bmmi(b, i, cfg, pairing=p)[0] for i in range(N)) / N
        if best is None or v < best[0]:
            best = (v, p)
    r = seq_pit(b, "lf-dc-bmmi", cfg)
    return abs(r.value - best[0]), r.permutation == best[1]


def test_criterion_2_permutation_oracles(report):
    worst, perms_ok = {}, True
    for N in (2, 3):
        rng = np.random.default_rng(100 + N)
        for _ in range(100):
            errs, ok = pit_instance_errors(rng, N)
            e, ok2 = seq_pit_error(rng, N)
            errs["SEQ-PIT"] = e
            perms_ok &= ok and ok2
            for k, v in errs.items():
                worst[k] = max(worst.get(k, 0.0), v)
    ok = perms_ok and max(worst.values()) <= 1e-10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(2, ok, f"100 instances each for N=2,3; worst |value - enumeration|: {detail}; "
                  f"winning permutations {'match' if perms_ok else 'DIFFER'}")


# --- 3: forward-backward identities ------------------------------------------

def test_criterion_3_forward_backward(report):
    rng = np.random.default_rng(3)
    kappa = 0.7
    fb_gap = marg_gap = fd_err = enum_gap = 0.0
    graphs = 0
    for states, senones, T in itertools.product(range(1, 5), range(1, 5), range(1, 5)):
        for _ in range(3):
            g = random_graph(rng, states, senones, arcs_per_state=3)
            if not paths(g, T):
                continue
            graphs += 1
            ll = rng.normal(size=(T, senones))
            scores = arc_scores(g, ll, kappa)
            a, b = forward_pass(g, scores), backward_pass(g, scores)
            fwd = np.logaddexp.reduce(a[T] + g.final)
            bwd = b[0][g.start]
            fb_gap = max(fb_gap, abs(fwd - bwd))
            logz, occ = forward_backward(g, ll, kappa)
            marg_gap = max(marg_gap, float(np.max(np.abs(occ.senones.sum(axis=1) - 1.0))))
            ez, earcs, esen = enum_forward_backward(g, ll, kappa)
            enum_gap = max(enum_gap, abs(logz - ez), float(np.max(np.abs(occ.senones - esen))),
                           float(np.max(np.abs(occ.arcs - earcs))))
            num = central_difference(lambda m: forward_backward(g, m, kappa)[0], ll)
            fd_err = max(fd_err, float(np.max(np.abs(num - kappa * occ.senones))))
    lm = compile_graph(train_ngram([rng.integers(0, 5, size=30) for _ in range(5)], order=3, vocab=range(5)))
    for _ in range(10):
        ll = rng.normal(size=(12, 5))
        logz, occ = forward_backward(lm, ll, kappa)
        marg_gap = max(marg_gap, float(np.max(np.abs(occ.senones.sum(axis=1) - 1.0))))
        num = central_difference(lambda m: forward_backward(lm, m, kappa)[0], ll)
        fd_err = max(fd_err, float(np.max(np.abs(num - kappa * occ.senones))))
    ok = fb_gap <= 1e-10 and marg_gap <= 1e-9 and fd_err <= 1e-6 and enum_gap <= 1e-8
    report(3, ok, f"{graphs} enumerated graphs plus trigram graphs: |fwd-bwd logZ| {fb_gap:.1e}, "
                  f"marginal sum {marg_gap:.1e}, FD {fd_err:.1e}, enumeration {enum_gap:.1e}")


# --- 4: reduction chain -------------------------------------------------------

def test_criterion_4_reduction_chain(report):
    rng = np.random.default_rng(4)
    exact = True
    for _ in range(20):
        S = 5
        lm = compile_graph(train_ngram([rng.integers(0, S, size=10) for _ in range(4)], order=2, vocab=range(S)))
        b = StreamBundle(rng.normal(size=(2, 6, S)), rng.integers(0, S, size=(2, 6)), lm)
        base = lf_mmi(b, 0, SeqLossConfig())
        for v, g in (
            lf_dc_bmmi(b, 0, SeqLossConfig(boost_b=0.0, boost_b_hat=0.0)),
            lf_bmmi(b, 0, SeqLossConfig(boost_b=0.0)),
            lf_dc_mmi(b, 0, SeqLossConfig(lambda_dc=0.0)),
        ):
            exact &= v == base[0] and np.array_equal(g, base[1])
        lp = log_softmax(rng.normal(size=(2, 6, S)))
        lab = rng.integers(0, S, size=(2, 6))
        onehot = np.where(np.eye(S, dtype=bool)[lab], 0.0, -np.inf)
        ce, kl = ce_pit(lp, lab), kld_pit(lp, onehot)
        exact &= ce.value == kl.value and np.array_equal(ce.grad, kl.grad)
        teacher = log_softmax(rng.normal(size=(2, 6, S)))
        hard, soft = ce_pit(lp, lab), kld_pit(lp, teacher)
        for w, ref in ((1.0, hard), (0.0, soft)):
            r = interpolate(hard, soft, w)
            exact &= r.value == ref.value and np.array_equal(r.grad, ref.grad) and r.permutation == ref.permutation
    report(4, exact, "LF-DC-bMMI(b=0,b^=0) = LF-bMMI(b=0) = LF-DC-MMI(lambda=0) = LF-MMI, one-hot KLD = CE, "
                     f"interpolation endpoints: {'bit-exact' if exact else 'MISMATCH'} on 20 instances")


# --- 5: swapped-word statistics ----------------------------------------------

def test_criterion_5_swap_statistics(report):
    alpha, beta, gamma, length = 0.4, 10, 2, 60000
    a, b = np.zeros(length, dtype=np.int64), np.ones(length, dtype=np.int64)
    out = augment_swapped([(a, b)], alpha, beta, gamma, seed=5)
    events = [np.flatnonzero(out[2 + 2 * c] != a) for c in range(gamma)]
    frames = gamma * length
    count = sum(len(e) for e in events)
    violations = sum(int(np.sum(np.diff(e) < beta + 1)) for e in events)
    rate = alpha / (1 + alpha * beta)
    # renewal process: gap = beta + geometric(alpha)
    mu, var = beta + 1 / alpha, (1 - alpha) / alpha**2
    sigma = math.sqrt(frames * var / mu**3)
    z = (count - rate * frames) / sigma
    ok = abs(z) <= 3 and violations == 0 and frames >= 1e5
    report(5, ok, f"{count} swaps in {frames} frames, rate {count / frames:.5f} vs {rate:.5f} "
                  f"({z:+.2f} sigma), lockout violations {violations}")


# --- 6: directional experiment -------------------------------------------------

def test_criterion_6_directional(report):
    start = time.perf_counter()
    results = [run_directional(seed) for seed in range(5)]
    seconds = time.perf_counter() - start
    a = sum(r.progressive_wins for r in results)
    b = sum(r.transfer_wins for r in results)
    c = sum(r.seqdisc_wins for r in results)
    rows = "; ".join(f"seed {r.seed}: valid {r.progressive_valid:.3f}/{r.flat_valid:.3f} "
                     f"WER {r.wer_ce:.4f}/{r.wer_transfer:.4f}/{r.wer_seqdisc:.4f}" for r in results)
    ok = a >= 4 and b >= 4 and c >= 4 and seconds < 1800
    report(6, ok, f"(a) progressive beats flat {a}/5, (b) transfer beats CE {b}/5, "
                  f"(c) LF-DC-bMMI beats CE {c}/5, {seconds:.0f}s [{rows}]")


# --- 7: determinism -----------------------------------------------------------------

def test_criterion_7_determinism(report, tmp_path):
    config = parse_config(TINY + "stages=frame,trace,asr,teacher-mmi,joint,transfer,seqdisc\n")
    run_pipeline(config, tmp_path / "one")
    run_pipeline(config, tmp_path / "two")
    names = sorted(p.name for p in (tmp_path / "one").iterdir())
    same = names == sorted(p.name for p in (tmp_path / "two").iterdir())
    same &= all(filecmp.cmp(tmp_path / "one" / n, tmp_path / "two" / n, shallow=False) for n in names)
    report(7, same, f"two full-pipeline runs, {len(names)} files ({', '.join(names)}): "
                    f"{'bit-identical' if same else 'DIFFERENT'}")
