"""The modular network: frame-wise interpreting, speaker tracing and shared
speech recognition modules, assembled stage by stage.

Stages:

* ``b``: frame-wise conv module with N output heads (frame-wise separation).
* ``c``: frame-wise module without heads, topped by the tracing module.
* ``d``: a single recognition module on clean features.
* ``e``: frame-wise + tracing + N recognition instances (one shared block by
  default).

All parameters live in one flat float64 vector with named slices.  Forward
functions accept one utterance ``(T, D)`` or a right-padded batch
``(B, T, D)`` with ``lengths``; with ``record=True`` they also return a
:class:`GradientTape` for :func:`backward`.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import layers as L

STAGES = ("b", "c", "d", "e")
CHECKPOINT_VERSION = 1


class StageError(ValueError):
    pass


class IncompatibleError(ValueError):
    pass


@dataclass(frozen=True)
class ModelShape:
    dim: int = 16
    senones: int = 21
    arity: int = 2
    frame_layers: int = 1
    frame_width: int = 32
    context_radius: int = 2
    trace_layers: int = 2
    trace_width: int = 32
    recog_layers: int = 2
    recog_width: int = 32
    share: bool = True


@dataclass(frozen=True)
class ModuleSpec:
    kind: str  # framewise-conv | tracing-recurrent | recognition-recurrent
    layer_count: int
    hidden_width: int
    context_radius: int = 0
    output_arity: int = 1


def module_specs(shape: ModelShape, stage: str) -> list[ModuleSpec]:
    fw = ModuleSpec("framewise-conv", shape.frame_layers, shape.frame_width, shape.context_radius,
                    shape.arity if stage == "b" else 0)
    tr = ModuleSpec("tracing-recurrent", shape.trace_layers, shape.trace_width, 0, shape.arity)
    rc = ModuleSpec("recognition-recurrent", shape.recog_layers, shape.recog_width, 0,
                    shape.arity if stage == "e" else 1)
    return {"b": [fw], "c": [fw, tr], "d": [rc], "e": [fw, tr, rc]}[stage]


def _gru_slices(prefix, layers, width, din):
    out = []
    for l in range(layers):
        i = din if l == 0 else 2 * width
        for d in ("fwd", "bwd"):
            p = f"{prefix}.gru{l}.{d}"
            out += [(f"{p}.w_ih", (3 * width, i)), (f"{p}.w_hh", (3 * width, width)),
                    (f"{p}.b_ih", (3 * width,)), (f"{p}.b_hh", (3 * width,))]
    return out


def recognition_prefixes(shape: ModelShape, stage: str) -> list[str]:
    if stage == "d" or shape.share:
        return ["recognition"]
    return [f"recognition{n}" for n in range(shape.arity)]


def layout(shape: ModelShape, stage: str) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered ``(name, shape)`` list of parameter slices for a stage."""
    if stage not in STAGES:
        raise StageError(f"unknown stage {stage!r}")
    D, Fw, r = shape.dim, shape.frame_width, shape.context_radius
    out: list[tuple[str, tuple[int, ...]]] = []
    if stage in "bce":
        out += [("framewise.conv0.weight", (Fw, (2 * r + 1) * D)), ("framewise.conv0.bias", (Fw,))]
        for l in range(1, shape.frame_layers):
            out += [(f"framewise.conv{l}.weight", (Fw, Fw)), (f"framewise.conv{l}.bias", (Fw,))]
        if stage == "b":
            for n in range(shape.arity):
                out += [(f"framewise.head{n}.weight", (D, Fw)), (f"framewise.head{n}.bias", (D,))]
    if stage in "ce":
        out += _gru_slices("tracing", shape.trace_layers, shape.trace_width, Fw)
        for n in range(shape.arity):
            out += [(f"tracing.head{n}.weight", (D, 2 * shape.trace_width)), (f"tracing.head{n}.bias", (D,))]
    if stage in "de":
        for p in recognition_prefixes(shape, stage):
            out += _gru_slices(p, shape.recog_layers, shape.recog_width, D)
            out += [(f"{p}.out.weight", (shape.senones, 2 * shape.recog_width)), (f"{p}.out.bias", (shape.senones,))]
    return out


@dataclass
class ModelGraph:
    shape: ModelShape
    stage: str
    params: np.ndarray
    slices: dict[str, tuple[int, tuple[int, ...]]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.slices:
            off = 0
            for name, shp in layout(self.shape, self.stage):
                self.slices[name] = (off, shp)
                off += int(np.prod(shp))
        total = sum(int(np.prod(s)) for _, s in self.slices.values())
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (total,):
            raise IncompatibleError(f"parameter vector has {self.params.shape} entries, layout needs {total}")

    @property
    def arity(self) -> int:
        return self.shape.arity

    @property
    def senone_count(self) -> int:
        return self.shape.senones

    @property
    def modules(self) -> list[ModuleSpec]:
        return module_specs(self.shape, self.stage)

    def param(self, name: str) -> np.ndarray:
        off, shp = self.slices[name]
        return self.params[off:off + int(np.prod(shp))].reshape(shp)

    def slice_range(self, name: str) -> slice:
        off, shp = self.slices[name]
        return slice(off, off + int(np.prod(shp)))

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.slices if n.startswith(prefix)]

    def copy(self) -> "ModelGraph":
        return ModelGraph(self.shape, self.stage, self.params.copy(), dict(self.slices))


def _init_slice(name: str, shp, seed: int) -> np.ndarray:
    if len(shp) == 1:
        return np.zeros(shp)
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(name.encode())]))
    fan_out, fan_in = shp
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shp)


def init_graph(shape: ModelShape, stage: str, seed: int = 0) -> ModelGraph:
    """Fresh graph with Glorot-uniform weights and zero biases."""
    items = layout(shape, stage)
    params = np.concatenate([_init_slice(n, s, seed).ravel() for n, s in items]) if items else np.zeros(0)
    return ModelGraph(shape, stage, params)


def _source_name(name: str) -> list[str]:
    """Candidate names for ``name`` in a pretrained part."""
    cands = [name]
    head, _, rest = name.partition(".")
    if head.startswith("recognition") and head != "recognition":
        cands.append("recognition." + rest)
    elif head == "recognition":
        cands.append("recognition0." + rest)
    return cands


def assemble(stage_to: str, parts: Sequence[ModelGraph], shape: ModelShape, seed: int = 0) -> ModelGraph:
    """Build a ``stage_to`` graph, copying every slice available in ``parts``.

    Parts are searched in order; slices found nowhere are freshly
    initialized.  A stage-``d`` part supplies the recognition block of a
    stage-``e`` graph (one copy per instance when sharing is off).  Copied
    values are bit-identical to the source.
    """
    graph = init_graph(shape, stage_to, seed)
    for name, (off, shp) in graph.slices.items():
        for part in parts:
            src = next((c for c in _source_name(name) if c in part.slices), None)
            if src is None:
                continue
            pshape = part.slices[src][1]
            if tuple(pshape) != tuple(shp):
                raise IncompatibleError(f"slice {name}: pretrained shape {pshape} does not match {shp}")
            graph.params[graph.slice_range(name)] = part.params[part.slice_range(src)]
            break
    return graph


# --- forward / backward ---------------------------------------------------

@dataclass
class GradientTape:
    graph: ModelGraph
    kind: str
    out_shape: tuple
    backward_fn: Callable[[np.ndarray, np.ndarray], None] = field(repr=False)


def _as_batch(x, lengths, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != dim:
        raise ValueError(f"expected (T, {dim}) or (B, T, {dim}) input, got {x.shape}")
    B, T, _ = x.shape
    if lengths is None:
        lengths = np.full(B, T, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    mask = (np.arange(T)[:, None] < lengths[None, :]).astype(np.float64)
    xt = x.transpose(1, 0, 2) * mask[:, :, None]
    return xt, mask, lengths, single


class _Grad:
    """Accumulates slice gradients into a flat vector."""

    def __init__(self, graph, buf):
        self.graph, self.buf = graph, buf

    def add(self, name, value):
        self.buf[self.graph.slice_range(name)] += np.ravel(value)


def _gru_params(g, prefix, l, d):
    p = f"{prefix}.gru{l}.{d}"
    return tuple(g.param(f"{p}.{k}") for k in ("w_ih", "w_hh", "b_ih", "b_hh"))


def _framewise_fwd(g: ModelGraph, x, mask):
    s = g.shape
    caches = []
    ctx = L.context_stack(x, s.context_radius)
    pre = L.dense_forward(ctx, g.param("framewise.conv0.weight"), g.param("framewise.conv0.bias"))
    h = L.relu_forward(pre)
    caches.append((ctx, pre))
    for l in range(1, s.frame_layers):
        inp = h
        pre = L.dense_forward(inp, g.param(f"framewise.conv{l}.weight"), g.param(f"framewise.conv{l}.bias"))
        h = L.relu_forward(pre)
        caches.append((inp, pre))

    def bwd(dh, acc: _Grad):
        for l in range(s.frame_layers - 1, 0, -1):
            inp, pre = caches[l]
            dpre = L.relu_backward(dh, pre)
            dh, dw, db = L.dense_backward(dpre, inp, g.param(f"framewise.conv{l}.weight"))
            acc.add(f"framewise.conv{l}.weight", dw)
            acc.add(f"framewise.conv{l}.bias", db)
        ctx, pre = caches[0]
        dpre = L.relu_backward(dh, pre)
        dctx, dw, db = L.dense_backward(dpre, ctx, g.param("framewise.conv0.weight"))
        acc.add("framewise.conv0.weight", dw)
        acc.add("framewise.conv0.bias", db)
        return L.context_unstack(dctx, s.context_radius, s.dim)

    return h, bwd


def _heads_fwd(g: ModelGraph, prefix, h):
    outs = np.stack([
        L.dense_forward(h, g.param(f"{prefix}.head{n}.weight"), g.param(f"{prefix}.head{n}.bias"))
        for n in range(g.arity)
    ])

    def bwd(dout, acc: _Grad):
        dh = 0.0
        for n in range(g.arity):
            dx, dw, db = L.dense_backward(dout[n], h, g.param(f"{prefix}.head{n}.weight"))
            acc.add(f"{prefix}.head{n}.weight", dw)
            acc.add(f"{prefix}.head{n}.bias", db)
            dh = dh + dx
        return dh

    return outs, bwd


def _stack_fwd(g: ModelGraph, prefix, layers, x, mask, lengths):
    caches = []
    h = x
    for l in range(layers):
        fwd, bwd = _gru_params(g, prefix, l, "fwd"), _gru_params(g, prefix, l, "bwd")
        y, c = L.bigru_forward(h, mask, lengths, fwd, bwd)
        caches.append(c)
        h = y

    def bwd_fn(dy, acc: _Grad):
        for l in range(layers - 1, -1, -1):
            fwd, bwd = _gru_params(g, prefix, l, "fwd"), _gru_params(g, prefix, l, "bwd")
            dy, gf, gb = L.bigru_backward(dy, caches[l], lengths, fwd, bwd)
            for d, grads in (("fwd", gf), ("bwd", gb)):
                for k, v in zip(("w_ih", "w_hh", "b_ih", "b_hh"), grads):
                    acc.add(f"{prefix}.gru{l}.{d}.{k}", v)
        return dy

    return h, bwd_fn


def _tracing_fwd(g: ModelGraph, h, mask, lengths):
    y, stack_bwd = _stack_fwd(g, "tracing", g.shape.trace_layers, h, mask, lengths)
    outs, heads_bwd = _heads_fwd(g, "tracing", y)

    def bwd(dout, acc):
        return stack_bwd(heads_bwd(dout, acc), acc)

    return outs, bwd


def _recognition_fwd(g: ModelGraph, prefix, x, mask, lengths):
    y, stack_bwd = _stack_fwd(g, prefix, g.shape.recog_layers, x, mask, lengths)
    logits = L.dense_forward(y, g.param(f"{prefix}.out.weight"), g.param(f"{prefix}.out.bias"))
    logp = L.log_softmax(logits)

    def bwd(dlogp, acc):
        dlogits = L.log_softmax_backward(dlogp, logp)
        dy, dw, db = L.dense_backward(dlogits, y, g.param(f"{prefix}.out.weight"))
        acc.add(f"{prefix}.out.weight", dw)
        acc.add(f"{prefix}.out.bias", db)
        return stack_bwd(dy, acc)

    return logp, bwd


def _finish(g, kind, out_tm, stream_axis, single, mask, bwd, record):
    """Convert time-major outputs to the public layout and wrap the tape."""
    # out_tm: (N, T, B, F) if stream_axis else (T, B, F)
    if stream_axis:
        out = out_tm.transpose(2, 0, 1, 3)  # B, N, T, F
    else:
        out = out_tm.transpose(1, 0, 2)  # B, T, F
    out = out[0] if single else out
    if not record:
        return out

    def backward_fn(upstream, buf):
        up = upstream[None] if single else upstream
        up_tm = up.transpose(1, 2, 0, 3) if stream_axis else up.transpose(1, 0, 2)
        m = mask[None, :, :, None] if stream_axis else mask[:, :, None]
        bwd(up_tm * m, _Grad(g, buf))

    return out, GradientTape(g, kind, out.shape, backward_fn)


def forward_framewise(graph: ModelGraph, mixed_features, lengths=None, record=False):
    """Stage-b frame-wise separation: ``N x T x D`` (or ``B x N x T x D``)."""
    if graph.stage != "b":
        raise StageError(f"forward_framewise needs a stage-b graph, got stage {graph.stage}")
    x, mask, lengths, single = _as_batch(mixed_features, lengths, graph.shape.dim)
    h, fw_bwd = _framewise_fwd(graph, x, mask)
    outs, head_bwd = _heads_fwd(graph, "framewise", h)
    return _finish(graph, "framewise", outs, True, single, mask,
                   lambda d, acc: fw_bwd(head_bwd(d, acc), acc), record)


def framewise_hidden(graph: ModelGraph, mixed_features, lengths=None):
    """Frame-wise module activations below the (removed) heads: ``T x F``."""
    if graph.stage not in ("b", "c", "e"):
        raise StageError(f"stage {graph.stage} has no frame-wise module")
    x, mask, lengths, single = _as_batch(mixed_features, lengths, graph.shape.dim)
    h, _ = _framewise_fwd(graph, x, mask)
    h = h.transpose(1, 0, 2)
    return h[0] if single else h


def forward_tracing(graph: ModelGraph, mixed_features, lengths=None, record=False):
    """Recovered per-speaker features ``N x T x D`` from stage c or e."""
    if graph.stage not in ("c", "e"):
        raise StageError(f"forward_tracing needs a stage-c or stage-e graph, got stage {graph.stage}")
    x, mask, lengths, single = _as_batch(mixed_features, lengths, graph.shape.dim)
    h, fw_bwd = _framewise_fwd(graph, x, mask)
    outs, tr_bwd = _tracing_fwd(graph, h, mask, lengths)
    return _finish(graph, "tracing", outs, True, single, mask,
                   lambda d, acc: fw_bwd(tr_bwd(d, acc), acc), record)


def forward_recognition(graph: ModelGraph, features, lengths=None, record=False, instance: int = 0):
    """``T x S`` log-posteriors of one recognition module on one stream."""
    if graph.stage not in ("d", "e"):
        raise StageError(f"forward_recognition needs a stage-d or stage-e graph, got stage {graph.stage}")
    prefixes = recognition_prefixes(graph.shape, graph.stage)
    prefix = prefixes[instance if len(prefixes) > 1 else 0]
    x, mask, lengths, single = _as_batch(features, lengths, graph.shape.dim)
    logp, bwd = _recognition_fwd(graph, prefix, x, mask, lengths)
    return _finish(graph, "recognition", logp, False, single, mask, bwd, record)


def forward_joint(graph: ModelGraph, mixed_features, lengths=None, record=False):
    """Stage-e joint model: ``N x T x S`` log-posteriors per output stream."""
    if graph.stage != "e":
        raise StageError(f"forward_joint needs a stage-e graph, got stage {graph.stage}")
    x, mask, lengths, single = _as_batch(mixed_features, lengths, graph.shape.dim)
    N = graph.arity
    T, B, _ = x.shape
    h, fw_bwd = _framewise_fwd(graph, x, mask)
    traced, tr_bwd = _tracing_fwd(graph, h, mask, lengths)
    prefixes = recognition_prefixes(graph.shape, "e")
    if len(prefixes) == 1:
        # shared block: run all N streams as one batch
        feats = traced.transpose(1, 0, 2, 3).reshape(T, N * B, -1)
        mask_n = np.tile(mask, (1, N))
        logp, rc_bwd = _recognition_fwd(graph, prefixes[0], feats, mask_n, np.tile(lengths, N))
        out = logp.reshape(T, N, B, -1).transpose(1, 0, 2, 3)

        def rec_bwd(d, acc):
            dl = d.transpose(1, 0, 2, 3).reshape(T, N * B, -1)
            return rc_bwd(dl, acc).reshape(T, N, B, -1).transpose(1, 0, 2, 3)
    else:
        res = [_recognition_fwd(graph, prefixes[n], traced[n], mask, lengths) for n in range(N)]
        out = np.stack([r[0] for r in res])

        def rec_bwd(d, acc):
            return np.stack([res[n][1](d[n], acc) for n in range(N)])

    def bwd(d, acc):
        return fw_bwd(tr_bwd(rec_bwd(d, acc), acc), acc)

    return _finish(graph, "joint", out, True, single, mask, bwd, record)


def backward(tape: GradientTape, upstream: np.ndarray, graph: ModelGraph | None = None) -> np.ndarray:
    """Exact gradient of ``sum(upstream * output)`` w.r.t. the flat parameters."""
    if graph is not None and graph is not tape.graph:
        raise ValueError("tape was recorded on a different graph")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != tape.out_shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match recorded output {tape.out_shape}")
    buf = np.zeros_like(tape.graph.params)
    tape.backward_fn(upstream, buf)
    return buf


# --- checkpoints ----------------------------------------------------------

def save_checkpoint(graph: ModelGraph, path: str | os.PathLike, extras: dict | None = None) -> Path:
    """Write ``version | stage | header length | JSON header | float64 payload``.

    The write goes to a temporary file that is renamed into place.
    """
    path = Path(path)
    header = {
        "shape": asdict(graph.shape),
        "slices": [[name, int(np.prod(shp)), list(shp)] for name, (_, shp) in graph.slices.items()],
        "extras": extras or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    data = (
        struct.pack("<BcI", CHECKPOINT_VERSION, graph.stage.encode(), len(hb))
        + hb
        + np.ascontiguousarray(graph.params, dtype="<f8").tobytes()
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> tuple[ModelGraph, dict]:
    data = Path(path).read_bytes()
    version, stage, hlen = struct.unpack_from("<BcI", data, 0)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = struct.calcsize("<BcI")
    header = json.loads(data[off:off + hlen].decode())
    off += hlen
    shape = ModelShape(**header["shape"])
    slices, pos = {}, 0
    for name, length, shp in header["slices"]:
        slices[name] = (pos, tuple(shp))
        pos += length
    params = np.frombuffer(data, dtype="<f8", count=pos, offset=off).astype(np.float64)
    return ModelGraph(shape, stage.decode(), params, slices), header["extras"]
