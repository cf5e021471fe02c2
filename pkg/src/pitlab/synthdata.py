"""Synthetic speakers, clean utterances and two-talker mixtures.

Each speaker is a first-order state machine over a senone inventory with
Gaussian emissions in a linear energy domain, clamped at zero.  Speakers
share one phonetic inventory (band structure and phonotactics drawn from
``inventory_seed``) and differ by gain, spectral warp, a speaker signature
and perturbed transitions, so senone identity carries across speakers while
the two talkers of a mixture stay distinguishable.

Mixing is exact addition of linear energies; observations are
``log(1 + linear)``.
"""
from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SILENCE = 0
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SynthConfig:
    dim: int = 16
    senone_count: int = 21
    inventory_seed: int = 0
    bands_per_senone: int = 3
    band_energy: tuple[float, float] = (3.0, 10.0)
    floor_energy: float = 0.15
    silence_energy: float = 0.05
    self_loop: tuple[float, float] = (0.55, 0.8)
    successors: int = 3
    emission_noise: float = 0.3
    speaker_gain: float = 0.2
    speaker_warp: float = 0.25
    signature_energy: float = 1.5
    transition_jitter: float = 0.3


@dataclass
class SpeakerModel:
    id: str
    transition: np.ndarray
    emission_means: np.ndarray
    emission_scale: np.ndarray
    seed: int

    @property
    def senone_count(self) -> int:
        return self.transition.shape[0]

    @property
    def dim(self) -> int:
        return self.emission_means.shape[1]


@dataclass
class CleanUtterance:
    speaker_id: str
    features: np.ndarray
    linear: np.ndarray
    alignment: np.ndarray
    transcript: list[int]

    @property
    def length(self) -> int:
        return self.alignment.shape[0]


@dataclass
class MixedUtterance:
    id: str
    mixed_features: np.ndarray
    mixed_linear: np.ndarray
    streams: list[CleanUtterance]
    padded_alignments: np.ndarray
    pad_offsets: list[tuple[int, int]]

    @property
    def length(self) -> int:
        return self.mixed_features.shape[0]

    @property
    def arity(self) -> int:
        return len(self.streams)

    @property
    def speakers(self) -> list[str]:
        return [s.speaker_id for s in self.streams]

    def clean_features(self) -> np.ndarray:
        """Padded clean streams stacked as ``N x T x D``."""
        return np.stack([s.features for s in self.streams])

    def source(self, n: int) -> CleanUtterance:
        """Unpadded source segment of stream ``n``."""
        front, back = self.pad_offsets[n]
        s = self.streams[n]
        stop = s.length - back
        return CleanUtterance(
            speaker_id=s.speaker_id,
            features=s.features[front:stop],
            linear=s.linear[front:stop],
            alignment=s.alignment[front:stop],
            transcript=list(s.transcript),
        )


@dataclass
class CorpusConfig:
    segments: int = 400
    min_len: int = 12
    max_len: int = 36
    seed: int = 0


@dataclass
class Corpus:
    utterances: list[MixedUtterance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, i):
        return self.utterances[i]

    @property
    def dim(self) -> int:
        return self.utterances[0].mixed_features.shape[1]


def collapse_labels(alignment: Sequence[int]) -> list[int]:
    """Merge consecutive duplicates, then drop silence."""
    out: list[int] = []
    prev = None
    for s in alignment:
        s = int(s)
        if s != prev:
            if s != SILENCE:
                out.append(s)
            prev = s
    return out


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFF for k in key]))


def _inventory(config: SynthConfig):
    """Speaker-independent band structure and phonotactic support."""
    rng = _rng(config.inventory_seed, 0x1A7E)
    S, D = config.senone_count, config.dim
    means = np.full((S, D), config.floor_energy)
    means[SILENCE] = config.silence_energy
    lo, hi = config.band_energy
    nb = min(config.bands_per_senone, D)
    for s in range(1, S):
        bands = rng.choice(D, size=nb, replace=False)
        means[s, bands] += rng.uniform(lo, hi, size=nb)

    trans = np.zeros((S, S))
    speech = np.arange(1, S)
    trans[SILENCE, SILENCE] = 0.6
    trans[SILENCE, speech] = 0.4 / len(speech)
    for s in speech:
        loop = rng.uniform(*config.self_loop)
        trans[s, s] = loop
        others = speech[speech != s]
        k = min(config.successors, len(others))
        rest = 1.0 - loop
        if k:
            nxt = rng.choice(others, size=k, replace=False)
            trans[s, nxt] = rest * 0.9 * rng.dirichlet(np.ones(k))
            trans[s, SILENCE] = rest * 0.1
        else:
            trans[s, SILENCE] = rest
    return means, trans


def gen_speaker(config: SynthConfig, seed: int, speaker_id: str | None = None) -> SpeakerModel:
    """Draw one speaker from the shared inventory.

    Args:
        config: inventory and variation settings; ``config.senone_count``
            includes the silence state at index 0.
        seed: speaker seed; the model is a pure function of
            ``(config, seed)``.
        speaker_id: defaults to ``"spk<seed>"``.
    """
    if config.senone_count < 2:
        raise ValueError("senone_count must be >= 2 (silence plus one speech senone)")
    if config.dim < 1:
        raise ValueError("dim must be >= 1")
    base_means, base_trans = _inventory(config)
    rng = _rng(config.inventory_seed, seed, 0x5EED)
    S, D = base_means.shape

    gain = np.exp(rng.normal(0.0, config.speaker_gain))
    warp = np.exp(rng.normal(0.0, config.speaker_warp, size=D))
    means = base_means.copy()
    means[1:] *= gain * warp
    signature = rng.choice(D, size=min(2, D), replace=False)
    means[1:, signature] += config.signature_energy * gain

    support = base_trans > 0
    jitter = np.exp(rng.normal(0.0, config.transition_jitter, size=(S, S)))
    trans = np.where(support, base_trans * jitter, 0.0)
    trans /= trans.sum(axis=1, keepdims=True)

    scale = np.full(S, config.emission_noise)
    return SpeakerModel(
        id=speaker_id if speaker_id is not None else f"spk{seed}",
        transition=trans,
        emission_means=np.maximum(means, 0.0),
        emission_scale=scale,
        seed=seed,
    )


def gen_clean(model: SpeakerModel, length: int, seed: int) -> CleanUtterance:
    """Sample an alignment from the speaker's state machine and emit frames.

    The first state is drawn from the silence row, as if the utterance were
    preceded by silence.  Emission noise is multiplicative-Gaussian in the
    linear domain (std ``scale * mean``) and clamped at zero, so a zero scale
    reproduces the means exactly.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    rng = _rng(model.seed, seed, 0xC1EA)
    S = model.senone_count
    cum = np.cumsum(model.transition, axis=1)
    draws = rng.random(length)
    align = np.empty(length, dtype=np.int64)
    state = SILENCE
    for t in range(length):
        state = int(np.searchsorted(cum[state], draws[t] * cum[state, -1], side="right"))
        state = min(state, S - 1)
        align[t] = state
    means = model.emission_means[align]
    noise = rng.standard_normal(means.shape)
    linear = np.maximum(means * (1.0 + model.emission_scale[align, None] * noise), 0.0)
    return CleanUtterance(
        speaker_id=model.id,
        features=np.log1p(linear),
        linear=linear,
        alignment=align,
        transcript=collapse_labels(align),
    )


def _pad(u: CleanUtterance, front: int, back: int) -> CleanUtterance:
    D = u.linear.shape[1]
    linear = np.concatenate([np.zeros((front, D)), u.linear, np.zeros((back, D))])
    align = np.concatenate([
        np.full(front, SILENCE, dtype=np.int64), u.alignment, np.full(back, SILENCE, dtype=np.int64)
    ])
    return CleanUtterance(
        speaker_id=u.speaker_id,
        features=np.log1p(linear),
        linear=linear,
        alignment=align,
        transcript=list(u.transcript),
    )


def mix_pair(a: CleanUtterance, b: CleanUtterance, utt_id: str = "") -> MixedUtterance:
    """Zero-pad the shorter segment and add linear energies.

    The shorter stream gets ``floor(pad / 2)`` frames in front and the rest
    at the back; padded frames carry the silence label.
    """
    if a.linear.shape[1] != b.linear.shape[1]:
        raise ValueError(f"dimension mismatch: {a.linear.shape[1]} vs {b.linear.shape[1]}")
    T = max(a.length, b.length)
    streams, offsets = [], []
    for u in (a, b):
        pad = T - u.length
        front, back = pad // 2, pad - pad // 2
        streams.append(_pad(u, front, back))
        offsets.append((front, back))
    mixed_linear = streams[0].linear + streams[1].linear
    return MixedUtterance(
        id=utt_id,
        mixed_features=np.log1p(mixed_linear),
        mixed_linear=mixed_linear,
        streams=streams,
        padded_alignments=np.stack([s.alignment for s in streams]),
        pad_offsets=offsets,
    )


def pair_segments(segments: Sequence[CleanUtterance]) -> list[tuple[int, int]]:
    """Sort by length (descending, stable) and pair neighbours.

    Each segment is paired with the next unused segment in sorted order that
    comes from a different speaker.  When only one speaker's segments are
    left, the latest pair that can absorb them is split and re-paired.
    Returns index pairs into ``segments``.
    """
    if len(segments) % 2:
        raise ValueError(f"need an even number of segments, got {len(segments)}")
    spk = [s.speaker_id for s in segments]
    order = sorted(range(len(segments)), key=lambda i: (-segments[i].length, i))
    used = [False] * len(segments)
    pairs: list[tuple[int, int]] = []
    for pos, i in enumerate(order):
        if used[i]:
            continue
        used[i] = True
        rest = [j for j in order[pos + 1:] if not used[j]]
        j = next((j for j in rest if spk[j] != spk[i]), None)
        if j is not None:
            used[j] = True
            pairs.append((i, j))
            continue
        # everything left belongs to spk[i]
        j = rest[0]
        used[j] = True
        for k in range(len(pairs) - 1, -1, -1):
            a, b = pairs[k]
            if spk[a] != spk[i] and spk[b] != spk[i]:
                pairs[k] = (a, i)
                pairs.append((b, j))
                break
        else:
            raise ValueError(f"no partner from a different speaker for segment {i}")
    return pairs


def build_corpus(models: Sequence[SpeakerModel], config: CorpusConfig, prefix: str = "utt") -> Corpus:
    """Generate ``config.segments`` clean segments and mix them in pairs.

    Segment ``i`` belongs to speaker ``models[i % len(models)]`` and uses a
    seed derived from ``(config.seed, i)``, so the corpus is a pure function
    of its inputs.
    """
    if len(models) < 2:
        raise ValueError("need at least 2 speakers")
    if config.segments % 2:
        raise ValueError(f"need an even number of segments, got {config.segments}")
    rng = _rng(config.seed, 0x1E9)
    lengths = rng.integers(config.min_len, config.max_len + 1, size=config.segments)
    segments = [
        gen_clean(models[i % len(models)], int(lengths[i]), seed=int(zlib.crc32(f"{config.seed}:{i}".encode())))
        for i in range(config.segments)
    ]
    utts = [
        mix_pair(segments[i], segments[j], utt_id=f"{prefix}{k:05d}")
        for k, (i, j) in enumerate(pair_segments(segments))
    ]
    return Corpus(utts)


# --- on-disk format -------------------------------------------------------

MANIFEST = "manifest.txt"


def _record_bytes(u: MixedUtterance) -> bytes:
    T, D = u.mixed_linear.shape
    N = u.arity
    parts = [struct.pack("<B3I", FORMAT_VERSION, T, D, N)]
    for front, back in u.pad_offsets:
        parts.append(struct.pack("<2I", front, back))
    parts.append(np.ascontiguousarray(u.mixed_linear, dtype="<f8").tobytes())
    for s in u.streams:
        parts.append(np.ascontiguousarray(s.linear, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(u.padded_alignments, dtype="<u4").tobytes())
    return b"".join(parts)


def _parse_record(data: bytes, utt_id: str, speakers: list[str]) -> MixedUtterance:
    version, T, D, N = struct.unpack_from("<B3I", data, 0)
    if version != FORMAT_VERSION:
        raise ValueError(f"{utt_id}: unsupported record version {version}")
    off = struct.calcsize("<B3I")
    offsets = []
    for _ in range(N):
        offsets.append(struct.unpack_from("<2I", data, off))
        off += 8
    nbytes = T * D * 8
    mixed = np.frombuffer(data, dtype="<f8", count=T * D, offset=off).reshape(T, D).astype(np.float64)
    off += nbytes
    linears = []
    for _ in range(N):
        linears.append(np.frombuffer(data, dtype="<f8", count=T * D, offset=off).reshape(T, D).astype(np.float64))
        off += nbytes
    align = np.frombuffer(data, dtype="<u4", count=N * T, offset=off).reshape(N, T).astype(np.int64)
    streams = [
        CleanUtterance(
            speaker_id=speakers[n],
            features=np.log1p(linears[n]),
            linear=linears[n],
            alignment=align[n],
            transcript=collapse_labels(align[n]),
        )
        for n in range(N)
    ]
    return MixedUtterance(
        id=utt_id,
        mixed_features=np.log1p(mixed),
        mixed_linear=mixed,
        streams=streams,
        padded_alignments=align,
        pad_offsets=[tuple(o) for o in offsets],
    )


def write_corpus(corpus: Corpus, directory: str | os.PathLike) -> Path:
    """Write a manifest plus one little-endian binary record per utterance."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = ["# id T D N pads(front back)*N speakers"]
    for u in corpus:
        T, D = u.mixed_linear.shape
        pads = " ".join(f"{f} {b}" for f, b in u.pad_offsets)
        lines.append(f"{u.id} {T} {D} {u.arity} {pads} {','.join(u.speakers)}")
        (d / f"{u.id}.bin").write_bytes(_record_bytes(u))
    (d / MANIFEST).write_text("\n".join(lines) + "\n")
    return d


def read_corpus(directory: str | os.PathLike) -> Corpus:
    d = Path(directory)
    manifest = d / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no corpus manifest at {manifest}")
    utts = []
    for line in manifest.read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split()
        utt_id, T, D, N = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
        speakers = fields[4 + 2 * N].split(",")
        u = _parse_record((d / f"{utt_id}.bin").read_bytes(), utt_id, speakers)
        if u.mixed_linear.shape != (T, D) or u.arity != N:
            raise ValueError(f"{utt_id}: record does not match manifest")
        utts.append(u)
    return Corpus(utts)
