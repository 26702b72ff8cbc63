"""Recover the ciphertext header layout of a keystream-reusing stream.

Pipeline: byte-value frequency profile, constant fields, payload-type byte
(negative correlation of its modal frequency with induced loss), sequence
number byte (adjacent XORs of the form 2^p - 1) and finally the XOR key of the
sequence field.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import (AmbiguousKeyError, AnalysisError, CalibrationError, EmptyInputError,
                     InsufficientDataError, KeyNotFoundError, NoFlowsError, PtNotFoundError,
                     SchemaError, SeqNotFoundError, ShapeError)
from .traffic_core import Capture, media_flow

N_POSITIONS = 16
CONSTANT_THRESHOLD = 0.99
PT_MAX_R = -0.7
PT_MIN_SHARE = 0.5
SEQ_WINNER_MIN = 0.9
SEQ_RUNNER_UP_MAX = 0.5
KEY_MIN_SCORE = 0.8
KEY_EQUIV_MIN_SHARE = 0.99
MIN_SEQ_PACKETS = 100
MIN_KEY_PACKETS = 200


@dataclass(frozen=True)
class ByteFrequencyProfile:
    modal_value: tuple[int, ...]
    modal_freq: tuple[float, ...]
    counts: tuple[int, ...]  # packets covering each position
    total: int

    @property
    def n_positions(self) -> int:
        return len(self.modal_value)

    def __getitem__(self, position: int) -> tuple[int, float]:
        return self.modal_value[position - 1], self.modal_freq[position - 1]


@dataclass
class FieldMap:
    constant_positions: list[int]
    constant_values: dict[int, int]
    pt_position: int
    video_pt_cipher: int
    seq_positions: tuple[int, int]
    seq_width: int
    seq_key: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def seq_low(self) -> int:
        return self.seq_positions[1]

    def to_json(self) -> dict:
        return {
            "constant_positions": list(self.constant_positions),
            "constant_values": {str(k): v for k, v in sorted(self.constant_values.items())},
            "pt_position": self.pt_position,
            "video_pt_cipher": self.video_pt_cipher,
            "seq_positions": list(self.seq_positions),
            "seq_width": self.seq_width,
            "seq_key": self.seq_key,
            "diagnostics": self.diagnostics,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_json(cls, doc: dict, source: str = "<fieldmap>") -> "FieldMap":
        try:
            return cls(
                constant_positions=[int(p) for p in doc["constant_positions"]],
                constant_values={int(k): int(v) for k, v in doc.get("constant_values", {}).items()},
                pt_position=int(doc["pt_position"]),
                video_pt_cipher=int(doc["video_pt_cipher"]),
                seq_positions=tuple(int(p) for p in doc["seq_positions"]),
                seq_width=int(doc["seq_width"]),
                seq_key=int(doc["seq_key"]),
                diagnostics=doc.get("diagnostics", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(source, None, f"malformed field map: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "FieldMap":
        return cls.from_json(json.loads(Path(path).read_text()), str(path))


@dataclass(frozen=True)
class CalibrationSet:
    points: tuple[tuple[float, Capture], ...]

    def __post_init__(self) -> None:
        if len({loss for loss, _ in self.points}) < 3:
            raise CalibrationError("calibration needs at least 3 distinct loss rates", stage="calibration")

    @classmethod
    def of(cls, pairs: Iterable[tuple[float, Capture]]) -> "CalibrationSet":
        return cls(tuple(pairs))

    @property
    def loss_rates(self) -> list[float]:
        return [loss for loss, _ in self.points]

    def baseline(self) -> Capture:
        """Capture taken at the lowest induced loss rate."""
        return min(self.points, key=lambda p: p[0])[1]


class Correlation(NamedTuple):
    r: float
    degenerate: bool


def header_matrix(flow: Capture, n_positions: int) -> tuple[np.ndarray, np.ndarray]:
    """First ``n_positions`` bytes of each payload, zero padded, plus the coverage mask."""
    n = len(flow)
    mat = np.zeros((n, n_positions), dtype=np.uint8)
    lengths = np.empty(n, dtype=np.int64)
    if n:
        blob = b"".join(r.payload[:n_positions].ljust(n_positions, b"\0") for r in flow.records)
        mat = np.frombuffer(blob, dtype=np.uint8).reshape(n, n_positions)
        lengths[:] = [len(r.payload) for r in flow.records]
    mask = lengths[:, None] > np.arange(n_positions)[None, :]
    return mat, mask


def byte_frequency(flow: Capture, n_positions: int = N_POSITIONS) -> ByteFrequencyProfile:
    if len(flow) == 0:
        raise EmptyInputError("cannot profile an empty flow", stage="byte_frequency")
    mat, mask = header_matrix(flow, n_positions)
    values, freqs, counts = [], [], []
    for j in range(n_positions):
        col = mat[mask[:, j], j]
        hist = np.bincount(col, minlength=256)
        v = int(np.argmax(hist))  # first maximum, i.e. the smaller byte value on ties
        covered = int(col.size)
        values.append(v)
        freqs.append(hist[v] / covered if covered else 0.0)
        counts.append(covered)
    return ByteFrequencyProfile(tuple(values), tuple(float(f) for f in freqs), tuple(counts), len(flow))


def find_constant_fields(profile: ByteFrequencyProfile, threshold: float = CONSTANT_THRESHOLD) -> set[int]:
    return {i + 1 for i, f in enumerate(profile.modal_freq) if f >= threshold}


def pearson(xs: Sequence[float], ys: Sequence[float]) -> Correlation:
    if len(xs) != len(ys):
        raise ShapeError(f"series lengths differ: {len(xs)} vs {len(ys)}")
    if len(xs) < 2:
        raise ShapeError("correlation needs at least 2 points")
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx <= 0.0 or syy <= 0.0:
        return Correlation(0.0, True)
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return Correlation(max(-1.0, min(1.0, r)), False)


def _media(capture: Capture, stage: str) -> Capture:
    try:
        return media_flow(capture)[1]
    except NoFlowsError as exc:
        raise NoFlowsError(f"[{stage}] {exc}") from exc


def locate_pt(calibration: CalibrationSet, n_positions: int = N_POSITIONS,
              exclude: Iterable[int] = (), min_share: float = PT_MIN_SHARE) -> tuple[int, int, list[float | None]]:
    """Find the payload-type byte.

    Returns ``(position, video_pt_cipher, correlations)`` where ``correlations``
    holds r per position (``None`` for excluded positions). Only positions whose
    modal value covers at least ``min_share`` of the baseline capture compete:
    video packets outnumber FEC packets, so the payload-type byte has a majority
    value, while near-uniform bytes only correlate with loss through sample size.
    """
    excluded = set(exclude)
    points = sorted(calibration.points, key=lambda p: p[0])
    losses = [loss for loss, _ in points]
    profiles = [byte_frequency(_media(cap, "locate_pt"), n_positions) for _, cap in points]
    correlations: list[float | None] = []
    for pos in range(1, n_positions + 1):
        if pos in excluded:
            correlations.append(None)
            continue
        correlations.append(pearson(losses, [p.modal_freq[pos - 1] for p in profiles]).r)
    candidates = [(r, pos) for pos, r in enumerate(correlations, start=1)
                  if r is not None and profiles[0].modal_freq[pos - 1] >= min_share]
    diagnostics = {"correlations": correlations, "loss_rates": losses,
                   "baseline_modal_freqs": list(profiles[0].modal_freq)}
    if not candidates:
        raise PtNotFoundError("no candidate position: all are constant, excluded or lack a majority value",
                              stage="locate_pt", diagnostics=diagnostics)
    r_best, pos = min(candidates)
    if r_best > PT_MAX_R:
        raise PtNotFoundError(f"strongest negative correlation r={r_best:.3f} at position {pos} "
                              f"does not reach {PT_MAX_R}", stage="locate_pt", diagnostics=diagnostics)
    return pos, profiles[0].modal_value[pos - 1], correlations


def classify_packets(flow: Capture, pt_position: int, video_pt_cipher: int) -> tuple[Capture, Capture]:
    """Split into (video, everything else) by the ciphertext payload-type byte."""
    video, other = [], []
    idx = pt_position - 1
    for rec in flow.records:
        if len(rec.payload) > idx and rec.payload[idx] == video_pt_cipher:
            video.append(rec)
        else:
            other.append(rec)
    return Capture(tuple(video), flow.epoch_us), Capture(tuple(other), flow.epoch_us)


def is_pow2_minus1(v: int) -> bool:
    return v > 0 and (v & (v + 1)) == 0


def xor_scores(video: Capture, n_positions: int = N_POSITIONS) -> list[float]:
    """Per position, the fraction of adjacent packets whose XOR is 2^p - 1 (p >= 1)."""
    mat, mask = header_matrix(video, n_positions)
    if len(video) < 2:
        return [0.0] * n_positions
    x = mat[1:] ^ mat[:-1]
    both = mask[1:] & mask[:-1]
    ok = (x != 0) & ((x & (x + np.uint8(1))) == 0) & both
    denom = np.maximum(both.sum(axis=0), 1)
    return [float(v) for v in ok.sum(axis=0) / denom]


def locate_seq(video: Capture, n_positions: int = N_POSITIONS) -> tuple[int, list[float]]:
    if len(video) < MIN_SEQ_PACKETS:
        raise InsufficientDataError(f"{len(video)} video packets, need {MIN_SEQ_PACKETS}", stage="locate_seq")
    scores = xor_scores(video, n_positions)
    ranked = sorted(range(n_positions), key=lambda j: (-scores[j], j))
    best, runner = ranked[0], ranked[1] if n_positions > 1 else None
    runner_score = scores[runner] if runner is not None else 0.0
    if scores[best] < SEQ_WINNER_MIN or runner_score > SEQ_RUNNER_UP_MAX:
        raise SeqNotFoundError(f"no clear sequence byte: best {scores[best]:.3f} at {best + 1}, "
                               f"runner-up {runner_score:.3f}", stage="locate_seq",
                               diagnostics={"xor_scores": scores})
    return best + 1, scores


def _field_values(video: Capture, positions: Sequence[int]) -> np.ndarray:
    last = max(positions)
    mat, mask = header_matrix(video, last)
    if not mask[:, last - 1].all():
        raise InsufficientDataError(f"some video packets are shorter than position {last}",
                                    stage="recover_seq_key")
    out = np.zeros(len(video), dtype=np.int64)
    for p in positions:
        out = (out << 8) | mat[:, p - 1]
    return out


def key_scores(cipher: np.ndarray, width_bits: int) -> np.ndarray:
    """Count, for every key k, adjacent pairs whose decryptions differ by exactly +1.

    Decrypted values a^k, b^k step by +1 iff x = a^k satisfies x ^ (x + 1) == a ^ b,
    which pins the low bits of x; each valid pair therefore votes for a coset of keys
    defined by a mask on the low bits. Summing per-mask histograms evaluates all
    2^width keys exactly.
    """
    size = 1 << width_bits
    scores = np.zeros(size, dtype=np.int64)
    if cipher.size < 2:
        return scores
    a, b = cipher[:-1], cipher[1:]
    d = a ^ b
    keys = np.arange(size, dtype=np.int64)
    for p in range(1, width_bits + 1):
        sel = d == (1 << p) - 1
        if not sel.any():
            continue
        if p < width_bits:
            mask = (1 << p) - 1
            pattern = (1 << (p - 1)) - 1  # low p-1 bits set, bit p-1 clear
        else:
            # the all-ones difference also arises from the wrap max -> 0
            mask = pattern = (1 << (width_bits - 1)) - 1
        required = (a[sel] ^ pattern) & mask
        hist = np.bincount(required, minlength=mask + 1)
        scores += hist[keys & mask]
    return scores


def brute_force_key_scores(cipher: np.ndarray, width_bits: int, chunk: int = 4096) -> np.ndarray:
    """Direct evaluation of every key; reference for :func:`key_scores`."""
    size = 1 << width_bits
    out = np.zeros(size, dtype=np.int64)
    for start in range(0, size, chunk):
        k = np.arange(start, min(size, start + chunk), dtype=np.int64)[:, None]
        s = cipher[None, :] ^ k
        out[start:start + k.shape[0]] = (((s[:, 1:] - s[:, :-1]) % size) == 1).sum(axis=1)
    return out


def _resolve_key(cipher: np.ndarray, width_bits: int, scores: np.ndarray, min_score: float,
                 stage: str) -> tuple[int, float]:
    n_pairs = cipher.size - 1
    size = 1 << width_bits
    best = int(scores.max())
    frac = best / n_pairs
    if frac < min_score:
        raise KeyNotFoundError(f"best key explains {frac:.3f} of adjacent pairs, need {min_score}",
                               stage=stage, diagnostics={"best_score": frac, "width": width_bits})
    tied = np.flatnonzero(scores == best)
    if tied.size == 1:
        return int(tied[0]), frac
    # Keys differing only in bits the counter never carried into tie on the +1 score.
    # Prefer keys under which the counter moves forward (gaps from loss included) ...
    half = size // 2
    forward = np.empty(tied.size, dtype=np.int64)
    for i, k in enumerate(tied):
        step = ((cipher[1:] ^ k) - (cipher[:-1] ^ k)) % size
        forward[i] = int(((step >= 1) & (step < half)).sum())
    tied = tied[forward == forward.max()]
    # ... then the survivors must decrypt to the same sequence up to a constant offset,
    # tolerating the odd stray packet that matched the PT byte by chance.
    ref = cipher ^ tied[0]
    for k in tied[1:]:
        offset = ((cipher ^ k) - ref) % size
        if np.bincount(offset).max() < KEY_EQUIV_MIN_SHARE * cipher.size:
            raise AmbiguousKeyError(f"keys 0x{int(tied[0]):x} and 0x{int(k):x} tie with score {frac:.3f}",
                                    stage=stage, diagnostics={"tied_keys": [int(t) for t in tied[:32]]})
    # Equivalent keys only shift the counter; take the one whose first value is nearest zero.
    first = (cipher[0] ^ tied) % size
    dist = np.minimum(first, size - first)
    return int(tied[np.lexsort((tied, dist))[0]]), frac


def recover_seq_key(video: Capture, low_position: int, *,
                    min_score: float = KEY_MIN_SCORE) -> tuple[tuple[int, int], int, int]:
    """Recover the XOR key of the sequence field.

    Returns ``(seq_positions, seq_key, width_bytes)``. A 16-bit big-endian field
    ending at ``low_position`` is tried first, a single byte second.
    """
    stage = "recover_seq_key"
    if len(video) < MIN_KEY_PACKETS:
        raise InsufficientDataError(f"{len(video)} video packets, need {MIN_KEY_PACKETS}", stage=stage)
    failures: list[AnalysisError] = []
    if low_position >= 2:
        positions = (low_position - 1, low_position)
        cipher = _field_values(video, positions)
        try:
            key, _ = _resolve_key(cipher, 16, key_scores(cipher, 16), min_score, stage)
            return positions, key, 2
        except KeyNotFoundError as exc:
            failures.append(exc)
    cipher = _field_values(video, (low_position,))
    try:
        key, _ = _resolve_key(cipher, 8, key_scores(cipher, 8), min_score, stage)
    except KeyNotFoundError as exc:
        exc.diagnostics["two_byte"] = [f.diagnostics for f in failures]
        raise
    return (low_position, low_position), key, 1


def decrypt_seqs(video: Capture, field_map: FieldMap) -> np.ndarray:
    hi, lo = field_map.seq_positions
    positions = (hi, lo) if field_map.seq_width == 2 else (lo,)
    return _field_values(video, positions) ^ field_map.seq_key


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except AnalysisError as exc:
        if exc.stage is None:
            exc.stage = name
        raise


def discover(calibration: CalibrationSet, n_positions: int = N_POSITIONS,
             threshold: float = CONSTANT_THRESHOLD) -> FieldMap:
    """Run the full field discovery on a calibration set."""
    base = _media(calibration.baseline(), "discover")
    profile = _stage("byte_frequency", byte_frequency, base, n_positions)
    constants = find_constant_fields(profile, threshold)
    pt_pos, pt_cipher, correlations = _stage("locate_pt", locate_pt, calibration, n_positions, constants)
    video, _ = classify_packets(base, pt_pos, pt_cipher)
    low, scores = _stage("locate_seq", locate_seq, video, n_positions)
    seq_positions, key, width = _stage("recover_seq_key", recover_seq_key, video, low)
    return FieldMap(
        constant_positions=sorted(constants),
        constant_values={p: profile.modal_value[p - 1] for p in sorted(constants)},
        pt_position=pt_pos,
        video_pt_cipher=pt_cipher,
        seq_positions=seq_positions,
        seq_width=width,
        seq_key=key,
        diagnostics={
            "modal_values": list(profile.modal_value),
            "modal_freqs": [round(f, 6) for f in profile.modal_freq],
            "correlations": [None if r is None else round(r, 6) for r in correlations],
            "loss_rates": sorted(calibration.loss_rates),
            "xor_scores": [round(s, 6) for s in scores],
        },
    )


def rebind(field_map: FieldMap, flow: Capture, n_positions: int = N_POSITIONS) -> FieldMap:
    """Re-derive the per-stream cipher values for a new flow, keeping the discovered positions.

    Every stream draws its own keystream, so modal values and the sequence key
    differ between captures even though the layout does not.
    """
    profile = byte_frequency(flow, max(n_positions, *field_map.seq_positions, field_map.pt_position))
    constant_values = {p: profile.modal_value[p - 1] for p in field_map.constant_positions}
    pt_cipher = profile.modal_value[field_map.pt_position - 1]
    video, _ = classify_packets(flow, field_map.pt_position, pt_cipher)
    if field_map.seq_width == 2:
        positions, key, width = recover_seq_key(video, field_map.seq_low)
        if width != 2:
            raise SeqNotFoundError("two-byte sequence field did not hold on this flow", stage="rebind")
    else:
        cipher = _field_values(video, (field_map.seq_low,))
        if len(video) < MIN_KEY_PACKETS:
            raise InsufficientDataError(f"{len(video)} video packets, need {MIN_KEY_PACKETS}", stage="rebind")
        key, _ = _resolve_key(cipher, 8, key_scores(cipher, 8), KEY_MIN_SCORE, "rebind")
        positions = field_map.seq_positions
    return FieldMap(sorted(constant_values), constant_values, field_map.pt_position, pt_cipher,
                    positions, field_map.seq_width, key, dict(field_map.diagnostics))
