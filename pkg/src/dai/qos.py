"""Windowed QoS features from a flow whose header layout is known."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .decipher import FieldMap, decrypt_seqs, header_matrix
from .errors import SchemaError, StaleFieldMapError
from .traffic_core import Capture

WINDOW_US = 2_000_000
STALE_MIN_PACKETS = 50
STALE_MIN_STEP_FRACTION = 0.5
STALE_MIN_MEDIA_FRACTION = 0.5
TRAILING_MIN_COVER = 0.95

CSV_HEADER = ["t_start_us", "duration_us", "udp_kbps", "video_kbps", "fec_kbps", "loss",
              "iat_mean_ms", "iat_std_ms", "pkts", "sparse"]


@dataclass(frozen=True)
class QosWindow:
    t_start_us: int
    duration_us: int
    udp_rate_kbps: float
    video_rate_kbps: float
    fec_rate_kbps: float
    loss_rate: float
    iat_mean_ms: float
    iat_std_ms: float
    packet_count: int
    sparse: bool = False
    # modal-frequency estimate: share of the most common PT cipher byte times the UDP rate
    video_rate_modal_kbps: float = 0.0

    def row(self) -> list:
        return [self.t_start_us, self.duration_us, f"{self.udp_rate_kbps:.6f}", f"{self.video_rate_kbps:.6f}",
                f"{self.fec_rate_kbps:.6f}", f"{self.loss_rate:.6f}", f"{self.iat_mean_ms:.6f}",
                f"{self.iat_std_ms:.6f}", self.packet_count, int(self.sparse)]


def loss_rate(seqs: Sequence[int], modulus: int = 1 << 16) -> float:
    """Fraction of the covered sequence range that never arrived; duplicates count once."""
    if len(seqs) < 2:
        return 0.0
    s = np.asarray(seqs, dtype=np.int64) % modulus
    d = np.diff(s)
    half = modulus // 2
    d = np.where(d < -half, d + modulus, np.where(d > half, d - modulus, d))
    unwrapped = np.concatenate(([s[0]], s[0] + np.cumsum(d)))
    # extremes rather than endpoints, so late duplicates or reordering cannot shrink the range
    expected = int(unwrapped.max() - unwrapped.min()) + 1
    if expected <= 0:
        return 0.0
    received = np.unique(unwrapped).size
    return float(min(1.0, max(0.0, 1.0 - received / expected)))


def interarrival_stats(ts_us: Sequence[int]) -> tuple[float, float]:
    """Mean and population std of consecutive arrival gaps, in milliseconds."""
    if len(ts_us) < 2:
        return 0.0, 0.0
    gaps = np.diff(np.asarray(ts_us, dtype=np.int64)) / 1000.0
    return float(gaps.mean()), float(gaps.std())


def _kbps(n_bytes: int | float, window_us: int) -> float:
    return n_bytes * 8 * 1000 / window_us


def classify_media(flow: Capture, field_map: FieldMap) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks (video, fec) over the flow's records; chatter is in neither."""
    n_pos = max([field_map.pt_position, *field_map.seq_positions, *field_map.constant_values] or [1])
    mat, cover = header_matrix(flow, n_pos)
    media = np.ones(len(flow), dtype=bool)
    for pos, value in field_map.constant_values.items():
        media &= cover[:, pos - 1] & (mat[:, pos - 1] == value)
    pt_col = field_map.pt_position - 1
    is_video = media & cover[:, pt_col] & (mat[:, pt_col] == field_map.video_pt_cipher)
    return is_video, media & ~is_video


def _check_fresh(video_seqs: np.ndarray, n_media: int, n_flow: int, field_map: FieldMap) -> None:
    modulus = 1 << (8 * field_map.seq_width)
    if n_flow >= STALE_MIN_PACKETS and n_media < STALE_MIN_MEDIA_FRACTION * n_flow:
        raise StaleFieldMapError(f"only {n_media} of {n_flow} packets carry the field map's constant bytes",
                                 stage="extract_windows")
    if video_seqs.size < 2:
        if n_media >= STALE_MIN_PACKETS:
            raise StaleFieldMapError(f"no video packets among {n_media} media packets match "
                                     f"PT cipher {field_map.video_pt_cipher}", stage="extract_windows")
        return
    if video_seqs.size < STALE_MIN_PACKETS:
        return
    steps = np.diff(video_seqs) % modulus
    frac = float((steps == 1).mean())
    if frac < STALE_MIN_STEP_FRACTION:
        raise StaleFieldMapError(f"only {frac:.3f} of decrypted sequence steps equal +1; "
                                 "the field map belongs to another stream", stage="extract_windows",
                                 diagnostics={"step_one_fraction": frac})


def extract_windows(flow: Capture, field_map: FieldMap, window_us: int = WINDOW_US) -> list[QosWindow]:
    n = len(flow)
    if n == 0:
        return []
    ts = np.fromiter((r.ts_us for r in flow.records), dtype=np.int64, count=n)
    sizes = np.fromiter((len(r.payload) for r in flow.records), dtype=np.int64, count=n)
    is_video, is_fec = classify_media(flow, field_map)
    video_idx = np.flatnonzero(is_video)
    video = Capture(tuple(flow.records[i] for i in video_idx), flow.epoch_us)
    seqs = decrypt_seqs(video, field_map) if len(video) else np.zeros(0, dtype=np.int64)
    _check_fresh(seqs, int((is_video | is_fec).sum()), n, field_map)

    pt_col = field_map.pt_position - 1
    pt_bytes = np.fromiter((r.payload[pt_col] if len(r.payload) > pt_col else -1 for r in flow.records),
                           dtype=np.int64, count=n)

    t0 = int(ts[0])
    span = int(ts[-1]) - t0
    if n > 1:
        span += span // (n - 1)  # the last packet occupies one mean gap
    n_windows, rest = divmod(span, window_us)
    if rest >= TRAILING_MIN_COVER * window_us:
        n_windows += 1  # nearly complete; the flow just ended between frames
    n_windows = max(1, n_windows)
    slot = (ts - t0) // window_us
    video_slot = slot[video_idx]
    modulus = 1 << (8 * field_map.seq_width)

    out: list[QosWindow] = []
    for k in range(n_windows):
        sel = slot == k
        count = int(sel.sum())
        in_window_seqs = seqs[video_slot == k]
        mean_ms, std_ms = interarrival_stats(ts[sel])
        udp = _kbps(int(sizes[sel].sum()), window_us)
        modal_share = 0.0
        if count:
            vals = pt_bytes[sel]
            modal_share = float(np.bincount(vals[vals >= 0], minlength=256).max()) / count
        out.append(QosWindow(
            t_start_us=t0 + k * window_us,
            duration_us=window_us,
            udp_rate_kbps=udp,
            video_rate_kbps=_kbps(int(sizes[sel & is_video].sum()), window_us),
            fec_rate_kbps=_kbps(int(sizes[sel & is_fec].sum()), window_us),
            loss_rate=loss_rate(in_window_seqs, modulus),
            iat_mean_ms=mean_ms,
            iat_std_ms=std_ms,
            packet_count=count,
            sparse=count < 2 or in_window_seqs.size < 2,
            video_rate_modal_kbps=modal_share * udp,
        ))
    return out


def flow_loss_rate(flow: Capture, field_map: FieldMap) -> float:
    """Loss over the whole flow from its decrypted video sequence numbers."""
    is_video, _ = classify_media(flow, field_map)
    video = Capture(tuple(r for r, v in zip(flow.records, is_video) if v), flow.epoch_us)
    if len(video) < 2:
        return 0.0
    return loss_rate(decrypt_seqs(video, field_map), 1 << (8 * field_map.seq_width))


def write_qos_csv(windows: Iterable[QosWindow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for win in windows:
            w.writerow(win.row())


def read_qos_csv(path: str | Path) -> list[QosWindow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            missing = [c for c in CSV_HEADER if c not in (reader.fieldnames or [])]
            raise SchemaError(str(path), missing[0] if missing else None,
                              f"expected header {','.join(CSV_HEADER)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            col = None
            try:
                vals = {}
                for col, conv in (("t_start_us", int), ("duration_us", int), ("udp_kbps", float),
                                  ("video_kbps", float), ("fec_kbps", float), ("loss", float),
                                  ("iat_mean_ms", float), ("iat_std_ms", float), ("pkts", int),
                                  ("sparse", int)):
                    vals[col] = conv(row[col])
            except (TypeError, ValueError) as exc:
                raise SchemaError(str(path), col, f"line {lineno}: {exc}") from exc
            out.append(QosWindow(vals["t_start_us"], vals["duration_us"], vals["udp_kbps"], vals["video_kbps"],
                                 vals["fec_kbps"], vals["loss"], vals["iat_mean_ms"], vals["iat_std_ms"],
                                 vals["pkts"], bool(vals["sparse"])))
    return out


