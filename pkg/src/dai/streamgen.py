"""Synthetic encrypted real-time video traffic with a reused XOR keystream.

The generator stands in for a conferencing client plus a traffic-control box:
an encoder with a small gear table, adaptive FEC, a rate controller that
reacts to delivered throughput, and an impairment stage (random loss, a
token-bucket bottleneck with tail drop, delay and jitter). Every plaintext
header of one stream is XORed with the same keystream.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, KeyLengthError, SchemaError
from .traffic_core import Capture, FlowKey, UdpRecord

MAGIC = 65
KEYSTREAM_LEN = 1500
IP_UDP_OVERHEAD = 28
EPOCH_BASE_US = 1_700_000_000 * 1_000_000

# (bitrate kbps, framerate fps, width px), lowest gear first.
GEAR_TABLE: tuple[tuple[int, int, int], ...] = (
    (150, 8, 480),
    (400, 15, 848),
    (600, 24, 1120),
    (900, 30, 1280),
)

SENDER = ("192.168.1.20", 8000)
RECEIVER = ("192.168.1.10", 51234)
CONTROL_PORT = 8001

VIDEO, FEC, CHATTER = "video", "fec", "chatter"


@dataclass(frozen=True)
class NetworkCondition:
    bandwidth_kbps: int | None = None
    loss_rate: float = 0.0
    delay_ms: int = 0
    jitter_ms: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ConfigError(f"loss_rate {self.loss_rate} outside [0, 1]")
        if self.bandwidth_kbps is not None and self.bandwidth_kbps <= 0:
            raise ConfigError(f"bandwidth_kbps must be positive, got {self.bandwidth_kbps}")
        if self.delay_ms < 0 or self.jitter_ms < 0:
            raise ConfigError("delay_ms and jitter_ms must be non-negative")

    def label(self) -> str:
        bw = "inf" if self.bandwidth_kbps is None else str(self.bandwidth_kbps)
        return f"bw{bw}_loss{round(self.loss_rate * 100):02d}_delay{self.delay_ms}"


PAPER_GRID: tuple[NetworkCondition, ...] = tuple(
    NetworkCondition(bw, loss, delay)
    for bw in (900, 1000, 1100)
    for loss in (0.0, 0.05, 0.10)
    for delay in (0, 100, 200)
)

CALIBRATION_LOSSES: tuple[float, ...] = (0.0, 0.02, 0.04, 0.06, 0.08, 0.10)


@dataclass(frozen=True)
class FieldLayout:
    """1-indexed plaintext header positions. The magic byte always sits at position 1."""

    pt: int = 2
    seq: int = 4
    ssrc: int = 6
    header_len: int = 16

    def __post_init__(self) -> None:
        spans = {"pt": {self.pt}, "seq": {self.seq, self.seq + 1},
                 "ssrc": set(range(self.ssrc, self.ssrc + 4))}
        used: set[int] = {1}
        for name, span in spans.items():
            if min(span) < 2 or max(span) > self.header_len:
                raise ConfigError(f"{name} field {sorted(span)} outside header positions 2..{self.header_len}")
            if used & span:
                raise ConfigError(f"{name} field {sorted(span)} overlaps another field")
            used |= span

    @property
    def seq_positions(self) -> tuple[int, int]:
        return (self.seq, self.seq + 1)

    @classmethod
    def random(cls, rng: np.random.Generator, header_len: int = 16) -> "FieldLayout":
        while True:
            pt, seq, ssrc = (int(v) for v in rng.integers(2, header_len + 1, size=3))
            try:
                return cls(pt, seq, ssrc, header_len)
            except ConfigError:
                continue


@dataclass(frozen=True)
class StreamKey:
    keystream: bytes

    def __post_init__(self) -> None:
        if not self.keystream or self.keystream[0] != 0:
            raise KeyLengthError("keystream must be non-empty with position 1 equal to 0")

    @classmethod
    def generate(cls, rng: np.random.Generator, length: int = KEYSTREAM_LEN) -> "StreamKey":
        ks = bytearray(rng.bytes(length))
        ks[0] = 0
        return cls(bytes(ks))

    def field_key(self, positions: Sequence[int]) -> int:
        """Keystream bytes at 1-indexed ``positions`` read as a big-endian integer."""
        return int.from_bytes(bytes(self.keystream[p - 1] for p in positions), "big")

    def __len__(self) -> int:
        return len(self.keystream)


def xor_encrypt(plain: bytes, key: StreamKey | bytes) -> bytes:
    ks = key.keystream if isinstance(key, StreamKey) else bytes(key)
    n = len(plain)
    if len(ks) < n:
        raise KeyLengthError(f"keystream of {len(ks)} bytes cannot cover a {n}-byte payload")
    if n == 0:
        return b""
    return (int.from_bytes(plain, "big") ^ int.from_bytes(ks[:n], "big")).to_bytes(n, "big")


@dataclass(frozen=True)
class GenConfig:
    duration_s: float = 60.0
    seed: int = 0
    condition: NetworkCondition = field(default_factory=NetworkCondition)
    layout: FieldLayout = field(default_factory=FieldLayout)
    gear_table: tuple[tuple[int, int, int], ...] = GEAR_TABLE
    start_gear: int = 0
    mtu: int = 1200
    frame_cv: float = 0.15
    fec_base: float = 0.08
    fec_gain: float = 2.0
    chatter_fraction: float = 0.005
    queue_ms: int = 50
    step_down_after_s: int = 2
    step_up_after_s: int = 10
    side_flows: bool = True
    video_pt: int = 98
    fec_pt: int = 99

    def validate(self) -> None:
        if not self.duration_s > 0:
            raise ConfigError(f"duration_s must be positive, got {self.duration_s}")
        if not self.gear_table:
            raise ConfigError("gear table is empty")
        if not 0 <= self.start_gear < len(self.gear_table):
            raise ConfigError(f"start_gear {self.start_gear} outside gear table")
        if self.mtu <= self.layout.header_len or self.mtu > KEYSTREAM_LEN:
            raise ConfigError(f"mtu {self.mtu} must lie in ({self.layout.header_len}, {KEYSTREAM_LEN}]")
        if self.video_pt == self.fec_pt:
            raise ConfigError("video and FEC payload types must differ")
        if not 0 <= self.chatter_fraction < 1:
            raise ConfigError("chatter_fraction must lie in [0, 1)")
        bw = self.condition.bandwidth_kbps
        if bw is not None:
            floor_kbps = min(g[0] for g in self.gear_table) * (1 + self.fec_base)
            if floor_kbps > bw:
                raise ConfigError(f"lowest gear needs {floor_kbps:.0f} kbps but bandwidth is {bw} kbps")


@dataclass(frozen=True)
class TraceRow:
    t_us: int
    bitrate_kbps: int
    framerate_fps: int
    resolution_width: int
    fec_ratio: float
    loss_rate: float


@dataclass
class GroundTruth:
    media_flow: FlowKey
    layout: FieldLayout
    key: StreamKey
    condition: NetworkCondition
    seed: int
    trace: list[TraceRow]
    packets: list[tuple[int, str, int]]  # (ts_us, class, seq) per received media-flow packet
    sent_media_packets: int = 0
    random_drops: int = 0
    tail_drops: int = 0

    @property
    def seq_key(self) -> int:
        return self.key.field_key(self.layout.seq_positions)

    def to_json(self) -> dict:
        return {
            "media_flow": str(self.media_flow),
            "layout": asdict(self.layout),
            "field_positions": {"magic": 1, "pt": self.layout.pt,
                                "seq": list(self.layout.seq_positions),
                                "ssrc": list(range(self.layout.ssrc, self.layout.ssrc + 4))},
            "key_hex": self.key.keystream.hex(),
            "seq_key": self.seq_key,
            "condition": asdict(self.condition),
            "seed": self.seed,
            "sent_media_packets": self.sent_media_packets,
            "random_drops": self.random_drops,
            "tail_drops": self.tail_drops,
            "trace": [asdict(r) for r in self.trace],
        }

    def save(self, json_path: str | Path, csv_path: str | Path) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=1) + "\n")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["ts_us", "class", "seq"])
            w.writerows(self.packets)

    @classmethod
    def load(cls, json_path: str | Path, csv_path: str | Path | None = None) -> "GroundTruth":
        doc = json.loads(Path(json_path).read_text())
        try:
            truth = cls(
                media_flow=FlowKey.parse(doc["media_flow"]),
                layout=FieldLayout(**doc["layout"]),
                key=StreamKey(bytes.fromhex(doc["key_hex"])),
                condition=NetworkCondition(**doc["condition"]),
                seed=int(doc["seed"]),
                trace=[TraceRow(**row) for row in doc["trace"]],
                packets=[],
                sent_media_packets=int(doc.get("sent_media_packets", 0)),
                random_drops=int(doc.get("random_drops", 0)),
                tail_drops=int(doc.get("tail_drops", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(str(json_path), None, f"malformed ground truth: {exc}") from exc
        if csv_path is not None and Path(csv_path).exists():
            with open(csv_path, newline="") as fh:
                reader = csv.DictReader(fh)
                if reader.fieldnames != ["ts_us", "class", "seq"]:
                    raise SchemaError(str(csv_path), None, f"unexpected header {reader.fieldnames}")
                truth.packets = [(int(r["ts_us"]), r["class"], int(r["seq"])) for r in reader]
        return truth


def derive_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint32)[0])


class _Link:
    """Bernoulli loss, then a byte-serialising bottleneck with a sojourn-time limit, then delay."""

    def __init__(self, cond: NetworkCondition, queue_ms: int, rng: np.random.Generator) -> None:
        self.cond = cond
        self.rng = rng
        self.rate_bps = None if cond.bandwidth_kbps is None else cond.bandwidth_kbps * 1000
        self.queue_us = queue_ms * 1000
        self.link_free_us = 0
        self.delay_us = cond.delay_ms * 1000
        self.jitter_us = cond.jitter_ms * 1000

    def send(self, t_us: int, payload_len: int) -> tuple[int | None, str | None]:
        if self.cond.loss_rate > 0 and self.rng.random() < self.cond.loss_rate:
            return None, "random"
        depart = t_us
        if self.rate_bps is not None:
            if self.link_free_us - t_us > self.queue_us:
                return None, "tail"
            ser = math.ceil((payload_len + IP_UDP_OVERHEAD) * 8 * 1_000_000 / self.rate_bps)
            depart = max(t_us, self.link_free_us) + ser
            self.link_free_us = depart
        arrival = depart + self.delay_us
        if self.jitter_us:
            arrival += int(self.rng.integers(0, self.jitter_us + 1))
        return arrival, None


def generate_stream(config: GenConfig) -> tuple[Capture, GroundTruth]:
    """Simulate one receiver-side capture and its ground truth."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    layout = config.layout
    key = StreamKey.generate(rng)
    keyint = int.from_bytes(key.keystream, "big")
    keylen = len(key.keystream)
    ssrc = rng.bytes(4)
    link = _Link(config.condition, config.queue_ms, rng)

    media = FlowKey(SENDER[0], RECEIVER[0], SENDER[1], RECEIVER[1])
    control = FlowKey(SENDER[0], RECEIVER[0], CONTROL_PORT, RECEIVER[1])
    reports = FlowKey(RECEIVER[0], SENDER[0], RECEIVER[1], SENDER[1])

    pt_i, seq_i, ssrc_i = layout.pt - 1, layout.seq - 1, layout.ssrc - 1
    hdr = layout.header_len
    sigma = math.sqrt(math.log1p(config.frame_cv ** 2))
    pace_us = 500
    duration_us = int(round(config.duration_s * 1_000_000))

    def encrypt(buf: bytearray) -> bytes:
        n = len(buf)
        return (int.from_bytes(buf, "big") ^ (keyint >> (8 * (keylen - n)))).to_bytes(n, "big")

    def media_packet(size: int, pt: int, seq: int) -> bytes:
        buf = bytearray(rng.bytes(size))
        buf[0] = MAGIC
        buf[pt_i] = pt
        buf[seq_i] = seq >> 8
        buf[seq_i + 1] = seq & 0xFF
        buf[ssrc_i:ssrc_i + 4] = ssrc
        return encrypt(buf)

    received: list[tuple[int, int, FlowKey, bytes, str, int]] = []  # arrival, order, flow, payload, cls, seq
    order = 0
    gear = config.start_gear
    video_seq = 0
    fec_seq = 0
    fec_credit = 0.0
    loss_ewma = 0.0
    congested_run = 0
    stable_run = 0
    trace: list[TraceRow] = []
    sent_media = random_drops = tail_drops = 0

    n_seconds = math.ceil(duration_us / 1_000_000)
    for sec in range(n_seconds):
        bitrate, fps, width = config.gear_table[gear]
        fec_ratio = min(0.5, max(0.05, config.fec_base + config.fec_gain * loss_ewma))
        trace.append(TraceRow(sec * 1_000_000 + link.delay_us, bitrate, fps, width,
                              round(fec_ratio, 6), config.condition.loss_rate))
        sec_sent = sec_lost = sec_delivered_bytes = 0

        def transmit(t: int, flow: FlowKey, payload: bytes, cls: str, seq: int) -> None:
            nonlocal order, sent_media, random_drops, tail_drops, sec_sent, sec_lost, sec_delivered_bytes
            arrival, why = link.send(t, len(payload))
            if cls in (VIDEO, FEC):
                sent_media += 1
                sec_sent += 1
            if arrival is None:
                if flow == media:
                    if why == "random":
                        random_drops += 1
                    else:
                        tail_drops += 1
                if cls in (VIDEO, FEC):
                    sec_lost += 1
                return
            if cls in (VIDEO, FEC):
                sec_delivered_bytes += len(payload)
            received.append((arrival, order, flow, payload, cls, seq))
            order += 1

        frame_bytes_mean = bitrate * 1000 / 8 / fps
        for j in range(fps):
            t0 = sec * 1_000_000 + (j * 1_000_000) // fps
            if t0 >= duration_us:
                break
            frame_bytes = max(1, int(round(frame_bytes_mean * rng.lognormal(-sigma * sigma / 2, sigma))))
            n_pkts = math.ceil(frame_bytes / (config.mtu - hdr))
            base, extra = divmod(frame_bytes, n_pkts)
            sizes = [hdr + base + (1 if k < extra else 0) for k in range(n_pkts)]
            t = t0
            for size in sizes:
                transmit(t, media, media_packet(size, config.video_pt, video_seq), VIDEO, video_seq)
                video_seq = (video_seq + 1) & 0xFFFF
                t += pace_us
                if config.chatter_fraction and rng.random() < config.chatter_fraction:
                    buf = bytearray(rng.bytes(int(rng.integers(40, 201))))
                    buf[0] = int(rng.integers(0, 255))
                    if buf[0] >= MAGIC:
                        buf[0] += 1
                    transmit(t, media, bytes(buf), CHATTER, -1)
            fec_credit += fec_ratio * sum(sizes)
            fec_size = max(sizes)
            while fec_credit >= fec_size:
                transmit(t, media, media_packet(fec_size, config.fec_pt, fec_seq), FEC, fec_seq)
                fec_seq = (fec_seq + 1) & 0xFFFF
                fec_credit -= fec_size
                t += pace_us

        if config.side_flows:
            for t_ms in range(0, 1000, 500):
                t = sec * 1_000_000 + t_ms * 1000 + 250
                if t < duration_us:
                    transmit(t, control, rng.bytes(int(rng.integers(80, 151))), "control", -1)
            for t_ms in range(100, 1000, 200):
                t = sec * 1_000_000 + t_ms * 1000
                if t < duration_us:
                    # captured at the receiver on the way out, so no impairment
                    received.append((t, order, reports, rng.bytes(int(rng.integers(60, 101))), "report", -1))
                    order += 1

        # rate controller and FEC adaptation, driven by this second's delivery report
        observed = sec_lost / sec_sent if sec_sent else 0.0
        loss_ewma = 0.5 * loss_ewma + 0.5 * observed
        delivered_kbps = sec_delivered_bytes * 8 / 1000
        if delivered_kbps < bitrate:
            congested_run += 1
            stable_run = 0
        else:
            congested_run = 0
            stable_run += 1
        if congested_run >= config.step_down_after_s and gear > 0:
            gear -= 1
            congested_run = stable_run = 0
        elif stable_run >= config.step_up_after_s and gear < len(config.gear_table) - 1:
            gear += 1
            stable_run = 0

    received.sort(key=lambda r: (r[0], r[1]))
    first = received[0][0] if received else 0
    records = []
    packets = []
    for arrival, _, flow, payload, cls, seq in received:
        records.append(UdpRecord(arrival - first, flow.src_ip, flow.dst_ip, flow.src_port, flow.dst_port, payload))
        if flow == media:
            packets.append((arrival - first, cls, seq))
    trace = [replace(row, t_us=row.t_us - first) for row in trace]
    capture = Capture(tuple(records), EPOCH_BASE_US + first)
    truth = GroundTruth(media, layout, key, config.condition, config.seed, trace, packets,
                        sent_media, random_drops, tail_drops)
    return capture, truth


def run_grid(grid: Sequence[NetworkCondition], per_condition_s: float, seed: int,
             base: GenConfig | None = None) -> list[tuple[Capture, GroundTruth]]:
    if not grid:
        raise ConfigError("condition grid is empty")
    if not per_condition_s > 0:
        raise ConfigError(f"per_condition_s must be positive, got {per_condition_s}")
    base = base or GenConfig()
    return [generate_stream(replace(base, duration_s=per_condition_s, condition=cond,
                                    seed=derive_seed(seed, i)))
            for i, cond in enumerate(grid)]
