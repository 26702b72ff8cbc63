"""UDP record model, classic pcap I/O, flow demultiplexing and media-flow selection."""

from __future__ import annotations

import ipaddress
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple

from .errors import DataError, NoFlowsError, TruncatedCaptureError, UnsupportedFormatError

UDP = 17
MAX_UDP_PAYLOAD = 65507

PCAP_MAGIC = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
SNAPLEN = 65535 + 14 + 20 + 8

# Locally administered unicast addresses, fixed so output is reproducible.
SRC_MAC = bytes.fromhex("020000000001")
DST_MAC = bytes.fromhex("020000000002")

_GLOBAL_HDR = struct.Struct("<IHHiIII")
_RECORD_HDR = struct.Struct("<IIII")
_ETH_HDR = struct.Struct("!6s6sH")
_IP_HDR = struct.Struct("!BBHHHBBH4s4s")
_UDP_HDR = struct.Struct("!HHHH")


class FlowKey(NamedTuple):
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    protocol: int = UDP

    def sort_key(self) -> tuple[int, int, int, int, int]:
        return (int(ipaddress.IPv4Address(self.src_ip)), int(ipaddress.IPv4Address(self.dst_ip)),
                self.src_port, self.dst_port, self.protocol)

    def __str__(self) -> str:
        return f"{self.src_ip}:{self.src_port}->{self.dst_ip}:{self.dst_port}/udp"

    @classmethod
    def parse(cls, text: str) -> "FlowKey":
        """Inverse of ``str(key)``."""
        body = text.removesuffix("/udp")
        src, dst = body.split("->")
        s_ip, s_port = src.rsplit(":", 1)
        d_ip, d_port = dst.rsplit(":", 1)
        return cls(s_ip, d_ip, int(s_port), int(d_port))


@dataclass(frozen=True, slots=True)
class UdpRecord:
    ts_us: int
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    payload: bytes

    def __post_init__(self) -> None:
        if not 1 <= len(self.payload) <= MAX_UDP_PAYLOAD:
            raise DataError(f"UDP payload length {len(self.payload)} outside [1, {MAX_UDP_PAYLOAD}]")

    @property
    def flow(self) -> FlowKey:
        return FlowKey(self.src_ip, self.dst_ip, self.src_port, self.dst_port)


@dataclass(frozen=True)
class Capture:
    """Time-ordered UDP records; ``ts_us`` is relative to ``epoch_us`` (absolute, microseconds)."""

    records: tuple[UdpRecord, ...] = ()
    epoch_us: int = 0
    skipped: int = field(default=0, compare=False)

    @classmethod
    def from_records(cls, records: Iterable[UdpRecord], epoch_us: int = 0, skipped: int = 0) -> "Capture":
        ordered = sorted(records, key=lambda r: r.ts_us)  # stable
        return cls(tuple(ordered), epoch_us, skipped)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[UdpRecord]:
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def total_bytes(self) -> int:
        return sum(len(r.payload) for r in self.records)


def _ipv4_checksum(header: bytes) -> int:
    total = sum(struct.unpack("!10H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _frame(rec: UdpRecord, ident: int) -> bytes:
    udp_len = 8 + len(rec.payload)
    total_len = 20 + udp_len
    src = ipaddress.IPv4Address(rec.src_ip).packed
    dst = ipaddress.IPv4Address(rec.dst_ip).packed
    ip = _IP_HDR.pack(0x45, 0, total_len, ident & 0xFFFF, 0x4000, 64, UDP, 0, src, dst)
    ip = ip[:10] + struct.pack("!H", _ipv4_checksum(ip)) + ip[12:]
    udp = _UDP_HDR.pack(rec.src_port, rec.dst_port, udp_len, 0)
    return _ETH_HDR.pack(DST_MAC, SRC_MAC, 0x0800) + ip + udp + rec.payload


def write_pcap(capture: Capture, path: str | Path) -> None:
    """Write ``capture`` as classic little-endian pcap with Ethernet framing."""
    if len(capture) == 0:
        raise DataError("refusing to write an empty capture")
    chunks = [_GLOBAL_HDR.pack(PCAP_MAGIC, 2, 4, 0, 0, SNAPLEN, LINKTYPE_ETHERNET)]
    for i, rec in enumerate(capture.records):
        frame = _frame(rec, i)
        sec, usec = divmod(capture.epoch_us + rec.ts_us, 1_000_000)
        chunks.append(_RECORD_HDR.pack(sec, usec, len(frame), len(frame)))
        chunks.append(frame)
    Path(path).write_bytes(b"".join(chunks))


def _parse_udp(frame: bytes, linktype: int) -> tuple[str, str, int, int, bytes] | None:
    if linktype == LINKTYPE_ETHERNET:
        if len(frame) < 14:
            return None
        off = 12
        ethertype = struct.unpack_from("!H", frame, off)[0]
        while ethertype == 0x8100 and len(frame) >= off + 6:  # 802.1Q tags
            off += 4
            ethertype = struct.unpack_from("!H", frame, off)[0]
        if ethertype != 0x0800:
            return None
        ip = frame[off + 2:]
    elif linktype == LINKTYPE_RAW:
        ip = frame
    else:
        return None
    if len(ip) < 20 or ip[0] >> 4 != 4:
        return None
    ihl = (ip[0] & 0x0F) * 4
    total_len = struct.unpack_from("!H", ip, 2)[0]
    frag = struct.unpack_from("!H", ip, 6)[0]
    if ip[9] != UDP or frag & 0x3FFF or len(ip) < ihl + 8:
        return None
    src_ip = str(ipaddress.IPv4Address(ip[12:16]))
    dst_ip = str(ipaddress.IPv4Address(ip[16:20]))
    sport, dport, udp_len, _ = _UDP_HDR.unpack_from(ip, ihl)
    end = min(ihl + udp_len, total_len, len(ip))
    payload = ip[ihl + 8:end]
    if not payload:
        return None
    return src_ip, dst_ip, sport, dport, payload


def read_pcap(path: str | Path) -> Capture:
    """Load UDP-over-IPv4 records from a classic pcap file.

    Non-UDP frames are skipped and counted in ``Capture.skipped``. The epoch is
    anchored at the earliest record, so the first record has ``ts_us == 0``.
    """
    data = Path(path).read_bytes()
    if len(data) < _GLOBAL_HDR.size:
        raise UnsupportedFormatError(f"{path}: too short for a pcap global header")
    magic_le = struct.unpack_from("<I", data, 0)[0]
    if magic_le == PCAP_MAGIC:
        endian = "<"
    elif magic_le == int.from_bytes(PCAP_MAGIC.to_bytes(4, "little"), "big"):
        endian = ">"
    elif magic_le in (PCAP_MAGIC_NS, int.from_bytes(PCAP_MAGIC_NS.to_bytes(4, "little"), "big")):
        raise UnsupportedFormatError(f"{path}: nanosecond pcap is not supported")
    else:
        raise UnsupportedFormatError(f"{path}: bad pcap magic 0x{magic_le:08x}")
    linktype = struct.unpack_from(endian + "I", data, 20)[0]
    rec_hdr = struct.Struct(endian + "IIII")

    raw: list[tuple[int, tuple]] = []
    skipped = 0
    off = _GLOBAL_HDR.size
    while off < len(data):
        if off + rec_hdr.size > len(data):
            raise TruncatedCaptureError(off, "incomplete record header")
        sec, usec, incl, _orig = rec_hdr.unpack_from(data, off)
        start = off + rec_hdr.size
        if start + incl > len(data):
            raise TruncatedCaptureError(off, f"record claims {incl} bytes, {len(data) - start} remain")
        parsed = _parse_udp(data[start:start + incl], linktype)
        if parsed is None:
            skipped += 1
        else:
            raw.append((sec * 1_000_000 + usec, parsed))
        off = start + incl

    if not raw:
        return Capture((), 0, skipped)
    epoch = min(ts for ts, _ in raw)
    records = [UdpRecord(ts - epoch, *fields) for ts, fields in raw]
    return Capture.from_records(records, epoch, skipped)


def split_flows(capture: Capture) -> dict[FlowKey, Capture]:
    groups: dict[FlowKey, list[UdpRecord]] = defaultdict(list)
    for rec in capture.records:
        groups[rec.flow].append(rec)
    return {k: Capture(tuple(v), capture.epoch_us) for k, v in groups.items()}


def select_media_flow(flows: Mapping[FlowKey, Capture]) -> FlowKey:
    """Pick the flow carrying the most payload bytes; ties go to the smaller FlowKey."""
    if not flows:
        raise NoFlowsError("no UDP flows to choose from")
    return min(flows, key=lambda k: (-flows[k].total_bytes, k.sort_key()))


def media_flow(capture: Capture) -> tuple[FlowKey, Capture]:
    flows = split_flows(capture)
    key = select_media_flow(flows)
    return key, flows[key]
