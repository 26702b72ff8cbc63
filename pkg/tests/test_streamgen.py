import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dai.errors import ConfigError, KeyLengthError
from dai.streamgen import (CALIBRATION_LOSSES, GEAR_TABLE, MAGIC, PAPER_GRID, FieldLayout, GenConfig,
                           GroundTruth, NetworkCondition, StreamKey, derive_seed, generate_stream,
                           run_grid, xor_encrypt)
from dai.traffic_core import media_flow, split_flows, write_pcap


def _pcap_bytes(cap, tmp_path, name):
    write_pcap(cap, tmp_path / name)
    return (tmp_path / name).read_bytes()


def test_xor_example():
    assert xor_encrypt(b"\x00\x00", b"\x00\xab") == b"\x00\xab"


@given(st.binary(min_size=0, max_size=200), st.binary(min_size=200, max_size=220))
def test_xor_involution(m, k):
    assert xor_encrypt(xor_encrypt(m, k), k) == m


def test_magic_byte_stays_clear(rng):
    key = StreamKey.generate(rng)
    assert key.keystream[0] == 0
    assert xor_encrypt(bytes([MAGIC, 1, 2]), key)[0] == 65


def test_short_key_rejected():
    with pytest.raises(KeyLengthError):
        xor_encrypt(b"abc", b"\x00\x01")


def test_clean_link_delivers_everything():
    cap, truth = generate_stream(GenConfig(duration_s=20, seed=3))
    media = [p for p in truth.packets if p[1] in ("video", "fec")]
    assert len(media) == truth.sent_media_packets
    assert truth.random_drops == truth.tail_drops == 0
    seqs = [s for _, c, s in truth.packets if c == "video"]
    assert seqs == list(range(len(seqs)))


def test_bernoulli_loss_rate():
    cfg = GenConfig(duration_s=60, seed=5, mtu=600, start_gear=3, condition=NetworkCondition(loss_rate=0.05))
    _, truth = generate_stream(cfg)
    assert truth.sent_media_packets >= 10_000
    received = sum(1 for p in truth.packets if p[1] in ("video", "fec"))
    drop = 1 - received / truth.sent_media_packets
    assert abs(drop - 0.05) <= 0.01


def test_bandwidth_cap_respected():
    cap, truth = generate_stream(GenConfig(duration_s=60, seed=6, start_gear=3,
                                           condition=NetworkCondition(bandwidth_kbps=900)))
    inbound = [r for r in cap if r.dst_ip == truth.media_flow.dst_ip]
    ts = np.array([r.ts_us for r in inbound])
    size = np.array([len(r.payload) for r in inbound])
    slot = ts // 2_000_000
    rates = np.bincount(slot, weights=size) * 8 / 2000
    assert truth.tail_drops > 0  # the top gear plus FEC overfills the link
    assert rates[5:-1].max() <= 950


def test_keystream_reuse_invariant(clean_stream, rng):
    cap, truth = clean_stream
    _, flow = media_flow(cap)
    media = [(r.payload, ts) for r, ts in zip(flow, truth.packets) if ts[1] in ("video", "fec")]
    key = truth.key.keystream
    for i, j in rng.integers(0, len(media), size=(200, 2)):
        a, b = media[i][0], media[j][0]
        n = min(len(a), len(b))
        pa, pb = xor_encrypt(a, key), xor_encrypt(b, key)
        assert bytes(x ^ y for x, y in zip(a[:n], b[:n])) == bytes(x ^ y for x, y in zip(pa[:n], pb[:n]))


def test_plaintext_layout(clean_stream):
    cap, truth = clean_stream
    _, flow = media_flow(cap)
    lay = truth.layout
    for rec, (_, cls, seq) in list(zip(flow, truth.packets))[:500]:
        plain = xor_encrypt(rec.payload, truth.key)
        if cls == "chatter":
            assert plain[0] != MAGIC
            continue
        assert plain[0] == MAGIC
        assert plain[lay.pt - 1] == (98 if cls == "video" else 99)
        assert int.from_bytes(plain[lay.seq - 1:lay.seq + 1], "big") == seq


def test_video_seq_increasing_under_loss(lossy_stream):
    _, truth = lossy_stream
    seqs = np.array([s for _, c, s in truth.packets if c == "video"])
    assert (np.diff(seqs) >= 1).all()


def test_determinism(tmp_path):
    cfg = GenConfig(duration_s=10, seed=42, condition=NetworkCondition(1000, 0.05, 100, 5))
    a = _pcap_bytes(generate_stream(cfg)[0], tmp_path, "a.pcap")
    b = _pcap_bytes(generate_stream(cfg)[0], tmp_path, "b.pcap")
    assert a == b
    c = _pcap_bytes(generate_stream(GenConfig(duration_s=10, seed=43))[0], tmp_path, "c.pcap")
    assert a != c


def test_fec_ratio_monotone_in_loss():
    means = []
    for loss in (0.0, 0.05, 0.10):
        _, truth = generate_stream(GenConfig(duration_s=30, seed=7, condition=NetworkCondition(1000, loss, 0)))
        means.append(np.mean([row.fec_ratio for row in truth.trace]))
    assert means == sorted(means)
    assert means[0] < means[2]


def test_trace_values_from_gear_table(lossy_stream):
    _, truth = lossy_stream
    attainable = set(GEAR_TABLE)
    assert all((r.bitrate_kbps, r.framerate_fps, r.resolution_width) in attainable for r in truth.trace)


def test_controller_steps_down_under_cap():
    _, truth = generate_stream(GenConfig(duration_s=30, seed=8, start_gear=3,
                                         condition=NetworkCondition(bandwidth_kbps=500)))
    assert truth.trace[0].bitrate_kbps == 900
    assert truth.trace[-1].bitrate_kbps < 900


def test_infeasible_config_rejected():
    with pytest.raises(ConfigError):
        generate_stream(GenConfig(condition=NetworkCondition(bandwidth_kbps=100)))
    with pytest.raises(ConfigError):
        NetworkCondition(loss_rate=1.5)
    with pytest.raises(ConfigError):
        NetworkCondition(bandwidth_kbps=0)
    with pytest.raises(ConfigError):
        FieldLayout(pt=4, seq=4)


def test_random_layouts_are_valid(rng):
    for _ in range(50):
        lay = FieldLayout.random(rng)
        used = [1, lay.pt, *lay.seq_positions, *range(lay.ssrc, lay.ssrc + 4)]
        assert len(set(used)) == len(used) and max(used) <= 16


def test_paper_grid_shape():
    assert len(PAPER_GRID) == 27
    assert {c.bandwidth_kbps for c in PAPER_GRID} == {900, 1000, 1100}
    assert {c.loss_rate for c in PAPER_GRID} == {0.0, 0.05, 0.10}
    assert {c.delay_ms for c in PAPER_GRID} == {0, 100, 200}
    assert CALIBRATION_LOSSES == (0.0, 0.02, 0.04, 0.06, 0.08, 0.10)


@pytest.mark.slow
def test_run_grid_full():
    out = run_grid(PAPER_GRID, 120, seed=0)
    assert len(out) == 27
    assert [t.condition for _, t in out] == list(PAPER_GRID)


def test_run_grid_single_matches_generate(tmp_path):
    cond = NetworkCondition(1000, 0.05, 100)
    (cap, truth), = run_grid([cond], 5, seed=9)
    cap2, _ = generate_stream(GenConfig(duration_s=5, seed=derive_seed(9, 0), condition=cond))
    assert _pcap_bytes(cap, tmp_path, "a") == _pcap_bytes(cap2, tmp_path, "b")


def test_run_grid_errors():
    with pytest.raises(ConfigError):
        run_grid([NetworkCondition()], 0, seed=0)
    with pytest.raises(ConfigError):
        run_grid([], 10, seed=0)


def test_side_flows_present(clean_stream):
    cap, truth = clean_stream
    flows = split_flows(cap)
    assert truth.media_flow in flows
    assert len(flows) == 3


def test_ground_truth_round_trip(tmp_path, lossy_stream):
    _, truth = lossy_stream
    truth.save(tmp_path / "t.json", tmp_path / "t.csv")
    back = GroundTruth.load(tmp_path / "t.json", tmp_path / "t.csv")
    assert back.seq_key == truth.seq_key
    assert back.trace == truth.trace
    assert back.packets == [tuple(p) for p in truth.packets]
    assert back.media_flow == truth.media_flow and back.layout == truth.layout
