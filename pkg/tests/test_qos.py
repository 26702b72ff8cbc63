import numpy as np
import pytest

from dai.decipher import FieldMap, discover
from dai.errors import SchemaError, StaleFieldMapError
from dai.experiment import capture_windows
from dai.qos import (CSV_HEADER, extract_windows, flow_loss_rate, interarrival_stats, loss_rate,
                     read_qos_csv, write_qos_csv)
from dai.streamgen import GenConfig, NetworkCondition, generate_stream
from dai.traffic_core import Capture, media_flow

from conftest import make_capture

TOY_MAP = FieldMap(constant_positions=[1], constant_values={1: 65}, pt_position=2, video_pt_cipher=7,
                   seq_positions=(4, 5), seq_width=2, seq_key=0)


def toy_packet(seq, size=100, pt=7):
    return bytes([65, pt, 0, seq >> 8, seq & 0xFF]) + b"\0" * (size - 5)


@pytest.fixture(scope="module")
def ten_seconds(calibration):
    cap, truth = generate_stream(GenConfig(duration_s=10, seed=21, start_gear=2))
    fm, windows = capture_windows(cap, discover(calibration[0]))
    return cap, truth, fm, windows


def test_loss_rate_examples():
    seqs = [s for s in range(1, 101) if s not in range(7, 12)]
    assert loss_rate(seqs) == pytest.approx(0.05)
    assert loss_rate([*range(65530, 65536), *range(0, 5)]) == 0.0
    assert loss_rate([5]) == 0.0


def test_loss_rate_ignores_duplicates():
    seqs = [s for s in range(1, 101) if s % 10]
    assert loss_rate(seqs + seqs[:20]) == loss_rate(sorted(seqs + seqs[:20])) == loss_rate(seqs)


def test_loss_rate_wrap_with_gap():
    seqs = [65533, 65535, 1, 2]
    assert loss_rate(seqs) == pytest.approx(2 / 6)


def test_interarrival_examples():
    assert interarrival_stats([0, 10_000, 20_000]) == (10.0, 0.0)
    assert interarrival_stats([0, 10_000, 30_000]) == (15.0, 5.0)
    assert interarrival_stats([7]) == (0.0, 0.0)


def test_interarrival_against_numpy(rng):
    ts = np.cumsum(rng.integers(1, 50_000, size=200))
    mean, std = interarrival_stats(ts)
    gaps = np.diff(ts) / 1000
    assert mean == pytest.approx(gaps.mean()) and std == pytest.approx(gaps.std())


def test_window_count_and_rates(ten_seconds):
    cap, truth, fm, windows = ten_seconds
    assert len(windows) == 5
    _, flow = media_flow(cap)
    ts = np.array([r.ts_us for r in flow])
    size = np.array([len(r.payload) for r in flow])
    cls = np.array([c for _, c, _ in truth.packets])
    slot = (ts - ts[0]) // 2_000_000
    for k, w in enumerate(windows):
        sel = slot == k
        udp = size[sel].sum() * 8 / 2000
        assert w.udp_rate_kbps == pytest.approx(udp, rel=0.05)
        assert w.video_rate_kbps == pytest.approx(size[sel & (cls == "video")].sum() * 8 / 2000, rel=0.05)
        assert w.fec_rate_kbps == pytest.approx(size[sel & (cls == "fec")].sum() * 8 / 2000, rel=0.05)
        assert w.video_rate_kbps + w.fec_rate_kbps <= w.udp_rate_kbps + 1e-9
        assert not w.sparse


def test_single_packet_window_is_sparse():
    cap = make_capture([toy_packet(0, 1000)])
    (w,) = extract_windows(cap, TOY_MAP)
    assert w.udp_rate_kbps == 4.0
    assert w.sparse
    assert (w.iat_mean_ms, w.iat_std_ms, w.loss_rate) == (0.0, 0.0, 0.0)


def test_empty_flow():
    assert extract_windows(Capture(), TOY_MAP) == []


def test_no_fec_means_zero_fec_rate():
    cap = make_capture([toy_packet(i) for i in range(300)], ts=range(0, 300 * 20_000, 20_000))
    windows = extract_windows(cap, TOY_MAP)
    assert len(windows) == 3
    assert all(w.fec_rate_kbps == 0.0 for w in windows)
    assert all(w.loss_rate == 0.0 for w in windows)


def test_trailing_partial_window_dropped():
    # 2.5 s of packets every 10 ms -> one full window
    cap = make_capture([toy_packet(i) for i in range(250)], ts=range(0, 2_500_000, 10_000))
    assert len(extract_windows(cap, TOY_MAP)) == 1


def test_constant_delay_does_not_change_features():
    base = GenConfig(duration_s=20, seed=31, start_gear=2)
    fm = FieldMap([1], {1: 65}, 2, 0, (4, 5), 2, 0)
    out = []
    for delay in (0, 100):
        cap, _ = generate_stream(GenConfig(**{**base.__dict__, "condition": NetworkCondition(delay_ms=delay)}))
        out.append(capture_windows(cap, fm)[1])
    assert out[0] == out[1]


def test_window_rates_additive(ten_seconds):
    cap, _, fm, two = ten_seconds
    _, flow = media_flow(cap)
    four = extract_windows(flow, fm, 4_000_000)
    for k, w in enumerate(four):
        a, b = two[2 * k], two[2 * k + 1]
        for attr in ("udp_rate_kbps", "video_rate_kbps", "fec_rate_kbps"):
            assert getattr(w, attr) == pytest.approx((getattr(a, attr) + getattr(b, attr)) / 2)


def test_duplicate_delivery_keeps_loss(ten_seconds):
    cap, _, fm, windows = ten_seconds
    _, flow = media_flow(cap)
    dup = Capture.from_records([*flow.records, *flow.records[::7]], flow.epoch_us)
    assert [w.loss_rate for w in extract_windows(dup, fm)] == [w.loss_rate for w in windows]


def test_loss_estimate_aggregate(calibration):
    fm0 = discover(calibration[0])
    cap, truth = generate_stream(GenConfig(duration_s=60, seed=33, condition=NetworkCondition(loss_rate=0.10)))
    fm, _ = capture_windows(cap, fm0)
    assert abs(flow_loss_rate(media_flow(cap)[1], fm) - 0.10) <= 0.01


def test_video_share_follows_fec_base(clean_stream, calibration):
    cap, _ = clean_stream
    _, windows = capture_windows(cap, discover(calibration[0]))
    video = sum(w.video_rate_kbps for w in windows)
    fec = sum(w.fec_rate_kbps for w in windows)
    assert video / (video + fec) == pytest.approx(1 / 1.08, rel=0.05)


def test_stale_field_map(calibration, clean_stream):
    fm = discover(calibration[0])
    cap, _ = clean_stream
    with pytest.raises(StaleFieldMapError):
        capture_windows(cap, fm, bind=False)


def test_csv_round_trip(tmp_path, ten_seconds):
    *_, windows = ten_seconds
    write_qos_csv(windows, tmp_path / "q.csv")
    assert (tmp_path / "q.csv").read_text().splitlines()[0] == ",".join(CSV_HEADER)
    back = read_qos_csv(tmp_path / "q.csv")
    assert len(back) == len(windows)
    for a, b in zip(back, windows):
        assert a.t_start_us == b.t_start_us and a.packet_count == b.packet_count
        assert a.video_rate_kbps == pytest.approx(b.video_rate_kbps, abs=1e-6)


def test_csv_schema_errors(tmp_path):
    (tmp_path / "a.csv").write_text("t_start_us,duration_us\n1,2\n")
    with pytest.raises(SchemaError) as info:
        read_qos_csv(tmp_path / "a.csv")
    assert info.value.column == "udp_kbps"
    (tmp_path / "b.csv").write_text(",".join(CSV_HEADER) + "\n0,2000000,1,2,3,oops,1,1,5,0\n")
    with pytest.raises(SchemaError) as info:
        read_qos_csv(tmp_path / "b.csv")
    assert info.value.column == "loss"
