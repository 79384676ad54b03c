from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from famh.errors import (
    BadMagic,
    BadOffset,
    CoverageError,
    EmptyFile,
    IndivisibleLength,
    InvalidConfig,
    MissingRecording,
    NonMonotoneTime,
    NoUsableSegment,
    ParseError,
    SegmentTooShort,
    TruncatedFile,
    UnsupportedVersion,
)
from famh.ingest.batching import BatchPlan, RecordingStore, assemble_batch, iter_batches, plan_pretrain_epoch
from famh.ingest.recording import (
    LabelTrack,
    RawRecording,
    Recording30,
    intervals_to_track,
    load_labels_csv,
    load_recording_bin,
    load_recording_csv,
    save_labels_csv,
    save_recording_bin,
    save_recording_csv,
    track_to_intervals,
)
from famh.ingest.synthetic import ClassSignature, SyntheticConfig, desk_config, generate_synthetic
from famh.ingest.windowing import (
    WindowGeometry,
    map_labels,
    patchify,
    pretrain_offsets,
    unpatchify,
    window_finetune,
    window_pretrain,
)

MIN = 30 * 60  # samples per minute at 30 Hz
G = WindowGeometry()


class TestCsv:
    def test_three_rows(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("t,x,y,z\n0.00,0,0,1\n0.01,0,0,1\n0.02,0,0,1\n")
        rec = load_recording_csv(p)
        assert rec.id == "r" and rec.sample_rate_hz == 100.0
        assert rec.samples.tolist() == [[0, 0, 1]] * 3

    def test_bad_value_names_line(self, tmp_path):
        p = tmp_path / "r.csv"
        p.write_text("t,x,y,z\n0.00,0,0,1\n0.01,x,0,1\n")
        with pytest.raises(ParseError) as info:
            load_recording_csv(p)
        assert info.value.line == 3 and "line 3" in str(info.value)

    @pytest.mark.parametrize("body,exc", [
        ("", EmptyFile),
        ("t,x,y,z\n", EmptyFile),
        ("a,b,c,d\n0,0,0,1\n", ParseError),
        ("t,x,y,z\n0,0,0\n", ParseError),
        ("t,x,y,z\n0,0,0,nan\n0.01,0,0,1\n", ParseError),
        ("t,x,y,z\n0.02,0,0,1\n0.01,0,0,1\n", NonMonotoneTime),
    ])
    def test_errors(self, tmp_path, body, exc):
        p = tmp_path / "r.csv"
        p.write_text(body)
        with pytest.raises(exc):
            load_recording_csv(p)

    def test_jittered_rate_snaps(self, tmp_path, rng):
        t = np.arange(500) / 100 + rng.uniform(-5e-5, 5e-5, 500)
        t.sort()
        p = tmp_path / "r.csv"
        p.write_text("t,x,y,z\n" + "".join(f"{v},0,0,1\n" for v in t))
        assert load_recording_csv(p).sample_rate_hz == 100.0

    def test_hour_round_trip(self, tmp_path):
        raw, _ = generate_synthetic(desk_config(3), 3600.0, 100.0, rec_id="h")
        p = tmp_path / "h.csv"
        save_recording_csv(raw, p)
        back = load_recording_csv(p)
        assert back.sample_rate_hz == 100.0
        assert np.array_equal(back.samples, raw.samples)


class TestBinary:
    def test_round_trip(self, tmp_path, rng):
        rec = RawRecording("b", 100.0, rng.standard_normal((777, 3)).astype(np.float32))
        save_recording_bin(rec, tmp_path / "b.famh")
        back = load_recording_bin(tmp_path / "b.famh")
        assert back.id == "b" and back.sample_rate_hz == 100.0
        assert np.array_equal(back.samples, rec.samples)

    def test_layout(self, tmp_path):
        save_recording_bin(RawRecording("b", 30.0, [[1.0, 2.0, 3.0]]), tmp_path / "b.famh")
        blob = (tmp_path / "b.famh").read_bytes()
        assert blob[:4] == b"FAMH"
        assert struct.unpack_from("<HfQ", blob, 4) == (1, 30.0, 1)
        assert np.frombuffer(blob[18:], "<f4").tolist() == [1.0, 2.0, 3.0]

    def test_errors(self, tmp_path, rng):
        p = tmp_path / "b.famh"
        save_recording_bin(RawRecording("b", 100.0, rng.standard_normal((10, 3))), p)
        good = p.read_bytes()
        p.write_bytes(b"FAMX" + good[4:])
        with pytest.raises(BadMagic):
            load_recording_bin(p)
        p.write_bytes(good[:-1])
        with pytest.raises(TruncatedFile):
            load_recording_bin(p)
        p.write_bytes(good[:10])
        with pytest.raises(TruncatedFile):
            load_recording_bin(p)
        p.write_bytes(good[:4] + struct.pack("<H", 2) + good[6:])
        with pytest.raises(UnsupportedVersion):
            load_recording_bin(p)


class TestLabels:
    def test_intervals_raster(self):
        track = intervals_to_track([(0.0, 1.0, "sleep"), (2.0, 2.5, "walking")], 100, 30.0)
        idx = track.indices
        assert (idx[:30] == 5).all() and (idx[30:60] == 6).all()
        assert (idx[60:75] == 1).all() and (idx[75:] == 6).all()

    def test_csv_round_trip(self, tmp_path):
        rows = [(0.0, 12.5, "walking"), (12.5, 30.0, "sleep")]
        save_labels_csv(rows, tmp_path / "l.csv")
        assert load_labels_csv(tmp_path / "l.csv") == rows
        track = intervals_to_track(rows, 900, 30.0)
        assert track_to_intervals(track, 30.0) == rows

    def test_unknown_label(self):
        with pytest.raises(ParseError):
            intervals_to_track([(0, 1, "swimming")], 30, 30.0)

    def test_bad_interval(self, tmp_path):
        (tmp_path / "l.csv").write_text("start_s,end_s,label\n5,1,sleep\n")
        with pytest.raises(ParseError) as info:
            load_labels_csv(tmp_path / "l.csv")
        assert info.value.line == 2


class TestWindowing:
    def test_pretrain_full_plan(self):
        seg = np.zeros((1445 * MIN, 3), dtype=np.float32)
        wins = window_pretrain(seg, 0, G)
        assert [w.source[1] // MIN for w in wins] == list(range(0, 1396, 45))
        assert all(w.data.shape == (3, 90000) for w in wins)

    def test_pretrain_single_window(self):
        wins = window_pretrain(np.zeros((50 * MIN, 3)), 1, G, n_windows=1)
        assert [w.source[1] for w in wins] == [0]

    def test_pretrain_too_short(self):
        with pytest.raises(SegmentTooShort) as info:
            window_pretrain(np.zeros((49 * MIN, 3)), 0, G)
        assert (info.value.required, info.value.available) == (50 * MIN, 49 * MIN)

    def test_pretrain_24h_pads(self):
        offs = pretrain_offsets(1440 * MIN, G, np.random.default_rng(0))
        assert len(offs) == 32
        distinct = np.unique(offs)
        assert len(distinct) == (1440 - 50) // 45 + 1
        assert set(np.diff(distinct)) == {45 * MIN}

    @settings(max_examples=40, deadline=None)
    @given(st.integers(50 * MIN, 2000 * MIN), st.integers(0, 2**32 - 1))
    def test_pretrain_inside_segment(self, n, seed):
        offs = pretrain_offsets(n, G, np.random.default_rng(seed))
        assert offs.min() >= 0 and offs.max() + G.window_len <= n
        k = min(32, (n - G.window_len) // G.pretrain_stride + 1)
        assert (np.diff(offs[:k]) == G.pretrain_stride).all()
        assert np.array_equal(offs, pretrain_offsets(n, G, np.random.default_rng(seed)))

    def test_finetune_60_min(self):
        rec = Recording30("f", np.zeros((60 * MIN, 3), np.float32), [(0, 60 * MIN)])
        assert [w.source[1] // MIN for w in window_finetune(rec, G)] == [0, 5, 10]

    def test_finetune_50_min_and_remainder(self):
        rec = Recording30("f", np.zeros((50 * MIN, 3)), [(0, 50 * MIN)])
        assert len(window_finetune(rec, G)) == 1
        rec = Recording30("f", np.zeros((57 * MIN, 3)), [(0, 57 * MIN)])
        assert [w.source[1] // MIN for w in window_finetune(rec, G)] == [0, 5, 7]

    def test_finetune_two_segments(self):
        rec = Recording30("f", np.zeros((130 * MIN, 3)), [(0, 55 * MIN), (75 * MIN, 130 * MIN)])
        starts = [w.source[1] // MIN for w in window_finetune(rec, G)]
        assert starts == [0, 5, 75, 80]

    def test_finetune_no_segment(self):
        rec = Recording30("f", np.zeros((60 * MIN, 3)), [(0, 40 * MIN)])
        with pytest.raises(NoUsableSegment):
            window_finetune(rec, G)

    def test_patchify_default(self, rng):
        w = rng.standard_normal((3, 90000))
        p = patchify(w, 300)
        assert p.shape == (300, 3, 300)
        assert np.array_equal(p[7, 2], w[2, 2100:2400])
        assert patchify(w, 90000).shape == (1, 3, 90000)

    def test_patchify_indivisible(self):
        with pytest.raises(IndivisibleLength):
            patchify(np.zeros((3, 100)), 30)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 12), st.integers(1, 9), st.integers(0, 2**31))
    def test_patchify_bijection(self, batch, n_patches, patch_len, seed):
        w = np.random.default_rng(seed).standard_normal((batch, 3, n_patches * patch_len)).astype(np.float32)
        p = patchify(w, patch_len)
        assert p.shape == (batch, n_patches, 3, patch_len)
        assert np.array_equal(unpatchify(p), w)


class TestMapLabels:
    geom = WindowGeometry(patch_len=300, patch_count=3)

    def track(self, *runs):
        return LabelTrack(np.concatenate([np.full(n, k) for k, n in runs]))

    def test_examples(self):
        # patch 0 all sleep, patch 1 a tie walking/mixed, patch 2 walking 200 vs missing 100
        t = self.track((5, 300), (1, 150), (2, 150), (1, 200), (6, 100))
        assert map_labels(t, 0, self.geom).tolist() == [5, 6, 1]

    def test_missing_majority(self):
        t = self.track((6, 200), (0, 100), (3, 900))
        assert map_labels(t, 0, self.geom).tolist() == [6, 3, 3]

    def test_coverage(self):
        with pytest.raises(CoverageError):
            map_labels(self.track((0, 899)), 0, self.geom)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 6), min_size=90, max_size=90), st.integers(0, 20))
    def test_majority_oracle(self, coarse, start):
        idx = np.repeat(coarse, 10)[: 900]
        idx = np.concatenate([np.full(start, 0), idx])
        out = map_labels(LabelTrack(idx), start, self.geom)
        for i, got in enumerate(out):
            chunk = idx[start + 300 * i: start + 300 * (i + 1)]
            counts = np.bincount(chunk, minlength=7)
            winners = np.flatnonzero(counts == counts.max())
            assert got == (winners[0] if len(winners) == 1 else 6)
            assert got == 6 or got in chunk


class TestBatching:
    def store(self, n, length):
        return RecordingStore([
            Recording30(f"r{i}", np.full((length, 3), i, np.float32) + np.arange(length, dtype=np.float32)[:, None],
                        [(0, length)])
            for i in range(n)
        ])

    def test_full_size_batch(self):
        geom = WindowGeometry(patch_len=10, patch_count=5, pretrain_stride_patches=4)
        store = self.store(16, geom.pretrain_span() + 7)
        plans = plan_pretrain_epoch(store, list(store), geom, np.random.default_rng(0))
        assert len(plans) == 2 and [p.size for p in plans] == [256, 256]
        batch = assemble_batch(plans[0], store, geom.window_len)
        assert batch.shape == (256, 3, 50) and batch.dtype == np.float32
        rid, offs = plans[0].entries[1]
        r = int(rid[1:])
        assert np.array_equal(batch[32 + 3, 0], r + np.arange(offs[3], offs[3] + 50, dtype=np.float32))

    def test_single(self):
        store = self.store(1, 100)
        out = assemble_batch(BatchPlan([("r0", [5])]), store, 20)
        assert out.shape == (1, 3, 20) and out[0, 0, 0] == 5

    def test_errors(self):
        store = self.store(1, 100)
        with pytest.raises(MissingRecording):
            assemble_batch(BatchPlan([("nope", [0])]), store, 20)
        with pytest.raises(MissingRecording):
            store["nope"]
        with pytest.raises(BadOffset):
            assemble_batch(BatchPlan([("r0", [90])]), store, 20)
        with pytest.raises(BadOffset):
            assemble_batch(BatchPlan([("r0", [-1])]), store, 20)

    def test_worker_count_preserves_order(self):
        geom = WindowGeometry(patch_len=10, patch_count=5, pretrain_stride_patches=4, windows_per_recording=4,
                              recordings_per_batch=2)
        store = self.store(7, 400)
        plans = plan_pretrain_epoch(store, list(store), geom, np.random.default_rng(3))
        serial = list(iter_batches(plans, store, geom.window_len, workers=1))
        threaded = list(iter_batches(plans, store, geom.window_len, workers=4))
        assert len(serial) == 4
        assert all(np.array_equal(a, b) for a, b in zip(serial, threaded))


def two_state(**kw):
    sigs = (ClassSignature("a", dwell_s=10.0, **kw), ClassSignature("b", dwell_s=20.0, **kw))
    return sigs


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(desk_config(5), 600.0)
        b = generate_synthetic(desk_config(5), 600.0)
        c = generate_synthetic(desk_config(6), 600.0)
        assert np.array_equal(a[0].samples, b[0].samples) and np.array_equal(a[1].indices, b[1].indices)
        assert not np.array_equal(a[0].samples, c[0].samples)

    def test_sleep_gravity_only(self):
        cfg = SyntheticConfig((ClassSignature("sleep", dwell_s=30.0),), np.ones((1, 1)), seed=2)
        raw, track = generate_synthetic(cfg, 120.0, 30.0)
        assert np.allclose(np.linalg.norm(raw.samples, axis=1), 1.0, atol=1e-12)
        assert (track.indices == 0).all()

    def test_walking_peak(self):
        cfg = desk_config(11)
        raw, track = generate_synthetic(cfg, 3 * 3600.0, 100.0)
        walk = cfg.class_names.index("walking")
        idx = track.indices
        change = np.flatnonzero(np.diff(idx)) + 1
        starts, ends = np.concatenate([[0], change]), np.concatenate([change, [len(idx)]])
        runs = [(s, e) for s, e in zip(starts, ends) if idx[s] == walk and e - s >= 2000]
        assert runs
        for s, e in runs:
            x = raw.samples[s:e] - raw.samples[s:e].mean(axis=0)
            power = (np.abs(np.fft.rfft(x, axis=0)) ** 2).sum(axis=1)
            freqs = np.fft.rfftfreq(e - s, 1 / 100.0)
            band = freqs > 0.5
            peak = freqs[band][np.argmax(power[band])]
            assert abs(peak - 2.0) < 0.05

    def test_dwell_mean(self):
        t = np.array([[0.0, 1.0], [1.0, 0.0]])
        raw, track = generate_synthetic(SyntheticConfig(two_state(), t, seed=3), 20000.0, 10.0)
        idx = track.indices
        change = np.flatnonzero(np.diff(idx)) + 1
        bounds = np.concatenate([[0], change, [len(idx)]])
        lengths, labels = np.diff(bounds)[:-1] / 10.0, idx[bounds[:-2]]
        for k, mean in ((0, 10.0), (1, 20.0)):
            d = lengths[labels == k]
            assert len(d) >= 100
            assert abs(d.mean() - mean) / mean < 0.15

    def test_signal_switches_with_labels(self):
        sigs = (ClassSignature("a", dwell_s=5.0, posture=(0, 0, 1)), ClassSignature("b", dwell_s=5.0, posture=(1, 0, 0)))
        raw, track = generate_synthetic(SyntheticConfig(sigs, [[0, 1], [1, 0]], seed=1), 200.0, 10.0)
        label_change = np.flatnonzero(np.diff(track.indices)) + 1
        signal_change = np.flatnonzero(np.any(np.diff(raw.samples, axis=0) != 0, axis=1)) + 1
        assert len(label_change) > 5
        assert np.array_equal(label_change, signal_change)

    @pytest.mark.parametrize("kw", [
        dict(transition=[[0.5, 0.4], [0.5, 0.5]]),
        dict(transition=[[1.5, -0.5], [0.5, 0.5]]),
        dict(transition=[[1.0]]),
        dict(classes=(ClassSignature("a", dwell_s=0.0), ClassSignature("b"))),
        dict(classes=(ClassSignature("a", posture=(0, 0, 0)), ClassSignature("b"))),
        dict(classes=(ClassSignature("a", posture_spread=-1.0), ClassSignature("b"))),
    ])
    def test_invalid(self, kw):
        args = dict(classes=two_state(), transition=[[0.5, 0.5], [0.5, 0.5]])
        args.update(kw)
        with pytest.raises(InvalidConfig):
            SyntheticConfig(**args)

    def test_invalid_duration(self):
        with pytest.raises(InvalidConfig):
            generate_synthetic(desk_config(0), 0.0)

    def test_dict_round_trip(self):
        cfg = desk_config(4)
        back = SyntheticConfig.from_dict(cfg.to_dict())
        assert back.to_dict() == cfg.to_dict()
        assert np.array_equal(generate_synthetic(back, 300.0)[0].samples, generate_synthetic(cfg, 300.0)[0].samples)
