import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aigcvqa import data_io
from aigcvqa.data_io import (
    DataError,
    DatasetManifest,
    ManifestEntry,
    decode_video,
    generate_synthetic_dataset,
    load_manifest,
    load_sample,
    planted_mos,
    render_video,
    sample_frames,
    sample_indices,
    score_sigma,
)


def write(tmp_path, text, files=("a.npy", "b.npy")):
    for f in files:
        np.save(tmp_path / f, np.zeros((4, 8, 8, 3)))
    p = tmp_path / "m.csv"
    p.write_text(text)
    return p


class TestManifest:
    def test_parse(self, tmp_path):
        m = load_manifest(write(tmp_path, "video_id,path,mos,split\na,a.npy,3.5,train\nb,b.npy,4,test\n"), scale=(1, 5))
        assert [e.video_id for e in m] == ["a", "b"]
        assert m.split("test").ground_truth() == {"b": 4.0}
        assert m.to_unit(3.5) == 0.625

    def test_duplicate_id(self, tmp_path):
        with pytest.raises(DataError, match=r"row 3: duplicate video_id 'a' \(first seen on row 2\)"):
            load_manifest(write(tmp_path, "video_id,path,mos\na,a.npy,1\na,b.npy,2\n"))

    def test_out_of_range(self, tmp_path):
        with pytest.raises(DataError, match="row 2: mos 6.0 outside"):
            load_manifest(write(tmp_path, "video_id,path,mos\na,a.npy,6\n"), scale=(1, 5))

    def test_missing_path(self, tmp_path):
        with pytest.raises(DataError, match="row 3: video path 'nope.npy' not found"):
            load_manifest(write(tmp_path, "video_id,path,mos\na,a.npy,1\nc,nope.npy,2\n"))
        m = load_manifest(tmp_path / "m.csv", check_paths=False)
        assert len(m) == 2

    def test_bad_header_and_value(self, tmp_path):
        with pytest.raises(DataError, match="header"):
            load_manifest(write(tmp_path, "id,path,mos\n"))
        with pytest.raises(DataError, match="not a number"):
            load_manifest(write(tmp_path, "video_id,path,mos\na,a.npy,high\n"))
        with pytest.raises(DataError, match="cannot open"):
            load_manifest(tmp_path / "absent.csv")

    def test_write_roundtrip(self, tmp_path):
        m = load_manifest(write(tmp_path, "video_id,path,mos,split\na,a.npy,12.5,train\nb,b.npy,80,test\n"))
        m.write(tmp_path / "copy.csv")
        again = load_manifest(tmp_path / "copy.csv")
        assert again.entries == m.entries


@settings(max_examples=100, deadline=None)
@given(lo=st.floats(-50, 50), width=st.floats(0.5, 100), u=st.floats(0, 1))
def test_scale_roundtrip(lo, width, u):
    m = DatasetManifest([], (lo, lo + width))
    assert m.to_unit(m.from_unit(u)) == pytest.approx(u, abs=1e-9)


class TestSampling:
    def test_examples(self):
        assert sample_indices(10, 4) == [0, 3, 6, 9]
        assert sample_indices(1, 3) == [0, 0, 0]
        assert sample_indices(5, 1) == [0]

    @settings(max_examples=200, deadline=None)
    @given(t=st.integers(1, 500), f=st.integers(2, 64))
    def test_properties(self, t, f):
        idx = sample_indices(t, f)
        assert len(idx) == f
        assert idx[0] == 0 and idx[-1] == t - 1
        assert all(0 <= i < t for i in idx)
        assert idx == sorted(idx)

    def test_errors(self):
        with pytest.raises(DataError):
            sample_indices(0, 4)
        with pytest.raises(DataError):
            sample_indices(4, 0)
        with pytest.raises(DataError):
            sample_frames(np.zeros((4, 4, 3)), 2)

    def test_load_sample(self, tmp_path):
        video = np.arange(10, dtype=np.float64).reshape(10, 1, 1, 1) * np.ones((1, 2, 2, 3))
        np.save(tmp_path / "v.npy", video)
        m = DatasetManifest([ManifestEntry("v", "v.npy", 3.0)], (1.0, 5.0), tmp_path)
        s = load_sample(m, m.entries[0], 4)
        assert s.frames[:, 0, 0, 0].tolist() == [0, 3, 6, 9]
        assert s.mos_unit == 0.5 and s.mos_hundred == 50.0


class TestDecode:
    def test_grayscale_gets_channel_axis(self, tmp_path):
        np.save(tmp_path / "g.npy", np.zeros((3, 5, 5)))
        assert decode_video(tmp_path / "g.npy").shape == (3, 5, 5, 1)

    def test_unknown_suffix(self, tmp_path):
        with pytest.raises(DataError, match="no frame decoder"):
            decode_video(tmp_path / "x.webm")

    def test_register(self, tmp_path):
        data_io.register_decoder(".fake", lambda p: np.ones((2, 3, 3, 3)))
        try:
            assert decode_video(tmp_path / "a.fake").shape == (2, 3, 3, 3)
        finally:
            del data_io.DECODERS[".fake"]

    def test_png(self, tmp_path):
        pil = pytest.importorskip("PIL.Image")
        pil.fromarray(np.full((6, 7, 3), 255, np.uint8)).save(tmp_path / "f.png")
        frames = decode_video(tmp_path / "f.png")
        assert frames.shape == (1, 6, 7, 3) and frames.max() == 1.0


def test_score_sigma_is_population_std():
    assert score_sigma([0, 100]) == 50.0
    with pytest.raises(DataError):
        score_sigma([5.0])


class TestSynthetic:
    def test_determinism_and_range(self):
        a = generate_synthetic_dataset(12, seed=3, n_frames=6, size=16)
        b = generate_synthetic_dataset(12, seed=3, n_frames=6, size=16)
        assert a.manifest.entries == b.manifest.entries
        for vid in a.videos:
            assert np.array_equal(a.videos[vid], b.videos[vid])
            assert a.videos[vid].min() >= 0 and a.videos[vid].max() <= 1
        for e in a.manifest:
            assert 0 < e.mos < 100
            assert e.mos == pytest.approx(100 * a.qualities[e.video_id].mean(), abs=1e-9)

    def test_planted_mean_ignores_frame_order(self):
        assert planted_mos([0.1, 0.2, 0.3]) == pytest.approx(planted_mos([0.2, 0.2, 0.2]), abs=1e-12)

    def test_split_tagging(self):
        ds = generate_synthetic_dataset(10, test_fraction=0.3, n_frames=2, size=8)
        assert [e.split for e in ds.manifest][-4:] == ["train", "test", "test", "test"]

    def test_quality_raises_sharpness(self):
        rng = np.random.default_rng(0)
        lo = render_video([0.1] * 4, rng, 32)
        hi = render_video([0.9] * 4, rng, 32)
        assert np.abs(np.diff(hi, axis=2)).mean() > 2 * np.abs(np.diff(lo, axis=2)).mean()

    def test_materialize(self, tmp_path):
        ds = generate_synthetic_dataset(3, n_frames=2, size=8)
        m = load_manifest(ds.materialize(tmp_path))
        assert np.array_equal(decode_video(m.resolve(m.entries[0])), ds.videos["synth_0000"])

    def test_rejects_empty(self):
        with pytest.raises(DataError):
            generate_synthetic_dataset(0)
