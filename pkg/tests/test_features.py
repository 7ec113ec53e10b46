import numpy as np
import pytest

from transfact.errors import ConfigError, ParseError, ShapeError
from transfact.features import (
    FeatureSequence,
    FeatureStats,
    FrozenEncoder,
    encode_frames,
    encode_mhi,
    load_features,
    save_features,
)
from transfact.videodata import GenConfig, generate_synthetic_video


@pytest.fixture(scope="module")
def video():
    return generate_synthetic_video(99, GenConfig(num_frames=20, frame_size=32), "f")


def test_pooling_is_block_average():
    # 32x32 image, blocks of 2x2: pooled values are the block means
    img = np.arange(32 * 32, dtype=np.float64).reshape(1, 32, 32)
    enc = FrozenEncoder(0, dim=8, modality="frame")
    pooled_flat = img.reshape(1, 16, 2, 16, 2).mean(axis=(2, 4)).reshape(1, -1)
    expected = pooled_flat @ enc.projection
    got = enc.encode(img[0][None, :, :]).values
    assert np.allclose(got, expected, atol=1e-5)


def test_encode_deterministic(video):
    a = encode_frames(video, encoder_seed=5, dim=16)
    b = encode_frames(video, encoder_seed=5, dim=16)
    assert np.array_equal(a.values, b.values)
    c = encode_frames(video, encoder_seed=6, dim=16)
    assert not np.array_equal(a.values, c.values)


def test_shape_contract(video):
    seq = encode_frames(video, encoder_seed=1, dim=32)
    assert seq.values.shape == (20, 32)
    assert seq.modality == "frame"


def test_distinct_frames_distinct_rows(video):
    seq = encode_frames(video, encoder_seed=1, dim=16)
    # first and last frames show different cell configurations
    assert not np.allclose(seq.values[0], seq.values[-1])


def test_modality_streams_differ(video):
    frames = video.frames
    a = FrozenEncoder(7, 16, "frame").encode(frames)
    b = FrozenEncoder(7, 16, "mhi").encode(frames)
    assert not np.allclose(a.values, b.values)


def test_zero_mhi_maps_give_constant_rows():
    maps = np.zeros((6, 32, 32), dtype=np.int32)
    seq = encode_mhi(maps, encoder_seed=3, dim=8)
    assert np.allclose(seq.values, seq.values[0])


def test_standardization_statistics(video):
    other = generate_synthetic_video(100, GenConfig(num_frames=20, frame_size=32), "g")
    raw = [encode_frames(v, 11, 16) for v in (video, other)]
    stats = FeatureStats.fit(raw)
    standardized = np.concatenate([stats.apply(r).values for r in raw]).astype(np.float64)
    assert np.abs(standardized.mean(axis=0)).max() < 1e-6
    assert standardized.std(axis=0).min() > 0.99
    assert standardized.std(axis=0).max() < 1.01


def test_stats_roundtrip(tmp_path, video):
    stats = FeatureStats.fit([encode_frames(video, 1, 8)])
    stats.save(tmp_path / "stats.json")
    loaded = FeatureStats.load(tmp_path / "stats.json")
    assert np.array_equal(stats.mean, loaded.mean)
    assert np.array_equal(stats.std, loaded.std)


def test_dim_validation():
    with pytest.raises(ConfigError):
        FrozenEncoder(0, dim=4, modality="frame")
    with pytest.raises(ConfigError):
        FrozenEncoder(0, dim=16, modality="optical-flow")


def test_pool_requires_multiple_of_16():
    with pytest.raises(ShapeError):
        FrozenEncoder(0, 8, "frame").encode(np.zeros((2, 40, 40)))


def test_feature_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    seq = FeatureSequence("mhi", rng.normal(size=(12, 16)).astype(np.float32))
    path = tmp_path / "f.tff"
    save_features(path, seq)
    loaded = load_features(path)
    assert loaded.modality == "mhi"
    assert np.array_equal(loaded.values, seq.values)  # bit-exact float32


def test_feature_file_bad_magic(tmp_path):
    path = tmp_path / "bad.tff"
    path.write_bytes(b"XXXX" + b"\0" * 12)
    with pytest.raises(ParseError):
        load_features(path)


def test_feature_file_truncation(tmp_path):
    seq = FeatureSequence("frame", np.ones((4, 4), dtype=np.float32))
    path = tmp_path / "t.tff"
    save_features(path, seq)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ParseError):
        load_features(path)


def test_feature_dim_mismatch(tmp_path):
    seq = FeatureSequence("frame", np.ones((4, 8), dtype=np.float32))
    path = tmp_path / "d.tff"
    save_features(path, seq)
    with pytest.raises(ShapeError):
        load_features(path, expect_dim=16)
