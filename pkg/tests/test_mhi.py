import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transfact.errors import ConfigError, InsufficientInputError, ShapeError
from transfact.mhi import compute_mhi_sequence, motion_mask, update_mhi, write_pgm


def brute_force_mhi(frames, tau, theta):
    """Oracle: re-unroll the recurrence from t=0 for every step."""
    frames = np.asarray(frames).astype(np.int64)
    T = frames.shape[0]
    maps = [np.zeros(frames.shape[1:], dtype=np.int64)]
    for t in range(1, T):
        mask = np.abs(frames[t] - frames[t - 1]) > theta
        maps.append(np.where(mask, tau, np.maximum(maps[-1] - 1, 0)))
    return np.stack(maps)


def random_video(rng, t=10, h=8, w=8):
    return rng.integers(0, 256, size=(t, h, w)).astype(np.uint8)


def test_identical_frames_give_zero_mask():
    frame = np.full((4, 4), 77, dtype=np.uint8)
    assert not motion_mask(frame, frame, theta=0).any()
    assert not motion_mask(frame, frame, theta=200).any()


def test_threshold_is_strict():
    prev = np.zeros((1, 2), dtype=np.uint8)
    curr = np.array([[21, 20]], dtype=np.uint8)
    mask = motion_mask(prev, curr, theta=20)
    assert mask[0, 0] == 1  # diff 21 > 20
    assert mask[0, 1] == 0  # diff 20 is excluded at equality


def test_mask_handles_uint8_wraparound():
    prev = np.array([[250]], dtype=np.uint8)
    curr = np.array([[3]], dtype=np.uint8)
    assert motion_mask(prev, curr, theta=20)[0, 0] == 1  # |3-250| = 247


def test_update_reset_branch():
    h = np.zeros((3, 3), dtype=np.int32)
    out = update_mhi(h, np.ones((3, 3), dtype=np.int32), tau=15)
    assert (out == 15).all()


def test_update_decay_and_floor():
    h = np.array([[0, 5]], dtype=np.int32)
    out = update_mhi(h, np.zeros((1, 2), dtype=np.int32), tau=15)
    assert out.tolist() == [[0, 4]]


def test_static_video_stays_zero():
    frames = np.full((10, 4, 4), 99, dtype=np.uint8)
    assert not compute_mhi_sequence(frames, tau=15, theta=20).any()


def test_single_pixel_trace():
    # intensity 0,30,30,30 at one pixel: one motion event, then decay
    frames = np.zeros((4, 1, 1), dtype=np.uint8)
    frames[1:] = 30
    maps = compute_mhi_sequence(frames, tau=3, theta=20)
    assert maps[:, 0, 0].tolist() == [0, 3, 2, 1]


def test_matches_brute_force_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        frames = random_video(rng)
        got = compute_mhi_sequence(frames, tau=15, theta=20)
        assert np.array_equal(got, brute_force_mhi(frames, 15, 20))


def test_streaming_fold_equals_batch():
    rng = np.random.default_rng(8)
    frames = random_video(rng)
    batch = compute_mhi_sequence(frames, tau=5, theta=30)
    h = np.zeros((8, 8), dtype=np.int32)
    for t in range(1, frames.shape[0]):
        h = update_mhi(h, motion_mask(frames[t - 1], frames[t], 30), tau=5)
        assert np.array_equal(h, batch[t])


@settings(deadline=None, max_examples=25)
@given(st.integers(1, 20), st.integers(0, 255), st.integers(0, 987654))
def test_bounded_and_decays_to_zero(tau, theta, seed):
    rng = np.random.default_rng(seed)
    frames = random_video(rng, t=6, h=4, w=4)
    maps = compute_mhi_sequence(frames, tau=tau, theta=theta)
    assert maps.min() >= 0 and maps.max() <= tau
    # tau consecutive still frames wipe any history
    h = maps[-1]
    zero_mask = np.zeros((4, 4), dtype=np.int32)
    for _ in range(tau):
        h = update_mhi(h, zero_mask, tau=tau)
    assert not h.any()


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 120), st.integers(0, 987654))
def test_mask_antitone_in_theta(theta, seed):
    rng = np.random.default_rng(seed)
    prev, curr = random_video(rng, t=2, h=6, w=6)
    low = motion_mask(prev, curr, theta)
    high = motion_mask(prev, curr, theta + rng.integers(1, 60))
    assert not np.any(high > low)


def test_shape_and_input_errors():
    a = np.zeros((2, 2), dtype=np.uint8)
    b = np.zeros((3, 2), dtype=np.uint8)
    with pytest.raises(ShapeError):
        motion_mask(a, b, 10)
    with pytest.raises(ShapeError):
        update_mhi(a.astype(np.int32), np.zeros((2, 3), dtype=np.int32), 5)
    with pytest.raises(InsufficientInputError):
        compute_mhi_sequence(np.zeros((1, 4, 4), dtype=np.uint8), 15, 20)
    with pytest.raises(ConfigError):
        compute_mhi_sequence(np.zeros((3, 4, 4), dtype=np.uint8), tau=0, theta=20)
    with pytest.raises(ConfigError):
        motion_mask(a, a, theta=-1)


def test_pgm_export(tmp_path):
    mhi_map = np.array([[0, 5], [10, 15]], dtype=np.int32)
    path = tmp_path / "map.pgm"
    write_pgm(path, mhi_map, tau=15)
    blob = path.read_bytes()
    assert blob.startswith(b"P5\n2 2\n255\n")
    pixels = np.frombuffer(blob[blob.index(b"255\n") + 4 :], dtype=np.uint8)
    assert pixels.tolist() == [0, 85, 170, 255]  # scaled by 255/tau
