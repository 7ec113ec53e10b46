import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transfact.errors import (
    ConfigError,
    InsufficientInputError,
    ParseError,
    StratificationError,
    ValidationError,
)
from transfact.rng import derive_seed
from transfact.videodata import (
    ARREST_STAGE,
    CLEAVAGE_STAGE,
    DatasetManifest,
    GenConfig,
    ManifestEntry,
    Segment,
    expand_segments,
    generate_synthetic_video,
    load_manifest,
    load_video,
    save_manifest,
    save_video,
    segments_from_framewise,
    split_dataset,
    transfer_label_from_stages,
)


def rule_checker(labels):
    """Independent reimplementation of the transferability rule."""
    labels = list(labels)
    if ARREST_STAGE in labels:
        return 0
    stable = []
    for lab in labels:
        if lab <= 8 and (not stable or stable[-1] != lab):
            stable.append(lab)
    for a, b in zip(stable, stable[1:]):
        if b - a >= 2:
            return 0
    return 1 if stable and max(stable) >= 7 else 0


# ---------------------------------------------------------------------------
# segments


def test_segments_two_runs():
    assert segments_from_framewise([1, 1, 2, 2, 2]) == [Segment(0, 2, 1), Segment(2, 5, 2)]


def test_segments_singleton():
    assert segments_from_framewise([7]) == [Segment(0, 1, 7)]


def test_segments_empty_errors():
    with pytest.raises(InsufficientInputError):
        segments_from_framewise([])


@settings(deadline=None, max_examples=50)
@given(st.lists(st.integers(0, 10), min_size=1, max_size=50))
def test_segments_roundtrip(labels):
    segs = segments_from_framewise(labels)
    assert expand_segments(segs).tolist() == labels
    assert segs[0].start == 0 and segs[-1].end == len(labels)
    for a, b in zip(segs, segs[1:]):
        assert a.end == b.start and a.label != b.label


# ---------------------------------------------------------------------------
# generator


def test_generator_deterministic():
    cfg = GenConfig()
    a = generate_synthetic_video(31337, cfg)
    b = generate_synthetic_video(31337, cfg)
    assert a == b
    assert a != generate_synthetic_video(31338, cfg)


def test_generator_grammar_without_anomalies():
    cfg = GenConfig(p_anomaly=0.0, p_slow=0.0, num_frames=90, speed_jitter=0.0)
    for seed in range(12):
        rec = generate_synthetic_video(seed, cfg)
        assert rec.transfer == 1
        ids = [s.label for s in segments_from_framewise(rec.stage_labels)]
        expected = []
        count = 1
        while len(expected) < len(ids):
            expected.append(min(count, 9) - 1)
            expected.append(CLEAVAGE_STAGE)
            count += 1
        assert ids == expected[: len(ids)]


def test_generator_label_matches_rule_checker():
    cfg = GenConfig()
    for i in range(120):
        rec = generate_synthetic_video(derive_seed(5, f"v{i}"), cfg)
        assert rec.transfer == rule_checker(rec.stage_labels)
        assert rec.transfer == transfer_label_from_stages(rec.stage_labels)


def test_nt_fraction_near_target():
    cfg = GenConfig(p_anomaly=0.5)
    nt = sum(
        1 - generate_synthetic_video(derive_seed(17, f"v{i}"), cfg).transfer for i in range(200)
    )
    assert abs(nt / 200 - 0.53) <= 0.07


def test_stage_counts_non_decreasing():
    cfg = GenConfig()
    for i in range(40):
        rec = generate_synthetic_video(derive_seed(23, f"v{i}"), cfg)
        stable = [s.label for s in segments_from_framewise(rec.stage_labels) if s.label <= 8]
        assert all(b >= a for a, b in zip(stable, stable[1:]))


def test_late_anomaly_onset_confined_to_last_third():
    cfg = GenConfig(anomaly_onset_frac=2 / 3, p_anomaly=1.0)
    for i in range(40):
        rec = generate_synthetic_video(derive_seed(29, f"v{i}"), cfg)
        labels = rec.stage_labels
        arrest = np.flatnonzero(labels == ARREST_STAGE)
        if arrest.size:
            assert arrest[0] >= 40
    # at least some direct cleavages must appear among non-arrest anomalies
    cfg = GenConfig(anomaly_onset_frac=2 / 3, p_anomaly=1.0, p_slow=0.0)
    jumps = 0
    for i in range(40):
        rec = generate_synthetic_video(derive_seed(31, f"v{i}"), cfg)
        stable = [s.label for s in segments_from_framewise(rec.stage_labels) if s.label <= 8]
        jumps += any(b - a >= 2 for a, b in zip(stable, stable[1:]))
    assert jumps > 5


def test_gen_config_validation():
    with pytest.raises(ConfigError):
        GenConfig(num_frames=10).validate()
    with pytest.raises(ConfigError):
        GenConfig(frame_size=40).validate()
    with pytest.raises(ConfigError):
        GenConfig(p_anomaly=1.5).validate()
    with pytest.raises(ConfigError):
        generate_synthetic_video(0, GenConfig(stable_frames=(5, 3)))


# ---------------------------------------------------------------------------
# splits


def entries(labels):
    return [
        ManifestEntry(id=f"v{i:05d}", path=f"v{i}.tfv", transfer=int(t), num_frames=60)
        for i, t in enumerate(labels)
    ]


def test_split_reproduces_reference_sizes():
    # ratios given as the exact fractions of the reference 1740-video split
    manifest = DatasetManifest(entries([i % 2 for i in range(1740)]))
    ratios = (1220 / 1740, 175 / 1740, 345 / 1740)
    tagged = split_dataset(manifest, ratios, seed=0)
    sizes = {s: len(tagged.subset(s)) for s in ("train", "val", "test")}
    assert sizes == {"train": 1220, "val": 175, "test": 345}


def test_split_exact_division():
    manifest = DatasetManifest(entries([1] * 5 + [0] * 5))
    tagged = split_dataset(manifest, (0.8, 0.1, 0.1), seed=1)
    sizes = {s: len(tagged.subset(s)) for s in ("train", "val", "test")}
    assert sizes == {"train": 8, "val": 1, "test": 1}


def test_split_stratification_tolerance():
    rng = np.random.default_rng(3)
    labels = (rng.random(500) < 0.53).astype(int)
    manifest = DatasetManifest(entries(labels))
    tagged = split_dataset(manifest, (0.7, 0.1, 0.2), seed=9)
    global_nt = 1 - labels.mean()
    for split in ("train", "val", "test"):
        sub = tagged.subset(split)
        nt = sum(1 - e.transfer for e in sub) / len(sub)
        assert abs(nt - global_nt) <= 0.02


def test_split_deterministic_and_total():
    manifest = DatasetManifest(entries([i % 3 != 0 for i in range(97)]))
    a = split_dataset(manifest, (0.7, 0.1, 0.2), seed=5)
    b = split_dataset(manifest, (0.7, 0.1, 0.2), seed=5)
    assert [e.split for e in a.entries] == [e.split for e in b.entries]
    c = split_dataset(manifest, (0.7, 0.1, 0.2), seed=6)
    assert [e.split for e in a.entries] != [e.split for e in c.entries]
    assert all(e.split in ("train", "val", "test") for e in a.entries)


def test_split_errors():
    manifest = DatasetManifest(entries([0, 1]))
    with pytest.raises(StratificationError):
        split_dataset(manifest, (1 / 3, 1 / 3, 1 / 3), seed=0)
    with pytest.raises(ConfigError):
        split_dataset(DatasetManifest(entries([0, 1, 1])), (0.5, 0.2, 0.2), seed=0)


# ---------------------------------------------------------------------------
# persistence


def test_video_roundtrip(tmp_path):
    cfg = GenConfig(num_frames=20, frame_size=32)
    rec = generate_synthetic_video(4242, cfg, "sample")
    path = tmp_path / "sample.tfv"
    save_video(path, rec)
    assert load_video(path) == rec


def test_video_truncation_is_parse_error(tmp_path):
    rec = generate_synthetic_video(1, GenConfig(num_frames=16, frame_size=32), "t")
    path = tmp_path / "t.tfv"
    save_video(path, rec)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ParseError):
        load_video(path)


def test_video_bad_magic(tmp_path):
    path = tmp_path / "x.tfv"
    path.write_bytes(b"NOPE" + b"\0" * 40)
    with pytest.raises(ParseError) as err:
        load_video(path)
    assert err.value.offset == 0


def test_manifest_roundtrip(tmp_path):
    manifest = DatasetManifest(entries([0, 1, 1, 0]))
    tagged = split_dataset(manifest, (0.5, 0.25, 0.25), seed=2)
    path = tmp_path / "m.jsonl"
    save_manifest(path, tagged)
    assert load_manifest(path) == tagged


def test_manifest_duplicate_id_rejected(tmp_path):
    dup = DatasetManifest(entries([0, 1]) + [entries([1])[0]])
    with pytest.raises(ValidationError):
        dup.validate()
    path = tmp_path / "bad.jsonl"
    with pytest.raises(ValidationError):
        save_manifest(path, dup)


def test_manifest_parse_error(tmp_path):
    path = tmp_path / "broken.jsonl"
    path.write_text('{"id": "a", "path": "a.tfv", "transfer": "T"}\n')  # missing num_frames
    with pytest.raises(ParseError):
        load_manifest(path)
    path.write_text("not json\n")
    with pytest.raises(ParseError):
        load_manifest(path)
