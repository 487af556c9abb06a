import numpy as np
import pytest

from aflnet.metrics import parse_rttm
from aflnet.synthdata import (
    ConfigError,
    ScenarioConfig,
    generate_dataset,
    generate_scenario,
    load_dataset,
    load_recording,
    missing_rate_variant,
    save_dataset,
    save_recording,
)


def test_noiseless_tokens_are_identical_within_speaker():
    cfg = ScenarioConfig(sigma_noise=0.0, p_offscreen=0.0, p_wrongface=0.0, p_audio_noise=0.0, duration=20)
    rec = generate_scenario(cfg)
    by_label = {}
    for seg in rec.segments:
        by_label.setdefault(seg.label, []).append(seg)
    for segs in by_label.values():
        for s in segs:
            assert np.array_equal(s.audio, segs[0].audio)
            assert np.array_equal(s.face, segs[0].face)
            assert np.array_equal(s.lip, segs[0].lip)
            assert np.all(s.audio == s.audio[0])


def test_all_offscreen():
    rec = generate_scenario(ScenarioConfig(p_offscreen=1.0, duration=15))
    assert not any(s.visual_present for s in rec.segments)
    assert all(not np.any(s.face) and not np.any(s.lip) for s in rec.segments)
    assert not rec.visual_truth.any()


def test_same_seed_same_bytes():
    a = generate_scenario(ScenarioConfig(seed=5, duration=20))
    b = generate_scenario(ScenarioConfig(seed=5, duration=20))
    c = generate_scenario(ScenarioConfig(seed=6, duration=20))
    assert a.reference.turns == b.reference.turns
    assert all(np.array_equal(x.audio, y.audio) and np.array_equal(x.lip, y.lip) for x, y in zip(a.segments, b.segments))
    assert not np.array_equal(a.segments[0].audio, c.segments[0].audio)


def test_within_identity_closer_than_across():
    rec = generate_scenario(ScenarioConfig(p_audio_noise=0.0, duration=60))
    means = np.array([s.audio.mean(axis=0) for s in rec.segments])
    labels = np.array(rec.labels)
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)
    same = labels[:, None] == labels[None]
    off = ~np.eye(len(labels), dtype=bool)
    assert d[same & off].max() < d[~same].min()


def test_segments_tile_reference_with_turn_labels():
    rec = generate_scenario(ScenarioConfig(duration=60))
    turns = rec.reference.turns
    assert abs(sum(t.duration for t in turns) - 0.5 * len(rec.segments)) < 1e-9
    for seg in rec.segments:
        mid = seg.onset + seg.duration / 2
        (owner,) = [t.speaker for t in turns if t.onset <= mid < t.offset]
        assert seg.label == owner
        assert seg.duration == 0.5
    for a, b in zip(turns, turns[1:]):
        assert b.onset >= a.offset - 1e-9
        assert a.speaker != b.speaker or b.onset > a.offset
    assert turns[-1].offset <= 60.0 + 1e-9


def test_token_shapes():
    seg = generate_scenario(ScenarioConfig(duration=5)).segments[0]
    assert seg.audio.shape == (10, 2) and seg.face.shape == (1, 8) and seg.lip.shape == (10, 8)


def test_offscreen_rate():
    recs = generate_dataset(ScenarioConfig(p_offscreen=0.2), 10, seed=1)
    vis = np.concatenate([r.visual_truth for r in recs])
    assert abs(1 - vis.mean() - 0.2) < 0.03


def test_missing_rate_variant():
    rec = generate_scenario(ScenarioConfig(p_offscreen=0.0, duration=900))
    rec.segments = rec.segments[:1000]
    masked = missing_rate_variant(rec, 0.5, np.random.default_rng(0))
    frac = np.mean([not s.visual_present for s in masked.segments])
    assert len(masked.segments) == 1000
    assert abs(frac - 0.5) <= 0.05
    assert all(np.array_equal(a.audio, b.audio) for a, b in zip(rec.segments, masked.segments))


@pytest.mark.parametrize(
    "bad",
    [{"p_offscreen": 1.5}, {"n_speakers": 0}, {"sigma_noise": -1.0}, {"segment_length": 0.0}, {"min_turn": 5.0}],
)
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        ScenarioConfig(**bad).validate()


def test_unknown_config_key():
    with pytest.raises(ConfigError, match="bogus"):
        ScenarioConfig.from_dict({"bogus": 1})


def test_single_speaker():
    rec = generate_scenario(ScenarioConfig(n_speakers=1, duration=10))
    assert set(rec.labels) == {"spk0"}


def test_save_load_round_trip(tmp_path):
    rec = generate_scenario(ScenarioConfig(duration=10, seed=3), recording_id="x")
    save_recording(rec, tmp_path / "x.npz")
    back = load_recording(tmp_path / "x.npz")
    assert back.recording_id == "x"
    assert back.reference.turns == rec.reference.turns
    assert np.array_equal(back.visual_truth, rec.visual_truth)
    for a, b in zip(rec.segments, back.segments):
        assert a.segment_id == b.segment_id and a.onset == b.onset and a.label == b.label
        assert a.face_present == b.face_present
        assert np.array_equal(a.audio, b.audio) and np.array_equal(a.face, b.face) and np.array_equal(a.lip, b.lip)


def test_dataset_directory(tmp_path):
    recs = generate_dataset(ScenarioConfig(duration=8), 3, seed=2, prefix="d")
    save_dataset(recs, tmp_path)
    loaded = load_dataset(tmp_path)
    assert [r.recording_id for r in loaded] == ["d000", "d001", "d002"]
    rttm = parse_rttm((tmp_path / "reference.rttm").read_text())
    assert [t.recording_id for t in rttm] == ["d000", "d001", "d002"]


def test_empty_dataset_directory(tmp_path):
    with pytest.raises(ConfigError, match="no recordings"):
        load_dataset(tmp_path)


def _noiseless(**kw):
    base = dict(sigma_noise=0.0, p_offscreen=0.0, p_wrongface=0.0, p_audio_noise=0.0, duration=30)
    return ScenarioConfig(**{**base, **kw})


def test_corrupted_audio_carries_no_speaker_latent():
    clean = generate_scenario(_noiseless())
    noisy = generate_scenario(_noiseless(p_audio_noise=1.0))
    # clean noiseless tokens repeat one latent; corrupted ones vary per token
    assert all(np.all(s.audio == s.audio[0]) for s in clean.segments)
    assert not any(np.all(s.audio == s.audio[0]) for s in noisy.segments)
