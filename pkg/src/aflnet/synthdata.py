"""Synthetic identity-conditioned recordings standing in for real encoders.

Each speaker gets one Gaussian latent per modality (scale ``sigma_id``).
Tokens are the latent plus within-identity Gaussian noise (``sigma_noise``).
The default audio latent is narrower than the visual ones, so two voices in
a recording occasionally sit close together and the visuals can separate
them.  Nuisances:

* off-screen speech (``p_offscreen``): the segment has no visuals at all;
* wrong face (``p_wrongface``): the visible face and lips belong to another
  speaker in the recording;
* masked audio (``p_audio_noise``, off by default): the audio tokens are pure
  noise at the identity scale and carry no speaker information.

Speaker turns never overlap and are whole multiples of the segment length,
so the segments tile the reference speech exactly.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from aflnet.metrics import Timeline, Turn, emit_rttm
from aflnet.scoring import SegmentBundle, apply_visual_mask

FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration values."""


@dataclass
class ScenarioConfig:
    n_speakers: int = 4
    duration: float = 60.0
    segment_length: float = 0.5
    audio_dim: int = 2
    face_dim: int = 8
    lip_dim: int = 8
    audio_tokens: int = 10
    face_tokens: int = 1
    lip_tokens: int = 10
    sigma_id: float = 1.0
    sigma_noise: float = 0.1
    p_offscreen: float = 0.2
    p_wrongface: float = 0.1
    p_audio_noise: float = 0.0
    min_turn: float = 1.0
    max_turn: float = 4.0
    max_gap: float = 1.0
    seed: int = 0

    def validate(self) -> "ScenarioConfig":
        if self.n_speakers < 1:
            raise ConfigError(f"n_speakers must be >= 1, got {self.n_speakers}")
        for name in ("p_offscreen", "p_wrongface", "p_audio_noise"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if self.sigma_noise < 0 or self.sigma_id < 0:
            raise ConfigError("sigma_id and sigma_noise must be non-negative")
        if not self.segment_length > 0:
            raise ConfigError(f"segment_length must be positive, got {self.segment_length}")
        if self.duration < self.segment_length:
            raise ConfigError("duration is shorter than one segment")
        if not 0 < self.min_turn <= self.max_turn or self.max_gap < 0:
            raise ConfigError("need 0 < min_turn <= max_turn and max_gap >= 0")
        for name in ("audio_dim", "face_dim", "lip_dim", "audio_tokens", "face_tokens", "lip_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass
class SyntheticRecording:
    recording_id: str
    reference: Timeline
    segments: list[SegmentBundle]
    visual_truth: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def labels(self) -> list:
        return [s.label for s in self.segments]


def _layout_turns(cfg: ScenarioConfig, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """Turns as (start_slot, n_slots, speaker) in units of the segment length."""
    seg = cfg.segment_length
    total = int(round(cfg.duration / seg))
    lo = max(1, int(round(cfg.min_turn / seg)))
    hi = max(lo, int(round(cfg.max_turn / seg)))
    gap_hi = int(round(cfg.max_gap / seg))
    turns = []
    slot, prev = 0, -1
    while True:
        slot += int(rng.integers(0, gap_hi + 1))
        length = int(rng.integers(lo, hi + 1))
        if cfg.n_speakers == 1:
            spk = 0
        else:
            choices = [k for k in range(cfg.n_speakers) if k != prev]
            spk = int(choices[rng.integers(len(choices))])
        length = min(length, total - slot)
        if length < 1:
            break
        turns.append((slot, length, spk))
        slot += length
        prev = spk
    return turns


def generate_scenario(cfg: ScenarioConfig, rng: np.random.Generator | None = None,
                      recording_id: str = "rec") -> SyntheticRecording:
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    k = cfg.n_speakers
    audio_lat = rng.normal(0.0, cfg.sigma_id, (k, cfg.audio_dim))
    face_lat = rng.normal(0.0, cfg.sigma_id, (k, cfg.face_dim))
    lip_lat = rng.normal(0.0, cfg.sigma_id, (k, cfg.lip_dim))
    names = [f"spk{i}" for i in range(k)]
    seg_len = cfg.segment_length

    turns = _layout_turns(cfg, rng)
    ref_turns = []
    segments = []
    for start, length, spk in turns:
        ref_turns.append(Turn(round(start * seg_len, 6), round(length * seg_len, 6), names[spk]))
        for s in range(start, start + length):
            if rng.random() < cfg.p_audio_noise:
                audio = rng.normal(0.0, cfg.sigma_id, (cfg.audio_tokens, cfg.audio_dim))
            else:
                audio = audio_lat[spk] + cfg.sigma_noise * rng.normal(size=(cfg.audio_tokens, cfg.audio_dim))
            face = np.zeros((cfg.face_tokens, cfg.face_dim))
            lip = np.zeros((cfg.lip_tokens, cfg.lip_dim))
            visible = not rng.random() < cfg.p_offscreen
            if visible:
                shown = spk
                if k > 1 and rng.random() < cfg.p_wrongface:
                    others = [o for o in range(k) if o != spk]
                    shown = others[rng.integers(len(others))]
                face = face_lat[shown] + cfg.sigma_noise * rng.normal(size=face.shape)
                lip = lip_lat[shown] + cfg.sigma_noise * rng.normal(size=lip.shape)
            segments.append(
                SegmentBundle(
                    segment_id=f"{recording_id}_{s:05d}",
                    onset=round(s * seg_len, 6),
                    duration=seg_len,
                    audio=audio,
                    face=face,
                    lip=lip,
                    face_present=visible,
                    lip_present=visible,
                    label=names[spk],
                )
            )
    reference = Timeline(recording_id, ref_turns).validate()
    truth = np.array([s.visual_present for s in segments], dtype=bool)
    return SyntheticRecording(recording_id, reference, segments, truth)


def generate_dataset(cfg: ScenarioConfig, count: int, seed: int | None = None,
                     prefix: str = "rec") -> list[SyntheticRecording]:
    """``count`` independent recordings seeded from one root seed."""
    root = np.random.SeedSequence(cfg.seed if seed is None else seed)
    return [
        generate_scenario(cfg, np.random.default_rng(child), f"{prefix}{i:03d}")
        for i, child in enumerate(root.spawn(count))
    ]


def missing_rate_variant(rec: SyntheticRecording, rate: float,
                         rng: np.random.Generator) -> SyntheticRecording:
    """Evaluation-time visual removal at ``rate`` (audio untouched)."""
    masked = apply_visual_mask(rec.segments, rate, rng)
    return SyntheticRecording(rec.recording_id, rec.reference, masked, rec.visual_truth.copy())


# -------------------------------------------------------------- file layout
#
# One ``<recording_id>.npz`` per recording:
#   format_version  int                 FORMAT_VERSION
#   recording_id    str
#   segment_ids     str[N]
#   onsets, durations float[N]         seconds
#   labels          str[N]              "" when unknown
#   face_present, lip_present, visual_truth  bool[N]
#   audio           float[N*Ta, Da]     segment-major token rows
#   face            float[N*Tf, Df]
#   lip             float[N*Tl, Dl]
#   token_counts    int[3]              (Ta, Tf, Tl)
#   ref_onsets, ref_durations float[M], ref_speakers str[M]


def save_recording(rec: SyntheticRecording, path: str | os.PathLike) -> None:
    segs = rec.segments
    first = segs[0]
    turns = rec.reference.turns
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(
            fh,
            format_version=np.array(FORMAT_VERSION),
            recording_id=np.array(rec.recording_id),
            segment_ids=np.array([s.segment_id for s in segs]),
            onsets=np.array([s.onset for s in segs]),
            durations=np.array([s.duration for s in segs]),
            labels=np.array(["" if s.label is None else str(s.label) for s in segs]),
            face_present=np.array([s.face_present for s in segs]),
            lip_present=np.array([s.lip_present for s in segs]),
            visual_truth=np.asarray(rec.visual_truth, dtype=bool),
            audio=np.concatenate([s.audio for s in segs]),
            face=np.concatenate([s.face for s in segs]),
            lip=np.concatenate([s.lip for s in segs]),
            token_counts=np.array([first.audio.shape[0], first.face.shape[0], first.lip.shape[0]]),
            ref_onsets=np.array([t.onset for t in turns]),
            ref_durations=np.array([t.duration for t in turns]),
            ref_speakers=np.array([t.speaker for t in turns], dtype=str),
        )
    os.replace(tmp, path)


def load_recording(path: str | os.PathLike) -> SyntheticRecording:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != FORMAT_VERSION:
            raise ConfigError(f"{path}: unsupported recording format {version}")
        rec_id = str(z["recording_id"])
        ta, tf, tl = (int(x) for x in z["token_counts"])
        audio, face, lip = z["audio"], z["face"], z["lip"]
        segments = []
        for i, seg_id in enumerate(z["segment_ids"]):
            label = str(z["labels"][i])
            segments.append(
                SegmentBundle(
                    segment_id=str(seg_id),
                    onset=float(z["onsets"][i]),
                    duration=float(z["durations"][i]),
                    audio=audio[i * ta : (i + 1) * ta],
                    face=face[i * tf : (i + 1) * tf],
                    lip=lip[i * tl : (i + 1) * tl],
                    face_present=bool(z["face_present"][i]),
                    lip_present=bool(z["lip_present"][i]),
                    label=label or None,
                )
            )
        turns = [
            Turn(float(o), float(d), str(s))
            for o, d, s in zip(z["ref_onsets"], z["ref_durations"], z["ref_speakers"])
        ]
        truth = z["visual_truth"].astype(bool)
    return SyntheticRecording(rec_id, Timeline(rec_id, turns), segments, truth)


def save_dataset(recs: list[SyntheticRecording], directory: str | os.PathLike) -> None:
    """Write one npz per recording plus ``reference.rttm``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in recs:
        save_recording(rec, directory / f"{rec.recording_id}.npz")
    (directory / "reference.rttm").write_text(emit_rttm([r.reference for r in recs]))


def load_dataset(directory: str | os.PathLike) -> list[SyntheticRecording]:
    directory = Path(directory)
    paths = sorted(directory.glob("*.npz"))
    if not paths:
        raise ConfigError(f"{directory}: no recordings found")
    return [load_recording(p) for p in paths]


def load_config(path: str | os.PathLike) -> dict:
    """Read a JSON config file."""
    with open(path) as fh:
        return json.load(fh)


def config_to_dict(cfg) -> dict:
    return asdict(cfg)
