"""Frame-level diarization scoring and RTTM timeline I/O.

Error times are counted in whole frames, so the rate decomposition is exact:
``der == mr + far + spkerr`` holds as :class:`fractions.Fraction` equality.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

EXHAUSTIVE_LIMIT = 8


class TimelineError(ValueError):
    """Malformed timeline or RTTM content."""


class Turn(NamedTuple):
    onset: float
    duration: float
    speaker: str

    @property
    def offset(self) -> float:
        return self.onset + self.duration


@dataclass
class Timeline:
    recording_id: str
    turns: list[Turn] = field(default_factory=list)

    def __post_init__(self):
        self.turns = [Turn(float(t[0]), float(t[1]), str(t[2])) for t in self.turns]

    def validate(self) -> "Timeline":
        """Check durations and per-speaker self-overlap; returns self."""
        by_speaker: dict[str, list[tuple[int, Turn]]] = {}
        for i, turn in enumerate(self.turns):
            if not np.isfinite(turn.onset) or not np.isfinite(turn.duration):
                raise TimelineError(f"{self.recording_id}: turn {i} {turn} is not finite")
            if turn.duration <= 0:
                raise TimelineError(f"{self.recording_id}: turn {i} {turn} has non-positive duration")
            if turn.onset < 0:
                raise TimelineError(f"{self.recording_id}: turn {i} {turn} starts before 0")
            by_speaker.setdefault(turn.speaker, []).append((i, turn))
        for items in by_speaker.values():
            items.sort(key=lambda it: it[1].onset)
            for (_, a), (j, b) in zip(items, items[1:]):
                if b.onset < a.offset - 1e-9:
                    raise TimelineError(
                        f"{self.recording_id}: turn {j} {b} overlaps an earlier turn of {b.speaker}"
                    )
        return self

    @property
    def speakers(self) -> list[str]:
        return sorted({t.speaker for t in self.turns})

    def sorted(self) -> "Timeline":
        return Timeline(self.recording_id, sorted(self.turns, key=lambda t: (t.onset, t.speaker)))


@dataclass(frozen=True)
class DiarizationScore:
    """Error frame counts; times in seconds and ratios derive from them."""

    total_frames: int
    miss_frames: int
    fa_frames: int
    confusion_frames: int
    frame: float = 0.01

    @property
    def t_total(self) -> float:
        return self.total_frames * self.frame

    @property
    def t_ms(self) -> float:
        return self.miss_frames * self.frame

    @property
    def t_fa(self) -> float:
        return self.fa_frames * self.frame

    @property
    def t_spke(self) -> float:
        return self.confusion_frames * self.frame

    def _ratio(self, n: int) -> Fraction:
        if self.total_frames == 0:
            raise TimelineError("reference contains no speech; rates are undefined")
        return Fraction(n, self.total_frames)

    @property
    def mr(self) -> Fraction:
        return self._ratio(self.miss_frames)

    @property
    def far(self) -> Fraction:
        return self._ratio(self.fa_frames)

    @property
    def spkerr(self) -> Fraction:
        return self._ratio(self.confusion_frames)

    @property
    def der(self) -> Fraction:
        return self._ratio(self.miss_frames + self.fa_frames + self.confusion_frames)

    def __add__(self, other: "DiarizationScore") -> "DiarizationScore":
        if self.frame != other.frame:
            raise ValueError(f"cannot pool scores at frame sizes {self.frame} and {other.frame}")
        return DiarizationScore(
            self.total_frames + other.total_frames,
            self.miss_frames + other.miss_frames,
            self.fa_frames + other.fa_frames,
            self.confusion_frames + other.confusion_frames,
            self.frame,
        )

    def record(self, recording_id: str) -> str:
        """``recording, MR, FAR, SpkErr, DER`` with percentages to 2 decimals."""
        vals = (self.mr, self.far, self.spkerr, self.der)
        return ",".join([recording_id] + [f"{100 * float(v):.2f}" for v in vals])


METRIC_HEADER = "recording,MR,FAR,SpkErr,DER"


def aggregate(scores: Iterable[DiarizationScore]) -> DiarizationScore:
    """Time-weighted pooling: summed error frames over summed reference frames."""
    scores = list(scores)
    if not scores:
        raise ValueError("no scores to aggregate")
    total = scores[0]
    for s in scores[1:]:
        total = total + s
    return total


def _to_frame(t: float, frame: float) -> int:
    return int(round(t / frame))


def _activity(timeline: Timeline, frame: float, n_frames: int) -> tuple[list[str], np.ndarray]:
    speakers = timeline.speakers
    index = {s: i for i, s in enumerate(speakers)}
    act = np.zeros((len(speakers), n_frames), dtype=bool)
    for turn in timeline.turns:
        act[index[turn.speaker], _to_frame(turn.onset, frame) : _to_frame(turn.offset, frame)] = True
    return speakers, act


def optimal_mapping(overlap) -> dict[int, int]:
    """Injective hypothesis->reference mapping maximising mapped overlap.

    ``overlap[r, h]`` is the time reference speaker ``r`` and hypothesis
    speaker ``h`` speak together.  Returns ``{h: r}``.  Exhaustive search up
    to ``EXHAUSTIVE_LIMIT`` speakers per side, Hungarian solver above.
    """
    ov = np.asarray(overlap, dtype=np.float64)
    n_ref, n_hyp = ov.shape
    if n_ref == 0 or n_hyp == 0:
        return {}
    if max(n_ref, n_hyp) > EXHAUSTIVE_LIMIT:
        rows, cols = linear_sum_assignment(ov, maximize=True)
        return {int(h): int(r) for r, h in zip(rows, cols)}
    best_total, best = -1.0, {}
    if n_hyp <= n_ref:
        for refs in itertools.permutations(range(n_ref), n_hyp):
            total = sum(ov[r, h] for h, r in enumerate(refs))
            if total > best_total:
                best_total, best = total, {h: r for h, r in enumerate(refs)}
    else:
        for hyps in itertools.permutations(range(n_hyp), n_ref):
            total = sum(ov[r, h] for r, h in enumerate(hyps))
            if total > best_total:
                best_total, best = total, {h: r for r, h in enumerate(hyps)}
    return best


def compute_der(reference: Timeline, hypothesis: Timeline, frame: float = 0.01) -> DiarizationScore:
    """Score ``hypothesis`` against ``reference`` at ``frame`` resolution.

    No collar.  Per frame with ``n_ref`` reference and ``n_hyp`` hypothesis
    speakers, of which ``n_hit`` are correctly mapped: miss is
    ``max(0, n_ref - n_hyp)``, false alarm ``max(0, n_hyp - n_ref)`` and
    confusion ``min(n_ref, n_hyp) - n_hit``.  With single-speaker frames this
    is the usual missed / false-alarm / wrong-speaker frame count.
    """
    if not frame > 0:
        raise ValueError(f"frame must be positive, got {frame}")
    reference.validate()
    hypothesis.validate()
    end = max([t.offset for t in reference.turns + hypothesis.turns], default=0.0)
    n_frames = _to_frame(end, frame) + 1
    _, ref_act = _activity(reference, frame, n_frames)
    _, hyp_act = _activity(hypothesis, frame, n_frames)
    overlap = ref_act.astype(np.int64) @ hyp_act.T.astype(np.int64)
    mapping = optimal_mapping(overlap)

    n_ref = ref_act.sum(axis=0)
    n_hyp = hyp_act.sum(axis=0)
    hit = np.zeros(n_frames, dtype=np.int64)
    for h, r in mapping.items():
        hit += ref_act[r] & hyp_act[h]
    return DiarizationScore(
        total_frames=int(n_ref.sum()),
        miss_frames=int(np.maximum(n_ref - n_hyp, 0).sum()),
        fa_frames=int(np.maximum(n_hyp - n_ref, 0).sum()),
        confusion_frames=int((np.minimum(n_ref, n_hyp) - hit).sum()),
        frame=frame,
    )


# --------------------------------------------------------------------- RTTM


def parse_rttm(text: str) -> list[Timeline]:
    """Parse SPEAKER records, grouped by recording in order of appearance.

    Blank lines, ``#`` comments and non-SPEAKER record types are skipped.
    """
    timelines: dict[str, Timeline] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = stripped.split()
        if fields[0] != "SPEAKER":
            continue
        if len(fields) != 10:
            raise TimelineError(f"line {lineno}: expected 10 fields, got {len(fields)}")
        try:
            onset = float(fields[3])
            duration = float(fields[4])
        except ValueError:
            raise TimelineError(
                f"line {lineno}: non-numeric onset/duration {fields[3]!r} {fields[4]!r}"
            ) from None
        if not (np.isfinite(onset) and np.isfinite(duration)):
            raise TimelineError(f"line {lineno}: onset/duration must be finite")
        rec = fields[1]
        timelines.setdefault(rec, Timeline(rec)).turns.append(Turn(onset, duration, fields[7]))
    return list(timelines.values())


def emit_rttm(timelines: Sequence[Timeline]) -> str:
    lines = []
    for tl in timelines:
        for turn in sorted(tl.turns, key=lambda t: (t.onset, t.speaker)):
            lines.append(
                f"SPEAKER {tl.recording_id} 1 {turn.onset:.2f} {turn.duration:.2f} "
                f"<NA> <NA> {turn.speaker} <NA> <NA>"
            )
    return "".join(line + "\n" for line in lines)
