"""Average-linkage agglomerative clustering on pairwise identity scores.

Clusters are merged greedily, most similar pair first (ties go to the
lowest index pair), while the best average similarity is at least the
threshold.  The merge order does not depend on the threshold, so the full
merge sequence is computed once and cut at any threshold by taking the
longest qualifying prefix; sweeping a threshold grid costs one linkage.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from aflnet import backend
from aflnet import numeric as nm
from aflnet.metrics import DiarizationScore, Timeline, Turn, aggregate, compute_der
from aflnet.scoring import Model, SegmentBundle, raw_pair_scores, stack_segments
from aflnet.synthdata import ConfigError

THRESHOLD_GRID = tuple(round(0.10 + 0.01 * k, 2) for k in range(21))


@dataclass
class ScoreMatrix:
    scores: np.ndarray
    segment_ids: list[str]

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValueError(f"score matrix must be square, got {s.shape}")
        if len(self.segment_ids) != s.shape[0]:
            raise ValueError("segment ids do not match the score matrix size")
        if not np.allclose(s, s.T, rtol=0.0, atol=1e-12):
            raise ValueError("score matrix is not symmetric")
        self.scores = s

    @property
    def n(self) -> int:
        return self.scores.shape[0]


@dataclass
class Clustering:
    labels: np.ndarray

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def build_score_matrix(segments: Sequence[SegmentBundle], model: Model, block: int = 64) -> ScoreMatrix:
    """All-pairs scores, computed in row blocks to bound memory."""
    if not segments:
        raise ValueError("no segments to score")
    batch = stack_segments(segments, model.cfg)
    reps = model.fusion.represent(batch.audio, batch.face, batch.lip)
    n = batch.n
    raw = np.empty((n, n))
    for i0 in range(0, n, block):
        i1 = min(n, i0 + block)
        rows = nm.Var(reps.value[i0:i1])
        raw[i0:i1] = raw_pair_scores(model, rows, batch.visual[i0:i1], reps, batch.visual).value
    return ScoreMatrix((raw + raw.T) * 0.5, [s.segment_id for s in segments])


def _relabel(rep: np.ndarray) -> np.ndarray:
    """Map representatives to 0..K-1 in order of first appearance."""
    mapping: dict[int, int] = {}
    return np.array([mapping.setdefault(int(r), len(mapping)) for r in rep], dtype=np.intp)


@dataclass
class Dendrogram:
    """Complete merge sequence: ``pairs[s] = (keep, absorbed)`` at ``sims[s]``."""

    n: int
    pairs: np.ndarray
    sims: np.ndarray

    def n_merges(self, threshold: float) -> int:
        below = np.nonzero(~(self.sims >= threshold))[0]
        return int(below[0]) if len(below) else len(self.sims)

    def cut(self, threshold: float) -> Clustering:
        if not np.isfinite(threshold):
            raise ValueError(f"threshold must be finite, got {threshold}")
        rep = np.arange(self.n)
        for keep, absorbed in self.pairs[: self.n_merges(threshold)]:
            rep[rep == absorbed] = keep
        return Clustering(_relabel(rep))


def linkage(scores: ScoreMatrix | np.ndarray) -> Dendrogram:
    s = scores.scores if isinstance(scores, ScoreMatrix) else np.asarray(scores, dtype=np.float64)
    n = s.shape[0]
    # mirror the upper triangle so the kernel sees an exactly symmetric matrix
    sym = np.triu(s, 1)
    sym = np.ascontiguousarray(sym + sym.T)
    pairs, sims = backend.kernels.ahc_merges(sym)
    return Dendrogram(n, np.asarray(pairs), np.asarray(sims))


def ahc_cluster(scores: ScoreMatrix | np.ndarray, threshold: float) -> Clustering:
    if not np.isfinite(threshold):
        raise ValueError(f"threshold must be finite, got {threshold}")
    return linkage(scores).cut(threshold)


def clusters_to_timeline(segments: Sequence[SegmentBundle], labels: Sequence[int],
                         recording_id: str) -> Timeline:
    """Stitch abutting segments of the same cluster into speaker turns."""
    order = sorted(range(len(segments)), key=lambda i: segments[i].onset)
    turns: list[Turn] = []
    cur_start = cur_end = None
    cur_label = None
    for i in order:
        seg, lab = segments[i], int(labels[i])
        if cur_label == lab and abs(seg.onset - cur_end) < 1e-9:
            cur_end = seg.offset
            continue
        if cur_label is not None:
            turns.append(Turn(cur_start, cur_end - cur_start, f"spk{cur_label}"))
        cur_start, cur_end, cur_label = seg.onset, seg.offset, lab
    if cur_label is not None:
        turns.append(Turn(cur_start, cur_end - cur_start, f"spk{cur_label}"))
    return Timeline(recording_id, turns)


@dataclass
class ThresholdSearch:
    best: float
    curve: list[tuple[float, Fraction]]

    @property
    def best_der(self) -> Fraction:
        return dict(self.curve)[self.best]


def sweep_thresholds(items: Sequence[tuple[Dendrogram, Sequence[SegmentBundle], Timeline]],
                     grid: Sequence[float] = THRESHOLD_GRID,
                     frame: float = 0.01) -> ThresholdSearch:
    """Pooled DER at every grid threshold; ties resolve to the smallest."""
    if not items:
        raise ConfigError("threshold search needs at least one validation recording")
    curve = []
    for t in grid:
        scores: list[DiarizationScore] = []
        for dendro, segments, reference in items:
            hyp = clusters_to_timeline(segments, dendro.cut(t).labels, reference.recording_id)
            scores.append(compute_der(reference, hyp, frame))
        curve.append((t, aggregate(scores).der))
    best_t, best_der = curve[0]
    for t, der in curve[1:]:
        if der < best_der or (der == best_der and t < best_t):
            best_t, best_der = t, der
    return ThresholdSearch(best_t, curve)


def tune_threshold(recordings, model: Model, grid: Sequence[float] = THRESHOLD_GRID,
                   frame: float = 0.01) -> ThresholdSearch:
    """Pick the grid threshold with minimum pooled validation DER.

    ``recordings`` need ``segments`` and ``reference`` attributes.
    """
    recordings = list(recordings)
    if not recordings:
        raise ConfigError("threshold search needs at least one validation recording")
    items = [
        (linkage(build_score_matrix(r.segments, model)), r.segments, r.reference)
        for r in recordings
    ]
    return sweep_thresholds(items, grid, frame)
