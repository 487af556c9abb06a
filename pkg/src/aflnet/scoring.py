"""Pairwise identity scoring, the all-pairs MSE loss and visual masking.

A pair score concatenates the two segment representations, multiplies the
result elementwise by one of four learned modality embeddings (chosen by
the ordered visual-availability pair) and maps it through an MLP to (0, 1).
Scores are symmetrised by averaging both orders.

For a batch of ``N`` segments all ``N*N`` ordered pairs are scored at once.
The first MLP layer is split into the halves acting on each segment, so
its cost is linear rather than quadratic in ``N``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Hashable, Sequence

import numpy as np

from aflnet import numeric as nm
from aflnet.fusion import FusionConfig, FusionNetwork, Linear, TokenSequence
from aflnet.numeric import DimensionError, Var


class DataError(ValueError):
    """Inconsistent segment data or missing labels."""


@dataclass
class SegmentBundle:
    """One fixed-length segment: token sequences plus visual flags.

    ``label`` is the hidden identity used for training and evaluation only.
    """

    segment_id: str
    onset: float
    duration: float
    audio: np.ndarray
    face: np.ndarray
    lip: np.ndarray
    face_present: bool = True
    lip_present: bool = True
    label: Hashable | None = None

    def __post_init__(self):
        if not self.duration > 0:
            raise DataError(f"segment {self.segment_id}: duration must be positive")
        for name in ("audio", "face", "lip"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] < 1:
                raise DataError(f"segment {self.segment_id}: {name} must be a non-empty 2-D token matrix")
            setattr(self, name, arr)
        if not self.face_present and np.any(self.face):
            raise DataError(f"segment {self.segment_id}: face flagged absent but tokens are non-zero")
        if not self.lip_present and np.any(self.lip):
            raise DataError(f"segment {self.segment_id}: lip flagged absent but tokens are non-zero")

    @property
    def visual_present(self) -> bool:
        # the 4-entry embedding table is keyed on face availability
        return self.face_present

    @property
    def offset(self) -> float:
        return self.onset + self.duration

    def without_visuals(self) -> "SegmentBundle":
        return replace(
            self,
            face=np.zeros_like(self.face),
            lip=np.zeros_like(self.lip),
            face_present=False,
            lip_present=False,
        )


@dataclass
class PairSample:
    first: SegmentBundle
    second: SegmentBundle

    @property
    def same_identity(self) -> bool:
        if self.first.label is None or self.second.label is None:
            raise DataError("pair sample is missing identity labels")
        return self.first.label == self.second.label


def embedding_index(visual_i: bool, visual_j: bool) -> int:
    """(present, present) -> 0, (present, absent) -> 1, (absent, present) -> 2, (absent, absent) -> 3."""
    return 2 * (not visual_i) + (not visual_j)


class ModalityEmbeddingTable:
    def __init__(self, d: int, rng: np.random.Generator):
        # each entry scales one input coordinate, so fan_in is 1
        self.table = nm.parameter(nm.init_uniform(rng, 1, (4, 2 * d)), "embedding")

    def parameters(self) -> list[Var]:
        return [self.table]


def select_modality_embedding(visual_i: bool, visual_j: bool, table: ModalityEmbeddingTable) -> np.ndarray:
    return table.table.value[embedding_index(visual_i, visual_j)].copy()


class ScoringHead:
    """MLP ``2d -> h -> h -> 1`` with relu hidden units and a sigmoid output.

    ``relu(u) + relu(-u) = |u|``, so the first layer can form distance-like
    features of ``r_i - r_j`` at any input scale.
    """

    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.layer1 = Linear(2 * d, hidden, rng, "head.layer1")
        self.layer2 = Linear(hidden, hidden, rng, "head.layer2")
        self.layer3 = Linear(hidden, 1, rng, "head.layer3")

    def parameters(self) -> list[Var]:
        return self.layer1.parameters() + self.layer2.parameters() + self.layer3.parameters()

    def __call__(self, x) -> Var:
        h = nm.relu(self.layer1(x))
        h = nm.relu(self.layer2(h))
        return nm.sigmoid(self.layer3(h))


@dataclass
class ModelConfig:
    audio_dim: int = 2
    face_dim: int = 8
    lip_dim: int = 8
    d: int = 64
    hidden: int = 128
    audio_tokens: int = 10
    face_tokens: int = 1
    lip_tokens: int = 10
    use_lip: bool = True
    use_cross_attention: bool = True

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            audio_dim=self.audio_dim,
            face_dim=self.face_dim,
            lip_dim=self.lip_dim,
            d=self.d,
            use_lip=self.use_lip,
            use_cross_attention=self.use_cross_attention,
        )


class Model:
    """Fusion network, modality embedding table and scoring head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.fusion = FusionNetwork(cfg.fusion_config(), rng)
        self.embeddings = ModalityEmbeddingTable(cfg.d, rng)
        self.head = ScoringHead(cfg.d, cfg.hidden, rng)

    def parameters(self) -> list[Var]:
        return self.fusion.parameters() + self.embeddings.parameters() + self.head.parameters()

    def named_parameters(self) -> dict[str, Var]:
        return {p.name: p for p in self.parameters()}


@dataclass
class SegmentBatch:
    """Stacked token matrices for ``n`` segments."""

    audio: TokenSequence
    face: TokenSequence
    lip: TokenSequence
    visual: np.ndarray
    labels: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.visual)


def stack_segments(segments: Sequence[SegmentBundle], cfg: ModelConfig | None = None) -> SegmentBatch:
    if not segments:
        raise DataError("no segments to stack")
    first = segments[0]
    for seg in segments:
        for name in ("audio", "face", "lip"):
            if getattr(seg, name).shape != getattr(first, name).shape:
                raise DimensionError(
                    f"segment {seg.segment_id}: {name} shape {getattr(seg, name).shape} "
                    f"differs from {getattr(first, name).shape}"
                )
    if cfg is not None:
        expect = {
            "audio": (cfg.audio_tokens, cfg.audio_dim),
            "face": (cfg.face_tokens, cfg.face_dim),
            "lip": (cfg.lip_tokens, cfg.lip_dim),
        }
        for name, shape in expect.items():
            if getattr(first, name).shape != shape:
                raise DimensionError(
                    f"{name} tokens have shape {getattr(first, name).shape}, model expects {shape}"
                )
    g = len(segments)
    return SegmentBatch(
        audio=TokenSequence(np.concatenate([s.audio for s in segments]), "audio", g),
        face=TokenSequence(np.concatenate([s.face for s in segments]), "face", g),
        lip=TokenSequence(np.concatenate([s.lip for s in segments]), "lip", g),
        visual=np.array([s.visual_present for s in segments], dtype=bool),
        labels=[s.label for s in segments],
    )


def raw_pair_scores(model: Model, reps: Var, visual: np.ndarray,
                    reps_j: Var | None = None, visual_j: np.ndarray | None = None) -> Var:
    """Unsymmetrised scores ``R[i, j] = head(E[k(i,j)] * (r_i || r_j))``.

    Rows come from ``reps``; columns from ``reps_j`` (defaults to ``reps``).
    Each output row depends only on its own segment, so scoring a row block
    gives bit-identical values to scoring the full matrix.
    """
    if reps_j is None:
        reps_j, visual_j = reps, visual
    n, d = reps.shape
    m = reps_j.shape[0]
    if reps_j.shape[1] != d or 2 * d != model.head.layer1.w.shape[0]:
        raise DimensionError(f"representations of width {d} do not fit the scoring head")
    table = model.embeddings.table
    l1 = model.head.layer1
    w_top = nm.take_rows(l1.w, np.arange(d))
    w_bot = nm.take_rows(l1.w, np.arange(d, 2 * d))
    emb_top = nm.take_cols(table, np.arange(d))
    emb_bot = nm.take_cols(table, np.arange(d, 2 * d))
    # stacked k-major: row k*n + i holds (E_k,top * r_i) @ W_top
    top = nm.concat_rows([nm.matmul(nm.mul(reps, nm.take_rows(emb_top, [k])), w_top) for k in range(4)])
    bot = nm.concat_rows([nm.matmul(nm.mul(reps_j, nm.take_rows(emb_bot, [k])), w_bot) for k in range(4)])
    kk = embedding_index_matrix(visual, visual_j).reshape(-1)
    i_idx = np.repeat(np.arange(n), m)
    j_idx = np.tile(np.arange(m), n)
    pre = nm.add(nm.add(nm.take_rows(top, kk * n + i_idx), nm.take_rows(bot, kk * m + j_idx)), l1.b)
    h = nm.relu(pre)
    h = nm.relu(model.head.layer2(h))
    s = nm.sigmoid(model.head.layer3(h))
    return nm.reshape(s, (n, m))


def embedding_index_matrix(visual_i: np.ndarray, visual_j: np.ndarray | None = None) -> np.ndarray:
    vi = ~np.asarray(visual_i, dtype=bool)
    vj = vi if visual_j is None else ~np.asarray(visual_j, dtype=bool)
    return 2 * vi[:, None].astype(np.intp) + vj[None, :].astype(np.intp)


def pair_scores(model: Model, batch: SegmentBatch) -> Var:
    """Symmetric ``N x N`` score matrix ``(R + R^T) / 2``."""
    reps = model.fusion.represent(batch.audio, batch.face, batch.lip)
    raw = raw_pair_scores(model, reps, batch.visual)
    return nm.scale(nm.add(raw, nm.transpose(raw)), 0.5)


def score_pair(seg_i: SegmentBundle, seg_j: SegmentBundle, model: Model) -> float:
    scores = pair_scores(model, stack_segments([seg_i, seg_j], model.cfg))
    return float(scores.value[0, 1])


def identity_targets(labels: Sequence) -> np.ndarray:
    missing = [i for i, label in enumerate(labels) if label is None]
    if missing:
        raise DataError(f"segments {missing} carry no identity label")
    return np.array([[float(a == b) for b in labels] for a in labels])


def batch_loss(model: Model, segments: Sequence[SegmentBundle]) -> Var:
    """Sum over all ``N*N`` ordered pairs (diagonal included) of
    ``(s_ij - [y_i == y_j])**2``."""
    if not segments:
        raise DataError("batch_loss needs at least one segment")
    batch = stack_segments(segments, model.cfg)
    target = identity_targets(batch.labels)
    return nm.squared_error_sum(pair_scores(model, batch), target)


def apply_visual_mask(
    segments: Sequence[SegmentBundle], rate: float, rng: np.random.Generator
) -> list[SegmentBundle]:
    """Independently drop the visuals of visible segments with probability ``rate``.

    One uniform draw is consumed per visible segment; segments without
    visuals are returned untouched and consume no draw.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"masking rate must lie in [0, 1], got {rate}")
    out = []
    for seg in segments:
        if seg.visual_present and rng.random() < rate:
            out.append(seg.without_visuals())
        else:
            out.append(seg)
    return out
