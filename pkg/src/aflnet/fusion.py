"""Multi-modal feature extractor: two-step cross-attention fusion.

Audio and face token sequences are fused first; the fused sequence is then
fused with the lip sequence.  Each cross-attention step attends both ways
and concatenates the two attended blocks along the token axis, so the
output carries ``T_A + T_B`` tokens of the shared model width ``d``.

Sequences are processed in batches: a :class:`TokenSequence` stacks
``groups`` equal-length sequences vertically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from aflnet import numeric as nm
from aflnet.numeric import DimensionError, Var

MODALITIES = ("audio", "face", "lip", "fused")


@dataclass
class TokenSequence:
    tokens: Var
    modality: str
    groups: int = 1

    def __post_init__(self):
        if not isinstance(self.tokens, Var):
            self.tokens = Var(self.tokens)
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.groups < 1 or self.tokens.shape[0] % self.groups or self.tokens.shape[0] == 0:
            raise DimensionError(
                f"{self.modality}: {self.tokens.shape[0]} rows do not form {self.groups} non-empty sequences"
            )

    @property
    def length(self) -> int:
        return self.tokens.shape[0] // self.groups

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


class Linear:
    """Affine map with uniform ``±1/sqrt(fan_in)`` initialisation."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, name: str):
        self.w = nm.parameter(nm.init_uniform(rng, fan_in, (fan_in, fan_out)), f"{name}.w")
        self.b = nm.parameter(nm.init_uniform(rng, fan_in, (1, fan_out)), f"{name}.b")

    def __call__(self, x) -> Var:
        return nm.linear(x, self.w, self.b)

    def parameters(self) -> list[Var]:
        return [self.w, self.b]

    def set_identity(self) -> None:
        n, m = self.w.shape
        if n != m:
            raise DimensionError(f"{self.w.name}: identity needs a square weight, got {self.w.shape}")
        self.w.value = np.eye(n)
        self.b.value = np.zeros((1, m))


class CrossAttentionBlock:
    """Query/key/value projections for both sides of one fusion step."""

    SIDES = ("q_a", "k_a", "v_a", "q_b", "k_b", "v_b")

    def __init__(self, d: int, rng: np.random.Generator, name: str = "block"):
        self.d = d
        self.name = name
        for side in self.SIDES:
            setattr(self, side, Linear(d, d, rng, f"{name}.{side}"))

    @property
    def scale(self) -> float:
        return math.sqrt(self.d)

    def parameters(self) -> list[Var]:
        return [p for side in self.SIDES for p in getattr(self, side).parameters()]

    def set_identity(self) -> None:
        for side in self.SIDES:
            getattr(self, side).set_identity()


def attention_weights(f_a: TokenSequence, f_b: TokenSequence, block: CrossAttentionBlock):
    """Return (weights B->A, weights A->B) without the value products."""
    _check_pair(f_a, f_b, block)
    g = f_a.groups
    q_a, k_a = block.q_a(f_a.tokens), block.k_a(f_a.tokens)
    q_b, k_b = block.q_b(f_b.tokens), block.k_b(f_b.tokens)
    w_ba = nm.softmax_rows(nm.group_matmul_nt(q_b, k_a, g), block.scale)
    w_ab = nm.softmax_rows(nm.group_matmul_nt(q_a, k_b, g), block.scale)
    return w_ba, w_ab


def _check_pair(f_a: TokenSequence, f_b: TokenSequence, block: CrossAttentionBlock) -> None:
    if f_a.dim != block.d:
        raise DimensionError(f"side A ({f_a.modality}) has width {f_a.dim}, block expects {block.d}")
    if f_b.dim != block.d:
        raise DimensionError(f"side B ({f_b.modality}) has width {f_b.dim}, block expects {block.d}")
    if f_a.groups != f_b.groups:
        raise DimensionError(f"side A has {f_a.groups} sequences, side B has {f_b.groups}")


def cross_attend(f_a: TokenSequence, f_b: TokenSequence, block: CrossAttentionBlock) -> TokenSequence:
    """Bidirectional cross-attention, blocks concatenated along tokens.

    Output per sequence: ``softmax(Q_B K_A^T / sqrt(d)) V_A`` (``T_B`` rows)
    followed by ``softmax(Q_A K_B^T / sqrt(d)) V_B`` (``T_A`` rows).
    """
    w_ba, w_ab = attention_weights(f_a, f_b, block)
    g = f_a.groups
    attended_a = nm.group_matmul(w_ba, block.v_a(f_a.tokens), g)
    attended_b = nm.group_matmul(w_ab, block.v_b(f_b.tokens), g)
    return TokenSequence(nm.group_concat([attended_a, attended_b], g), "fused", g)


def pool_representation(fused: TokenSequence) -> Var:
    """Mean over tokens: one ``d``-wide row per sequence."""
    return nm.group_mean(fused.tokens, fused.groups)


@dataclass
class FusionConfig:
    audio_dim: int = 2
    face_dim: int = 8
    lip_dim: int = 8
    d: int = 64
    use_lip: bool = True
    use_cross_attention: bool = True


class FusionNetwork:
    """Input projections plus the audio-face and fused-lip attention stages.

    With ``use_cross_attention`` off, projected modality tokens are simply
    concatenated and pooled.  With ``use_lip`` off, the lip stream is
    ignored and the audio-face result is pooled directly.
    """

    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.in_audio = Linear(cfg.audio_dim, cfg.d, rng, "in_audio")
        self.in_face = Linear(cfg.face_dim, cfg.d, rng, "in_face")
        self.in_lip = Linear(cfg.lip_dim, cfg.d, rng, "in_lip")
        self.stage1 = CrossAttentionBlock(cfg.d, rng, "stage1")
        self.stage2 = CrossAttentionBlock(cfg.d, rng, "stage2")

    def parameters(self) -> list[Var]:
        return (
            self.in_audio.parameters()
            + self.in_face.parameters()
            + self.in_lip.parameters()
            + self.stage1.parameters()
            + self.stage2.parameters()
        )

    def project(self, seq: TokenSequence) -> TokenSequence:
        proj = {"audio": self.in_audio, "face": self.in_face, "lip": self.in_lip}.get(seq.modality)
        if proj is None:
            raise ValueError(f"cannot project a {seq.modality!r} sequence")
        if seq.dim != proj.w.shape[0]:
            raise DimensionError(
                f"{seq.modality} features have width {seq.dim}, projection expects {proj.w.shape[0]}"
            )
        return TokenSequence(proj(seq.tokens), "fused", seq.groups)

    def encode(self, audio: TokenSequence, face: TokenSequence, lip: TokenSequence) -> TokenSequence:
        for seq, tag in ((audio, "audio"), (face, "face"), (lip, "lip")):
            if seq.modality != tag:
                raise ValueError(f"expected a {tag} sequence, got {seq.modality!r}")
        a, f = self.project(audio), self.project(face)
        if not self.cfg.use_cross_attention:
            parts = [a, f, self.project(lip)] if self.cfg.use_lip else [a, f]
            return TokenSequence(nm.group_concat([p.tokens for p in parts], a.groups), "fused", a.groups)
        af = cross_attend(a, f, self.stage1)
        if not self.cfg.use_lip:
            return af
        return cross_attend(af, self.project(lip), self.stage2)

    def represent(self, audio: TokenSequence, face: TokenSequence, lip: TokenSequence) -> Var:
        return pool_representation(self.encode(audio, face, lip))


def fuse_three(
    audio: TokenSequence, face: TokenSequence, lip: TokenSequence, net: FusionNetwork
) -> TokenSequence:
    """Audio-face fusion, then fused-lip fusion (``T_a + T_f + T_l`` tokens)."""
    a, f, l = net.project(audio), net.project(face), net.project(lip)
    return cross_attend(cross_attend(a, f, net.stage1), l, net.stage2)
