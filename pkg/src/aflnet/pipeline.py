"""Training, model selection, diarization and evaluation drivers."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from aflnet import numeric as nm
from aflnet.clustering import ahc_cluster, build_score_matrix, clusters_to_timeline, tune_threshold
from aflnet.metrics import DiarizationScore, Timeline, aggregate, compute_der, emit_rttm
from aflnet.scoring import DataError, Model, ModelConfig, SegmentBundle, apply_visual_mask, batch_loss
from aflnet.synthdata import (
    ConfigError,
    ScenarioConfig,
    SyntheticRecording,
    generate_dataset,
    missing_rate_variant,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Loss diverged during training."""


@dataclass
class TrainConfig:
    iterations: int = 6000
    interval: int = 500
    batch_size: int = 32
    batch_recordings: int = 4
    lr: float = 5e-4
    masking_rate: float = 0.3
    use_lip: bool = True
    use_masking: bool = True
    use_cross_attention: bool = True
    d: int = 64
    hidden: int = 128
    frame: float = 0.01
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.iterations <= 0:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        if self.interval <= 0:
            raise ConfigError(f"validation interval must be positive, got {self.interval}")
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be at least 2, got {self.batch_size}")
        if not 1 <= self.batch_recordings <= self.batch_size:
            raise ConfigError(
                f"batch_recordings must lie in [1, batch_size], got {self.batch_recordings}"
            )
        if not 0.0 <= self.masking_rate <= 1.0:
            raise ConfigError(f"masking rate must lie in [0, 1], got {self.masking_rate}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data).validate()


# Table-3 style arms: each removes one more modification than the previous.
ARMS: dict[str, dict] = {
    "full": {},
    "no_lip": {"use_lip": False},
    "no_masking": {"use_lip": False, "use_masking": False},
    "no_cross_attention": {"use_lip": False, "use_masking": False, "use_cross_attention": False},
}


def arm_config(cfg: TrainConfig, arm: str) -> TrainConfig:
    if arm not in ARMS:
        raise ConfigError(f"unknown ablation arm {arm!r}; choose from {sorted(ARMS)}")
    return replace(cfg, **ARMS[arm])


def model_config_for(recordings: Sequence[SyntheticRecording], cfg: TrainConfig) -> ModelConfig:
    seg = recordings[0].segments[0]
    return ModelConfig(
        audio_dim=seg.audio.shape[1],
        face_dim=seg.face.shape[1],
        lip_dim=seg.lip.shape[1],
        d=cfg.d,
        hidden=cfg.hidden,
        audio_tokens=seg.audio.shape[0],
        face_tokens=seg.face.shape[0],
        lip_tokens=seg.lip.shape[0],
        use_lip=cfg.use_lip,
        use_cross_attention=cfg.use_cross_attention,
    )


# ------------------------------------------------------------- checkpoints


@dataclass
class ModelCheckpoint:
    arch: ModelConfig
    params: dict[str, np.ndarray]
    iteration: int
    val_der: float
    threshold: float

    def to_model(self) -> Model:
        model = Model(self.arch, seed=0)
        named = model.named_parameters()
        if set(named) != set(self.params):
            raise ConfigError("checkpoint parameters do not match the architecture")
        for name, var in named.items():
            value = self.params[name]
            if value.shape != var.shape:
                raise ConfigError(f"checkpoint {name} has shape {value.shape}, expected {var.shape}")
            var.value = np.array(value, dtype=np.float64)
        return model

    @classmethod
    def from_model(cls, model: Model, iteration: int, val_der: float, threshold: float) -> "ModelCheckpoint":
        params = {name: var.value.copy() for name, var in model.named_parameters().items()}
        return cls(model.cfg, params, iteration, val_der, threshold)


def save_checkpoint(ckpt: ModelCheckpoint, path: str | os.PathLike) -> None:
    """Versioned npz with a JSON architecture descriptor; written atomically."""
    path = Path(path)
    meta = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(ckpt.arch),
        "iteration": ckpt.iteration,
        "val_der": ckpt.val_der,
        "threshold": ckpt.threshold,
        "params": sorted(ckpt.params),
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(
            fh,
            __meta__=np.array(json.dumps(meta, sort_keys=True)),
            **{f"param/{name}": ckpt.params[name] for name in sorted(ckpt.params)},
        )
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> ModelCheckpoint:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        params = {name: z[f"param/{name}"] for name in meta["params"]}
    return ModelCheckpoint(
        arch=ModelConfig(**meta["arch"]),
        params=params,
        iteration=int(meta["iteration"]),
        val_der=float(meta["val_der"]),
        threshold=float(meta["threshold"]),
    )


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    threshold: float
    losses: list[float] = field(default_factory=list)
    validations: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def final_val_der(self) -> float:
        return self.validations[-1][2]


def _sample_batch(recs: Sequence[SyntheticRecording], size: int, n_recs: int,
                  rng: np.random.Generator) -> list[SegmentBundle]:
    """``size`` segments spread over ``n_recs`` distinct recordings.

    Speakers are local to a recording, so labels are qualified by the
    recording id; pairs across recordings are different identities.
    """
    n_recs = min(n_recs, len(recs))
    for _ in range(1000):
        picks = rng.choice(len(recs), size=n_recs, replace=False)
        batch = []
        for k, r in enumerate(picks):
            rec = recs[int(r)]
            share = size // n_recs + (k < size % n_recs)
            for i in rng.permutation(len(rec.segments))[:share]:
                seg = rec.segments[i]
                batch.append(replace(seg, label=(rec.recording_id, seg.label)))
        if len({s.label for s in batch}) >= 2:
            return batch
    raise DataError("could not draw a batch with two identities")


def train(
    train_recs: Sequence[SyntheticRecording],
    val_recs: Sequence[SyntheticRecording],
    cfg: TrainConfig,
    on_validation: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Adam on the all-pairs MSE loss with validation-driven model selection.

    Every ``interval`` iterations (and after the last one) the model is
    scored on the validation set with a threshold search; the first
    checkpoint reaching the lowest validation DER is returned.
    """
    cfg.validate()
    if not train_recs or not val_recs:
        raise ConfigError("training and validation sets must be non-empty")
    for r in train_recs:
        if any(s.label is None for s in r.segments):
            raise DataError(f"training recording {r.recording_id} has unlabelled segments")
    if not any(len({s.label for s in r.segments}) >= 2 for r in train_recs):
        raise DataError("training data needs a recording with at least two identities")

    root = np.random.SeedSequence(cfg.seed)
    init_ss, batch_ss, mask_ss = root.spawn(3)
    model = Model(model_config_for(train_recs, cfg), seed=int(init_ss.generate_state(1)[0]))
    params = model.parameters()
    opt = nm.Adam(params, lr=cfg.lr)
    batch_rng = np.random.default_rng(batch_ss)
    mask_rng = np.random.default_rng(mask_ss)
    mask_rate = cfg.masking_rate if cfg.use_masking else 0.0

    result = TrainResult(checkpoint=None, threshold=float("nan"))  # type: ignore[arg-type]
    best: ModelCheckpoint | None = None
    for it in range(1, cfg.iterations + 1):
        batch = _sample_batch(train_recs, cfg.batch_size, cfg.batch_recordings, batch_rng)
        if mask_rate > 0:
            batch = apply_visual_mask(batch, mask_rate, mask_rng)
        with nm.Tape() as tape:
            loss = batch_loss(model, batch)
        value = float(loss.value[0, 0])
        if not math.isfinite(value):
            raise TrainingError(f"loss became {value} at iteration {it}")
        tape.backward(loss, params)
        opt.step()
        result.losses.append(value)

        if it % cfg.interval == 0 or it == cfg.iterations:
            search = tune_threshold(val_recs, model, frame=cfg.frame)
            der = float(search.best_der)
            result.validations.append((it, search.best, der))
            log.info("iteration %d: loss %.4f, validation DER %.2f%% at threshold %.2f",
                     it, value, 100 * der, search.best)
            if on_validation is not None:
                on_validation(it, search.best, der)
            if best is None or der < best.val_der:
                best = ModelCheckpoint.from_model(model, it, der, search.best)
    result.checkpoint = best
    result.threshold = best.threshold
    return result


# ------------------------------------------------------- inference/scoring


def _as_model(model_or_ckpt) -> Model:
    return model_or_ckpt.to_model() if isinstance(model_or_ckpt, ModelCheckpoint) else model_or_ckpt


def diarize(recording: SyntheticRecording, model, threshold: float) -> Timeline:
    """Score all segment pairs, cluster, and stitch clusters into turns."""
    model = _as_model(model)
    scores = build_score_matrix(recording.segments, model)
    clusters = ahc_cluster(scores, threshold)
    return clusters_to_timeline(recording.segments, clusters.labels, recording.recording_id)


@dataclass
class EvaluationReport:
    per_recording: dict[str, DiarizationScore]
    total: DiarizationScore
    hypotheses: dict[str, Timeline] = field(default_factory=dict)

    def records(self) -> list[str]:
        lines = [score.record(rec_id) for rec_id, score in self.per_recording.items()]
        lines.append(self.total.record("ALL"))
        return lines


def evaluate(recordings: Sequence[SyntheticRecording], model, threshold: float,
             frame: float = 0.01,
             references: dict[str, Timeline] | None = None) -> EvaluationReport:
    """Per-recording scores and their time-weighted pool."""
    model = _as_model(model)
    per, hyps = {}, {}
    for rec in recordings:
        ref = references.get(rec.recording_id) if references is not None else rec.reference
        if ref is None:
            raise DataError(f"no reference timeline for {rec.recording_id}")
        hyps[rec.recording_id] = diarize(rec, model, threshold)
        per[rec.recording_id] = compute_der(ref, hyps[rec.recording_id], frame)
    if not per:
        raise DataError("no recordings to evaluate")
    return EvaluationReport(per, aggregate(per.values()), hyps)


@dataclass
class SweepRow:
    rate: float
    ders: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.ders))

    @property
    def stderr(self) -> float:
        if len(self.ders) < 2:
            return 0.0
        return float(np.std(self.ders, ddof=1) / math.sqrt(len(self.ders)))


def missing_rate_sweep(recordings: Sequence[SyntheticRecording], model, threshold: float,
                       rates: Sequence[float], seeds: Sequence[int],
                       frame: float = 0.01) -> list[SweepRow]:
    """Mean pooled DER per visual-missing rate, averaged over seeds.

    A seed drives the same uniform draws at every rate, so the removed sets
    are nested as the rate grows.
    """
    model = _as_model(model)
    rows = []
    for rate in rates:
        if not 0.0 <= rate <= 1.0:
            raise ConfigError(f"missing rate must lie in [0, 1], got {rate}")
        ders = []
        for seed in seeds:
            rng = np.random.default_rng(seed)
            variants = [missing_rate_variant(r, rate, rng) for r in recordings]
            ders.append(float(evaluate(variants, model, threshold, frame).total.der))
        rows.append(SweepRow(float(rate), ders))
    return rows


def sweep_table(rows: Sequence[SweepRow]) -> str:
    lines = ["rate,mean_DER,stderr," + ",".join(f"seed{i}" for i in range(len(rows[0].ders)))]
    for row in rows:
        lines.append(
            f"{row.rate:.2f},{100 * row.mean:.4f},{100 * row.stderr:.4f},"
            + ",".join(f"{100 * d:.4f}" for d in row.ders)
        )
    return "\n".join(lines) + "\n"


def pooled_stderr(a: Sequence[float], b: Sequence[float]) -> float:
    """Standard error of the difference of two sample means."""
    va = np.var(a, ddof=1) if len(a) > 1 else 0.0
    vb = np.var(b, ddof=1) if len(b) > 1 else 0.0
    return float(math.sqrt(va / len(a) + vb / len(b)))


def run_arm(arm: str, train_recs, val_recs, test_recs, cfg: TrainConfig) -> tuple[TrainResult, EvaluationReport]:
    result = train(train_recs, val_recs, arm_config(cfg, arm))
    report = evaluate(test_recs, result.checkpoint, result.threshold, cfg.frame)
    return result, report


def der_percent(x: Fraction | float) -> str:
    return f"{100 * float(x):.2f}"


@dataclass
class Experiment:
    """Everything one seeded synthetic run produces."""

    train_result: TrainResult
    report: EvaluationReport
    test: list[SyntheticRecording]

    @property
    def rttm(self) -> str:
        return emit_rttm(list(self.report.hypotheses.values()))


def synthetic_experiment(scenario: ScenarioConfig, cfg: TrainConfig, arm: str = "full",
                         counts: tuple[int, int, int] = (20, 5, 5)) -> Experiment:
    """Generate train/validation/test sets from ``cfg.seed``, train one arm, score the test set."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    sets = [
        generate_dataset(scenario, n, int(ss.generate_state(1)[0]), prefix)
        for n, ss, prefix in zip(counts, seeds, ("tr", "va", "te"))
    ]
    result, report = run_arm(arm, *sets, cfg)
    return Experiment(result, report, sets[2])
