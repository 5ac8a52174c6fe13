"""Sequential-training harness with forgetting baselines and latent probes.

Methods: plain sequential fine-tuning, quadratic parameter anchoring on a
diagonal Fisher (ewc), replay of stored samples (rehearsal), the latent
regularised objective (segreg), and the combination (segreg_ewc).  Every
random draw comes from a stream named by (run_seed, purpose, ...), so a
run is a pure function of its config.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .drift import DriftReport, LatentSnapshot, ProbeSet, drift_report, make_probe
from .gaussianity import sample_projections
from .losses import SegRegWeights, segreg_total
from .model import (
    ForwardOutput,
    ModelParams,
    PixelSampler,
    extract_latent_batch,
    forward,
    init_params,
)
from .seeding import derive_seed, make_rng
from .synthdata import TaskData
from .tensor import Tensor, no_grad, scale, tsum

log = logging.getLogger(__name__)

METHODS = ("seq", "ewc", "rehearsal", "segreg", "segreg_ewc")
EVAL_CHUNK = 16


@dataclass(frozen=True)
class MethodConfig:
    """One continual run: method, optimiser budget, and regulariser knobs."""

    method: str = "seq"
    lr: float = 0.002
    momentum: float = 0.9
    epochs: int = 240
    batch_size: int = 4
    run_seed: int = 0
    ewc_lambda: float = 100.0
    fisher_samples: int = 200
    rehearsal_per_task: int = 32
    weights: SegRegWeights = field(default_factory=SegRegWeights)
    projections: int = 16
    sigreg_mode: str = "quadrature"
    quad_points: int = 257
    normalize_by_n: bool = False
    pixel_budget: int = 256
    probe_pixels: int = 512

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"MethodConfig: unknown method {self.method!r} (one of {METHODS})")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("MethodConfig: lr, epochs, batch_size must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"MethodConfig: momentum must be in [0, 1), got {self.momentum}")
        if self.ewc_lambda < 0 or self.fisher_samples < 1 or self.rehearsal_per_task < 1:
            raise ValueError("MethodConfig: bad ewc/rehearsal settings")
        if self.projections < 1 or self.pixel_budget < 1 or self.probe_pixels < 1:
            raise ValueError("MethodConfig: projections, pixel_budget, probe_pixels must be >= 1")

    @property
    def uses_ewc(self) -> bool:
        return self.method in ("ewc", "segreg_ewc")

    @property
    def uses_rehearsal(self) -> bool:
        return self.method == "rehearsal"

    @property
    def effective_weights(self) -> SegRegWeights:
        """Latent terms active only for the segreg methods."""
        if self.method in ("segreg", "segreg_ewc"):
            return self.weights
        return replace(self.weights, lam=0.0, inv_weight=0.0)


@dataclass
class MethodState:
    """Mutable carry between stages: params, momentum, anchors, buffer."""

    params: ModelParams
    velocity: dict[str, np.ndarray]
    anchors: list[tuple[dict[str, np.ndarray], dict[str, np.ndarray]]] = field(default_factory=list)
    buffer_images: np.ndarray | None = None
    buffer_masks: np.ndarray | None = None


def init_state(cfg: MethodConfig, num_classes: int) -> MethodState:
    params = init_params(derive_seed(cfg.run_seed, "init"), num_classes)
    vel = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}
    return MethodState(params=params, velocity=vel)


def _sgd_step(state: MethodState, cfg: MethodConfig):
    for name, p in state.params.tensors.items():
        g = p.grad if p.grad is not None else 0.0
        v = cfg.momentum * state.velocity[name] - cfg.lr * g
        state.velocity[name] = v
        p.data += v.astype(p.data.dtype)


def _segmentation_loss(out: ForwardOutput, masks: np.ndarray, weights: SegRegWeights) -> Tensor:
    """Plain segmentation objective, used for Fisher estimation."""
    plain = replace(weights, lam=0.0, inv_weight=0.0)
    dummy = extract_latent_batch(out, masks, PixelSampler(per_class=1, seed=0))
    total, _ = segreg_total(out.logits, dummy, masks, plain, None)
    return total


def _ewc_penalty(params: ModelParams, anchors, lam: float) -> Tensor:
    pen: Tensor | None = None
    for theta_star, fisher in anchors:
        for name, p in params.tensors.items():
            diff = p - Tensor(theta_star[name])
            term = tsum(diff.square() * Tensor(fisher[name].astype(p.data.dtype)))
            pen = term if pen is None else pen + term
    assert pen is not None
    return scale(pen, 0.5 * lam)


def estimate_fisher(
    params: ModelParams, task: TaskData, cfg: MethodConfig, stage: int
) -> dict[str, np.ndarray]:
    """Diagonal Fisher proxy: mean squared gradient of the segmentation
    loss over single-image draws (with replacement) from the train split."""
    rng = make_rng(cfg.run_seed, "fisher", stage)
    n = task.train.images.shape[0]
    acc = {k: np.zeros(t.data.shape, dtype=np.float64) for k, t in params.tensors.items()}
    for draw in rng.integers(0, n, size=cfg.fisher_samples):
        out = forward(params, Tensor(task.train.images[draw : draw + 1]))
        loss = _segmentation_loss(out, task.train.masks[draw : draw + 1], cfg.weights)
        params.zero_grad()
        loss.backward()
        for k, p in params.tensors.items():
            if p.grad is not None:
                acc[k] += np.square(p.grad, dtype=np.float64)
    params.zero_grad()
    return {k: (v / cfg.fisher_samples) for k, v in acc.items()}


def _mixed_batch(state: MethodState, images, masks, idx, cfg: MethodConfig, rng):
    """Current-task batch, with a quarter replaced by stored samples when
    the rehearsal buffer is non-empty."""
    cur_x, cur_y = images[idx], masks[idx]
    if not cfg.uses_rehearsal or state.buffer_images is None:
        return cur_x, cur_y
    n_stored = min(len(idx) // 4, state.buffer_images.shape[0])
    if n_stored == 0:
        return cur_x, cur_y
    pick = rng.choice(state.buffer_images.shape[0], size=n_stored, replace=False)
    x = np.concatenate([state.buffer_images[pick], cur_x[n_stored:]])
    y = np.concatenate([state.buffer_masks[pick], cur_y[n_stored:]])
    return x, y


def train_stage(
    state: MethodState,
    task: TaskData,
    stage: int,
    cfg: MethodConfig,
    stream_tag: str = "stage",
) -> dict[str, float]:
    """Run one stage's epochs in place; returns the last batch breakdown.

    Latent sampling and projection streams are consumed only by methods
    whose regulariser weights are nonzero, so a zero-weight run touches
    exactly the same random numbers as plain seq and follows a bit
    identical trajectory.
    """
    images, masks = task.train.images, task.train.masks
    w = cfg.effective_weights
    latents_needed = w.lam > 0.0 or w.effective_inv_weight > 0.0
    ewc_active = cfg.uses_ewc and cfg.ewc_lambda > 0.0 and state.anchors
    breakdown: dict[str, float] = {}
    step_idx = 0
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.run_seed, stream_tag, stage, "shuffle", epoch).permutation(
            images.shape[0]
        )
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            replay_rng = (
                make_rng(cfg.run_seed, stream_tag, stage, "replay", step_idx)
                if cfg.uses_rehearsal
                else None
            )
            x, y = _mixed_batch(state, images, masks, idx, cfg, replay_rng)
            out = forward(state.params, Tensor(x))
            if latents_needed:
                sampler = PixelSampler(
                    per_class=cfg.pixel_budget,
                    seed=derive_seed(cfg.run_seed, stream_tag, stage, "pixels", step_idx),
                )
                lat = extract_latent_batch(out, y, sampler)
                proj = (
                    sample_projections(
                        state.params.latent_dim,
                        cfg.projections,
                        derive_seed(cfg.run_seed, stream_tag, stage, "proj", step_idx),
                    )
                    if w.lam > 0.0
                    else None
                )
            else:
                lat = extract_latent_batch(out, y, PixelSampler(per_class=1, seed=0))
                proj = None
            total, breakdown = segreg_total(
                out.logits,
                lat,
                y,
                w,
                proj,
                sigreg_mode=cfg.sigreg_mode,
                quad_points=cfg.quad_points,
                normalize_by_n=cfg.normalize_by_n,
            )
            if ewc_active:
                penalty = _ewc_penalty(state.params, state.anchors, cfg.ewc_lambda)
                breakdown["ewc"] = penalty.item()
                total = total + penalty
            state.params.zero_grad()
            total.backward()
            _sgd_step(state, cfg)
            step_idx += 1
    return breakdown


def finish_stage(state: MethodState, task: TaskData, stage: int, cfg: MethodConfig):
    """Post-stage bookkeeping: Fisher anchor and rehearsal buffer growth."""
    if cfg.uses_ewc and cfg.ewc_lambda > 0.0:
        fisher = estimate_fisher(state.params, task, cfg, stage)
        theta = {k: t.data.copy() for k, t in state.params.tensors.items()}
        state.anchors.append((theta, fisher))
    if cfg.uses_rehearsal:
        rng = make_rng(cfg.run_seed, "buffer", stage)
        n = task.train.images.shape[0]
        take = min(cfg.rehearsal_per_task, n)
        pick = rng.choice(n, size=take, replace=False)
        imgs, msks = task.train.images[pick], task.train.masks[pick]
        if state.buffer_images is None:
            state.buffer_images, state.buffer_masks = imgs.copy(), msks.copy()
        else:
            state.buffer_images = np.concatenate([state.buffer_images, imgs])
            state.buffer_masks = np.concatenate([state.buffer_masks, msks])


def dsc(pred: np.ndarray, target: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-foreground-class Dice overlap for one mask pair.

    A class absent from both masks scores 1: nothing to find, nothing
    found.
    """
    if pred.shape != target.shape:
        raise ValueError(f"dsc: shape mismatch {pred.shape} vs {target.shape}")
    out = np.empty(num_classes - 1, dtype=np.float64)
    for c in range(1, num_classes):
        a, b = pred == c, target == c
        denom = int(a.sum()) + int(b.sum())
        out[c - 1] = 1.0 if denom == 0 else 2.0 * int((a & b).sum()) / denom
    return out


def eval_dsc(params: ModelParams, images: np.ndarray, masks: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean foreground DSC over a split, plus the per-sample class table."""
    rows = []
    with no_grad():
        for start in range(0, images.shape[0], EVAL_CHUNK):
            out = forward(params, Tensor(images[start : start + EVAL_CHUNK]))
            pred = out.logits.data.argmax(axis=1)
            for p, t in zip(pred, masks[start : start + EVAL_CHUNK]):
                rows.append(dsc(p, t, params.num_classes))
    table = np.asarray(rows)
    return float(table.mean()), table


def snapshot_probe(params: ModelParams, images: np.ndarray, probe: ProbeSet, stage: int) -> LatentSnapshot:
    """Embed the probe pixels through the current model."""
    zs = []
    with no_grad():
        for start in range(0, images.shape[0], EVAL_CHUNK):
            out = forward(params, Tensor(images[start : start + EVAL_CHUNK]))
            sel = (probe.image_idx >= start) & (probe.image_idx < start + EVAL_CHUNK)
            zs.append(
                out.latents.data[probe.image_idx[sel] - start, :, probe.rows[sel], probe.cols[sel]]
            )
    return LatentSnapshot(
        stage=stage, latents=np.concatenate(zs).astype(np.float64), labels=probe.labels
    )


def continual_metrics(r: np.ndarray, baselines: np.ndarray) -> tuple[float, float, float]:
    """(mean final DSC, backward transfer, forward transfer).

    r[i][j] is performance on task j after finishing stage i; baselines[j]
    is single-task training of task j under the same budget.  BWT compares
    each earlier task's final score to its just-learned score; FWT compares
    each later task's pre-exposure score to its baseline.
    """
    r = np.asarray(r, dtype=np.float64)
    baselines = np.asarray(baselines, dtype=np.float64)
    t = r.shape[0]
    if r.shape != (t, t):
        raise ValueError(f"continual_metrics: R must be square, got {r.shape}")
    if baselines.shape != (t,):
        raise ValueError(f"continual_metrics: need {t} baselines, got {baselines.shape}")
    if not (np.isfinite(r).all() and np.isfinite(baselines).all()):
        raise ValueError("continual_metrics: non-finite entries")
    mean_dsc = float(r[-1].mean())
    bwt = float(np.mean([r[-1, i] - r[i, i] for i in range(t - 1)])) if t > 1 else 0.0
    fwt = float(np.mean([r[j - 1, j] - baselines[j] for j in range(1, t)])) if t > 1 else 0.0
    return mean_dsc, bwt, fwt


@dataclass
class RunResult:
    """Everything a finished run exports."""

    config: MethodConfig
    task_ids: tuple[str, ...]
    r_matrix: np.ndarray  # (T, T)
    baselines: np.ndarray  # (T,)
    mean_dsc: float
    bwt: float
    fwt: float
    snapshots: list[LatentSnapshot]
    drift: DriftReport | None
    stage_params: list[ModelParams]
    final_params: ModelParams


def train_baselines(tasks: list[TaskData], cfg: MethodConfig) -> np.ndarray:
    """Single-task reference scores: same init, same budget, no method.

    Shared across methods for a fixed run_seed, so callers comparing
    methods can compute these once and pass them to run_sequence.
    """
    plain = replace(cfg, method="seq")
    scores = np.empty(len(tasks))
    for j, task in enumerate(tasks):
        state = init_state(plain, num_classes=task.spec.num_foreground + 1)
        train_stage(state, task, stage=j, cfg=plain, stream_tag="baseline")
        scores[j], _ = eval_dsc(state.params, task.test.images, task.test.masks)
    return scores


def run_sequence(
    tasks: list[TaskData], cfg: MethodConfig, baselines: np.ndarray | None = None
) -> RunResult:
    """Train the task sequence and assemble scores, transfer, and drift."""
    if not tasks:
        raise ValueError("run_sequence: no tasks")
    n_fg = {t.spec.num_foreground for t in tasks}
    if len(n_fg) != 1:
        raise ValueError(f"run_sequence: tasks disagree on class count: {sorted(n_fg)}")
    num_classes = n_fg.pop() + 1

    t_count = len(tasks)
    state = init_state(cfg, num_classes)
    probe = make_probe(
        tasks[0].val.masks, cfg.probe_pixels, seed=derive_seed(cfg.run_seed, "probe")
    )
    r = np.zeros((t_count, t_count))
    snapshots: list[LatentSnapshot] = []
    stage_params: list[ModelParams] = []
    for stage, task in enumerate(tasks):
        train_stage(state, task, stage, cfg)
        finish_stage(state, task, stage, cfg)
        for j, other in enumerate(tasks):
            r[stage, j], _ = eval_dsc(state.params, other.test.images, other.test.masks)
        snapshots.append(snapshot_probe(state.params, tasks[0].val.images, probe, stage))
        stage_params.append(state.params.copy())
        log.info("stage %d (%s): R row %s", stage, task.spec.task_id, np.round(r[stage], 4))

    if baselines is None:
        baselines = train_baselines(tasks, cfg)
    baselines = np.asarray(baselines, dtype=np.float64)
    mean_dsc, bwt, fwt = continual_metrics(r, baselines)
    drift = drift_report(snapshots) if len(snapshots) >= 2 else None
    return RunResult(
        config=cfg,
        task_ids=tuple(t.spec.task_id for t in tasks),
        r_matrix=r,
        baselines=baselines,
        mean_dsc=mean_dsc,
        bwt=bwt,
        fwt=fwt,
        snapshots=snapshots,
        drift=drift,
        stage_params=stage_params,
        final_params=state.params,
    )
