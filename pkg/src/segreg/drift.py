"""Latent drift instrumentation.

A probe is a fixed set of pixel positions chosen once per run.  After each
training stage the model embeds the probe pixels, the rows are stored as a
snapshot, and drift is measured as the KL divergence between Gaussians
fitted to consecutive snapshots.  Everything here is plain numpy; the
tracked graph never reaches this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussianity import GaussianMoments
from .seeding import make_rng

COV_RIDGE = 1e-4


@dataclass(frozen=True)
class ProbeSet:
    """Fixed pixel positions (image index, row, col) with their labels."""

    image_idx: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n = self.image_idx.shape[0]
        for name in ("image_idx", "rows", "cols", "labels"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ValueError(f"ProbeSet: {name} must be ({n},), got {arr.shape}")

    @property
    def size(self) -> int:
        return int(self.image_idx.shape[0])


def make_probe(masks: np.ndarray, n_pixels: int = 512, seed: int = 0) -> ProbeSet:
    """Stratified probe over a stack of label masks.

    The budget is split evenly across the classes present in ``masks``; the
    remainder, and any shortfall from rare classes, goes to class 0 since
    background never runs out.  Sampling is without replacement inside each
    class and deterministic in ``seed``.
    """
    masks = np.asarray(masks)
    if masks.ndim != 3:
        raise ValueError(f"make_probe: masks must be (n, h, w), got {masks.shape}")
    if n_pixels < 1:
        raise ValueError("make_probe: n_pixels must be >= 1")
    rng = make_rng(seed, "probe")
    classes = np.unique(masks)
    quota = {int(c): n_pixels // classes.size for c in classes}
    quota[int(classes[0])] += n_pixels - sum(quota.values())

    flat = masks.reshape(-1)
    picks: list[np.ndarray] = []
    short = 0
    for c in classes[::-1]:  # rare classes first, leftovers roll into class 0
        pool = np.flatnonzero(flat == c)
        want = quota[int(c)] + (short if c == classes[0] else 0)
        take = min(want, pool.size)
        short += want - take
        picks.append(rng.choice(pool, size=take, replace=False))
    idx = np.sort(np.concatenate(picks))
    img, rem = np.divmod(idx, masks.shape[1] * masks.shape[2])
    r, col = np.divmod(rem, masks.shape[2])
    return ProbeSet(
        image_idx=img.astype(np.int64),
        rows=r.astype(np.int64),
        cols=col.astype(np.int64),
        labels=flat[idx].astype(np.int64),
    )


@dataclass(frozen=True)
class LatentSnapshot:
    """Probe embeddings captured after one training stage."""

    stage: int
    latents: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,)

    def __post_init__(self):
        z = np.asarray(self.latents, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if z.ndim != 2 or y.shape != (z.shape[0],):
            raise ValueError(f"LatentSnapshot: bad shapes {z.shape}, {y.shape}")
        object.__setattr__(self, "latents", z)
        object.__setattr__(self, "labels", y)

    @property
    def dim(self) -> int:
        return int(self.latents.shape[1])

    def moments(self) -> GaussianMoments:
        return fit_moments(self.latents)

    def class_moments(self) -> dict[int, GaussianMoments]:
        """Per-class fits, restricted to classes with more rows than dims.

        With n <= d the sample covariance is singular and the fit says
        nothing, so such classes are skipped rather than ridge-rescued.
        """
        out: dict[int, GaussianMoments] = {}
        for c in np.unique(self.labels):
            rows = self.latents[self.labels == c]
            if rows.shape[0] >= self.dim + 1:
                out[int(c)] = fit_moments(rows)
        return out


def fit_moments(x: np.ndarray, ridge: float = COV_RIDGE) -> GaussianMoments:
    """Sample mean and covariance (ddof=1) with a small diagonal ridge.

    The ridge keeps the covariance invertible when probe pixels land on
    near-constant features.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"fit_moments: need (n, d), got {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ValueError(f"fit_moments: need >= 2 rows, got {n}")
    mean = x.mean(axis=0)
    centred = x - mean
    cov = centred.T @ centred / (n - 1) + ridge * np.eye(d)
    return GaussianMoments(mean=mean, cov=cov)


def gaussian_kl(a: GaussianMoments, b: GaussianMoments) -> float:
    """KL(a || b) between two multivariate Gaussians, in nats."""
    d = a.mean.size
    if b.mean.size != d:
        raise ValueError(f"gaussian_kl: dimension mismatch {d} vs {b.mean.size}")
    chol_b = np.linalg.cholesky(b.cov)
    solved = np.linalg.solve(chol_b, np.linalg.solve(chol_b, a.cov).T)
    trace = float(np.trace(solved))
    diff = np.linalg.solve(chol_b, b.mean - a.mean)
    mahal = float(diff @ diff)
    _, logdet_a = np.linalg.slogdet(a.cov)
    logdet_b = 2.0 * float(np.log(np.diag(chol_b)).sum())
    return 0.5 * (trace + mahal - d + logdet_b - logdet_a)


@dataclass(frozen=True)
class DriftReport:
    """Consecutive-snapshot KL series over a training run."""

    stages: tuple[int, ...]
    step_kl: tuple[float, ...]  # step_kl[i] compares stages[i+1] against stages[i]
    per_class_kl: dict[int, tuple[float | None, ...]] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return float(sum(self.step_kl))

    def to_dict(self) -> dict:
        return {
            "stages": list(self.stages),
            "step_kl": list(self.step_kl),
            "total": self.total,
            "per_class_kl": {str(c): list(v) for c, v in self.per_class_kl.items()},
        }


def drift_report(snapshots: list[LatentSnapshot]) -> DriftReport:
    """Fit each snapshot and accumulate KL(new || previous) along the run.

    Per-class entries are None for steps where either side lacks enough
    rows for a well-posed fit.
    """
    if len(snapshots) < 2:
        raise ValueError("drift_report: need at least two snapshots")
    fits = [s.moments() for s in snapshots]
    class_fits = [s.class_moments() for s in snapshots]
    steps = [gaussian_kl(fits[i + 1], fits[i]) for i in range(len(fits) - 1)]

    all_classes = sorted({c for cf in class_fits for c in cf})
    per_class: dict[int, tuple[float | None, ...]] = {}
    for c in all_classes:
        series: list[float | None] = []
        for i in range(len(snapshots) - 1):
            prev, cur = class_fits[i].get(c), class_fits[i + 1].get(c)
            series.append(None if prev is None or cur is None else gaussian_kl(cur, prev))
        per_class[c] = tuple(series)
    return DriftReport(
        stages=tuple(s.stage for s in snapshots),
        step_kl=tuple(steps),
        per_class_kl=per_class,
    )


def pca_project(latents: np.ndarray, k: int = 2):
    """Project rows onto the top-k principal axes of their covariance.

    Returns (coords (n, k), components (k, d), explained (k,)) where
    explained holds variance fractions.  Each component's largest-magnitude
    entry is made positive so the axes do not flip between runs.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"pca_project: need (n >= 2, d), got {x.shape}")
    if not 1 <= k <= x.shape[1]:
        raise ValueError(f"pca_project: k={k} out of range for d={x.shape[1]}")
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:k]
    comps = evecs[:, order].T
    for i in range(k):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    total = float(evals.sum())
    explained = evals[order] / total if total > 0 else np.zeros(k)
    return centred @ comps.T, comps, explained
