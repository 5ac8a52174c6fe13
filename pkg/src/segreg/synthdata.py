"""Synthetic multi-domain 2D segmentation tasks.

Each task draws a few parametric shapes (one foreground class each) on a
flat background and then runs an appearance pipeline:

    per-class base intensity -> gamma curve -> iterated 3x3 box blur
    -> additive Gaussian noise -> clamp to [0, 1]

Geometry and appearance come from separate named streams of the task seed,
so a domain shift (new gamma/noise/intensities, same seed) changes pixels
but never masks. Placement is rejection-sampled until every class keeps at
least MIN_CLASS_PIXELS visible pixels, so each class appears in every
sample.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import make_rng

SHAPE_KINDS = ("disk", "ring", "rectangle")
MIN_CLASS_PIXELS = 25
MAX_PLACE_ATTEMPTS = 200
DATASET_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class TaskSpec:
    """One synthetic domain: geometry classes plus an appearance recipe.

    classes[i] is the shape kind of foreground class i+1; appearance[c]
    is the (mean, std) intensity of class c with c=0 the background.
    """

    task_id: str
    classes: tuple[str, ...]
    appearance: tuple[tuple[float, float], ...]
    image_size: tuple[int, int] = (64, 64)
    gamma: float = 1.0
    blur_radius: int = 0
    noise_sigma: float = 0.0
    n_train: int = 16
    n_val: int = 8
    n_test: int = 8
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "appearance", tuple(tuple(a) for a in self.appearance))
        object.__setattr__(self, "image_size", tuple(self.image_size))
        if not self.task_id:
            raise ValueError("TaskSpec: empty task_id")
        if not 1 <= len(self.classes) <= 3:
            raise ValueError(f"TaskSpec {self.task_id}: need 1..3 classes, got {len(self.classes)}")
        for kind in self.classes:
            if kind not in SHAPE_KINDS:
                raise ValueError(f"TaskSpec {self.task_id}: unknown shape kind {kind!r}")
        if len(self.appearance) != len(self.classes) + 1:
            raise ValueError(
                f"TaskSpec {self.task_id}: appearance needs {len(self.classes) + 1} entries "
                f"(background first), got {len(self.appearance)}"
            )
        h, w = self.image_size
        if h % 4 or w % 4 or h < 16 or w < 16:
            raise ValueError(f"TaskSpec {self.task_id}: image size {h}x{w} (need >=16, /4)")
        if self.gamma <= 0:
            raise ValueError(f"TaskSpec {self.task_id}: gamma must be positive")
        if self.blur_radius < 0 or self.noise_sigma < 0:
            raise ValueError(f"TaskSpec {self.task_id}: negative blur or noise")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError(f"TaskSpec {self.task_id}: all splits need at least one sample")

    @property
    def num_foreground(self) -> int:
        return len(self.classes)


@dataclass(frozen=True)
class AppearanceShift:
    """Appearance-only deltas; None leaves the base value untouched."""

    gamma: float | None = None
    noise_sigma: float | None = None
    blur_radius: int | None = None
    mean_shift: float | tuple[float, ...] | None = None
    tag: str = ""

    def derive_tag(self) -> str:
        if self.tag:
            return self.tag
        bits = []
        if self.gamma is not None:
            bits.append(f"g{self.gamma:g}")
        if self.noise_sigma is not None:
            bits.append(f"n{self.noise_sigma:g}")
        if self.blur_radius is not None:
            bits.append(f"b{self.blur_radius}")
        if self.mean_shift is not None:
            ms = self.mean_shift
            bits.append(f"m{ms:g}" if isinstance(ms, (int, float)) else "mv")
        return "-".join(bits) or "same"


def domain_shift(base: TaskSpec, shift: AppearanceShift) -> TaskSpec:
    """New task: identical geometry distribution, shifted appearance."""
    appearance = base.appearance
    if shift.mean_shift is not None:
        ms = shift.mean_shift
        deltas = [float(ms)] * len(appearance) if isinstance(ms, (int, float)) else [float(x) for x in ms]
        if len(deltas) != len(appearance):
            raise ValueError("domain_shift: mean_shift length does not match class count")
        appearance = tuple((m + dm, s) for (m, s), dm in zip(appearance, deltas))
    return dataclasses.replace(
        base,
        task_id=f"{base.task_id}--{shift.derive_tag()}",
        appearance=appearance,
        gamma=base.gamma if shift.gamma is None else shift.gamma,
        noise_sigma=base.noise_sigma if shift.noise_sigma is None else shift.noise_sigma,
        blur_radius=base.blur_radius if shift.blur_radius is None else shift.blur_radius,
    )


@dataclass
class SplitData:
    images: np.ndarray  # (n, 1, H, W) float32 in [0, 1]
    masks: np.ndarray  # (n, H, W) uint8

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class TaskData:
    spec: TaskSpec
    train: SplitData
    val: SplitData
    test: SplitData

    def split(self, name: str) -> SplitData:
        return getattr(self, name)


# --- geometry ---------------------------------------------------------------


def _render_shape(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w]
    m = min(h, w)
    cy = rng.uniform(0.25 * h, 0.75 * h)
    cx = rng.uniform(0.25 * w, 0.75 * w)
    if kind == "disk":
        r = rng.uniform(m / 5, m / 2.8)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "ring":
        r = rng.uniform(m / 4, m / 2.4)
        inner = 0.55 * r
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (d2 <= r * r) & (d2 >= inner * inner)
    if kind == "rectangle":
        ay = rng.uniform(m / 5, m / 2.8)
        ax = rng.uniform(m / 5, m / 2.8)
        return (np.abs(yy - cy) <= ay) & (np.abs(xx - cx) <= ax)
    raise ValueError(f"unknown shape kind {kind!r}")


def _sample_mask(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw placements until every class keeps enough visible pixels.

    Later classes overdraw earlier ones, so visibility is checked after
    compositing.
    """
    h, w = spec.image_size
    for _ in range(MAX_PLACE_ATTEMPTS):
        mask = np.zeros((h, w), dtype=np.uint8)
        for c, kind in enumerate(spec.classes, start=1):
            mask[_render_shape(kind, h, w, rng)] = c
        counts = np.bincount(mask.reshape(-1), minlength=spec.num_foreground + 1)
        if (counts[1:] >= MIN_CLASS_PIXELS).all():
            return mask
    raise RuntimeError(
        f"TaskSpec {spec.task_id}: could not place {spec.num_foreground} shapes "
        f"with >= {MIN_CLASS_PIXELS} px each on a {h}x{w} image"
    )


def _box_blur(img: np.ndarray, iterations: int) -> np.ndarray:
    # separable 3x3 box filter with reflect edges; flat regions stay flat
    for _ in range(iterations):
        p = np.pad(img, 1, mode="reflect")
        img = (p[:-2] + p[1:-1] + p[2:]) / 3.0
        img = (img[:, :-2] + img[:, 1:-1] + img[:, 2:]) / 3.0
    return img


def _render_sample(spec: TaskSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    geo = make_rng(spec.seed, "geometry", index)
    app = make_rng(spec.seed, "appearance", index)
    mask = _sample_mask(spec, geo)

    levels = np.array(
        [app.normal(mean, std) if std > 0 else mean for mean, std in spec.appearance]
    )
    img = levels[mask]
    img = np.clip(img, 0.0, 1.0) ** spec.gamma
    if spec.blur_radius > 0:
        img = _box_blur(img, spec.blur_radius)
    # unit noise field is always drawn so sigma variants stay paired
    noise = app.standard_normal(mask.shape)
    img = img + spec.noise_sigma * noise
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None], mask


def generate_task(spec: TaskSpec) -> TaskData:
    """Materialise every split; fully determined by the spec."""
    sizes = {"train": spec.n_train, "val": spec.n_val, "test": spec.n_test}
    offsets = {"train": 0, "val": spec.n_train, "test": spec.n_train + spec.n_val}
    splits = {}
    h, w = spec.image_size
    for name in SPLITS:
        n = sizes[name]
        images = np.empty((n, 1, h, w), dtype=np.float32)
        masks = np.empty((n, h, w), dtype=np.uint8)
        for i in range(n):
            images[i], masks[i] = _render_sample(spec, offsets[name] + i)
        splits[name] = SplitData(images=images, masks=masks)
    return TaskData(spec=spec, **splits)


# --- presets -----------------------------------------------------------------

_PRESET_SIZE = dict(image_size=(32, 32), n_train=32, n_val=8, n_test=16)


def _prostate_like() -> tuple[TaskSpec, ...]:
    # one gland-like disk, four sites with progressively harsher appearance
    base = dict(classes=("disk",), **_PRESET_SIZE)
    return (
        TaskSpec(task_id="prostate-a", appearance=((0.30, 0.02), (0.70, 0.03)),
                 gamma=1.0, noise_sigma=0.03, seed=1001, **base),
        TaskSpec(task_id="prostate-b", appearance=((0.45, 0.02), (0.75, 0.03)),
                 gamma=1.8, noise_sigma=0.06, blur_radius=1, seed=2001, **base),
        TaskSpec(task_id="prostate-c", appearance=((0.25, 0.03), (0.55, 0.03)),
                 gamma=0.7, noise_sigma=0.09, seed=3001, **base),
        TaskSpec(task_id="prostate-d", appearance=((0.55, 0.02), (0.30, 0.03)),
                 gamma=1.2, noise_sigma=0.05, blur_radius=2, seed=4001, **base),
    )


def _cardiac_like() -> tuple[TaskSpec, ...]:
    # three structures of distinct shape, three sites
    base = dict(classes=("rectangle", "ring", "disk"), **_PRESET_SIZE)
    return (
        TaskSpec(task_id="cardiac-a",
                 appearance=((0.20, 0.02), (0.50, 0.02), (0.70, 0.02), (0.90, 0.02)),
                 gamma=1.0, noise_sigma=0.02, seed=1002, **base),
        TaskSpec(task_id="cardiac-b",
                 appearance=((0.35, 0.02), (0.60, 0.02), (0.80, 0.02), (0.55, 0.02)),
                 gamma=1.6, noise_sigma=0.05, blur_radius=1, seed=2002, **base),
        TaskSpec(task_id="cardiac-c",
                 appearance=((0.15, 0.02), (0.40, 0.02), (0.60, 0.02), (0.80, 0.02)),
                 gamma=0.8, noise_sigma=0.07, seed=3002, **base),
    )


def _hippocampus_like() -> tuple[TaskSpec, ...]:
    # two small structures, three sites. Site b shifts every intensity band
    # up one slot (background takes the old class-1 band, class 1 the old
    # class-2 band), so the same brightness means a different label: real
    # interference, not a nuisance transform. Site c keeps b's bright
    # banding but degrades contrast and texture hard.
    base = dict(classes=("disk", "ring"), **_PRESET_SIZE)
    return (
        TaskSpec(task_id="hippo-a", appearance=((0.25, 0.02), (0.60, 0.02), (0.85, 0.02)),
                 gamma=1.0, noise_sigma=0.03, seed=1003, **base),
        TaskSpec(task_id="hippo-b", appearance=((0.60, 0.03), (0.85, 0.03), (0.97, 0.02)),
                 gamma=1.1, noise_sigma=0.05, seed=2003, **base),
        TaskSpec(task_id="hippo-c", appearance=((0.50, 0.04), (0.80, 0.04), (0.95, 0.03)),
                 gamma=0.60, noise_sigma=0.12, seed=3003, **base),
    )


PRESETS = {
    "prostate-like": _prostate_like,
    "cardiac-like": _cardiac_like,
    "hippocampus-like": _hippocampus_like,
}


def preset_tasks(name: str) -> tuple[TaskSpec, ...]:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    return PRESETS[name]()


# --- disk format ---------------------------------------------------------------


def spec_to_dict(spec: TaskSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["appearance"] = [list(a) for a in spec.appearance]
    d["classes"] = list(spec.classes)
    d["image_size"] = list(spec.image_size)
    return d


def spec_from_dict(d: dict) -> TaskSpec:
    known = {f.name for f in dataclasses.fields(TaskSpec)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"TaskSpec: unknown fields {sorted(unknown)}")
    return TaskSpec(**d)


def save_dataset(data: TaskData, out_dir):
    """manifest.json plus one blob per split (images then masks)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": DATASET_VERSION,
        "task": spec_to_dict(data.spec),
        "splits": {name: len(data.split(name)) for name in SPLITS},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    for name in SPLITS:
        sp = data.split(name)
        with open(out / f"{name}.bin", "wb") as fh:
            fh.write(np.ascontiguousarray(sp.images, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(sp.masks, dtype=np.uint8).tobytes())


def load_dataset(in_dir) -> TaskData:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    if manifest.get("format_version") != DATASET_VERSION:
        raise ValueError(f"dataset: unsupported format version {manifest.get('format_version')}")
    spec = spec_from_dict(manifest["task"])
    h, w = spec.image_size
    splits = {}
    for name in SPLITS:
        n = manifest["splits"][name]
        raw = (src / f"{name}.bin").read_bytes()
        img_bytes = n * h * w * 4
        if len(raw) != img_bytes + n * h * w:
            raise ValueError(f"dataset: split {name} has {len(raw)} bytes, expected {img_bytes + n * h * w}")
        images = np.frombuffer(raw, dtype="<f4", count=n * h * w).reshape(n, 1, h, w).copy()
        masks = np.frombuffer(raw, dtype=np.uint8, offset=img_bytes).reshape(n, h, w).copy()
        splits[name] = SplitData(images=images, masks=masks)
    return TaskData(spec=spec, **splits)
