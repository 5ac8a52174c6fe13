"""Tiny U-Net on the in-house engine.

Two downsampling stages, nearest-neighbour upsampling with skip
concatenation, and a 1x1 head. The d-channel feature map feeding the head
is the "latent" everything else regularises and inspects; forward() returns
that exact tensor, not a recomputation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .losses import LatentBatch
from .tensor import (
    Tensor,
    concat_channels,
    conv2d,
    gather_rows,
    leaky_relu,
    maxpool2x2,
    moveaxis,
    reshape,
    upsample2x,
)

CHANNEL_PLAN = (8, 16, 32, 16, 8)
LEAKY_SLOPE = 0.05
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    tensors: dict[str, Tensor]
    num_classes: int  # including background
    channel_plan: tuple[int, ...] = CHANNEL_PLAN

    @property
    def latent_dim(self) -> int:
        return self.channel_plan[-1]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self):
        for p in self.tensors.values():
            p.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            tensors={k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.tensors.items()},
            num_classes=self.num_classes,
            channel_plan=self.channel_plan,
        )


@dataclass
class ForwardOutput:
    logits: Tensor  # (B, C+1, H, W)
    latents: Tensor  # (B, d, H, W), the head's input


@dataclass(frozen=True)
class PixelSampler:
    """Stratified per-class pixel sampling policy for latent batches."""

    per_class: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.per_class < 1:
            raise ValueError("PixelSampler: per_class must be >= 1")


def _layer_sizes(num_classes: int) -> list[tuple[str, tuple[int, ...]]]:
    c1, c2, c3, c4, c5 = CHANNEL_PLAN
    convs = [
        ("enc1.conv1", 1, c1), ("enc1.conv2", c1, c1),
        ("enc2.conv1", c1, c2), ("enc2.conv2", c2, c2),
        ("bott.conv1", c2, c3), ("bott.conv2", c3, c3),
        ("dec2.conv1", c3 + c2, c4), ("dec2.conv2", c4, c4),
        ("dec1.conv1", c4 + c1, c5), ("dec1.conv2", c5, c5),
    ]
    sizes: list[tuple[str, tuple[int, ...]]] = []
    for name, cin, cout in convs:
        sizes.append((f"{name}.w", (cout, cin, 3, 3)))
        sizes.append((f"{name}.b", (cout,)))
    sizes.append(("head.w", (num_classes, c5, 1, 1)))
    sizes.append(("head.b", (num_classes,)))
    return sizes


def init_params(seed: int, num_classes: int, dtype=np.float32) -> ModelParams:
    """He-style init: weights ~ N(0, 2/fan_in), all biases zero."""
    if num_classes < 2:
        raise ValueError("init_params: need at least background plus one class")
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in _layer_sizes(num_classes):
        if name.endswith(".b"):
            data = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors=tensors, num_classes=num_classes)


def _block(p: ModelParams, x: Tensor, name: str) -> Tensor:
    t = p.tensors
    x = leaky_relu(conv2d(x, t[f"{name}.conv1.w"], t[f"{name}.conv1.b"]), LEAKY_SLOPE)
    return leaky_relu(conv2d(x, t[f"{name}.conv2.w"], t[f"{name}.conv2.b"]), LEAKY_SLOPE)


def forward(params: ModelParams, images: Tensor) -> ForwardOutput:
    """Full pass; images are (B, 1, H, W) with H and W divisible by 4."""
    if images.data.ndim != 4 or images.data.shape[1] != 1:
        raise ValueError(f"forward: images must be (B, 1, H, W), got {images.data.shape}")
    _, _, h, w = images.data.shape
    if h % 4 or w % 4:
        raise ValueError(f"forward: H and W must be divisible by 4, got {h}x{w}")
    e1 = _block(params, images, "enc1")
    e2 = _block(params, maxpool2x2(e1), "enc2")
    bo = _block(params, maxpool2x2(e2), "bott")
    d2 = _block(params, concat_channels([upsample2x(bo), e2]), "dec2")
    d1 = _block(params, concat_channels([upsample2x(d2), e1]), "dec1")
    logits = conv2d(d1, params.tensors["head.w"], params.tensors["head.b"])
    return ForwardOutput(logits=logits, latents=d1)


def extract_latent_batch(out: ForwardOutput, labels: np.ndarray, sampler: PixelSampler) -> LatentBatch:
    """Stratified pixel-embedding rows from a forward pass.

    Up to sampler.per_class pixels per class (background included), drawn
    without replacement from the whole batch; gradient connectivity to the
    latents is preserved.
    """
    labels = np.asarray(labels, dtype=np.int64)
    b, d, h, w = out.latents.data.shape
    if labels.shape != (b, h, w):
        raise ValueError(f"extract_latent_batch: labels {labels.shape} vs latents {(b, h, w)}")
    num_classes = out.logits.data.shape[1]
    flat_labels = labels.reshape(-1)
    rng = np.random.default_rng(sampler.seed)
    picked = []
    for c in range(num_classes):
        pool = np.flatnonzero(flat_labels == c)
        if pool.size == 0:
            continue
        take = min(sampler.per_class, pool.size)
        picked.append(np.sort(rng.choice(pool, size=take, replace=False)))
    if not picked:
        raise ValueError("extract_latent_batch: batch has no labelled pixels")
    idx = np.concatenate(picked)
    rows = reshape(moveaxis(out.latents, 1, 3), (b * h * w, d))
    return LatentBatch(embeddings=gather_rows(rows, idx), labels=flat_labels[idx],
                       num_classes=num_classes)


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(params: ModelParams, path):
    """JSON header + little-endian float32 blob; bit-exact round trip."""
    manifest = {}
    offset = 0
    blobs = []
    for name, t in params.tensors.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        manifest[name] = {"shape": list(t.data.shape), "offset": offset}
        offset += len(raw)
        blobs.append(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "channel_plan": list(params.channel_plan),
        "num_classes": params.num_classes,
        "latent_dim": params.latent_dim,
        "params": manifest,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        data = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint: unsupported format version {header.get('format_version')}")
    tensors: dict[str, Tensor] = {}
    expected = dict(_layer_sizes(header["num_classes"]))
    for name, meta in header["params"].items():
        shape = tuple(meta["shape"])
        if name not in expected or expected[name] != shape:
            raise ValueError(f"checkpoint: unexpected parameter {name} {shape}")
        n = int(np.prod(shape))
        start = meta["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=start).reshape(shape)
        tensors[name] = Tensor(arr.copy(), requires_grad=True)
    if set(tensors) != set(expected):
        raise ValueError("checkpoint: missing parameters")
    return ModelParams(
        tensors={name: tensors[name] for name, _ in _layer_sizes(header["num_classes"])},
        num_classes=header["num_classes"],
        channel_plan=tuple(header["channel_plan"]),
    )
