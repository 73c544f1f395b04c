"""QueryTrans: keypoint features from raw patches plus keypoint-centred key patches.

Raw patches follow the usual ViT layout (CLS + N grid tokens, positional
embeddings). Each keypoint contributes one key token: a P x P crop around the
keypoint, embedded with the same projection but without a positional term.
Inside every encoder block the CLS+raw tokens run plain self-attention among
themselves, while key tokens cross-attend to CLS+raw keys/values, restricted by
a filter mask to the grid cells their crop overlaps.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import LayerNorm, Linear, Module, Parameter, Tensor

FEATURE_MODES = ("bilinear", "cross", "cross+bilinear")


class ConfigError(ValueError):
    pass


@dataclass
class ImageGrid:
    pixels: np.ndarray  # (C, H, W)
    patch_size: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise ConfigError(f"image must be (C, H, W), got shape {self.pixels.shape}")
        _, h, w = self.pixels.shape
        p = self.patch_size
        if p < 1 or h % p or w % p:
            raise ConfigError(f"image {h}x{w} is not divisible into {p}x{p} patches")

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw


def check_keypoints(kps, img: ImageGrid) -> np.ndarray:
    kps = np.asarray(kps, dtype=np.float64).reshape(-1, 2)
    u, v = kps[:, 0], kps[:, 1]
    if ((u < 0) | (u >= img.width) | (v < 0) | (v >= img.height)).any():
        raise ValueError("keypoint outside image bounds")
    return kps


@dataclass
class FrontendConfig:
    dim: int = 32
    depth: int = 2
    patch_size: int = 16
    channels: int = 1
    height: int = 64
    width: int = 64
    mlp_ratio: int = 4
    use_pos: bool = True
    use_filter: bool = True
    cls_visible: bool = True
    feature_mode: str = "cross+bilinear"
    feature_layers: int = 1

    def __post_init__(self):
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(f"unknown feature mode {self.feature_mode!r}")
        if not 1 <= self.feature_layers <= self.depth:
            raise ConfigError("feature_layers must lie in [1, depth]")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigError(
                f"image {self.height}x{self.width} is not divisible into "
                f"{self.patch_size}x{self.patch_size} patches")

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    @property
    def feature_dim(self) -> int:
        per_layer = 2 if self.feature_mode == "cross+bilinear" else 1
        return self.dim * per_layer * self.feature_layers


# -- patch geometry ---------------------------------------------------------

def patchify(img: ImageGrid) -> np.ndarray:
    """Raw patches flattened channel-major, row-major grid order: (N, C*P*P)."""
    c, h, w = img.pixels.shape
    p = img.patch_size
    x = img.pixels.reshape(c, h // p, p, w // p, p)
    return x.transpose(1, 3, 0, 2, 4).reshape(-1, c * p * p)


def crop_windows(kps: np.ndarray, height: int, width: int, p: int) -> np.ndarray:
    """Top-left (x, y) of the P x P crop around each keypoint, slid inside the image."""
    kps = np.asarray(kps, dtype=np.float64).reshape(-1, 2)
    start = np.floor(kps - p / 2 + 0.5).astype(np.int64)
    start[:, 0] = np.clip(start[:, 0], 0, width - p)
    start[:, 1] = np.clip(start[:, 1], 0, height - p)
    return start


def crop_key_patches(img: ImageGrid, kps) -> np.ndarray:
    kps = check_keypoints(kps, img)
    p = img.patch_size
    starts = crop_windows(kps, img.height, img.width, p)
    return np.stack([img.pixels[:, y:y + p, x:x + p] for x, y in starts]) \
        if len(starts) else np.zeros((0, img.channels, p, p))


def build_filter_mask(img: ImageGrid, kps, cls_visible: bool = True) -> np.ndarray:
    """Boolean (Q, 1+N): key token i may attend to CLS (column 0) and raw cell j.

    A raw cell is admitted iff the key patch crop overlaps it with positive area.
    """
    kps = check_keypoints(kps, img)
    p = img.patch_size
    gh, gw = img.grid
    starts = crop_windows(kps, img.height, img.width, p)
    cells_x = np.arange(gw) * p
    cells_y = np.arange(gh) * p
    ox = (starts[:, :1] < cells_x + p) & (starts[:, :1] + p > cells_x)  # (Q, gw)
    oy = (starts[:, 1:] < cells_y + p) & (starts[:, 1:] + p > cells_y)  # (Q, gh)
    raw = (oy[:, :, None] & ox[:, None, :]).reshape(len(kps), gh * gw)
    cls = np.full((len(kps), 1), cls_visible)
    return np.concatenate([cls, raw], axis=1)


def bilinear_weights(kps, grid: tuple[int, int], p: int) -> np.ndarray:
    """(Q, N) interpolation weights over the lattice of patch centres.

    Points beyond the outermost centres are clamped onto the border.
    """
    kps = np.asarray(kps, dtype=np.float64).reshape(-1, 2)
    gh, gw = grid
    gx = np.clip(kps[:, 0] / p - 0.5, 0, gw - 1)
    gy = np.clip(kps[:, 1] / p - 0.5, 0, gh - 1)
    x0 = np.minimum(np.floor(gx).astype(np.int64), max(gw - 2, 0))
    y0 = np.minimum(np.floor(gy).astype(np.int64), max(gh - 2, 0))
    x1 = np.minimum(x0 + 1, gw - 1)
    y1 = np.minimum(y0 + 1, gh - 1)
    fx, fy = gx - x0, gy - y0
    w = np.zeros((len(kps), gh * gw))
    rows = np.arange(len(kps))
    for yy, xx, wt in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)),
                       (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)):
        np.add.at(w, (rows, yy * gw + xx), wt)
    return w


def bilinear_sample(raw: Tensor, kps, grid: tuple[int, int], p: int) -> Tensor:
    """Interpolate raw-token vectors (N x D, row-major grid) at keypoint locations."""
    return nx.matmul(Tensor(bilinear_weights(kps, grid, p)), raw)


# -- learnable pieces -------------------------------------------------------

class PatchEmbedding(Module):
    """Shared linear patch projection, positional table for CLS+raw, CLS token.

    ``proj`` is stored input-major, (C*P*P, D), so a token is ``patch @ proj``.
    """

    def __init__(self, cfg: FrontendConfig, rng: np.random.Generator):
        flat = cfg.channels * cfg.patch_size ** 2
        self.proj = Parameter(nx.trunc_normal(rng, (flat, cfg.dim)))
        self.pos = Parameter(nx.trunc_normal(rng, (cfg.n_patches + 1, cfg.dim)))
        self.cls = Parameter(nx.trunc_normal(rng, (cfg.dim,)))
        self.use_pos = cfg.use_pos


def embed_raw_patches(img: ImageGrid, emb: PatchEmbedding) -> Tensor:
    if emb.proj.shape[0] != img.channels * img.patch_size ** 2:
        raise ConfigError(
            f"patch embedding expects {emb.proj.shape[0]} inputs, image patches have "
            f"{img.channels * img.patch_size ** 2}")
    if emb.pos.shape[0] != img.n_patches + 1:
        raise ConfigError(f"positional table has {emb.pos.shape[0]} rows, need {img.n_patches + 1}")
    tokens = nx.matmul(Tensor(patchify(img)), emb.proj)
    seq = nx.concat([nx.reshape(emb.cls, (1, -1)), tokens], axis=0)
    return seq + emb.pos if emb.use_pos else seq


def embed_key_patches(patches: np.ndarray, emb: PatchEmbedding) -> Tensor:
    flat = np.asarray(patches, dtype=np.float64).reshape(len(patches), -1)
    return nx.matmul(Tensor(flat), emb.proj)


@dataclass
class PatchSequence:
    """CLS+raw tokens ((1+N) x D) and key tokens (Q x D) of one image."""

    prefix: Tensor
    key: Tensor | None

    @property
    def n_raw(self) -> int:
        return self.prefix.shape[0] - 1

    @property
    def n_key(self) -> int:
        return 0 if self.key is None else self.key.shape[0]

    def provenance(self) -> list[tuple[str, int]]:
        return ([("cls", 0)] + [("raw", j) for j in range(self.n_raw)]
                + [("key", i) for i in range(self.n_key)])


class EncoderBlock(Module):
    """Pre-norm transformer block; key tokens share W_Q/W_K/W_V with the raw path."""

    def __init__(self, dim: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.w_q = Linear(dim, dim, rng, bias=False)
        self.w_k = Linear(dim, dim, rng, bias=False)
        self.w_v = Linear(dim, dim, rng, bias=False)
        self.w_o = Linear(dim, dim, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng)
        self.scale = 1.0 / math.sqrt(dim)

    def mlp(self, x: Tensor) -> Tensor:
        return self.fc2(nx.gelu(self.fc1(self.norm2(x))))

    def __call__(self, seq: PatchSequence, mask: np.ndarray | None):
        h = self.norm1(seq.prefix)
        k = self.w_k(h)
        v = self.w_v(h)
        logits = nx.matmul(self.w_q(h), k.T) * self.scale
        prefix = seq.prefix + self.w_o(nx.matmul(nx.softmax(logits), v))
        prefix = prefix + self.mlp(prefix)

        if seq.key is None:
            return PatchSequence(prefix, None), None
        qk = self.w_q(self.norm1(seq.key))
        attn = nx.softmax(nx.matmul(qk, k.T) * self.scale, mask=mask)
        key = seq.key + self.w_o(nx.matmul(attn, v))
        key = key + self.mlp(key)
        return PatchSequence(prefix, key), attn


def encoder_forward(seq: PatchSequence, mask: np.ndarray | None,
                    blocks: list[EncoderBlock]) -> tuple[list[PatchSequence], list]:
    """Run every block; returns per-block outputs and key-path attention maps."""
    if not blocks:
        raise ConfigError("encoder needs at least one block")
    outs, attns = [], []
    for block in blocks:
        seq, attn = block(seq, mask)
        outs.append(seq)
        attns.append(attn)
    return outs, attns


@dataclass
class FrontendOutput:
    layers: list[PatchSequence]
    attention: list = field(default_factory=list)
    mask: np.ndarray | None = None


class QueryTrans(Module):
    def __init__(self, cfg: FrontendConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = PatchEmbedding(cfg, rng)
        self.blocks = [EncoderBlock(cfg.dim, cfg.mlp_ratio, rng) for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.dim)
        self.mask_builder = build_filter_mask  # swappable for audit negative controls

    @property
    def needs_keys(self) -> bool:
        return self.cfg.feature_mode != "bilinear"

    def encode(self, img: ImageGrid, kps, with_keys: bool | None = None) -> FrontendOutput:
        kps = check_keypoints(kps, img)
        with_keys = self.needs_keys if with_keys is None else with_keys
        prefix = embed_raw_patches(img, self.embed)
        key, mask = None, None
        if with_keys and len(kps):
            key = embed_key_patches(crop_key_patches(img, kps), self.embed)
            if self.cfg.use_filter:
                mask = self.mask_builder(img, kps, self.cfg.cls_visible)
            elif not self.cfg.cls_visible:
                mask = np.ones((len(kps), img.n_patches + 1), dtype=bool)
                mask[:, 0] = False
        layers, attn = encoder_forward(PatchSequence(prefix, key), mask, self.blocks)
        return FrontendOutput(layers, attn, mask)

    def extract_features(self, img: ImageGrid, kps) -> Tensor:
        """Per-keypoint features: cross-attention key tokens then bilinear raw samples."""
        kps = check_keypoints(kps, img)
        out = self.encode(img, kps)
        chosen = out.layers[-self.cfg.feature_layers:]
        parts = []
        if self.cfg.feature_mode in ("cross", "cross+bilinear"):
            parts += [self.norm(seq.key) for seq in chosen]
        if self.cfg.feature_mode in ("bilinear", "cross+bilinear"):
            weights = Tensor(bilinear_weights(kps, img.grid, img.patch_size))
            parts += [nx.matmul(weights, self.norm(seq.prefix[1:])) for seq in chosen]
        return parts[0] if len(parts) == 1 else nx.concat(parts, axis=1)


# -- file formats -----------------------------------------------------------

def save_image(path: str | Path, img: ImageGrid) -> None:
    """Raw row-major float64 pixels at ``path`` plus a ``.json`` descriptor next to it."""
    path = Path(path)
    img.pixels.astype("<f8").tofile(path)
    desc = {"C": img.channels, "H": img.height, "W": img.width, "patch_size": img.patch_size}
    path.with_suffix(".json").write_text(json.dumps(desc, sort_keys=True))


def load_image(path: str | Path) -> ImageGrid:
    path = Path(path)
    desc = json.loads(path.with_suffix(".json").read_text())
    pixels = np.fromfile(path, dtype="<f8").reshape(desc["C"], desc["H"], desc["W"])
    return ImageGrid(pixels, int(desc["patch_size"]))


def save_keypoints(path: str | Path, kps) -> None:
    Path(path).write_text(json.dumps([[float(u), float(v)] for u, v in np.asarray(kps)]))


def load_keypoints(path: str | Path) -> np.ndarray:
    return np.asarray(json.loads(Path(path).read_text()), dtype=np.float64).reshape(-1, 2)
