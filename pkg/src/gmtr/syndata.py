"""Synthetic matching instances with known ground truth.

Two generators: rendered image pairs carrying stamped patterns at keypoints,
and planted Lawler-QAP instances whose planted assignment is checked to be the
unique brute-force optimum before it is returned.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .affinity import (AffinityInstance, assemble_lawler, build_graph, load_instance,
                       relabel_graph, save_instance)
from .discretize import _injections, brute_force_qap, perm_to_matrix
from .frontend import (ImageGrid, crop_key_patches, load_image, load_keypoints,
                       save_image, save_keypoints)
from .numerics import Tensor

LAYOUTS = ("independent", "same", "jitter", "rotate")


class GenerationError(RuntimeError):
    pass


@dataclass
class PairConfig:
    height: int = 64
    width: int = 64
    patch_size: int = 16
    channels: int = 1
    stamp: int = 7
    min_sep: int = 12
    layout: str = "independent"
    permute: bool = True
    pattern_types: int = 0  # 0: every keypoint gets its own pattern
    jitter: float = 2.0
    shift: int = 6
    max_rotation: float = 0.5
    max_tries: int = 1000

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")


@dataclass
class SyntheticPair:
    image_a: ImageGrid
    image_b: ImageGrid
    kps_a: np.ndarray
    kps_b: np.ndarray
    perm: np.ndarray  # keypoint i of A corresponds to keypoint perm[i] of B
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.perm)

    @property
    def x_gt(self) -> np.ndarray:
        return perm_to_matrix(self.perm)


def render_stamp(params: np.ndarray, size: int) -> np.ndarray:
    """Gaussian-windowed grating; ``params`` = (amplitude, orientation, frequency, phase)."""
    amp, theta, freq, phase = params
    r = (size - 1) / 2
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    window = np.exp(-(x**2 + y**2) / (2 * (size / 3) ** 2))
    wave = 0.5 + 0.5 * np.cos(freq * (x * np.cos(theta) + y * np.sin(theta)) + phase)
    return np.clip(amp * window * (0.35 + 0.65 * wave), 0.0, 1.0)


def _pattern_params(rng: np.random.Generator, count: int) -> np.ndarray:
    """Value-distinct signatures: amplitudes on a shuffled grid keep stamps apart."""
    amps = 0.35 + 0.6 * (rng.permutation(count) + rng.uniform(0.2, 0.8, count)) / count
    theta = rng.uniform(0, np.pi, count)
    freq = rng.uniform(0.6, 1.6, count)
    phase = rng.uniform(0, 2 * np.pi, count)
    return np.stack([amps, theta, freq, phase], axis=1)


def _valid_layout(centres: np.ndarray, cfg: PairConfig) -> bool:
    lo, hi_x, hi_y = cfg.patch_size // 2, cfg.width - cfg.patch_size // 2 - 1, \
        cfg.height - cfg.patch_size // 2 - 1
    if (centres[:, 0] < lo).any() or (centres[:, 0] > hi_x).any():
        return False
    if (centres[:, 1] < lo).any() or (centres[:, 1] > hi_y).any():
        return False
    d = np.abs(centres[:, None, :] - centres[None, :, :]).max(axis=2)
    np.fill_diagonal(d, cfg.min_sep)
    return bool((d >= cfg.min_sep).all())


def _sample_layout(rng: np.random.Generator, n: int, cfg: PairConfig) -> np.ndarray:
    lo = cfg.patch_size // 2
    for _ in range(cfg.max_tries):
        xs = rng.integers(lo, cfg.width - lo, n)
        ys = rng.integers(lo, cfg.height - lo, n)
        centres = np.stack([xs, ys], axis=1)
        if _valid_layout(centres, cfg):
            return centres
    raise GenerationError(f"could not place {n} patterns without overlap "
                          f"after {cfg.max_tries} tries")


def _derived_layout(rng: np.random.Generator, base: np.ndarray, cfg: PairConfig) -> np.ndarray:
    if cfg.layout == "same":
        return base.copy()
    for _ in range(cfg.max_tries):
        if cfg.layout == "independent":
            return _sample_layout(rng, len(base), cfg)
        pts = base.astype(np.float64)
        if cfg.layout == "rotate":
            ang = rng.uniform(-cfg.max_rotation, cfg.max_rotation)
            c = np.array([cfg.width / 2, cfg.height / 2])
            rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
            pts = (pts - c) @ rot.T + c
        pts = pts + rng.integers(-cfg.shift, cfg.shift + 1, 2)
        pts = pts + rng.normal(0, cfg.jitter, pts.shape)
        centres = np.rint(pts).astype(np.int64)
        if _valid_layout(centres, cfg):
            return centres
    raise GenerationError(f"could not place transformed layout after {cfg.max_tries} tries")


def _render(centres: np.ndarray, stamps: list[np.ndarray], cfg: PairConfig,
            noise: float, rng: np.random.Generator) -> ImageGrid:
    img = np.zeros((cfg.channels, cfg.height, cfg.width))
    r = cfg.stamp // 2
    for (x, y), st in zip(centres, stamps):
        img[:, y - r:y - r + cfg.stamp, x - r:x - r + cfg.stamp] = st
    if noise > 0:
        img = np.clip(img + rng.normal(0, noise, img.shape), 0.0, 1.0)
    return ImageGrid(img, cfg.patch_size)


def gen_pattern_pair(seed: int, n: int, noise: float = 0.0,
                     cfg: PairConfig | None = None) -> SyntheticPair:
    cfg = cfg or PairConfig()
    if n < 2:
        raise ValueError("pattern pairs need n >= 2")
    if cfg.stamp % 2 == 0 or cfg.stamp > cfg.patch_size:
        raise ValueError("stamp size must be odd and no larger than the patch size")
    rng = np.random.default_rng(seed)
    types = cfg.pattern_types or n
    params = _pattern_params(rng, types)
    assign = np.arange(n) if types == n else rng.integers(0, types, n)
    stamps = [np.broadcast_to(render_stamp(params[t], cfg.stamp), (cfg.channels, cfg.stamp, cfg.stamp))
              for t in assign]
    centres_a = _sample_layout(rng, n, cfg)
    centres_b = _derived_layout(rng, centres_a, cfg)
    perm = rng.permutation(n) if cfg.permute else np.arange(n)
    image_a = _render(centres_a, stamps, cfg, noise, rng)
    image_b = _render(centres_b, stamps, cfg, noise, rng)
    kps_a = centres_a + 0.5
    kps_b = np.empty_like(kps_a)
    kps_b[perm] = centres_b + 0.5
    meta = {"seed": seed, "n": n, "noise": noise, "pattern_types": assign.tolist(), **asdict(cfg)}
    return SyntheticPair(image_a, image_b, kps_a, kps_b, perm, meta)


def pixel_nearest_oracle(pair: SyntheticPair) -> np.ndarray:
    """Match each A keypoint to the B keypoint with the closest raw pixel crop."""
    ca = crop_key_patches(pair.image_a, pair.kps_a).reshape(pair.n, -1)
    cb = crop_key_patches(pair.image_b, pair.kps_b).reshape(pair.n, -1)
    d = ((ca[:, None, :] - cb[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1)


# -- planted QAP instances --------------------------------------------------

def _planted_candidate(rng: np.random.Generator, n: int, signal: float, noise: float):
    coords = rng.uniform(0, 1, (n, 2))
    g1 = build_graph(coords)
    perm = rng.permutation(n)
    g2 = relabel_graph(g1, perm)
    x = perm_to_matrix(perm)
    k_p = noise * rng.uniform(0, 1, (n, n)) + 0.5 * signal * x
    e1, e2 = g1.edges, g2.edges
    # edge pair (a, b) is planted when perm maps edge a of G1 onto edge b of G2
    mapped = np.sort(perm[e1], axis=1)
    planted = (mapped[:, None, :] == e2[None, :, :]).all(axis=2)
    k_e = noise * rng.uniform(0, 1, (len(e1), len(e2))) + signal * planted
    return assemble_lawler(Tensor(k_p), Tensor(k_e), g1, g2), perm


def gen_qap_instance(seed: int, n: int, signal: float = 1.0, noise: float = 1.5,
                     attempts: int = 10) -> tuple[AffinityInstance, np.ndarray]:
    """Planted instance whose planted assignment is the strict brute-force optimum.

    Candidates that fail verification (including ties) are resampled; if every
    one of ``attempts`` candidates fails, the signal/noise setting is rejected.
    """
    if not 2 <= n <= 8:
        raise ValueError("planted QAP instances need 2 <= n <= 8")
    rng = np.random.default_rng(seed)
    for attempt in range(attempts):
        inst, perm = _planted_candidate(rng, n, signal, noise)
        k = inst.dense_array()
        best, val = brute_force_qap(k, n, n)
        if tuple(perm) != best:
            continue
        if _has_tie(k, n, val):
            continue
        inst = inst.detached()
        inst.gt = perm.copy()
        inst.meta.update({"seed": seed, "signal": signal, "noise": noise, "attempts": attempt + 1})
        return inst, perm
    raise GenerationError(
        f"planted assignment failed verification on all {attempts} attempts "
        f"(signal={signal}, noise={noise}); raise signal or lower noise")


def _has_tie(k: np.ndarray, n: int, best: float) -> bool:
    perms = _injections(n, n)
    idx = np.arange(n) * n + perms
    vals = k[idx[:, :, None], idx[:, None, :]].sum(axis=(1, 2))
    return int((vals >= best).sum()) > 1


# -- manifests ----------------------------------------------------------------

def write_pair(directory: str | Path, pair: SyntheticPair) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_image(d / "image_a.f64", pair.image_a)
    save_image(d / "image_b.f64", pair.image_b)
    save_keypoints(d / "keypoints_a.json", pair.kps_a)
    save_keypoints(d / "keypoints_b.json", pair.kps_b)
    (d / "gt.json").write_text(json.dumps({"perm": [int(c) for c in pair.perm]}))


def read_pair(directory: str | Path) -> SyntheticPair:
    d = Path(directory)
    perm = np.array(json.loads((d / "gt.json").read_text())["perm"], dtype=np.int64)
    return SyntheticPair(load_image(d / "image_a.f64"), load_image(d / "image_b.f64"),
                         load_keypoints(d / "keypoints_a.json"),
                         load_keypoints(d / "keypoints_b.json"), perm)


def split_seeds(seed: int, count: int, splits: dict[str, float]) -> dict[str, list[int]]:
    """Deterministic disjoint seed lists per split, proportional to ``splits``."""
    seeds = [int(s) for s in np.random.default_rng(seed).choice(2**31 - 1, count, replace=False)]
    out, start = {}, 0
    names = list(splits)
    for i, name in enumerate(names):
        k = count - start if i == len(names) - 1 else int(round(splits[name] * count))
        out[name] = seeds[start:start + k]
        start += k
    return out


def write_dataset(directory: str | Path, kind: str, seed: int, count: int, n: int,
                  noise: float = 0.0, signal: float = 1.0, pair_cfg: PairConfig | None = None,
                  splits: dict[str, float] | None = None) -> dict:
    """Generate instances to disk with an ``index.json`` sufficient to regenerate them."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    splits = splits or {"train": 0.8, "val": 0.1, "test": 0.1}
    by_split = split_seeds(seed, count, splits)
    files: dict[str, list[str]] = {}
    for name, seeds in by_split.items():
        files[name] = []
        for s in seeds:
            if kind == "pairs":
                rel = f"pair_{s:010d}"
                write_pair(d / rel, gen_pattern_pair(s, n, noise, pair_cfg))
            elif kind == "qap":
                rel = f"qap_{s:010d}.txt"
                inst, _ = gen_qap_instance(s, n, signal, noise)
                save_instance(d / rel, inst)
            else:
                raise ValueError(f"unknown dataset kind {kind!r}")
            files[name].append(rel)
    index = {"kind": kind, "seed": seed, "count": count, "n": n, "noise": noise,
             "signal": signal, "pair_config": asdict(pair_cfg or PairConfig()),
             "splits": by_split, "files": files}
    (d / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return index


def read_dataset(directory: str | Path, split: str) -> list:
    d = Path(directory)
    index = json.loads((d / "index.json").read_text())
    if split not in index["files"]:
        raise KeyError(f"dataset has no split {split!r}")
    reader = read_pair if index["kind"] == "pairs" else load_instance
    return [reader(d / rel) for rel in index["files"][split]]
