"""Deterministic synthetic rectified-stereo scenes with exact ground truth.

Scenes are layered sprites over a textured background plane. Every surface
sits at an integer disparity and the right view is rendered by shifting
each surface left by its disparity, so for every non-occluded left pixel u
with disparity d the registration identity left(u) == right(u - d) holds
bit-exactly. That exactness is what the feature-correlation probes rely on.

Region labels mark what kind of texture covers each left pixel; flat
sprites are the homogeneous-region analog of sky/road and are pinned to
appear in every scene alongside a checkerboard sprite.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

# Region label values, stored in StereoSample.region_labels.
BACKGROUND = 0
FLAT = 1
CHECKER = 2
NOISE = 3

REGION_NAMES = {BACKGROUND: "background", FLAT: "flat", CHECKER: "checker", NOISE: "noise"}

_TILE_UNIT = 32  # image dims must divide evenly into power-of-two tiles up to this


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 128
    d_max: int = 24
    background_disparity: int = 2
    n_sprites_min: int = 3
    n_sprites_max: int = 6
    # mix weights for (flat, checker, noise) sprite textures
    texture_weights: tuple = (0.25, 0.4, 0.35)
    seed: int = 0

    def __post_init__(self):
        if self.height % _TILE_UNIT or self.width % _TILE_UNIT:
            raise ValueError(
                f"scene dims must be multiples of {_TILE_UNIT}, got "
                f"{self.height}x{self.width}")
        if self.d_max >= self.width / 4:
            raise ValueError(f"d_max={self.d_max} must be < width/4={self.width / 4}")
        if not 0 < self.background_disparity <= self.d_max:
            raise ValueError("background disparity must be in (0, d_max]")
        if not 0 <= self.n_sprites_min <= self.n_sprites_max:
            raise ValueError("need 0 <= n_sprites_min <= n_sprites_max")


@dataclass
class StereoSample:
    """One rectified stereo pair with dense ground truth.

    visibility marks left pixels whose registered right pixel shows the same
    surface; it is exact for generated samples and geometrically
    reconstructed for samples loaded from disk.
    """

    left: Tensor
    right: Tensor
    gt_disparity: Tensor
    region_labels: np.ndarray
    seed: int
    visibility: np.ndarray = field(default=None, repr=False)


def _sprite_texture(rng, kind, h, w):
    if kind == FLAT:
        color = rng.uniform(0.05, 0.95, size=3)
        return np.broadcast_to(color[:, None, None], (3, h, w)).copy()
    if kind == CHECKER:
        cell = int(rng.integers(2, 5))
        c1 = rng.uniform(0.0, 1.0, size=3)
        c2 = rng.uniform(0.0, 1.0, size=3)
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        parity = ((yy // cell + xx // cell) % 2).astype(bool)
        tex = np.where(parity[None], c1[:, None, None], c2[:, None, None])
        return tex
    return rng.uniform(0.0, 1.0, size=(3, h, w))


def _sprite_mask(rng, h, w):
    if rng.uniform() < 0.5:
        return np.ones((h, w), dtype=bool)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    return ((yy - cy) / (h / 2.0)) ** 2 + ((xx - cx) / (w / 2.0)) ** 2 <= 1.0


def generate(cfg: SceneConfig) -> StereoSample:
    """Render one stereo sample; bit-identical for identical (cfg, seed)."""
    rng = np.random.default_rng(cfg.seed)
    h, w, d_bg = cfg.height, cfg.width, cfg.background_disparity

    # Background plane: the right view reads the same texture shifted by d_bg.
    bg = rng.uniform(0.0, 1.0, size=(3, h, w + d_bg))
    left = bg[:, :, :w].copy()
    right = bg[:, :, d_bg:d_bg + w].copy()
    left_id = np.zeros((h, w), dtype=np.int32)
    right_id = np.zeros((h, w), dtype=np.int32)
    disp = np.full((h, w), float(d_bg))
    labels = np.full((h, w), BACKGROUND, dtype=np.uint8)

    n = int(rng.integers(cfg.n_sprites_min, cfg.n_sprites_max + 1))
    sprites = []
    kinds_pool = (FLAT, CHECKER, NOISE)
    weights = np.asarray(cfg.texture_weights, dtype=float)
    weights = weights / weights.sum()
    for i in range(n):
        sh = int(rng.integers(h // 5, h // 2 + 1))
        sw = int(rng.integers(w // 8, w // 3 + 1))
        y0 = int(rng.integers(0, h - sh + 1))
        x0 = int(rng.integers(0, w - sw + 1))
        d = int(rng.integers(d_bg + 1, cfg.d_max + 1))
        # pin the first two kinds so flat and checker regions always exist
        if i == 0:
            kind = FLAT
        elif i == 1:
            kind = CHECKER
        else:
            kind = kinds_pool[int(rng.choice(3, p=weights))]
        tex = _sprite_texture(rng, kind, sh, sw)
        mask = _sprite_mask(rng, sh, sw)
        sprites.append((d, i + 1, y0, x0, sh, sw, kind, tex, mask))

    # Painter's algorithm: draw far-to-near in both views, nearer wins.
    for d, sid, y0, x0, sh, sw, kind, tex, mask in sorted(sprites, key=lambda s: (s[0], s[1])):
        rows = slice(y0, y0 + sh)
        left[:, rows, x0:x0 + sw] = np.where(mask[None], tex, left[:, rows, x0:x0 + sw])
        left_id[rows, x0:x0 + sw][mask] = sid
        disp[rows, x0:x0 + sw][mask] = float(d)
        labels[rows, x0:x0 + sw][mask] = kind

        xr = x0 - d  # sprite shifts left in the right view
        lo = max(0, -xr)
        if lo < sw:
            sub = mask[:, lo:]
            cols = slice(xr + lo, xr + sw)
            right[:, rows, cols] = np.where(sub[None], tex[:, :, lo:], right[:, rows, cols])
            right_id[rows, cols][sub] = sid

    # Exact visibility: the registered right pixel shows the same surface.
    xr = np.arange(w)[None, :] - disp.astype(np.int64)
    in_view = xr >= 0
    same_id = np.take_along_axis(right_id, np.clip(xr, 0, w - 1), axis=1) == left_id
    visibility = in_view & same_id

    return StereoSample(
        left=Tensor(left),
        right=Tensor(right),
        gt_disparity=Tensor(disp),
        region_labels=labels,
        seed=cfg.seed,
        visibility=visibility,
    )


def generate_dataset(cfg: SceneConfig, n: int, base_seed: int) -> list:
    """n samples, sample i rendered from seed base_seed + i."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    out = []
    for i in range(n):
        sub = SceneConfig(**{**cfg.__dict__, "seed": base_seed + i})
        out.append(generate(sub))
    return out


def visibility_from_disparity(gt: np.ndarray) -> np.ndarray:
    """Reconstruct the visibility mask geometrically from left disparity.

    A left pixel is visible when it wins its right-image column against all
    other left pixels in the row (largest disparity wins; ties go to the
    rightmost pixel). Surfaces hidden in the left view but exposed in the
    right cannot be recovered this way, so this slightly overestimates
    visibility for loaded samples; generated samples carry the exact mask.
    """
    d = np.rint(np.asarray(gt)).astype(np.int64)
    h, w = d.shape
    xs = np.arange(w)[None, :]
    xr = xs - d
    in_view = xr >= 0
    key = d * w + xs  # lexicographic (disparity, x)
    best = np.full(h * w, -1, dtype=np.int64)
    flat_target = (np.arange(h)[:, None] * w + np.clip(xr, 0, w - 1))[in_view]
    np.maximum.at(best, flat_target, key[in_view])
    wins = np.zeros((h, w), dtype=bool)
    wins[in_view] = best[flat_target] == key[in_view]
    return wins & in_view


# ---------------------------------------------------------------------------
# PPM / PGM persistence
# ---------------------------------------------------------------------------

DISPARITY_SCALE = 256  # 16-bit PGM stores round(256 * disparity)


def _write_pnm(path, magic, maxval, payload, shape_wh):
    w, h = shape_wh
    with open(path, "wb") as f:
        f.write(f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(payload)


def _read_pnm(path):
    with open(path, "rb") as f:
        blob = f.read()
    m = re.match(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not m:
        raise ValueError(f"not a binary PPM/PGM file: {path}")
    magic, w, h, maxval = m.group(1).decode(), int(m.group(2)), int(m.group(3)), int(m.group(4))
    payload = blob[m.end():]
    return magic, w, h, maxval, payload


def write_image_ppm(path, image01):
    """[3,H,W] values in [0,1] -> binary P6, 8-bit; values clamped then rounded."""
    arr = np.asarray(image01.data if isinstance(image01, Tensor) else image01)
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    _write_pnm(path, "P6", 255, q.transpose(1, 2, 0).tobytes(), (arr.shape[2], arr.shape[1]))


def read_image_ppm(path) -> np.ndarray:
    magic, w, h, maxval, payload = _read_pnm(path)
    if magic != "P6" or maxval != 255:
        raise ValueError(f"expected 8-bit P6, got {magic} maxval={maxval}: {path}")
    arr = np.frombuffer(payload, dtype=np.uint8, count=h * w * 3).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def write_disparity_pgm(path, disp):
    """[H,W] disparity in px -> 16-bit big-endian P5 storing round(256*d)."""
    arr = np.asarray(disp.data if isinstance(disp, Tensor) else disp)
    q = np.clip(np.rint(arr * DISPARITY_SCALE), 0, 65535).astype(">u2")
    _write_pnm(path, "P5", 65535, q.tobytes(), (arr.shape[1], arr.shape[0]))


def read_disparity_pgm(path) -> np.ndarray:
    magic, w, h, maxval, payload = _read_pnm(path)
    if magic != "P5" or maxval != 65535:
        raise ValueError(f"expected 16-bit P5, got {magic} maxval={maxval}: {path}")
    q = np.frombuffer(payload, dtype=">u2", count=h * w).reshape(h, w)
    return q.astype(np.float64) / DISPARITY_SCALE


def write_labels_pgm(path, labels):
    arr = np.asarray(labels).astype(np.uint8)
    _write_pnm(path, "P5", 255, arr.tobytes(), (arr.shape[1], arr.shape[0]))


def read_labels_pgm(path) -> np.ndarray:
    magic, w, h, maxval, payload = _read_pnm(path)
    if magic != "P5" or maxval != 255:
        raise ValueError(f"expected 8-bit P5, got {magic} maxval={maxval}: {path}")
    return np.frombuffer(payload, dtype=np.uint8, count=h * w).reshape(h, w).copy()


def sample_paths(directory, split, index):
    base = f"{split}/{index:06d}"
    return {
        "left": f"{directory}/{base}_left.ppm",
        "right": f"{directory}/{base}_right.ppm",
        "disp": f"{directory}/{base}_disp.pgm",
        "seg": f"{directory}/{base}_seg.pgm",
    }


def save_sample(directory, split, index, sample: StereoSample) -> dict:
    """Persist one sample as {split}/{index:06}_{left,right,disp,seg} files."""
    paths = sample_paths(directory, split, index)
    write_image_ppm(paths["left"], sample.left)
    write_image_ppm(paths["right"], sample.right)
    write_disparity_pgm(paths["disp"], sample.gt_disparity)
    write_labels_pgm(paths["seg"], sample.region_labels)
    return paths


def load_sample(directory, split, index) -> StereoSample:
    paths = sample_paths(directory, split, index)
    gt = read_disparity_pgm(paths["disp"])
    return StereoSample(
        left=Tensor(read_image_ppm(paths["left"])),
        right=Tensor(read_image_ppm(paths["right"])),
        gt_disparity=Tensor(gt),
        region_labels=read_labels_pgm(paths["seg"]),
        seed=-1,
        visibility=visibility_from_disparity(gt),
    )
