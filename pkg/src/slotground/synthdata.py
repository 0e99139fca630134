"""Synthetic multimodal inspection scenes and frozen toy encoders.

A scene is a textured, gently curved part seen as an RGB image, a single-channel
sensor image (a noisy nonlinear response to surface depth) and a point cloud of the
same surface with a per-point abnormality channel. Defects are drawn on the feature
grid so that every modality and the ground-truth mask agree cell by cell.
"""
from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .numkit import layer_norm, make_rng, derive_seed, serialize
from .report.schema import LocationSpec, Report, parse_report
from .report.text import render_reasoning
from .vocab import DEFECT_TYPES, NONE_TYPE

ENCODER_SEED = 0x5EED_2D3D


@dataclass(frozen=True)
class GenConfig:
    image_size: int = 32
    grid: int = 16
    defect_types: tuple = DEFECT_TYPES
    defect_size: tuple = (3, 24)          # cells, inclusive
    texture: str = "grain"                # grain | smooth
    defect_prob: float = 0.75
    n_points: tuple = (1024, 1536)

    def __post_init__(self):
        if self.image_size % self.grid:
            raise ValueError("image_size must be a multiple of grid")
        lo, hi = self.defect_size
        if not 1 <= lo <= hi <= self.grid * self.grid // 4:
            raise ValueError(f"defect_size {self.defect_size} outside [1, {self.grid ** 2 // 4}]")
        if not 0.0 <= self.defect_prob <= 1.0:
            raise ValueError("defect_prob must lie in [0, 1]")
        if self.texture not in ("grain", "smooth"):
            raise ValueError(f"unknown texture family {self.texture!r}")
        if not 1 <= self.n_points[0] <= self.n_points[1]:
            raise ValueError("n_points must be an increasing positive range")
        unknown = set(self.defect_types) - set(DEFECT_TYPES)
        if unknown or not self.defect_types:
            raise ValueError(f"unknown defect types {sorted(unknown)}")

    @property
    def patch(self) -> int:
        return self.image_size // self.grid

    def to_dict(self) -> dict:
        d = asdict(self)
        d["defect_types"] = list(self.defect_types)
        d["defect_size"] = list(self.defect_size)
        d["n_points"] = list(self.n_points)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        for k in ("defect_types", "defect_size", "n_points"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Scene:
    rgb: np.ndarray          # (S, S, 3) in [0, 1]
    sensor: np.ndarray       # (S, S, 1) in [0, 1]
    points: np.ndarray       # (N, 4): xyz in the unit cube + abnormality
    gt_mask: np.ndarray      # (S, S) uint8 in {0, 1}
    gt_report: Report
    seed: int
    cell_mask: np.ndarray = field(repr=False, default=None)   # (grid, grid) bool

    @property
    def label(self) -> int:
        return int(self.gt_report.defect_type != NONE_TYPE)


# ---------------------------------------------------------------- defect shapes

def _line_cells(r0, c0, r1, c1):
    n = max(abs(r1 - r0), abs(c1 - c0)) + 1
    rs = np.rint(np.linspace(r0, r1, n)).astype(int)
    cs = np.rint(np.linspace(c0, c1, n)).astype(int)
    return rs, cs


def _scratch(rng, g, lo, hi):
    m = np.zeros((g, g), bool)
    r, c = rng.integers(1, g - 1, 2)
    n_seg = int(rng.integers(1, 3))
    for _ in range(n_seg):
        ang = rng.uniform(0, np.pi)
        ln = rng.integers(max(2, lo // n_seg), max(3, hi // (2 * n_seg)) + 1)
        r1 = int(np.clip(r + ln * np.sin(ang), 0, g - 1))
        c1 = int(np.clip(c + ln * np.cos(ang), 0, g - 1))
        rs, cs = _line_cells(r, c, r1, c1)
        m[rs, cs] = True
        r, c = r1, c1
    if rng.random() < 0.5:
        # second cell of width, shifted right or down without wrapping
        t = np.zeros_like(m)
        if rng.random() < 0.5:
            t[:, 1:] = m[:, :-1]
        else:
            t[1:, :] = m[:-1, :]
        m |= t
    return m


def _disk(g, r, c, rad):
    yy, xx = np.mgrid[:g, :g]
    return (yy - r) ** 2 + (xx - c) ** 2 <= rad * rad


def _dent(rng, g, lo, hi):
    area = rng.uniform(lo, hi)
    rad = max(0.8, np.sqrt(area / np.pi))
    r, c = rng.uniform(rad, g - 1 - rad, 2)
    return _disk(g, r, c, rad)


def _contamination(rng, g, lo, hi):
    r, c = rng.uniform(min(3, g / 4), max(g - 4, 3 * g / 4), 2)
    m = np.zeros((g, g), bool)
    for _ in range(int(rng.integers(2, 5))):
        rad = rng.uniform(0.8, max(1.0, np.sqrt(hi / np.pi) * 0.7))
        m |= _disk(g, r + rng.normal(0, 1.5), c + rng.normal(0, 1.5), rad)
    return m


def _missing(rng, g, lo, hi):
    h = min(int(rng.integers(2, 6)), max(g // 2, 1))
    w = int(np.clip(rng.integers(lo, hi + 1) // h, 1, max(g // 2, 1)))
    m = np.zeros((g, g), bool)
    side = rng.integers(4)
    off = int(rng.integers(0, max(g - max(h, w), 1)))
    if side == 0:
        m[:h, off:off + w] = True
    elif side == 1:
        m[g - h:, off:off + w] = True
    elif side == 2:
        m[off:off + w, :h] = True
    else:
        m[off:off + w, g - h:] = True
    return m


_SHAPES = {"scratch": _scratch, "dent": _dent, "contamination": _contamination, "missing-part": _missing}
# (rgb multiplier, rgb offset, sensor depth, geometric depth)
_LOOK = {
    "scratch": (0.35, np.array([0.04, 0.04, 0.07]), 0.04, 0.03),
    "dent": (0.88, np.array([0.0, 0.0, 0.0]), 0.15, 0.12),
    "contamination": (0.30, np.array([0.40, 0.26, 0.08]), 0.01, -0.02),
    "missing-part": (0.0, np.array([0.05, 0.05, 0.05]), 0.30, 0.30),
}


def _draw_defect(rng, cfg: GenConfig, kind: str) -> np.ndarray:
    g = cfg.grid
    lo, hi = cfg.defect_size
    m = None
    for _ in range(64):
        m = _SHAPES[kind](rng, g, lo, hi)
        lab, n = ndimage.label(m, structure=np.ones((3, 3)))
        if n > 1:
            sizes = ndimage.sum(m, lab, range(1, n + 1))
            m = lab == (1 + int(np.argmax(sizes)))
        if lo <= m.sum() <= hi:
            return m
    # keep a valid size even if the sampler kept missing the range
    cells = np.argwhere(m)
    if len(cells) > hi:
        keep = cells[:hi]
        m = np.zeros_like(m)
        m[keep[:, 0], keep[:, 1]] = True
    if m.sum() < lo:
        r, c = cells[0] if len(cells) else (g // 2, g // 2)
        need = lo
        for dr in range(g):
            block = np.zeros_like(m)
            block[max(0, r - dr):r + dr + 1, max(0, c - dr):c + dr + 1] = True
            if (m | block).sum() >= need:
                m = m | block
                break
    return m


def mask_location(mask: np.ndarray) -> LocationSpec:
    """3x3 cell containing the centroid of ``mask`` (pixel centres at i + 0.5)."""
    rows, cols = np.nonzero(mask)
    H, W = mask.shape
    rc, cc = rows.mean() + 0.5, cols.mean() + 0.5
    r = min(2, int(3 * rc / H))
    c = min(2, int(3 * cc / W))
    return LocationSpec.from_cell(3 * r + c)


def _height_field(rng):
    a, b = rng.uniform(-0.25, 0.25, 2)
    amp = rng.uniform(0.02, 0.15)
    fx, fy = rng.uniform(0.5, 2.5, 2)
    ph = rng.uniform(0, 2 * np.pi, 2)

    def h(x, y):
        return 0.5 + a * (x - 0.5) + b * (y - 0.5) + amp * np.sin(2 * np.pi * fx * x + ph[0]) * np.cos(2 * np.pi * fy * y + ph[1])
    return h


def gen_scene(cfg: GenConfig, seed: int) -> Scene:
    """Deterministic scene for ``(cfg, seed)``."""
    rng = make_rng(seed)
    S, g, p = cfg.image_size, cfg.grid, cfg.patch
    height = _height_field(rng)
    base = rng.uniform([0.45, 0.45, 0.50], [0.75, 0.72, 0.85])
    light = rng.normal(size=3)
    light[2] = abs(light[2]) + 1.0
    light /= np.linalg.norm(light)

    has_defect = rng.random() < cfg.defect_prob
    kind = cfg.defect_types[int(rng.integers(len(cfg.defect_types)))] if has_defect else NONE_TYPE
    cell_mask = _draw_defect(rng, cfg, kind) if has_defect else np.zeros((g, g), bool)

    # per-pixel geometry
    coords = (np.arange(S) + 0.5) / S
    X, Y = np.meshgrid(coords, coords)
    Z = height(X, Y)
    pix_mask = np.kron(cell_mask, np.ones((p, p), bool))
    depth = np.zeros((S, S))
    if has_defect:
        mult, offs, sdepth, gdepth = _LOOK[kind]
        soft = ndimage.gaussian_filter(pix_mask.astype(float), 0.6) if kind == "dent" else pix_mask
        depth = gdepth * np.where(pix_mask, np.maximum(soft, 0.5), 0.0)
    gy, gx = np.gradient(Z - depth, 1.0 / S)
    normal = np.stack([-gx, -gy, np.ones_like(Z)], axis=-1)
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    shade = 0.7 + 0.3 * (normal @ light)

    rgb = base[None, None, :] * shade[..., None]
    if cfg.texture == "grain":
        rgb = rgb + rng.normal(0, 0.03, rgb.shape)
    else:
        noise = ndimage.gaussian_filter(rng.normal(0, 1, (S, S)), 3.0)
        rgb = rgb + 0.08 * noise[..., None] / (noise.std() + 1e-9)
    if has_defect:
        rgb = np.where(pix_mask[..., None], rgb * mult + offs + rng.normal(0, 0.02, rgb.shape), rgb)
    rgb = np.clip(rgb, 0.0, 1.0)

    sensor = 0.12 + 0.35 * (Z - 0.25) + rng.normal(0, 0.02, Z.shape)
    if has_defect:
        sdepth = _LOOK[kind][2]
        resp = 0.6 * (1.0 - np.exp(-sdepth / 0.05))
        sensor = sensor + np.where(pix_mask, resp * (1.0 + rng.normal(0, 0.1, Z.shape)), 0.0)
    sensor = np.clip(sensor, 0.0, 1.0)[..., None]

    # point cloud sampled from the same surface
    n = int(rng.integers(cfg.n_points[0], cfg.n_points[1] + 1))
    xy = rng.random((n, 2))
    ci = np.minimum((xy[:, 1] * g).astype(int), g - 1)
    cj = np.minimum((xy[:, 0] * g).astype(int), g - 1)
    in_def = cell_mask[ci, cj]
    z = height(xy[:, 0], xy[:, 1])
    if has_defect:
        z = z - _LOOK[kind][3] * in_def
    z = np.clip(z + rng.normal(0, 0.003, n), 0.0, 1.0)
    abn = np.clip(in_def * rng.uniform(0.7, 1.0, n) + rng.uniform(0, 0.1, n) * ~in_def, 0.0, 1.0)
    points = np.column_stack([xy, z, abn])

    gt_mask = pix_mask.astype(np.uint8)
    if has_defect:
        loc = str(mask_location(gt_mask))
    else:
        loc = str(LocationSpec.from_cell(4))
    report = Report(kind, loc, render_reasoning(kind, loc), 1.0)
    return Scene(rgb, sensor, points, gt_mask, report, int(seed), cell_mask)


# ---------------------------------------------------------------- frozen encoders

class Encoders:
    """Frozen random projections standing in for pretrained 2D and 3D backbones."""

    def __init__(self, width: int = 32, patch: int = 2, n_centers: int = 32, k: int = 16,
                 seed: int = ENCODER_SEED):
        self.width, self.patch, self.n_centers, self.k = width, patch, n_centers, k
        rng = make_rng(seed)
        self.W_2d = rng.normal(0, 1 / np.sqrt(3 * patch * patch), (width, 3 * patch * patch))
        self.W_pc = rng.normal(0, 1 / np.sqrt(8), (width, 8))

    def encode_2d(self, image: np.ndarray) -> np.ndarray:
        """Image (H_img, W_img, ch) -> feature grid (width, H, W).

        RGB and single-channel sensor maps share one projection; a single channel
        is replicated to three first.
        """
        image = _as_three_channel(image)
        Hi, Wi, ch = image.shape
        p = self.patch
        if Hi % p or Wi % p:
            raise ValueError(f"image extents {Hi}x{Wi} not divisible by patch {p}")
        H, Wd = Hi // p, Wi // p
        patches = image.reshape(H, p, Wd, p, ch).transpose(0, 2, 1, 3, 4).reshape(H, Wd, p * p * ch)
        feats = layer_norm(patches @ self.W_2d.T).data
        return feats.transpose(2, 0, 1).copy()

    def encode_image(self, image: np.ndarray) -> np.ndarray:
        """:meth:`encode_2d` of the channel-standardised image (the usual backbone preprocessing)."""
        return self.encode_2d(standardize_image(image))

    def encode_3d(self, points: np.ndarray, return_centers: bool = False):
        """Point cloud (N, 4) -> (n_centers, width) local-statistics tokens.

        With ``return_centers`` the (n_centers, 3) centre coordinates are returned too.
        """
        pts = np.asarray(points, dtype=np.float64)
        M = self.n_centers
        if len(pts) < M:
            raise ValueError(f"need at least {M} points, got {len(pts)}")
        centers = farthest_point_sample(pts[:, :3], M)
        stats = knn_stats(pts, centers, min(self.k, len(pts)))
        tokens = ((stats - STAT_MEAN) / STAT_STD) @ self.W_pc.T
        return (tokens, pts[centers, :3]) if return_centers else tokens


IMAGE_MEAN = np.array([0.485, 0.456, 0.406])
IMAGE_STD = np.array([0.229, 0.224, 0.225])


# fixed scales for the eight k-NN statistics (measured once on generated scenes)
STAT_MEAN = np.array([0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0025, 0.085])
STAT_STD = np.array([0.32, 0.32, 0.09, 0.02, 0.02, 0.013, 0.0009, 0.15])


def _as_three_channel(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.shape[-1] == 1:
        image = np.repeat(image, 3, axis=-1)
    if image.shape[-1] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {image.shape[-1]}")
    return image


def standardize_image(image) -> np.ndarray:
    """Per-channel (x - mean) / std, the usual backbone preprocessing."""
    return (_as_three_channel(image) - IMAGE_MEAN) / IMAGE_STD


def farthest_point_sample(xyz: np.ndarray, m: int) -> np.ndarray:
    """Indices of m farthest-point samples.

    Starts from the lexicographically smallest point; ties pick the lowest index.
    """
    start = int(np.lexsort(xyz.T[::-1])[0])
    chosen = [start]
    dist = ((xyz - xyz[start]) ** 2).sum(axis=1)
    for _ in range(m - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, ((xyz - xyz[nxt]) ** 2).sum(axis=1))
    return np.array(chosen)


def knn_stats(pts: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Per centre: [centre xyz, mean offset xyz, covariance trace, abnormality mean]."""
    out = np.zeros((len(centers), 8))
    xyz = pts[:, :3]
    for i, c in enumerate(centers):
        d = ((xyz - xyz[c]) ** 2).sum(axis=1)
        # order by distance, then coordinates, so the neighbour set is order independent
        order = np.lexsort((pts[:, 3], xyz[:, 2], xyz[:, 1], xyz[:, 0], d))[:k]
        nb = pts[order]
        off = nb[:, :3] - xyz[c]
        out[i, :3] = xyz[c]
        out[i, 3:6] = off.mean(axis=0)
        out[i, 6] = nb[:, :3].var(axis=0).sum()
        out[i, 7] = nb[:, 3].mean()
    return out


_DEFAULT_ENCODERS: dict = {}


def default_encoders(width: int = 32, patch: int = 2, n_centers: int = 32) -> Encoders:
    key = (width, patch, n_centers)
    if key not in _DEFAULT_ENCODERS:
        _DEFAULT_ENCODERS[key] = Encoders(width, patch, n_centers)
    return _DEFAULT_ENCODERS[key]


def encode_2d(image, width: int = 32, patch: int = 2) -> np.ndarray:
    return default_encoders(width, patch).encode_2d(image)


def encode_3d(points, width: int = 32, n_centers: int = 32) -> np.ndarray:
    return default_encoders(width, n_centers=n_centers).encode_3d(points)


# ---------------------------------------------------------------- on-disk format

def write_pgm(path, img: np.ndarray, maxval: int = 65535) -> None:
    """Binary (P5) PGM. Values in [0, 1] are scaled to ``maxval``."""
    img = np.asarray(img)
    H, W = img.shape
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n{maxval}\n".encode("ascii"))
        fh.write(q.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    arr = np.frombuffer(data, dtype=dtype, count=H * W, offset=pos).reshape(H, W)
    return arr.astype(np.float64) / maxval


def save_scene(directory, scene: Scene) -> None:
    """rgb.pgm (channel planes stacked vertically), sensor.pgm, mask.pgm, points.zsgt, report.json."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    S = scene.rgb.shape[0]
    write_pgm(d / "rgb.pgm", scene.rgb.transpose(2, 0, 1).reshape(3 * S, -1))
    write_pgm(d / "sensor.pgm", scene.sensor[..., 0])
    write_pgm(d / "mask.pgm", scene.gt_mask.astype(float), maxval=255)
    serialize.save(d / "points.zsgt", scene.points)
    (d / "report.json").write_text(json.dumps(scene.gt_report.to_dict(), indent=2) + "\n")
    (d / "meta.json").write_text(json.dumps({"seed": scene.seed}) + "\n")


def load_scene(directory, grid: int | None = None) -> Scene:
    d = Path(directory)
    stacked = read_pgm(d / "rgb.pgm")
    S = stacked.shape[1]
    rgb = stacked.reshape(3, S, S).transpose(1, 2, 0)
    sensor = read_pgm(d / "sensor.pgm")[..., None]
    mask = (read_pgm(d / "mask.pgm") > 0.5).astype(np.uint8)
    points = serialize.load(d / "points.zsgt").astype(np.float64)
    res = parse_report((d / "report.json").read_text())
    if res.report is None:
        raise ValueError(f"{d / 'report.json'}: {[str(v) for v in res.violations]}")
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {"seed": -1}
    cell = None
    if grid:
        p = S // grid
        cell = mask.reshape(grid, p, grid, p).max(axis=(1, 3)).astype(bool)
    return Scene(rgb, sensor, points, mask, res.report, int(meta["seed"]), cell)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def gen_dataset(cfg: GenConfig, seed: int, n: int, out_dir, eval_fraction: float = 1 / 3) -> dict:
    """Write ``n`` scene directories plus ``manifest.json`` with split tags."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_eval = int(round(n * eval_fraction))
    samples = []
    for i in range(n):
        s = derive_seed(seed, "scene", i)
        name = f"sample_{i:05d}"
        save_scene(out / name, gen_scene(cfg, s))
        samples.append({"dir": name, "split": "eval" if i >= n - n_eval else "train", "seed": s})
    manifest = {"generator": cfg.to_dict(), "seed": seed, "n": n, "samples": samples,
                "config_hash": config_hash({"generator": cfg.to_dict(), "seed": seed, "n": n})}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_dataset(directory, split: str | None = None, grid: int | None = None) -> list:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    return [load_scene(d / s["dir"], grid) for s in manifest["samples"] if split is None or s["split"] == split]


def make_scenes(cfg: GenConfig, seed: int, n: int, offset: int = 0) -> list:
    """In-memory equivalent of :func:`gen_dataset`."""
    return [gen_scene(cfg, derive_seed(seed, "scene", i)) for i in range(offset, offset + n)]
