"""Synthetic co-registered optical/DEM crater tiles and the on-disk dataset format."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

MORPHOLOGIES = ("fresh", "degraded", "overlapping")
RASTER_MAGIC = b"AQPD"
RASTER_VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("i1"), 3: np.dtype("<i4")}
_HEADER = struct.Struct("<4sHHII")
SHADOW_DOMINATED = 0.40
WELL_LIT = 0.05
AMBIENT = 0.05


class DatasetFormatError(ValueError):
    def __init__(self, path, offset: int, msg: str):
        super().__init__(f"{path}: byte {offset}: {msg}")
        self.path, self.offset = str(path), offset


@dataclass(frozen=True)
class Crater:
    cx: float
    cy: float
    diameter: float
    depth: float
    morphology: str

    def __post_init__(self):
        if self.morphology not in MORPHOLOGIES:
            raise ValueError(f"unknown crater morphology {self.morphology!r}")

    def box(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.diameter, self.diameter)


@dataclass(frozen=True)
class TileParams:
    size: int = 64
    min_craters: int = 0
    max_craters: int = 6
    min_diameter: float = 6.0
    max_diameter: float = 56.0
    sun_min: float = 5.0
    sun_max: float = 85.0
    terrain_amplitude: float = 1.5
    terrain_beta: float = 4.5
    p_degraded: float = 0.2
    p_overlap: float = 0.2
    fresh_depth_ratio: float = 0.2
    degraded_depth_ratio: float = 0.1
    albedo_noise: float = 0.08
    sensor_noise: float = 0.01

    def __post_init__(self):
        if self.size <= 0 or self.size % 16:
            raise ValueError(f"tile size must be a positive multiple of 16, got {self.size}")
        if not 0 <= self.min_craters <= self.max_craters:
            raise ValueError("crater count range must satisfy 0 <= min <= max")
        if not 0 < self.sun_min <= self.sun_max <= 90:
            raise ValueError(f"sun elevation range must satisfy 0 < min <= max <= 90, got [{self.sun_min}, {self.sun_max}]")
        if not 0 < self.min_diameter <= self.max_diameter:
            raise ValueError("diameter range must be positive and ordered")

    @classmethod
    def from_dict(cls, d: dict) -> "TileParams":
        return cls(**d)


@dataclass
class SceneTile:
    oi: np.ndarray
    dem: np.ndarray
    craters: list[Crater]
    sun: tuple[float, float]  # azimuth, elevation in degrees
    shadow_fraction: float = 0.0

    def boxes(self) -> np.ndarray:
        return np.array([c.box() for c in self.craters], np.float64).reshape(-1, 4)


# ---- terrain -----------------------------------------------------------------

def fractal_terrain(size: int, rng: np.random.Generator, amplitude: float, beta: float) -> np.ndarray:
    """Power-law spectrum surface with standard deviation ``amplitude``."""
    if amplitude == 0:
        return np.zeros((size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    f = np.hypot(fx, fy)
    f[0, 0] = 1.0
    amp = f ** (-beta / 2)
    amp[0, 0] = 0.0
    spec = amp * (rng.normal(size=f.shape) + 1j * rng.normal(size=f.shape))
    z = np.fft.irfft2(spec, s=(size, size))
    return z * (amplitude / z.std())


def crater_profile(r: np.ndarray, diameter: float, depth: float, morphology: str) -> np.ndarray:
    """Height offset at distance ``r`` from the crater centre.

    Parabolic bowl reaching ``-depth`` at the centre, a rim raised to
    ``depth / 4`` at the radius, and an ejecta blanket decaying as ``(R/r)^3``.
    Degraded craters use a cosine bowl that has no sharp rim break.
    """
    R = diameter / 2
    rim = depth / 4
    x = r / R
    if morphology == "degraded":
        inner = -depth + (depth + rim) * (1 - np.cos(np.pi * np.minimum(x, 1))) / 2
        outer = rim * np.exp(-4 * (x - 1) ** 2)
    else:
        inner = -depth + (depth + rim) * x**2
        outer = rim / np.maximum(x, 1) ** 3
    return np.where(x <= 1, inner, outer)


def _pixel_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = np.arange(size) + 0.5
    return np.meshgrid(c, c)


def render_dem(size: int, craters: list[Crater], base: np.ndarray | None = None) -> np.ndarray:
    xx, yy = _pixel_grid(size)
    dem = np.zeros((size, size)) if base is None else base.astype(np.float64).copy()
    for c in craters:
        dem += crater_profile(np.hypot(xx - c.cx, yy - c.cy), c.diameter, c.depth, c.morphology)
    return dem


# ---- illumination --------------------------------------------------------------

def sun_vector(azimuth: float, elevation: float) -> np.ndarray:
    """Unit vector towards the sun in (x=col, y=row, z=up); azimuth clockwise from image-up."""
    az, el = np.radians(azimuth), np.radians(elevation)
    return np.array([np.sin(az) * np.cos(el), -np.cos(az) * np.cos(el), np.sin(el)])


def lambert(dem: np.ndarray, azimuth: float, elevation: float) -> np.ndarray:
    gy, gx = np.gradient(np.asarray(dem, np.float64))
    n = np.stack([-gx, -gy, np.ones_like(gx)])
    n /= np.linalg.norm(n, axis=0)
    return np.tensordot(sun_vector(azimuth, elevation), n, axes=1)


def cast_shadow_mask(dem: np.ndarray, azimuth: float, elevation: float) -> np.ndarray:
    """Cells whose ray towards the sun hits terrain, marched at one-cell steps."""
    dem = np.asarray(dem, np.float64)
    if elevation >= 90:
        return np.zeros(dem.shape, bool)
    h, w = dem.shape
    az = np.radians(azimuth)
    dx, dy = np.sin(az), -np.cos(az)
    rise = np.tan(np.radians(elevation))
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    shadow = np.zeros(dem.shape, bool)
    top = dem.max()
    active = np.ones(dem.shape, bool)
    for k in range(1, int(np.ceil(np.hypot(h, w))) + 1):
        r = rows + k * dy
        c = cols + k * dx
        ray = dem + k * rise
        inside = (r >= 0) & (r <= h - 1) & (c >= 0) & (c <= w - 1)
        active &= inside & (ray <= top)
        if not active.any():
            break
        terrain = ndimage.map_coordinates(dem, [r, c], order=1, mode="nearest")
        shadow |= active & (terrain > ray)
    return shadow


def hillshade(
    dem: np.ndarray,
    azimuth: float,
    elevation: float,
    albedo: np.ndarray | None = None,
    ambient: float = AMBIENT,
) -> tuple[np.ndarray, np.ndarray]:
    """Lambertian shading with ray-marched cast shadows.

    Returns the optical raster in [0, 1] and the shadow mask (cast shadows
    plus self-shadowed cells facing away from the sun).
    """
    if not 0 < elevation <= 90:
        raise ValueError(f"sun elevation must be in (0, 90], got {elevation}")
    shade = lambert(dem, azimuth, elevation)
    cast = cast_shadow_mask(dem, azimuth, elevation)
    shadow = cast | (shade <= 0)
    direct = np.where(shadow, 0.0, np.clip(shade, 0, None))
    img = ambient + (1 - ambient) * direct
    if albedo is not None:
        img = img * albedo
    return np.clip(img, 0, 1), shadow


# ---- tiles ---------------------------------------------------------------------

def tile_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _sample_craters(p: TileParams, rng: np.random.Generator) -> list[Crater]:
    n = int(rng.integers(p.min_craters, p.max_craters + 1))
    craters: list[Crater] = []
    for _ in range(n):
        d = float(np.exp(rng.uniform(np.log(p.min_diameter), np.log(p.max_diameter))))
        u = rng.random()
        if craters and u < p.p_overlap:
            host = craters[int(rng.integers(len(craters)))]
            ang = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(0.3, 0.9) * (host.diameter + d) / 2
            cx = float(np.clip(host.cx + dist * np.cos(ang), 0.5, p.size - 0.5))
            cy = float(np.clip(host.cy + dist * np.sin(ang), 0.5, p.size - 0.5))
            morph, ratio = "overlapping", p.fresh_depth_ratio
        else:
            cx, cy = (float(v) for v in rng.uniform(0.5, p.size - 0.5, size=2))
            if u < p.p_overlap + p.p_degraded:
                morph, ratio = "degraded", p.degraded_depth_ratio
            else:
                morph, ratio = "fresh", p.fresh_depth_ratio
        craters.append(Crater(cx, cy, d, ratio * d, morph))
    return craters


def generate_tile(params: TileParams = TileParams(), seed: int = 0, index: int = 0) -> SceneTile:
    """Deterministic tile for ``(seed, index)``; independent of generation order."""
    p = params
    rng = tile_rng(seed, index)
    base = fractal_terrain(p.size, rng, p.terrain_amplitude, p.terrain_beta)
    craters = _sample_craters(p, rng)
    dem = render_dem(p.size, craters, base)
    az = float(rng.uniform(0, 360))
    el = float(rng.uniform(p.sun_min, p.sun_max))
    albedo = None
    if p.albedo_noise > 0:
        albedo = 1 + p.albedo_noise * ndimage.gaussian_filter(rng.normal(size=dem.shape), 1.5) * 4
    oi, shadow = hillshade(dem, az, el, albedo)
    if p.sensor_noise > 0:
        oi = np.clip(oi + rng.normal(0, p.sensor_noise, oi.shape), 0, 1)
    return SceneTile(oi.astype(np.float32), dem.astype(np.float32), craters, (az, el), float(shadow.mean()))


# ---- dataset files ---------------------------------------------------------------

@dataclass
class DatasetManifest:
    n_tiles: int
    size: int
    seed: int
    params: TileParams
    splits: dict[str, str]  # tile id -> train/val/test
    sun: dict[str, tuple[float, float]] = field(default_factory=dict)
    shadow: dict[str, float] = field(default_factory=dict)

    def ids(self, split: str | None = None) -> list[str]:
        return [k for k, v in self.splits.items() if split is None or v == split]

    def split_sizes(self) -> dict[str, int]:
        out = {"train": 0, "val": 0, "test": 0}
        for v in self.splits.values():
            out[v] += 1
        return out


def tile_id(index: int) -> str:
    return f"{index:06d}"


def assign_splits(n: int, val: int, test: int = 0) -> dict[str, str]:
    """Last ``val + test`` tiles are held out (tiles are i.i.d., so order is random already)."""
    if val + test > n or min(val, test) < 0:
        raise ValueError("held-out split sizes exceed tile count")
    out = {}
    for i in range(n):
        out[tile_id(i)] = "train" if i < n - val - test else ("val" if i < n - test else "test")
    return out


def generate_dataset(n_tiles: int, seed: int, params: TileParams = TileParams(), val: int | None = None, test: int = 0):
    val = n_tiles // 4 if val is None else val
    tiles = [generate_tile(params, seed, i) for i in range(n_tiles)]
    man = DatasetManifest(n_tiles, params.size, seed, params, assign_splits(n_tiles, val, test))
    for i, t in enumerate(tiles):
        man.sun[tile_id(i)] = t.sun
        man.shadow[tile_id(i)] = t.shadow_fraction
    return tiles, man


def write_raster(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = {v.kind + str(v.itemsize): k for k, v in DTYPE_CODES.items()}.get(arr.dtype.kind + str(arr.dtype.itemsize))
    if code is None or arr.ndim != 2:
        raise ValueError(f"unsupported raster {arr.dtype} {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(RASTER_MAGIC, RASTER_VERSION, code, h, w))
        f.write(np.ascontiguousarray(arr, DTYPE_CODES[code]).tobytes())


def read_raster(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DatasetFormatError(path, len(blob), f"truncated header ({len(blob)} of {_HEADER.size} bytes)")
    magic, version, code, h, w = _HEADER.unpack_from(blob)
    if magic != RASTER_MAGIC:
        raise DatasetFormatError(path, 0, f"bad magic {magic!r}")
    if version != RASTER_VERSION:
        raise DatasetFormatError(path, 4, f"unsupported version {version} (reader supports {RASTER_VERSION})")
    if code not in DTYPE_CODES:
        raise DatasetFormatError(path, 6, f"unknown dtype code {code}")
    dt = DTYPE_CODES[code]
    need = _HEADER.size + h * w * dt.itemsize
    if len(blob) != need:
        raise DatasetFormatError(path, min(len(blob), need), f"payload size {len(blob)} != expected {need}")
    return np.frombuffer(blob, dt, count=h * w, offset=_HEADER.size).reshape(h, w).astype(dt.newbyteorder("="))


def format_labels(craters: list[Crater]) -> str:
    return "".join(f"{c.cx!r} {c.cy!r} {c.diameter!r} {c.diameter!r} {c.morphology} {c.depth!r}\n" for c in craters)


def parse_labels(text: str, path="<labels>") -> list[Crater]:
    out = []
    for ln, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) not in (5, 6):
            raise DatasetFormatError(path, 0, f"line {ln}: expected 'cx cy w h morphology [depth]'")
        cx, cy, w, _h = (float(v) for v in parts[:4])
        depth = float(parts[5]) if len(parts) == 6 else float("nan")
        out.append(Crater(cx, cy, w, depth, parts[4]))
    return out


def format_manifest(man: DatasetManifest) -> str:
    lines = [
        "format aqpcd-dataset 1",
        f"tiles {man.n_tiles}",
        f"size {man.size}",
        f"seed {man.seed}",
        "params " + json.dumps(asdict(man.params), sort_keys=True),
    ]
    sizes = man.split_sizes()
    lines += [f"split {k} {sizes[k]}" for k in ("train", "val", "test")]
    for tid, split in man.splits.items():
        az, el = man.sun.get(tid, (float("nan"), float("nan")))
        lines.append(f"tile {tid} {split} {az!r} {el!r} {man.shadow.get(tid, float('nan'))!r}")
    return "\n".join(lines) + "\n"


def parse_manifest(text: str, path="manifest.txt") -> DatasetManifest:
    head: dict[str, str] = {}
    splits, sun, shadow = {}, {}, {}
    for line in text.splitlines():
        key, _, rest = line.partition(" ")
        if key == "tile":
            tid, split, az, el, sh = rest.split()
            splits[tid] = split
            sun[tid] = (float(az), float(el))
            shadow[tid] = float(sh)
        elif key and key != "split":
            head[key] = rest
    try:
        if head["format"] != "aqpcd-dataset 1":
            raise DatasetFormatError(path, 0, f"unsupported manifest format {head['format']!r}")
        man = DatasetManifest(int(head["tiles"]), int(head["size"]), int(head["seed"]), TileParams.from_dict(json.loads(head["params"])), splits, sun, shadow)
    except KeyError as e:
        raise DatasetFormatError(path, 0, f"missing manifest key {e}") from None
    if len(splits) != man.n_tiles:
        raise DatasetFormatError(path, 0, f"manifest lists {len(splits)} tiles, header says {man.n_tiles}")
    return man


def write_dataset(tiles: list[SceneTile], man: DatasetManifest, out_dir) -> None:
    out = Path(out_dir)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    for tid, t in zip(man.splits, tiles):
        write_raster(out / "tiles" / f"{tid}.oi", t.oi.astype(np.float32))
        write_raster(out / "tiles" / f"{tid}.dem", t.dem.astype(np.float32))
        (out / "tiles" / f"{tid}.labels").write_text(format_labels(t.craters))
    (out / "manifest.txt").write_text(format_manifest(man))


def read_dataset(data_dir) -> tuple[list[SceneTile], DatasetManifest]:
    d = Path(data_dir)
    mpath = d / "manifest.txt"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.txt in {d}")
    man = parse_manifest(mpath.read_text(), mpath)
    tiles = []
    for tid in man.splits:
        base = d / "tiles" / tid
        oi = read_raster(f"{base}.oi")
        dem = read_raster(f"{base}.dem")
        lp = Path(f"{base}.labels")
        craters = parse_labels(lp.read_text(), lp)
        tiles.append(SceneTile(oi, dem, craters, man.sun.get(tid, (0.0, 90.0)), man.shadow.get(tid, 0.0)))
    return tiles, man


def read_tile(path_stem) -> SceneTile:
    """Load one tile from ``<stem>.oi``/``<stem>.dem`` (labels optional)."""
    stem = os.fspath(path_stem)
    for ext in (".oi", ".dem", ".labels"):
        if stem.endswith(ext):
            stem = stem[: -len(ext)]
    lp = Path(stem + ".labels")
    craters = parse_labels(lp.read_text(), lp) if lp.exists() else []
    return SceneTile(read_raster(stem + ".oi"), read_raster(stem + ".dem"), craters, (0.0, 90.0))


def stack_tiles(tiles: list[SceneTile]):
    """Normalised model inputs plus per-tile ground-truth boxes."""
    from .model import normalize_inputs

    oi, dem = normalize_inputs(np.stack([t.oi for t in tiles]), np.stack([t.dem for t in tiles]))
    return oi, dem, [t.boxes() for t in tiles]
