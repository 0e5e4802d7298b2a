"""Procedural stand-ins for the three training domains.

* mosaics: images tiled by irregular regions, each a procedural texture
  (base colour + axis-aligned sinusoid + noise), with per-pixel region ids;
* scene videos: concatenated scenes, each cutting between a couple of camera
  setups that share the scene's palette and drift slowly;
* geo collections: photos of places scattered in lat/lon, where each place
  is an instance of a style class and every photo has its own lighting.

All images are quantised to 8 bits so that writing them as PPM is lossless.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifest import FrameRecord, GeoPhotoRecord

METRES_PER_DEG_LAT = 6_371_000.0 * np.pi / 180.0


def _quantize(img):
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _smooth_field(rng, h, w, amplitude, n_waves=4, min_period=24.0, max_period=96.0):
    r, c = np.mgrid[:h, :w].astype(np.float64)
    out = np.zeros((h, w))
    for _ in range(n_waves):
        theta = rng.uniform(0, 2 * np.pi)
        period = rng.uniform(min_period, max_period)
        out += np.sin(2 * np.pi * (r * np.sin(theta) + c * np.cos(theta)) / period + rng.uniform(0, 2 * np.pi))
    return amplitude * out / np.sqrt(n_waves)


# ---------------------------------------------------------------------------
# mosaics


@dataclass
class MosaicConfig:
    n_images: int = 200
    height: int = 128
    width: int = 128
    min_regions: int = 2
    max_regions: int = 6
    min_region_frac: float = 0.05
    warp: float = 10.0
    palette_size: int = 2
    color_jitter: float = 0.03
    period: tuple[float, float] = (3.0, 9.0)
    amplitude: tuple[float, float] = (0.05, 0.25)
    noise: tuple[float, float] = (0.0, 0.06)
    chroma: bool = True
    shading: float = 0.1


@dataclass
class TextureParams:
    color: np.ndarray
    direction: np.ndarray
    vertical: bool
    period: float
    amplitude: float
    phase: float
    noise: float


@dataclass
class MosaicDataset:
    images: list[np.ndarray]
    regions: list[np.ndarray]
    textures: list[list[TextureParams]] = field(default_factory=list)


def _region_map(rng, cfg, k):
    h, w = cfg.height, cfg.width
    r, c = np.mgrid[:h, :w].astype(np.float64)
    for _ in range(100):
        seeds = np.column_stack([rng.uniform(0, h, k), rng.uniform(0, w, k)])
        wr = r + _smooth_field(rng, h, w, cfg.warp)
        wc = c + _smooth_field(rng, h, w, cfg.warp)
        d = (wr[..., None] - seeds[:, 0]) ** 2 + (wc[..., None] - seeds[:, 1]) ** 2
        labels = np.argmin(d, axis=2)
        areas = np.bincount(labels.ravel(), minlength=k)
        if areas.min() >= cfg.min_region_frac * h * w:
            return labels
    return labels


def _texture(rng, cfg, palette):
    base = palette[int(rng.integers(len(palette)))]
    color = np.clip(base + rng.normal(0, cfg.color_jitter, 3), 0.1, 0.9)
    if cfg.chroma:
        direction = rng.normal(0, 1, 3)
        direction *= np.sqrt(3) / np.linalg.norm(direction)
    else:
        direction = np.ones(3)
    return TextureParams(color=color, direction=direction, vertical=bool(rng.integers(2)),
                         period=float(rng.uniform(*cfg.period)),
                         amplitude=float(rng.uniform(*cfg.amplitude)),
                         phase=float(rng.uniform(0, 2 * np.pi)),
                         noise=float(rng.uniform(*cfg.noise)))


def render_texture(tex: TextureParams, shape, rng):
    h, w = shape
    r, c = np.mgrid[:h, :w].astype(np.float64)
    coord = c if tex.vertical else r
    wave = tex.amplitude * np.sin(2 * np.pi * coord / tex.period + tex.phase)
    return tex.color + wave[..., None] * tex.direction + rng.normal(0, tex.noise, (h, w, 3))


def gen_mosaic_image(cfg: MosaicConfig, rng, n_regions=None):
    k = n_regions or int(rng.integers(cfg.min_regions, cfg.max_regions + 1))
    labels = _region_map(rng, cfg, k)
    palette = rng.uniform(0.15, 0.85, (cfg.palette_size, 3))
    textures = [_texture(rng, cfg, palette) for _ in range(k)]
    img = np.zeros((cfg.height, cfg.width, 3))
    for i, tex in enumerate(textures):
        layer = render_texture(tex, labels.shape, rng)
        img[labels == i] = layer[labels == i]
    if cfg.shading:
        img = img * (1.0 + _smooth_field(rng, cfg.height, cfg.width, cfg.shading, 3, 48.0, 160.0))[..., None]
    return _quantize(img), labels, textures


def gen_mosaic_dataset(cfg: MosaicConfig, rng) -> MosaicDataset:
    out = MosaicDataset([], [], [])
    for _ in range(cfg.n_images):
        img, labels, tex = gen_mosaic_image(cfg, rng)
        out.images.append(img)
        out.regions.append(labels)
        out.textures.append(tex)
    return out


# ---------------------------------------------------------------------------
# scene videos


@dataclass
class SceneVideoConfig:
    n_scenes: int = 8
    min_duration: float = 25.0
    max_duration: float = 50.0
    fps: float = 1.0
    height: int = 40
    width: int = 60
    shots_per_scene: int = 2
    shot_length: tuple[float, float] = (3.0, 8.0)
    movie: str = "movie0"


@dataclass
class SceneVideo:
    frames: list[np.ndarray]
    records: list[FrameRecord]
    boundaries: list[float]
    scene_of_frame: np.ndarray


def _scene_style(rng):
    return {"palette": rng.uniform(0.05, 0.95, (4, 3)),
            "vertical": bool(rng.integers(2)),
            "period": rng.uniform(4, 12),
            "first": int(rng.integers(4))}


def _shot(rng, style, index):
    # every shot of a scene is dominated by a different palette colour, as in
    # shot / reverse-shot editing; only the palette set and texture are shared
    rest = [c for c in range(4) if c != (style["first"] + index) % 4]
    order = np.array([(style["first"] + index) % 4, *rng.permutation(rest)])
    return {"horizon": float(rng.uniform(0.15, 0.4)),
            "order": order,
            "blob": rng.uniform(0.3, 0.7, 2),
            "radius": rng.uniform(0.12, 0.25),
            "pan": rng.normal(0, 0.4, 2),
            "phase": rng.uniform(0, 2 * np.pi)}


def _render_frame(style, shot, tau, shape, rng):
    h, w = shape
    r, c = np.mgrid[:h, :w].astype(np.float64)
    pal = style["palette"][shot["order"]]
    dy, dx = shot["pan"] * tau
    band = (shot["horizon"] + 0.004 * dy) * h
    img = np.broadcast_to(pal[0], (h, w, 3)).copy()
    top = r < band
    img[top] = (pal[1] + (pal[3] - pal[1]) * 0.3 * (r / h)[..., None])[top]
    coord = (c + dx) if style["vertical"] else (r + dy)
    img = img + 0.08 * np.sin(2 * np.pi * coord / style["period"] + shot["phase"])[..., None]
    cy, cx = shot["blob"][0] * h + 0.3 * dy, shot["blob"][1] * w + dx
    inside = (r - cy) ** 2 + (c - cx) ** 2 <= (shot["radius"] * h) ** 2
    img[inside] = pal[2]
    img = img * (1.0 + 0.05 * np.sin(0.2 * tau)) + rng.normal(0, 0.02, img.shape)
    return _quantize(img)


def gen_scene_video(cfg: SceneVideoConfig, rng) -> SceneVideo:
    durations = rng.uniform(cfg.min_duration, cfg.max_duration, cfg.n_scenes)
    starts = np.concatenate([[0.0], np.cumsum(durations)])
    times = np.arange(0.0, starts[-1], 1.0 / cfg.fps)
    scene_of = np.searchsorted(starts, times, side="right") - 1
    frames, records = [], []
    for s in range(cfg.n_scenes):
        style = _scene_style(rng)
        shots = [_shot(rng, style, i) for i in range(cfg.shots_per_scene)]
        ts = times[scene_of == s]
        cut, k = ts[0] if len(ts) else 0.0, 0
        for t in ts:
            if t >= cut:
                k = (k + 1) % len(shots)
                cut = t + rng.uniform(*cfg.shot_length)
            frames.append(_render_frame(style, shots[k], t - ts[0], (cfg.height, cfg.width), rng))
    for i, (t, s) in enumerate(zip(times, scene_of)):
        records.append(FrameRecord(f"frames/{cfg.movie}_{i:05d}.ppm", float(t), cfg.movie, int(s)))
    change = np.flatnonzero(np.diff(scene_of))
    boundaries = [float((times[i] + times[i + 1]) / 2) for i in change]
    return SceneVideo(frames, records, boundaries, scene_of)


# ---------------------------------------------------------------------------
# geotagged photo collections


@dataclass
class GeoConfig:
    n_styles: int = 6
    places_per_style: int = 5
    photos_per_place: int = 20
    jitter_m: float = 5.0
    spacing_m: float = 200.0
    height: int = 40
    width: int = 40
    origin: tuple[float, float] = (42.36, -71.06)
    prefix: str = "photos"


@dataclass
class GeoCollection:
    photos: list[np.ndarray]
    records: list[GeoPhotoRecord]
    place_instance: np.ndarray


def _geo_style(rng):
    return {"kind": int(rng.integers(4)),
            "palette": rng.uniform(0.1, 0.9, (3, 3)),
            "horizon": rng.uniform(0.3, 0.7),
            "period": rng.uniform(4, 10)}


def _geo_place(rng, style):
    return {"palette": np.clip(style["palette"] + rng.normal(0, 0.06, (3, 3)), 0, 1),
            "horizon": style["horizon"] + rng.normal(0, 0.05),
            "period": style["period"] * rng.uniform(0.85, 1.15),
            "phase": rng.uniform(0, 2 * np.pi)}


def _render_photo(style, place, shape, rng):
    h, w = shape
    r, c = np.mgrid[:h, :w].astype(np.float64)
    r = r + rng.normal(0, 1.5)
    c = c + rng.normal(0, 1.5)
    pal = place["palette"]
    hz = place["horizon"] * h
    kind = style["kind"]
    sky = pal[0] + 0.15 * (r / h)[..., None]
    if kind == 0:      # horizontal bands below the horizon
        ground = pal[1] + 0.12 * np.sin(2 * np.pi * r / place["period"] + place["phase"])[..., None]
        img = np.where((r < hz)[..., None], sky, ground)
    elif kind == 1:    # vertical bars rising above the horizon
        bars = np.sin(2 * np.pi * c / place["period"] + place["phase"]) > 0
        img = np.where(((r >= hz) | (bars & (r > 0.2 * h)))[..., None], pal[1], sky)
        img = np.where((r >= 0.85 * h)[..., None], pal[2], img)
    elif kind == 2:    # a triangular mass on a plain
        mountain = r > hz - (0.5 * w - np.abs(c - 0.5 * w)) * 0.6
        img = np.where(mountain[..., None], pal[1], sky)
        img = np.where((r >= 0.8 * h)[..., None], pal[2], img)
    else:              # checkerboard facade
        chk = (np.floor(r / place["period"]) + np.floor(c / place["period"])) % 2 == 0
        img = np.where(chk[..., None], pal[1], pal[2])
        img = np.where((r < 0.25 * hz)[..., None], sky, img)
    gain = rng.uniform(0.6, 1.25)
    cast = rng.normal(0, 0.08, 3)
    img = img * gain + cast + rng.normal(0, 0.02, img.shape)
    return _quantize(img)


def _offset(origin, north_m, east_m):
    lat0, lon0 = origin
    lat = lat0 + north_m / METRES_PER_DEG_LAT
    lon = lon0 + east_m / (METRES_PER_DEG_LAT * np.cos(np.radians(lat0)))
    return float(lat), float(lon)


def gen_geo_collection(cfg: GeoConfig, rng) -> GeoCollection:
    styles = [_geo_style(rng) for _ in range(cfg.n_styles)]
    n_places = cfg.n_styles * cfg.places_per_style
    side = int(np.ceil(np.sqrt(n_places)))
    cells = rng.permutation(side * side)[:n_places]
    photos, records, instance = [], [], []
    slack = max(0.0, (cfg.spacing_m - 100.0) / 2)
    for p in range(n_places):
        s = p % cfg.n_styles
        place = _geo_place(rng, styles[s])
        gy, gx = divmod(int(cells[p]), side)
        cy = gy * cfg.spacing_m + rng.uniform(-slack, slack)
        cx = gx * cfg.spacing_m + rng.uniform(-slack, slack)
        for _ in range(cfg.photos_per_place):
            rad = cfg.jitter_m * np.sqrt(rng.uniform())
            ang = rng.uniform(0, 2 * np.pi)
            lat, lon = _offset(cfg.origin, cy + rad * np.sin(ang), cx + rad * np.cos(ang))
            photos.append(_render_photo(styles[s], place, (cfg.height, cfg.width), rng))
            records.append(GeoPhotoRecord(f"{cfg.prefix}/{len(records):05d}.ppm", lat, lon, s))
            instance.append(p)
    return GeoCollection(photos, records, np.array(instance))
