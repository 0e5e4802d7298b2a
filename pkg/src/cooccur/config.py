"""Run configuration: defaults < config file (TOML or JSON) < command-line flags."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


DOMAINS = ("patches", "frames", "photos")


@dataclass
class RunConfig:
    # shared
    domain: str = "patches"
    seed: int = 0
    threads: int = 1
    out: str = "out"
    data_dir: str = "data"
    weights: str = ""
    # gen-data
    n_images: int = 200
    min_regions: int = 2
    max_regions: int = 6
    n_movies: int = 12
    n_scenes: int = 8
    n_styles: int = 6
    places_per_style: int = 5
    photos_per_place: int = 20
    # pair sampling
    n_pairs: int = 50_000
    eval_pairs: int = 4_000
    # training
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 0  # 0: ceil(epochs / 4)
    label_source: str = "C"
    # affinity evaluation
    measures: str = "learned,raw-color,mean-color,color-histogram,hog"
    # spectral
    eigen_scaling: str = "laplacian"
    eigen_coordinates: str = "symmetric"
    eigensolver: str = "lapack"
    first_eigenvector: int = 2
    last_eigenvector: int = 16
    kmeans_restarts: int = 10
    # proposals
    patch_stride: int = 8
    patch_alpha: float = 20.0
    k_min: int = 5
    k_max: int = 16
    proposal_restarts: int = 8
    top_n: int = 100
    overlays: int = 5
    # scenes
    measure: str = "learned"
    window: float = 10.0
    scaling: str = "exponential"
    alphas: str = "0.25,0.5,1,2,4"
    scene_k: int = 0  # 0: ceil(duration / 120 s)
    tolerance: float = 5.0
    # places
    place_alpha: float = 0.5
    place_k: int = 6
    place_ks: str = "2-16"
    max_photos: int = 4000
    # probes
    probe_pairs: int = 2_000

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.label_source not in ("C", "Q"):
            raise ConfigError("label_source must be C or Q")
        if self.scaling not in ("exponential", "power"):
            raise ConfigError("scaling must be exponential or power")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.k_min < 2 or self.k_max < self.k_min:
            raise ConfigError("need 2 <= k_min <= k_max")
        self.alpha_list()
        self.place_k_list()

    def alpha_list(self) -> list[float]:
        try:
            vals = [float(a) for a in str(self.alphas).split(",") if a.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad alpha list {self.alphas!r}") from exc
        if not vals or min(vals) <= 0:
            raise ConfigError("alphas must be a non-empty list of positive numbers")
        return vals

    def place_k_list(self) -> list[int]:
        out = []
        try:
            for part in str(self.place_ks).split(","):
                if "-" in part:
                    lo, hi = part.split("-")
                    out.extend(range(int(lo), int(hi) + 1))
                elif part.strip():
                    out.append(int(part))
        except ValueError as exc:
            raise ConfigError(f"bad k list {self.place_ks!r}") from exc
        if not out or min(out) < 2:
            raise ConfigError("place_ks must list values >= 2")
        return out

    def measure_list(self) -> list[str]:
        return [m.strip() for m in self.measures.split(",") if m.strip()]

    def eigenmap_kw(self) -> dict:
        return {"first": self.first_eigenvector, "last": self.last_eigenvector,
                "scaling": self.eigen_scaling, "coordinates": self.eigen_coordinates,
                "method": self.eigensolver}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """SHA-256 of the canonical JSON of every field except ``threads`` and ``out``,
        which do not affect results."""
        d = {k: v for k, v in self.to_dict().items() if k not in ("threads", "out")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name, value):
    kind = FIELD_TYPES[name]
    try:
        if kind == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
        if isinstance(value, (list, tuple)):
            return ",".join(str(v) for v in value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: cannot read {value!r} as {kind}") from exc


def read_config_file(path) -> dict:
    """Flat table from TOML or JSON.  A run manifest (with a ``config`` key) also works."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_bytes()
    try:
        if p.suffix.lower() == ".toml":
            raw = tomllib.loads(text.decode())
        else:
            raw = json.loads(text)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if isinstance(raw, dict) and isinstance(raw.get("config"), dict) and "config_hash" in raw:
        raw = raw["config"]
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a table")
    flat = {}
    for k, v in raw.items():
        if isinstance(v, dict):  # sections are allowed and simply flattened
            flat.update(v)
        else:
            flat[k] = v
    return flat


def make_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    values = {}
    for source in (file_values or {}, overrides or {}):
        for k, v in source.items():
            key = k.replace("-", "_")
            if key not in FIELD_TYPES:
                raise ConfigError(f"unknown config key {k!r}")
            if v is not None:
                values[key] = _coerce(key, v)
    try:
        return RunConfig(**values)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# seeds


def derive_seed_sequence(root: int, name: str) -> np.random.SeedSequence:
    """Independent stream for ``name``: the root seed plus a CRC of the name as spawn key.

    A stream depends only on (root, name), so adding or reordering other
    consumers never shifts it.
    """
    return np.random.SeedSequence(entropy=int(root), spawn_key=(zlib.crc32(name.encode()),))


def derive_rng(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(root, name))


def derive_int(root: int, name: str) -> int:
    return int(derive_seed_sequence(root, name).generate_state(1, np.uint32)[0])
