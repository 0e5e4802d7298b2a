"""JSON-Lines manifests for frames and geotagged photos."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class FrameRecord:
    path: str
    t: float
    movie: str
    chapter: Optional[int] = None

    def __post_init__(self):
        if not self.t >= 0:
            raise ManifestError(f"negative timestamp {self.t}")


@dataclass(frozen=True)
class GeoPhotoRecord:
    path: str
    lat: float
    lon: float
    place: Optional[int] = None

    def __post_init__(self):
        if abs(self.lat) > 90 or abs(self.lon) > 180:
            raise ManifestError(f"invalid coordinates ({self.lat}, {self.lon})")


def write_manifest(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def _read(path, cls, required):
    out = []
    base = Path(path).parent
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            missing = required - obj.keys()
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing keys {sorted(missing)}")
            p = Path(obj["path"])
            obj["path"] = str(p if p.is_absolute() else base / p)
            fields = cls.__dataclass_fields__
            out.append(cls(**{k: v for k, v in obj.items() if k in fields}))
    return out


def read_frame_manifest(path) -> list[FrameRecord]:
    """Records in file order; relative image paths resolve against the manifest's directory."""
    return _read(path, FrameRecord, {"path", "t", "movie"})


def read_photo_manifest(path) -> list[GeoPhotoRecord]:
    return _read(path, GeoPhotoRecord, {"path", "lat", "lon"})
