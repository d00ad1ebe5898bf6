"""TIFF image I/O and run manifests."""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import tifffile

TIFF_SUFFIXES = (".tif", ".tiff")
OUTPUT_ROOT_ENV = "HDN_OUTPUT_ROOT"


def read_image(path) -> np.ndarray:
    img = np.asarray(tifffile.imread(path))
    img = np.squeeze(img)
    if img.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel 2-D image, got shape {img.shape}")
    return img.astype(np.float64)


def write_image(path, image, dtype: str = "float32") -> Path:
    """Write a 2-D (or stacked 3-D) array as TIFF; ``uint16`` values are rounded and clipped."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(image)
    if dtype == "uint16":
        arr = np.clip(np.rint(arr), 0, 65535).astype(np.uint16)
    elif dtype == "float32":
        arr = arr.astype(np.float32)
    else:
        raise ValueError(f"unsupported TIFF dtype {dtype!r}")
    # fixed metadata keeps repeated writes byte-identical
    tifffile.imwrite(path, arr, photometric="minisblack", metadata=None, software=None,
                     datetime=None)
    return path


def list_images(path) -> list[Path]:
    """A single TIFF file, or every TIFF in a directory in lexicographic order."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    if path.is_file():
        return [path]
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in TIFF_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no TIFF images in {path}")
    return files


def read_images(path, workers: int = 1) -> tuple[list[np.ndarray], list[Path]]:
    files = list_images(path)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(read_image, files)), files
    return [read_image(f) for f in files], files


def resolve_output(path) -> Path:
    """Relative output paths land under ``$HDN_OUTPUT_ROOT`` when it is set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


@dataclass
class RunManifest:
    """Everything needed to repeat a command and check its outputs."""

    command: str
    argv: list[str]
    config: dict
    seeds: dict
    inputs: list[str]
    outputs: dict = field(default_factory=dict)  # path -> sha256
    toolkit_version: str = ""
    checkpoint_hash: str | None = None

    def add_output(self, path) -> None:
        self.outputs[str(path)] = sha256_file(path)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def manifest_path_for(out) -> Path:
    """Directories get ``manifest.json`` inside; files get ``<name>.manifest.json`` beside."""
    out = Path(out)
    if out.suffix == "" or out.is_dir():
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")
