"""On-disk dataset layout.

::

    <root>/manifest.json
    <root>/train/0000/{A.mtx, b.txt, x_ref.txt, phi.txt}
    <root>/test/0000/...

The manifest lists every sample with its seed, contrast, an optional
Lanczos estimate of kappa(A) and sha256 digests of its files. Digests are
checked before any command reads the data.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .pdegen import LinearSystem
from .sparse import read_mtx, read_vector, write_mtx, write_vector

MANIFEST = "manifest.json"
SAMPLE_FILES = ("A.mtx", "b.txt", "x_ref.txt", "phi.txt")


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_phi(path, phi) -> None:
    rows = ("\n".join(" ".join(f"{v:.17g}" for v in row) for row in np.asarray(phi).tolist()))
    Path(path).write_text(rows + "\n")


def _read_phi(path) -> np.ndarray:
    return np.array([[float(t) for t in ln.split()] for ln in Path(path).read_text().splitlines() if ln.strip()])


def write_sample(directory, system: LinearSystem) -> dict[str, str]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_mtx(d / "A.mtx", system.A, symmetric=True)
    write_vector(d / "b.txt", system.b)
    write_vector(d / "x_ref.txt", system.x_ref)
    _write_phi(d / "phi.txt", system.phi)
    return {f: sha256_file(d / f) for f in SAMPLE_FILES}


def read_sample(directory, meta: dict) -> LinearSystem:
    d = Path(directory)
    A = read_mtx(d / "A.mtx")
    return LinearSystem(A, read_vector(d / "b.txt"), read_vector(d / "x_ref.txt"), dict(meta), _read_phi(d / "phi.txt"))


def write_dataset(root, datasets: dict[str, list[LinearSystem]], header: dict,
                  kappas: dict[str, list[float | None]] | None = None) -> Path:
    """Write every split and the manifest; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    samples = []
    for split in ("train", "test"):
        for i, s in enumerate(datasets.get(split, [])):
            rel = f"{split}/{i:04d}"
            digests = write_sample(root / rel, s)
            entry = {"path": rel, "split": split, **s.meta, "files": digests}
            if kappas is not None:
                entry["kappa_estimate"] = kappas[split][i]
            samples.append(entry)
    manifest = {**header, "samples": samples}
    path = root / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise ConfigError(f"{path}: dataset manifest not found (run 'precor generate' first)")
    return json.loads(path.read_text())


def verify_dataset(root) -> dict:
    """Check every file digest; raises :class:`ConfigError` on any mismatch."""
    root = Path(root)
    manifest = read_manifest(root)
    for entry in manifest["samples"]:
        for name, digest in entry["files"].items():
            p = root / entry["path"] / name
            if not p.exists():
                raise ConfigError(f"{p}: missing dataset file")
            if sha256_file(p) != digest:
                raise ConfigError(f"{p}: digest mismatch, dataset was modified")
    return manifest


def load_dataset(root, verify: bool = True) -> tuple[dict[str, list[LinearSystem]], dict]:
    root = Path(root)
    manifest = verify_dataset(root) if verify else read_manifest(root)
    out: dict[str, list[LinearSystem]] = {"train": [], "test": []}
    meta_keys = ("grid_n", "variance", "contrast", "seed", "equation")
    for entry in manifest["samples"]:
        meta = {k: entry[k] for k in meta_keys}
        out[entry["split"]].append(read_sample(root / entry["path"], meta))
    return out, manifest
