"""Provenance and persistence helpers shared across the pipeline stages.

Every artifact directory carries a manifest with the hash of the config that
produced it, so downstream stages can verify they are consuming what they
think they are. Telemetry is plain delimited text, one row per iteration.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np
import torch


def canonical_json(obj) -> str:
    """Serialize to JSON with sorted keys and no incidental whitespace."""
    if is_dataclass(obj) and not isinstance(obj, type):
        obj = asdict(obj)
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(obj) -> str:
    """sha256 of the canonical JSON form, hex digest."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(dir_path: str | Path, payload: dict):
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    (dir_path / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_manifest(dir_path: str | Path) -> dict:
    p = Path(dir_path) / "manifest.json"
    if not p.is_file():
        raise FileNotFoundError(f"no manifest at {p}")
    return json.loads(p.read_text())


def write_telemetry(path: str | Path, rows: list[dict], columns: list[str]):
    """Write telemetry rows as CSV; floats via repr so values round-trip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in columns])


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def read_telemetry(path: str | Path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        out = []
        for row in reader:
            parsed = {}
            for k, v in row.items():
                try:
                    parsed[k] = int(v)
                except ValueError:
                    try:
                        parsed[k] = float(v)
                    except ValueError:
                        parsed[k] = v
            out.append(parsed)
        return out


def torch_rng_state(rng: torch.Generator) -> torch.Tensor:
    return rng.get_state()


def numpy_rng_state(rng: np.random.Generator) -> str:
    """Bit-generator state as a JSON string (checkpoint-friendly plain type)."""
    return json.dumps(rng.bit_generator.state)


def restore_numpy_rng(state_json: str) -> np.random.Generator:
    state = json.loads(state_json)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def set_global_determinism(seed: int):
    """Seed torch's global RNG; the pipeline otherwise uses explicit generators."""
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
