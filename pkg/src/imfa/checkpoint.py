"""Checkpoints: flat float32 blob plus a JSON manifest, written atomically."""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import DataError, DatasetIOError
from .params import Params

MANIFEST_MAGIC = "imfa-checkpoint-v1"


def save_checkpoint(stem: str, params: Params, config: dict) -> None:
    """Write <stem>.bin and <stem>.json via write-then-rename."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in params.items():
        # asarray keeps 0-d shapes; ascontiguousarray would promote them to (1,)
        data = np.asarray(arr, dtype=np.float32, order="C")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += len(blobs[-1])
    manifest = {"magic": MANIFEST_MAGIC, "config": config, "params": entries}

    bin_tmp = f"{stem}.bin.tmp"
    with open(bin_tmp, "wb") as fh:
        for blob in blobs:
            fh.write(blob)
    json_tmp = f"{stem}.json.tmp"
    with open(json_tmp, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    os.replace(bin_tmp, f"{stem}.bin")
    os.replace(json_tmp, f"{stem}.json")


def load_checkpoint(stem: str):
    """Read a checkpoint pair; returns (Params, config dict, manifest)."""
    try:
        with open(f"{stem}.json") as fh:
            manifest = json.load(fh)
    except OSError as e:
        raise DatasetIOError(f"cannot read checkpoint manifest {stem}.json: {e}") from e
    except ValueError as e:
        raise DataError(f"malformed checkpoint manifest {stem}.json: {e}") from e
    if manifest.get("magic") != MANIFEST_MAGIC:
        raise DataError(f"{stem}.json is not a checkpoint manifest")
    try:
        with open(f"{stem}.bin", "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise DatasetIOError(f"cannot read checkpoint blob {stem}.bin: {e}") from e
    params = Params()
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(raw):
            raise DataError(f"checkpoint blob {stem}.bin truncated at {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape)
        params.add(entry["name"], arr.copy())
    return params, manifest.get("config", {}), manifest
