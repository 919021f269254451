"""Checkpoint archives: a zip holding ``manifest.json`` plus one ``.npy`` per tensor.

Entries carry a fixed timestamp so identical parameters give identical bytes.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np
import torch

from .errors import FormatError

CHECKPOINT_FORMAT = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, modules: Mapping[str, torch.nn.Module], manifest: Dict) -> None:
    shapes = {}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        for mod_name in sorted(modules):
            for key, tensor in modules[mod_name].state_dict().items():
                arr = tensor.detach().cpu().numpy()
                buf = io.BytesIO()
                np.save(buf, arr, allow_pickle=False)
                entry = f"{mod_name}/{key}"
                shapes[entry] = list(arr.shape)
                _write(zf, f"tensors/{entry}.npy", buf.getvalue())
        full = {"format_version": CHECKPOINT_FORMAT, **manifest, "modules": sorted(modules), "shapes": shapes}
        _write(zf, "manifest.json", json.dumps(full, indent=2, sort_keys=True).encode())


def load_checkpoint(path) -> Tuple[Dict[str, Dict[str, torch.Tensor]], Dict]:
    """Return ``({module: state_dict}, manifest)``."""
    try:
        zf = zipfile.ZipFile(path)
    except FileNotFoundError as exc:
        raise FormatError(f"checkpoint {path} not found") from exc
    except zipfile.BadZipFile as exc:
        raise FormatError(f"checkpoint {path} is not a valid archive") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError as exc:
            raise FormatError(f"checkpoint {path} has no manifest") from exc
        if manifest.get("format_version") != CHECKPOINT_FORMAT:
            raise FormatError(f"checkpoint {path} has unsupported format {manifest.get('format_version')}")
        states: Dict[str, Dict[str, torch.Tensor]] = {}
        for entry, shape in manifest["shapes"].items():
            mod_name, key = entry.split("/", 1)
            arr = np.load(io.BytesIO(zf.read(f"tensors/{entry}.npy")), allow_pickle=False)
            if list(arr.shape) != shape:
                raise FormatError(f"checkpoint {path}: tensor {entry} has shape {arr.shape}, manifest says {shape}")
            states.setdefault(mod_name, {})[key] = torch.from_numpy(arr.copy())
    return states, manifest
