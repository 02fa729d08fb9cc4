"""Single-file checkpoints: a JSON config echo plus named ``.npy`` arrays in a zip.

Timestamps are pinned so identical parameters give identical bytes.
"""
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError, MissingArtifactError

_EPOCH = (1980, 1, 1, 0, 0, 0)
FORMAT_VERSION = 1


def _entry(name):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path, kind, config, state):
    """Write ``state`` (name -> tensor/array) with ``kind`` and ``config`` echoed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": FORMAT_VERSION, "kind": kind, "config": config,
            "arrays": sorted(state)}
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_entry("meta.json"), json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(state):
            value = state[name]
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.array(value, order="C"), allow_pickle=False)
            zf.writestr(_entry(f"arrays/{name}.npy"), buf.getvalue())
    return path


def load_checkpoint(path, expected_kind=None, expected_config=None):
    """Return ``(kind, config, arrays)``; mismatches with the expectations raise."""
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        arrays = {}
        for name in meta["arrays"]:
            with zf.open(f"arrays/{name}.npy") as fh:
                arrays[name] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    kind, config = meta["kind"], meta["config"]
    if expected_kind is not None and kind != expected_kind:
        raise ConfigurationError(f"checkpoint holds a {kind!r}, expected {expected_kind!r}")
    if expected_config is not None and config != expected_config:
        raise ConfigurationError("checkpoint config does not match the requested config")
    return kind, config, arrays


def load_state_into(module, arrays):
    """Copy named arrays into ``module`` (parameters and buffers), checking shapes."""
    own = module.state_dict()
    if set(own) != set(arrays):
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        raise ConfigurationError(f"checkpoint arrays mismatch (missing={missing}, extra={extra})")
    for name, tensor in own.items():
        if tuple(tensor.shape) != tuple(arrays[name].shape):
            raise ConfigurationError(f"shape mismatch for {name}: "
                                     f"{tuple(arrays[name].shape)} vs {tuple(tensor.shape)}")
    module.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
    return module


def state_checksum(module):
    """Order-stable digest of every parameter and buffer."""
    import hashlib
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
