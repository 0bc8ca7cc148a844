"""Checkpoint archives.

A checkpoint is a single zip file holding a version tag, the architecture
descriptions as structured text, every parameter/buffer array as a .npy
entry (dtype and shape ride in the npy headers), the optimizer state, the
training config with its seed, and the stream position needed to resume.
A sha256 over the array payload is stored and verified, and the round trip
is bit-exact.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch

from .latent import LatentSpec
from .models import ModelBundle, NetSpec, build_net

__all__ = [
    "FORMAT_VERSION",
    "CheckpointError",
    "CheckpointData",
    "save_checkpoint",
    "load_checkpoint",
    "optimizer_state_arrays",
    "restore_optimizer",
]

FORMAT_VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class CheckpointError(RuntimeError):
    pass


@dataclass
class CheckpointData:
    bundle: ModelBundle
    optimizer_states: dict        # name -> {"groups": [...], "state": {idx: {k: array}}}
    config: dict
    position: dict
    history_records: list = field(default_factory=list)


def optimizer_state_arrays(optimizer):
    """Flatten a torch optimizer's state into JSON metadata plus named arrays."""
    sd = optimizer.state_dict()
    groups = []
    for group in sd["param_groups"]:
        groups.append({k: v for k, v in group.items() if k != "params"})
    state = {}
    for idx, entry in sd["state"].items():
        arrays = {}
        for key, value in entry.items():
            if torch.is_tensor(value):
                arrays[key] = value.detach().cpu().numpy()
            else:
                arrays[key] = np.asarray(value)
        state[int(idx)] = arrays
    return {"groups": groups, "state": state}


def restore_optimizer(optimizer, stored):
    """Load a state produced by `optimizer_state_arrays` into `optimizer`."""
    sd = optimizer.state_dict()
    if len(stored["groups"]) != len(sd["param_groups"]):
        raise CheckpointError("optimizer param-group count mismatch")
    for group, saved in zip(sd["param_groups"], stored["groups"]):
        group.update(saved)
    sd["state"] = {
        int(idx): {key: torch.from_numpy(np.array(arr)) for key, arr in entry.items()}
        for idx, entry in stored["state"].items()
    }
    optimizer.load_state_dict(sd)


def _npy_bytes(array):
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(array), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, bundle, optimizers, config, position, history_records=None):
    """Write the archive. `optimizers` maps name -> torch optimizer (may be {})."""
    arrays = {}
    for net_name, net in bundle.nets.items():
        for key, tensor in net.state_dict().items():
            arrays[f"model/{net_name}/{key}"] = tensor.detach().cpu().numpy()
    opt_meta = {}
    for opt_name, opt in optimizers.items():
        stored = opt if isinstance(opt, dict) else optimizer_state_arrays(opt)
        opt_meta[opt_name] = {"groups": stored["groups"],
                              "state_keys": {str(i): sorted(e) for i, e in stored["state"].items()}}
        for idx, entry in stored["state"].items():
            for key, arr in entry.items():
                arrays[f"opt/{opt_name}/{idx}/{key}"] = np.asarray(arr)

    names = sorted(arrays)
    digest = hashlib.sha256()
    payloads = {}
    for name in names:
        blob = _npy_bytes(arrays[name])
        payloads[name] = blob
        digest.update(name.encode())
        digest.update(blob)

    manifest = {
        "format_version": FORMAT_VERSION,
        "family": bundle.family,
        "profile": bundle.profile,
        "dtype": str(bundle.dtype).replace("torch.", ""),
        "latent_spec": {"code_dim": bundle.latent_spec.code_dim,
                        "noise_dim": bundle.latent_spec.noise_dim},
        "image_shape": list(bundle.image_shape),
        "net_specs": {name: spec.to_dict() for name, spec in bundle.net_specs.items()},
        "optimizers": opt_meta,
        "config": config,
        "position": position,
        "arrays": names,
        "payload_sha256": digest.hexdigest(),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name in names:
            zf.writestr(f"arrays/{name}.npy", payloads[name])
        zf.writestr("history.jsonl", "\n".join(
            json.dumps(r, sort_keys=True) for r in (history_records or [])))


def load_checkpoint(path) -> CheckpointData:
    """Read and verify an archive; raises CheckpointError before any partial state."""
    try:
        zf = zipfile.ZipFile(path, "r")
    except (FileNotFoundError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError as exc:
            raise CheckpointError(f"{path}: no manifest") from exc
        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {version} is not "
                                  f"supported (expected {FORMAT_VERSION})")
        digest = hashlib.sha256()
        blobs = {}
        for name in manifest["arrays"]:
            blob = zf.read(f"arrays/{name}.npy")
            digest.update(name.encode())
            digest.update(blob)
            blobs[name] = blob
        if digest.hexdigest() != manifest["payload_sha256"]:
            raise CheckpointError(f"{path}: array payload checksum mismatch")
        arrays = {name: np.load(io.BytesIO(blob), allow_pickle=False)
                  for name, blob in blobs.items()}
        history_lines = zf.read("history.jsonl").decode().splitlines()

    dtype = _DTYPES[manifest["dtype"]]
    net_specs = {name: NetSpec.from_dict(d) for name, d in manifest["net_specs"].items()}
    nets = {}
    for name, spec in net_specs.items():
        net = build_net(spec).to(dtype)
        state = {}
        prefix = f"model/{name}/"
        for key in net.state_dict():
            arr = arrays.get(prefix + key)
            if arr is None:
                raise CheckpointError(f"{path}: missing array {prefix + key}")
            state[key] = torch.from_numpy(np.array(arr))
        net.load_state_dict(state)
        nets[name] = net
    spec = manifest["latent_spec"]
    bundle = ModelBundle(
        family=manifest["family"],
        latent_spec=LatentSpec(spec["code_dim"], spec["noise_dim"]),
        image_shape=tuple(manifest["image_shape"]),
        nets=nets, net_specs=net_specs,
        profile=manifest["profile"], dtype=dtype,
    )
    optimizer_states = {}
    for opt_name, meta in manifest["optimizers"].items():
        state = {}
        for idx_str, keys in meta["state_keys"].items():
            state[int(idx_str)] = {key: arrays[f"opt/{opt_name}/{idx_str}/{key}"]
                                   for key in keys}
        optimizer_states[opt_name] = {"groups": meta["groups"], "state": state}
    return CheckpointData(
        bundle=bundle,
        optimizer_states=optimizer_states,
        config=manifest["config"],
        position=manifest["position"],
        history_records=[json.loads(line) for line in history_lines if line],
    )
