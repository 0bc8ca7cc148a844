"""Command-line harness: train, score, traverse, verify.

Every run writes a manifest (config, seed, code hash, dataset fingerprint,
status) into its output directory before exiting, so any artifact can be
reproduced from its manifest alone. Machine-readable results go to stdout as
single JSON lines with stable keys; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass

import numpy as np
import yaml

import anadis
from .checkpoint import CheckpointError, load_checkpoint
from .data import DATA_ROOT_ENV, DatasetError, load_dataset
from .grids import save_grid_png
from .latent import build_traversal
from .models import build_bundle, generate
from .seeding import stream
from .subspace_score import MetricParams, subspace_score
from .training import TrainConfig, TrainingDiverged, train
from .verify import run_all_suites

__all__ = ["main", "RunSpec", "SchemaError", "load_config", "run_traversal_grids"]

TRAVERSAL_VALUES = (-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0)


class SchemaError(ValueError):
    pass


@dataclass
class RunSpec:
    command: str
    config_path: str | None = None
    out_dir: str | None = None
    seed: int | None = None
    checkpoint: str | None = None
    alpha: float | None = None
    untrained: bool = False


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

# yaml key -> (TrainConfig field, type)
_CONFIG_FIELDS = {
    "family": ("family", str),
    "dataset": ("dataset", str),
    "profile": ("profile", str),
    "lambda": ("lambda_", float),
    "batch_size": ("batch_size", int),
    "lr": ("lr", float),
    "adam_beta1": ("adam_beta1", float),
    "adam_beta2": ("adam_beta2", float),
    "num_critic": ("num_critic", int),
    "critic_warmup_iters": ("critic_warmup_iters", int),
    "critic_warmup_num_critic": ("critic_warmup_num_critic", int),
    "analogical_warmup_epochs": ("analogical_warmup_epochs", int),
    "gp_weight": ("gp_weight", float),
    "epochs": ("epochs", int),
    "seed": ("seed", int),
    "checkpoint_every": ("checkpoint_every", int),
    "digest_every": ("digest_every", int),
    "n_train": ("n_train", int),
    "n_eval": ("n_eval", int),
}
_EXTRA_KEYS = {"data_root", "metric"}
_METRIC_KEYS = {"alpha", "n_sets", "n_observed", "sparsity",
                "sequences_per_factor", "samples_per_sequence"}


def load_config(path):
    """Parse and validate a config file into (TrainConfig, extras)."""
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError as exc:
        raise SchemaError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise SchemaError(f"config is not valid yaml: {exc}") from exc
    if not isinstance(raw, dict):
        raise SchemaError("config must be a mapping of keys to values")
    if "family" not in raw:
        raise SchemaError("missing required field 'family'")
    unknown = set(raw) - set(_CONFIG_FIELDS) - _EXTRA_KEYS
    if unknown:
        raise SchemaError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _EXTRA_KEYS:
            continue
        field, typ = _CONFIG_FIELDS[key]
        if typ is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, typ) or isinstance(value, bool):
            raise SchemaError(f"field {key!r} must be {typ.__name__}, "
                              f"got {value!r}")
        kwargs[field] = value
    metric = raw.get("metric") or {}
    if not isinstance(metric, dict) or set(metric) - _METRIC_KEYS:
        raise SchemaError(f"metric section allows keys {sorted(_METRIC_KEYS)}")
    try:
        config = TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"invalid config: {exc}") from exc
    extras = {"data_root": raw.get("data_root"), "metric": metric}
    return config, extras


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def code_hash():
    """Content hash over the package sources."""
    pkg_dir = os.path.dirname(os.path.abspath(__file__))
    digest = hashlib.sha256()
    for name in sorted(os.listdir(pkg_dir)):
        if name.endswith(".py"):
            digest.update(name.encode())
            digest.update(open(os.path.join(pkg_dir, name), "rb").read())
    return digest.hexdigest()[:16]


def dataset_fingerprint(handle):
    digest = hashlib.sha256()
    digest.update(handle.id.encode())
    digest.update(handle.normalization.encode())
    for split in sorted(handle.splits):
        arr = handle.splits[split]
        digest.update(f"{split}:{arr.shape}".encode())
        digest.update(arr[: min(16, len(arr))].tobytes())
    return digest.hexdigest()[:16]


def _prepare_out_dir(out_dir):
    try:
        os.makedirs(out_dir)
    except FileExistsError:
        if os.listdir(out_dir):
            raise SchemaError(f"output directory {out_dir} exists and is not empty")
    return out_dir


def _write_manifest(out_dir, payload):
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _machine_line(payload):
    print(json.dumps(payload, sort_keys=True))


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _load_dataset_for(config, extras, need_labels=False):
    return load_dataset(config.dataset, config.family,
                        root=extras.get("data_root"),
                        seed=config.seed, n_train=config.n_train,
                        n_eval=config.n_eval)


def _bundle_from_checkpoint(path):
    data = load_checkpoint(path)
    return data.bundle, data


def run_traversal_grids(bundle, out_dir, seed=0, rows=None,
                        values=TRAVERSAL_VALUES, prefix="traversal"):
    """One grid per factor: rows are base samples, columns the swept values.

    The base code is all-zero (so the value-0 column repeats the same image
    in every grid); GAN rows vary the noise, the VAE family has a single
    others-zero row unless `rows` asks for more.
    """
    spec = bundle.latent_spec
    if rows is None:
        rows = 8 if spec.noise_dim else 1
    rng = stream(seed, "traverse.noise")
    noises = rng.standard_normal((rows, spec.noise_dim))
    value_range = (0.0, 1.0) if bundle.family == "anavae" else (-1.0, 1.0)
    paths = []
    for factor in range(spec.code_dim):
        codes = build_traversal(np.zeros(spec.code_dim), factor, values).codes
        tiles = []
        for row in range(rows):
            noise = np.tile(noises[row], (len(values), 1)) if spec.noise_dim else None
            tiles.append(generate(bundle, codes, noise))
        images = np.stack(tiles)  # rows x cols x C x H x W
        path = os.path.join(out_dir, f"{prefix}_factor{factor:02d}.png")
        save_grid_png(path, images, value_range=value_range)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(runspec: RunSpec):
    config, extras = load_config(runspec.config_path)
    if runspec.seed is not None:
        config.seed = runspec.seed
    out = _prepare_out_dir(runspec.out_dir)
    dataset = _load_dataset_for(config, extras)
    manifest = {
        "command": "train",
        "config": config.to_dict(),
        "seed": config.seed,
        "code_hash": code_hash(),
        "dataset_fingerprint": dataset_fingerprint(dataset),
        "package_version": anadis.__version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "status": "running",
    }
    _write_manifest(out, manifest)
    ckpt_dir = os.path.join(out, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    grid_dir = os.path.join(out, "grids")
    os.makedirs(grid_dir, exist_ok=True)

    cadence = max(config.checkpoint_every, 1)

    def monitor(epoch, bundle):
        if epoch % cadence == 0 or epoch == config.epochs:
            run_traversal_grids(bundle, grid_dir, seed=config.seed,
                                prefix=f"epoch{epoch:04d}")

    try:
        bundle, history = train(config, dataset, checkpoint_dir=ckpt_dir,
                                epoch_callback=monitor)
    except TrainingDiverged as exc:
        manifest["status"] = "diverged"
        manifest["error"] = str(exc)
        _write_manifest(out, manifest)
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    with open(os.path.join(out, "history.jsonl"), "w") as f:
        f.write(history.to_jsonl())
    manifest["status"] = "completed"
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    manifest["wall_seconds"] = history.wall_seconds
    manifest["steps"] = len(history.records)
    _write_manifest(out, manifest)
    _machine_line({"command": "train", "status": "completed",
                   "steps": len(history.records),
                   "final_loss": history.records[-1]["losses"]["total"],
                   "out": out})
    return 0


def cmd_score(runspec: RunSpec):
    config, extras = load_config(runspec.config_path)
    if runspec.seed is not None:
        config.seed = runspec.seed
    out = _prepare_out_dir(runspec.out_dir)
    if runspec.untrained:
        bundle = build_bundle(config.family, config.profile, seed=config.seed)
    else:
        if not runspec.checkpoint:
            raise SchemaError("score needs --checkpoint PATH or --untrained")
        bundle, _ = _bundle_from_checkpoint(runspec.checkpoint)
    dataset = _load_dataset_for(config, extras)
    if dataset.image_shape != bundle.image_shape:
        raise DatasetError(f"checkpoint expects images {bundle.image_shape}, "
                           f"dataset provides {dataset.image_shape}")
    metric_cfg = dict(extras["metric"])
    if runspec.alpha is not None:
        metric_cfg["alpha"] = runspec.alpha
    params = MetricParams(seed=config.seed, **metric_cfg)
    report = subspace_score(bundle, dataset, params)
    with open(os.path.join(out, "score_report.json"), "w") as f:
        f.write(report.to_json())
        f.write("\n")
    _write_manifest(out, {
        "command": "score",
        "config": config.to_dict(),
        "seed": config.seed,
        "alpha": params.alpha,
        "checkpoint": runspec.checkpoint,
        "untrained": runspec.untrained,
        "code_hash": code_hash(),
        "dataset_fingerprint": dataset_fingerprint(dataset),
        "status": "completed",
    })
    _machine_line({"command": "score",
                   "aggregate_score": report.aggregate_score,
                   "aggregate_nmi": report.aggregate_nmi,
                   "aggregate_distance": report.aggregate_distance,
                   "alpha": report.alpha, "n_sets": report.n_sets,
                   "seed": report.seed, "out": out})
    return 0


def cmd_traverse(runspec: RunSpec):
    if not runspec.checkpoint:
        raise SchemaError("traverse needs --checkpoint PATH")
    out = _prepare_out_dir(runspec.out_dir)
    bundle, data = _bundle_from_checkpoint(runspec.checkpoint)
    seed = runspec.seed if runspec.seed is not None else data.config.get("seed", 0)
    paths = run_traversal_grids(bundle, out, seed=seed)
    _write_manifest(out, {
        "command": "traverse",
        "checkpoint": runspec.checkpoint,
        "seed": seed,
        "code_hash": code_hash(),
        "grids": [os.path.basename(p) for p in paths],
        "status": "completed",
    })
    _machine_line({"command": "traverse", "grids": len(paths), "out": out})
    return 0


def cmd_verify(runspec: RunSpec):
    seed = runspec.seed if runspec.seed is not None else 0
    results = run_all_suites(seed=seed)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: {r.detail} ({r.seconds:.1f}s)")
    if runspec.out_dir:
        out = _prepare_out_dir(runspec.out_dir)
        _write_manifest(out, {
            "command": "verify", "seed": seed, "code_hash": code_hash(),
            "suites": [{"name": r.name, "passed": r.passed, "detail": r.detail,
                        "seconds": r.seconds} for r in results],
            "status": "completed" if not failed else "failed",
        })
    return 0 if not failed else 1


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="anadis",
        description="Train generative models with analogical pair supervision "
                    "and score disentanglement with the subspace metric.",
        epilog=f"The dataset root can also come from ${DATA_ROOT_ENV}.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_config in (("train", True), ("score", True),
                               ("traverse", False), ("verify", False)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=needs_config)
        p.add_argument("--out", required=name != "verify")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--untrained", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    runspec = RunSpec(command=args.command, config_path=args.config,
                      out_dir=args.out, seed=args.seed,
                      checkpoint=args.checkpoint, alpha=args.alpha,
                      untrained=args.untrained)
    handler = {"train": cmd_train, "score": cmd_score,
               "traverse": cmd_traverse, "verify": cmd_verify}[args.command]
    try:
        return handler(runspec)
    except SchemaError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
