import json
import os

import numpy as np
import pytest
import yaml
from PIL import Image

from anadis.cli import SchemaError, load_config, main, run_traversal_grids
from anadis.grids import GRID_SEPARATOR, assemble_grid
from anadis.models import build_bundle


def write_config(path, **overrides):
    config = dict(family="anavae", dataset="synthetic", epochs=1, batch_size=16,
                  n_train=64, n_eval=32, seed=0, checkpoint_every=1)
    config.update(overrides)
    with open(path, "w") as f:
        yaml.safe_dump(config, f)
    return str(path)


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------


def test_config_missing_family_names_field(tmp_path):
    path = tmp_path / "c.yaml"
    with open(path, "w") as f:
        yaml.safe_dump({"dataset": "synthetic"}, f)
    with pytest.raises(SchemaError, match="family"):
        load_config(str(path))


def test_config_unknown_key_rejected(tmp_path):
    path = write_config(tmp_path / "c.yaml", typo_key=3)
    with pytest.raises(SchemaError, match="typo_key"):
        load_config(path)


def test_config_type_check(tmp_path):
    path = write_config(tmp_path / "c.yaml", epochs="ten")
    with pytest.raises(SchemaError, match="epochs"):
        load_config(path)


def test_config_lambda_key_maps(tmp_path):
    path = tmp_path / "c.yaml"
    with open(path, "w") as f:
        yaml.safe_dump({"family": "anavae", "lambda": 0.5}, f)
    config, _ = load_config(str(path))
    assert config.lambda_ == 0.5


def test_cli_exit_code_on_schema_error(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    with open(path, "w") as f:
        yaml.safe_dump({"dataset": "synthetic"}, f)
    code = main(["train", "--config", str(path), "--out", str(tmp_path / "out")])
    assert code != 0
    assert "family" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train command
# ---------------------------------------------------------------------------


def test_cmd_train_produces_artifacts(tmp_path, capsys):
    config = write_config(tmp_path / "c.yaml")
    out = tmp_path / "run"
    code = main(["train", "--config", config, "--out", str(out)])
    assert code == 0
    assert (out / "manifest.json").exists()
    assert (out / "history.jsonl").exists()
    assert list((out / "checkpoints").glob("checkpoint_*.zip"))
    assert list((out / "grids").glob("*.png"))
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "completed"
    assert manifest["config"]["family"] == "anavae"
    line = capsys.readouterr().out.strip().splitlines()[-1]
    payload = json.loads(line)
    assert payload["command"] == "train" and payload["status"] == "completed"


def test_cmd_train_deterministic_history(tmp_path):
    config = write_config(tmp_path / "c.yaml")
    main(["train", "--config", config, "--out", str(tmp_path / "a")])
    main(["train", "--config", config, "--out", str(tmp_path / "b")])
    a = (tmp_path / "a" / "history.jsonl").read_bytes()
    b = (tmp_path / "b" / "history.jsonl").read_bytes()
    assert a == b


def test_cmd_train_refuses_dirty_out_dir(tmp_path, capsys):
    config = write_config(tmp_path / "c.yaml")
    out = tmp_path / "run"
    out.mkdir()
    (out / "junk.txt").write_text("x")
    code = main(["train", "--config", config, "--out", str(out)])
    assert code != 0


# ---------------------------------------------------------------------------
# score command
# ---------------------------------------------------------------------------


def trained_checkpoint(tmp_path):
    config = write_config(tmp_path / "c.yaml")
    out = tmp_path / "train_run"
    assert main(["train", "--config", config, "--out", str(out)]) == 0
    return config, sorted((out / "checkpoints").glob("checkpoint_*.zip"))[-1]


def test_cmd_score_untrained(tmp_path, capsys):
    config = write_config(tmp_path / "c.yaml",
                          metric={"n_sets": 2, "n_observed": 32})
    out = tmp_path / "score_run"
    code = main(["score", "--config", config, "--out", str(out), "--untrained"])
    assert code == 0
    report = json.loads((out / "score_report.json").read_text())
    assert 0.0 <= report["aggregate_score"] <= 1.0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    payload = json.loads(line)
    assert set(payload) >= {"aggregate_score", "aggregate_nmi",
                            "aggregate_distance", "alpha", "n_sets", "seed"}


def test_cmd_score_checkpoint_and_alpha_consistency(tmp_path, capsys):
    config, ckpt = trained_checkpoint(tmp_path)
    out1 = tmp_path / "s1"
    code = main(["score", "--config", config, "--out", str(out1),
                 "--checkpoint", str(ckpt), "--alpha", "0.3"])
    assert code == 0
    report = json.loads((out1 / "score_report.json").read_text())
    assert report["alpha"] == 0.3
    for entry in report["per_set"]:
        expected = 0.3 * entry["nmi"] + 0.7 * (1 - entry["mean_distance"])
        assert entry["score"] == pytest.approx(expected, abs=1e-9)


def test_cmd_score_deterministic(tmp_path):
    config, ckpt = trained_checkpoint(tmp_path)
    for sub in ("s1", "s2"):
        assert main(["score", "--config", config, "--out", str(tmp_path / sub),
                     "--checkpoint", str(ckpt)]) == 0
    a = json.loads((tmp_path / "s1" / "score_report.json").read_text())
    b = json.loads((tmp_path / "s2" / "score_report.json").read_text())
    assert a == b


# ---------------------------------------------------------------------------
# traverse command
# ---------------------------------------------------------------------------


def test_cmd_traverse_grid_files(tmp_path):
    config, ckpt = trained_checkpoint(tmp_path)
    out = tmp_path / "grids"
    code = main(["traverse", "--checkpoint", str(ckpt), "--out", str(out)])
    assert code == 0
    files = sorted(out.glob("traversal_factor*.png"))
    assert len(files) == 4  # synthetic profile has 4 code components

    # layout contract: rows*H + (rows-1)*sep by cols*W + (cols-1)*sep
    img = np.asarray(Image.open(files[0]))
    rows, cols, h, w = 1, 7, 32, 32
    assert img.shape == (rows * h + (rows - 1) * GRID_SEPARATOR,
                         cols * w + (cols - 1) * GRID_SEPARATOR)


def test_traverse_center_column_identical_across_factors(tmp_path):
    # with an all-zero base, the value-0 column decodes the same code in
    # every grid, so those pixels agree pixel-exactly
    bundle = build_bundle("anavae", "synthetic", seed=0)
    out = tmp_path / "g"
    out.mkdir()
    paths = run_traversal_grids(bundle, str(out), seed=0)
    imgs = [np.asarray(Image.open(p)) for p in paths]
    col_start = 3 * (32 + GRID_SEPARATOR)
    centers = [img[:, col_start:col_start + 32] for img in imgs]
    for other in centers[1:]:
        assert np.array_equal(centers[0], other)


def test_assemble_grid_separator_geometry():
    images = np.zeros((3, 5, 1, 8, 8))
    grid = assemble_grid(images, value_range=(0, 1))
    assert grid.shape == (3 * 8 + 2 * GRID_SEPARATOR, 5 * 8 + 4 * GRID_SEPARATOR)
    # separator rows are white
    assert np.all(grid[8:8 + GRID_SEPARATOR, :] == 255)


def test_traverse_gan_rows_vary_noise(tmp_path):
    bundle = build_bundle("anagan", "synthetic", seed=0)
    out = tmp_path / "g"
    out.mkdir()
    paths = run_traversal_grids(bundle, str(out), seed=0, rows=3)
    img = np.asarray(Image.open(paths[0]))
    rows, cols, h, w = 3, 7, 32, 32
    assert img.shape == (rows * h + (rows - 1) * GRID_SEPARATOR,
                         cols * w + (cols - 1) * GRID_SEPARATOR)


# ---------------------------------------------------------------------------
# verify command
# ---------------------------------------------------------------------------


def test_cmd_verify_passes(tmp_path, capsys):
    code = main(["verify", "--out", str(tmp_path / "v")])
    out = capsys.readouterr().out
    assert code == 0
    for suite in ("bound_identity", "gradient_checks", "metric_ideal_case",
                  "projection_distance"):
        assert f"PASS {suite}" in out
    manifest = json.loads((tmp_path / "v" / "manifest.json").read_text())
    assert manifest["status"] == "completed"


def test_verify_negative_injected_affinity_bug():
    # sabotaged affinity must fail with the named invariant
    from anadis.subspace_score import InvariantViolation, cluster

    bad = np.triu(np.ones((6, 6)))
    with pytest.raises(InvariantViolation, match="symmetric"):
        cluster(bad, k=2)
