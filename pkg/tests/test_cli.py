import json
import os

import pytest
import torch

from genhance.cli import (
    EXIT_CONFIG,
    EXIT_INCOMPATIBLE,
    EXIT_OK,
    apply_overrides,
    config_hash,
    main,
)
from genhance.errors import ConfigurationError
from genhance.tokenizer import save_tokenizer

TINY_DATA = {"kind": "shapes", "size": 32, "num_classes": 4, "train_count": 48, "val_count": 16}
TINY_TOKENIZER = {"vocab_size": 32, "code_dim": 8, "hidden": 16, "epochs": 1, "batch_size": 32}
TINY_TRAIN = {
    "objective": "revdet",
    "epochs": 1,
    "batch_size": 16,
    "enhancer_dim": 32,
    "enhancer_depth": 2,
    "enhancer_heads": 2,
    "generator_depth": 2,
    "share_layers": 1,
    "panel_images": 1,
}


def write_config(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)
    return os.fspath(path)


@pytest.fixture(scope="module")
def trained_tokenizer_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_tok")
    cfg = write_config(root / "cfg.json", {"data": TINY_DATA, "tokenizer": TINY_TOKENIZER})
    out = root / "out"
    assert main(["tokenizer-train", "--config", cfg, "--out", os.fspath(out), "--seed", "1"]) == EXIT_OK
    return out


def test_apply_overrides_paths():
    cfg = apply_overrides({"a": {"b": 1}}, ["a.b=2", "a.c=hello", "top=3.5"])
    assert cfg == {"a": {"b": 2, "c": "hello"}, "top": 3.5}
    with pytest.raises(ConfigurationError):
        apply_overrides({}, ["noequals"])


def test_config_hash_stable():
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_tokenizer_train_outputs(trained_tokenizer_dir):
    out = trained_tokenizer_dir
    assert (out / "tokenizer.ckpt").exists()
    assert (out / "report.json").exists()
    assert (out / "dataset_manifest.json").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "tokenizer-train"
    assert manifest["seed"] == 1
    assert len(manifest["config_hash"]) == 64


def test_out_dir_protection(tmp_path, trained_tokenizer_dir):
    cfg = write_config(tmp_path / "cfg.json", {"data": TINY_DATA, "tokenizer": TINY_TOKENIZER})
    out = tmp_path / "out"
    out.mkdir()
    (out / "existing.txt").write_text("keep me")
    code = main(["tokenizer-train", "--config", cfg, "--out", os.fspath(out)])
    assert code == EXIT_CONFIG
    assert (out / "existing.txt").read_text() == "keep me"


def test_missing_config_key_is_config_error(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", {"data": TINY_DATA})  # no tokenizer_ckpt
    code = main(["pretrain", "--config", cfg, "--out", os.fspath(tmp_path / "o")])
    assert code == EXIT_CONFIG


def test_bad_config_value_is_config_error(tmp_path):
    cfg = write_config(
        tmp_path / "cfg.json",
        {"data": TINY_DATA, "tokenizer": {**TINY_TOKENIZER, "vocab_size": 1}},
    )
    code = main(["tokenizer-train", "--config", cfg, "--out", os.fspath(tmp_path / "o")])
    assert code == EXIT_CONFIG


def test_pretrain_probe_visualize_pipeline(tmp_path, trained_tokenizer_dir):
    tok_ckpt = os.fspath(trained_tokenizer_dir / "tokenizer.ckpt")
    pre_cfg = write_config(
        tmp_path / "pre.json",
        {"data": TINY_DATA, "tokenizer_ckpt": tok_ckpt, "train": TINY_TRAIN},
    )
    pre_out = tmp_path / "pre"
    assert main(["pretrain", "--config", pre_cfg, "--out", os.fspath(pre_out), "--seed", "2"]) == EXIT_OK
    assert (pre_out / "metrics.csv").exists()
    assert (pre_out / "enhancer.ckpt").exists()
    report = json.loads((pre_out / "report.json").read_text())
    assert "revdet_val" in report

    probe_cfg = write_config(
        tmp_path / "probe.json",
        {"data": TINY_DATA, "enhancer_ckpt": os.fspath(pre_out / "enhancer.ckpt")},
    )
    probe_out = tmp_path / "probe"
    assert main(["probe", "--config", probe_cfg, "--out", os.fspath(probe_out)]) == EXIT_OK
    payload = json.loads((probe_out / "probe.json").read_text())
    assert 0.0 <= payload["top1"] <= 1.0

    viz_cfg = write_config(
        tmp_path / "viz.json",
        {
            "data": TINY_DATA,
            "tokenizer_ckpt": tok_ckpt,
            "generator_ckpt": os.fspath(pre_out / "generator.ckpt"),
            "count": 1,
            "n_variants": 4,
        },
    )
    viz_out = tmp_path / "viz"
    assert main(["visualize", "--config", viz_cfg, "--out", os.fspath(viz_out), "--seed", "3"]) == EXIT_OK
    assert (viz_out / "panel_000.png").exists()
    # 1 original + 1 masked + 4 variants, 32px panels with 2px separators
    from PIL import Image

    with Image.open(viz_out / "panel_000.png") as im:
        assert im.size == (6 * 32 + 5 * 2, 32)


def test_visualize_zero_variants(tmp_path, trained_tokenizer_dir):
    tok_ckpt = os.fspath(trained_tokenizer_dir / "tokenizer.ckpt")
    pre_cfg = write_config(
        tmp_path / "pre.json",
        {"data": TINY_DATA, "tokenizer_ckpt": tok_ckpt,
         "train": {**TINY_TRAIN, "panel_images": 0}},
    )
    pre_out = tmp_path / "pre"
    assert main(["pretrain", "--config", pre_cfg, "--out", os.fspath(pre_out)]) == EXIT_OK
    viz_cfg = write_config(
        tmp_path / "viz.json",
        {"data": TINY_DATA, "tokenizer_ckpt": tok_ckpt,
         "generator_ckpt": os.fspath(pre_out / "generator.ckpt"),
         "count": 1, "n_variants": 0},
    )
    viz_out = tmp_path / "viz"
    assert main(["visualize", "--config", viz_cfg, "--out", os.fspath(viz_out)]) == EXIT_OK
    from PIL import Image

    with Image.open(viz_out / "panel_000.png") as im:
        assert im.size == (2 * 32 + 2, 32)


def test_visualize_deterministic_bytes(tmp_path, trained_tokenizer_dir):
    tok_ckpt = os.fspath(trained_tokenizer_dir / "tokenizer.ckpt")
    pre_cfg = write_config(
        tmp_path / "pre.json",
        {"data": TINY_DATA, "tokenizer_ckpt": tok_ckpt,
         "train": {**TINY_TRAIN, "panel_images": 0}},
    )
    pre_out = tmp_path / "pre"
    assert main(["pretrain", "--config", pre_cfg, "--out", os.fspath(pre_out)]) == EXIT_OK
    viz_cfg = write_config(
        tmp_path / "viz.json",
        {"data": TINY_DATA, "tokenizer_ckpt": tok_ckpt,
         "generator_ckpt": os.fspath(pre_out / "generator.ckpt"), "count": 1},
    )
    out_a, out_b = tmp_path / "va", tmp_path / "vb"
    assert main(["visualize", "--config", viz_cfg, "--out", os.fspath(out_a), "--seed", "5"]) == EXIT_OK
    assert main(["visualize", "--config", viz_cfg, "--out", os.fspath(out_b), "--seed", "5"]) == EXIT_OK
    assert (out_a / "panel_000.png").read_bytes() == (out_b / "panel_000.png").read_bytes()


def test_visualize_incompatible_checkpoints(tmp_path, trained_tokenizer_dir):
    from genhance.backbones import GeneratorConfig, MaskedTokenGenerator
    from genhance.training import TrainState, save_generator

    tok_ckpt = os.fspath(trained_tokenizer_dir / "tokenizer.ckpt")
    gen = MaskedTokenGenerator(
        GeneratorConfig(image_size=32, patch=8, dim=16, depth=1, heads=2, vocab_size=99)
    )

    class _FakeBundle:
        generator = gen

    class _FakeState:
        bundle = _FakeBundle()

    gen_path = tmp_path / "gen.ckpt"
    save_generator(_FakeState(), gen_path)
    viz_cfg = write_config(
        tmp_path / "viz.json",
        {"data": TINY_DATA, "tokenizer_ckpt": tok_ckpt, "generator_ckpt": os.fspath(gen_path)},
    )
    code = main(["visualize", "--config", viz_cfg, "--out", os.fspath(tmp_path / "viz")])
    assert code == EXIT_INCOMPATIBLE


def test_ablate_matrix(tmp_path, trained_tokenizer_dir):
    tok_ckpt = os.fspath(trained_tokenizer_dir / "tokenizer.ckpt")
    cfg = write_config(
        tmp_path / "ablate.json",
        {
            "data": {**TINY_DATA, "train_count": 32, "val_count": 16},
            "tokenizer_ckpt": tok_ckpt,
            "train": {**TINY_TRAIN, "panel_images": 0},
            "axes": {"ratio_min": [0.4, 0.5], "mask_strategy": ["random", "blockwise"]},
        },
    )
    out = tmp_path / "ablate"
    assert main(["ablate", "--config", cfg, "--out", os.fspath(out)]) == EXIT_OK
    with open(out / "results.csv") as f:
        lines = f.read().strip().splitlines()
    assert len(lines) == 1 + 4  # header + one row per cell
    run_dirs = [d for d in os.listdir(out) if os.path.isdir(out / d)]
    assert len(run_dirs) == 4
    for d in run_dirs:
        assert (out / d / "manifest.json").exists()


def test_ablate_skips_duplicate_cells(tmp_path, trained_tokenizer_dir):
    tok_ckpt = os.fspath(trained_tokenizer_dir / "tokenizer.ckpt")
    cfg = write_config(
        tmp_path / "ablate.json",
        {
            "data": {**TINY_DATA, "train_count": 32, "val_count": 16},
            "tokenizer_ckpt": tok_ckpt,
            "train": {**TINY_TRAIN, "panel_images": 0},
            "axes": {"ratio_min": [0.5, 0.5]},
        },
    )
    out = tmp_path / "ablate"
    assert main(["ablate", "--config", cfg, "--out", os.fspath(out)]) == EXIT_OK
    with open(out / "results.csv") as f:
        lines = f.read().strip().splitlines()
    assert len(lines) == 1 + 1  # duplicate collapsed


def test_set_overrides_reach_training(tmp_path, trained_tokenizer_dir):
    tok_ckpt = os.fspath(trained_tokenizer_dir / "tokenizer.ckpt")
    pre_cfg = write_config(
        tmp_path / "pre.json",
        {"data": TINY_DATA, "tokenizer_ckpt": tok_ckpt,
         "train": {**TINY_TRAIN, "panel_images": 0}},
    )
    out = tmp_path / "o"
    assert (
        main([
            "pretrain", "--config", pre_cfg, "--out", os.fspath(out),
            "--set", "train.objective=respix", "--set", "train.epochs=1",
        ])
        == EXIT_OK
    )
    report = json.loads((out / "report.json").read_text())
    assert "revdet_val" not in report  # respix run has no detection metrics


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run(
        [sys.executable, "-m", "genhance", "--version"], capture_output=True, text=True
    )
    assert proc.returncode == 0
    assert proc.stdout.strip() == "0.1.0"
