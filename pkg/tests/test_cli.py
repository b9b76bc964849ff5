import json

import numpy as np
import oracles
import pytest
from PIL import Image

from sspfusion.cli import main
from sspfusion.imagedata import (
    read_image,
    rgb_to_yuv,
    save_png,
    write_synthetic_dataset,
)
from sspfusion.metrics import MetricReport, ssim_255
from sspfusion.network import ModelConfig, SSPFusionNet, save_checkpoint
from sspfusion.structmap import sobel_magnitude


@pytest.fixture
def checkpoint(tmp_path):
    model = SSPFusionNet(ModelConfig(base_channels=4, residual_blocks_per_level=1, seed=3))
    return save_checkpoint(tmp_path / "ckpt.npz", model)


def test_fuse_then_eval_round_trip(toy_dataset, checkpoint, tmp_path):
    fused = tmp_path / "fused"
    assert main(["fuse", "--checkpoint", str(checkpoint), "--data", str(toy_dataset.root_path), "--out", str(fused)]) == 0
    pngs = sorted(fused.glob("*.png"))
    assert [p.stem for p in pngs] == toy_dataset.pair_ids
    assert all(Image.open(p).size == (64, 64) and Image.open(p).mode == "RGB" for p in pngs)
    assert json.loads((fused / "manifest.json").read_text())["command"] == "fuse"

    rep_dir = tmp_path / "rep"
    assert main(["eval", "--data", str(toy_dataset.root_path), "--fused", str(fused), "--out", str(rep_dir)]) == 0
    report = MetricReport.read_json(rep_dir / "report.json")
    for m, agg in report.aggregate.items():
        vals = [report.per_pair[p][m] for p in toy_dataset.pair_ids]
        assert abs(agg - sum(vals) / len(vals)) < 1e-9
    assert (rep_dir / "report.csv").read_text().splitlines()[-1].startswith("aggregate,")
    assert (rep_dir / "metrics.png").stat().st_size > 0


def test_fuse_rerun_is_byte_identical(toy_dataset, checkpoint, tmp_path):
    for name, jobs in (("a", "1"), ("b", "3")):
        assert main(["--seed", "1", "--jobs", jobs, "fuse", "--checkpoint", str(checkpoint), "--data", str(toy_dataset.root_path),
                     "--out", str(tmp_path / name)]) == 0
    for p in (tmp_path / "a").glob("*.png"):
        assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()


def test_non_divisible_size_round_trips(checkpoint, tmp_path):
    root = write_synthetic_dataset(tmp_path / "odd", 1, 250, 250, seed=2).root_path
    assert main(["fuse", "--checkpoint", str(checkpoint), "--data", str(root), "--out", str(tmp_path / "f")]) == 0
    assert Image.open(tmp_path / "f" / "pair000.png").size == (250, 250)


def test_fuse_errors(toy_dataset, checkpoint, tmp_path):
    assert main(["fuse", "--checkpoint", str(tmp_path / "none.npz"), "--data", str(toy_dataset.root_path),
                 "--out", str(tmp_path / "x")]) == 2
    empty = tmp_path / "empty"
    (empty / "ir").mkdir(parents=True)
    (empty / "vi").mkdir()
    assert main(["fuse", "--checkpoint", str(checkpoint), "--data", str(empty), "--out", str(tmp_path / "y")]) == 3


def test_eval_visible_copy_beats_source_baseline(toy_dataset, tmp_path):
    fused = tmp_path / "vi_copy"
    for pair in toy_dataset:
        save_png(np.repeat(pair.vi_y[..., None], 3, axis=2), fused / f"{pair.pair_id}.png")
    assert main(["eval", "--data", str(toy_dataset.root_path), "--fused", str(fused), "--out", str(tmp_path / "r")]) == 0
    report = MetricReport.read_json(tmp_path / "r" / "report.json")
    for pair in toy_dataset:
        baseline = ssim_255(pair.vi_y * 255, pair.ir_y * 255)
        assert report.per_pair[pair.pair_id]["SSIM"] >= baseline


def test_eval_missing_fused_image(toy_dataset, tmp_path):
    fused = tmp_path / "partial"
    pair = next(iter(toy_dataset))
    save_png(np.repeat(pair.vi_y[..., None], 3, axis=2), fused / f"{pair.pair_id}.png")
    assert main(["eval", "--data", str(toy_dataset.root_path), "--fused", str(fused), "--out", str(tmp_path / "r")]) == 1
    report = MetricReport.read_json(tmp_path / "r" / "report.json")
    assert list(report.per_pair) == [pair.pair_id]
    assert [s["pair_id"] for s in report.skipped] == toy_dataset.pair_ids[1:]
    assert report.aggregate == report.per_pair[pair.pair_id]


def test_structure_map_outputs(tmp_path, toy_dataset):
    src = toy_dataset.root_path / "vi" / "pair000.png"
    assert main(["structure-map", "--image", str(src), "--levels", "3", "--out", str(tmp_path / "s")]) == 0
    sizes = [Image.open(tmp_path / "s" / f"pair000_level{k}.png").size for k in (1, 2, 3)]
    assert sizes == [(64, 64), (32, 32), (16, 16)]
    level1 = np.asarray(Image.open(tmp_path / "s" / "pair000_level1.png"))
    assert set(np.unique(level1)) <= {0, 255}
    luma = rgb_to_yuv(read_image(src, "RGB"))[..., 0]
    expected = oracles.binarize(sobel_magnitude(luma), "edge") * 255
    np.testing.assert_array_equal(level1, expected)
    assert (tmp_path / "s" / "pair000_pyramid.png").exists()
    assert (tmp_path / "s" / "manifest.json").exists()


def test_structure_map_constant_literal_polarity_is_white(tmp_path):
    src = tmp_path / "flat.png"
    Image.fromarray(np.full((32, 32), 90, dtype=np.uint8)).save(src)
    assert main(["structure-map", "--image", str(src), "--polarity", "literal", "--out", str(tmp_path / "s")]) == 0
    for k in (1, 2, 3):
        assert (np.asarray(Image.open(tmp_path / "s" / f"flat_level{k}.png")) == 255).all()


def test_structure_map_too_small(tmp_path):
    src = tmp_path / "tiny.png"
    Image.fromarray(np.zeros((3, 3), dtype=np.uint8)).save(src)
    assert main(["structure-map", "--image", str(src), "--levels", "3", "--out", str(tmp_path / "s")]) == 1


def test_unknown_flag_exits_64(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fuse", "--bogus"])
    assert exc.value.code == 64
    assert "usage" in capsys.readouterr().err


def test_missing_out_is_usage_error(toy_dataset, checkpoint):
    assert main(["fuse", "--checkpoint", str(checkpoint), "--data", str(toy_dataset.root_path)]) == 64


def test_bad_config_key_exits_65(toy_dataset, tmp_path, caplog):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learning_rate": 1}))
    assert main(["train", "--config", str(cfg), "--data", str(toy_dataset.root_path), "--run-dir", str(tmp_path / "r")]) == 65
    assert "learning_rate" in caplog.text


TRAIN_SMALL = ["--crop", "32", "--batch-size", "2", "--base-channels", "4", "--residual-blocks-per-level", "1"]


def test_train_records_ablation_and_fuses(toy_dataset, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SSPFUSION_MAX_STEPS", "3")
    run = tmp_path / "run"
    code = main(["train", "--data", str(toy_dataset.root_path), "--run-dir", str(run), "--spf-enabled", "false", *TRAIN_SMALL])
    assert code == 0
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["ablation"] == {"sfe_enabled": True, "spf_enabled": False}
    assert manifest["config"]["max_steps"] == 3 and manifest["steps"] == 3
    ckpt = capsys.readouterr().out.strip().splitlines()[-1]
    assert (run / "loss_curve.png").exists()
    assert main(["fuse", "--checkpoint", ckpt, "--data", str(toy_dataset.root_path), "--out", str(tmp_path / "f")]) == 0
    assert json.loads((tmp_path / "f" / "manifest.json").read_text())["config"]["spf_enabled"] is False


def test_pretrain_then_train_with_init(toy_dataset, tmp_path, capsys):
    common = ["--data", str(toy_dataset.root_path), *TRAIN_SMALL, "--pretrain-steps", "2", "--max-steps", "2"]
    assert main(["pretrain", "--run-dir", str(tmp_path / "pre"), *common]) == 0
    pre = capsys.readouterr().out.strip().splitlines()[-1]
    assert main(["train", "--run-dir", str(tmp_path / "main"), "--init", pre, *common]) == 0
    assert main(["train", "--run-dir", str(tmp_path / "x"), "--init", str(tmp_path / "nope.npz"), *common]) == 2


def test_config_precedence(toy_dataset, tmp_path, monkeypatch):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"max_steps": 2, "seed": 5, "alpha": 0.5}))
    monkeypatch.setenv("SSPFUSION_SEED", "6")
    run = tmp_path / "r"
    assert main(["train", "--config", str(cfg), "--data", str(toy_dataset.root_path), "--run-dir", str(run),
                 "--alpha", "0.25", *TRAIN_SMALL]) == 0
    conf = json.loads((run / "manifest.json").read_text())["config"]
    assert (conf["max_steps"], conf["seed"], conf["alpha"]) == (2, 6, 0.25)
