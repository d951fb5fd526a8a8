import shutil

import numpy as np
import pytest

from sdkit.cli import build_parser, main
from sdkit.depth_io import read_depth_png

pytestmark = pytest.mark.filterwarnings("ignore::sdkit.core.EmptyMaskWarning")


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["synth-gen", "--out", str(root), "--scenes", "10", "--size", "32x64",
                 "--seed", "4"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "r"
    assert main(["train", "--data", str(dataset), "--variant", "CRDR+SFFM+CGM", "--out", str(out),
                 "--epochs", "1", "--deterministic"]) == 0
    return out


def test_synth_gen_layout_and_manifest(dataset):
    assert len(list(dataset.glob("train/*/image/*.png"))) == 8
    text = (dataset / "manifest.txt").read_text()
    assert "command = synth-gen" in text and "seed = 4" in text


def test_synth_gen_reproducible_and_guarded(dataset, tmp_path):
    assert main(["synth-gen", "--out", str(tmp_path / "b"), "--scenes", "10", "--size", "32x64",
                 "--seed", "4"]) == 0
    for f in dataset.rglob("*.png"):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(dataset)).read_bytes()
    assert main(["synth-gen", "--out", str(dataset), "--scenes", "1"]) == 3
    assert main(["synth-gen", "--out", str(tmp_path / "one"), "--scenes", "1",
                 "--size", "16x16"]) == 0


def test_default_scene_count():
    assert build_parser().parse_args(["synth-gen", "--out", "x"]).scenes == 200


def test_usage_errors(capsys, tmp_path):
    assert main(["train", "--data", "d", "--out", "o", "--variant", "BOGUS"]) == 2
    err = capsys.readouterr().err
    assert "CRDR+SFFM+CGM" in err
    assert main(["eval", "--data", "d", "--checkpoint", "c", "--no-such-flag"]) == 2
    assert main(["synth-gen", "--out", str(tmp_path), "--size", "30x64"]) == 2
    assert main([]) == 2


def test_help_lists_every_flag(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, sp in sub.choices.items():
        text = sp.format_help()
        for action in sp._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)


def test_missing_data_dir(tmp_path, capsys):
    rc = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
    assert rc == 3
    assert "error:" in capsys.readouterr().err


def test_train_outputs(trained):
    for name in ("train_log.csv", "manifest.txt", "training_curves.png", "last", "best"):
        assert (trained / name).exists()
    assert "base_width = 8" in (trained / "manifest.txt").read_text()


def test_train_deterministic_twice(dataset, tmp_path, trained):
    out = tmp_path / "again"
    assert main(["train", "--data", str(dataset), "--variant", "CRDR+SFFM+CGM", "--out", str(out),
                 "--epochs", "1", "--deterministic"]) == 0
    assert (out / "train_log.csv").read_bytes() == (trained / "train_log.csv").read_bytes()
    assert (out / "best" / "weights.bin").read_bytes() == (trained / "best" / "weights.bin").read_bytes()


def test_config_file_and_env(dataset, tmp_path, monkeypatch):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("epochs = 1\nvariant = B\n")
    monkeypatch.setenv("SDK_SEED", "3")
    assert main(["train", "--data", str(dataset), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    text = (tmp_path / "o" / "manifest.txt").read_text()
    assert "variant = B" in text and "seed = 3" in text and "base_width = 8" in text


def test_eval_gt_as_prediction_is_zero(dataset, tmp_path, capsys):
    pred = tmp_path / "pred"
    for f in dataset.glob("val/*/groundtruth/*.png"):
        dst = pred / f.parent.parent.name / f.name
        dst.parent.mkdir(parents=True)
        shutil.copy(f, dst)
    assert main(["eval", "--pred-dir", str(pred), "--data", str(dataset), "--out", str(tmp_path / "e")]) == 0
    lines = (tmp_path / "e" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "iRMSE,iMAE,RMSE,MAE"
    assert [float(v) for v in lines[1].split(",")] == [0.0] * 4
    assert (tmp_path / "e" / "per_image_rmse.png").exists()


def test_eval_checkpoint_matches_loop_oracle(dataset, trained, tmp_path):
    from oracles import metrics_loop

    from sdkit.depth_io import load_split
    from sdkit.network import load_checkpoint
    from sdkit.trainer import predict

    assert main(["eval", "--checkpoint", str(trained / "best"), "--data", str(dataset),
                 "--out", str(tmp_path / "e")]) == 0
    row = [float(v) for v in (tmp_path / "e" / "metrics.csv").read_text().splitlines()[1].split(",")]
    samples = load_split(dataset, "val")
    preds = predict(load_checkpoint(trained / "best"), samples)
    ref = np.mean([metrics_loop(p, s.gt.depth) for p, s in zip(preds, samples)], axis=0)
    np.testing.assert_allclose(row, ref, rtol=1e-5)


def test_infer_outputs(dataset, trained, tmp_path):
    img = next(dataset.glob("val/*/image/*.png"))
    sparse = img.parent.parent / "sparse" / img.name
    out = tmp_path / "pred.png"
    rc = main(["infer", "--checkpoint", str(trained / "best"), "--image", str(img),
               "--sparse", str(sparse), "--out", str(out), "--dump-intermediates",
               str(tmp_path / "dump"), "--figure", str(tmp_path / "fig.png")])
    assert rc == 0
    d = read_depth_png(out)
    assert d.shape == (32, 64) and np.all(np.isfinite(d.depth))
    assert len(list((tmp_path / "dump").glob("*.png"))) == 6
    assert (tmp_path / "fig.png").exists()


def test_infer_pads_odd_sizes(dataset, trained, tmp_path):
    from PIL import Image
    img = next(dataset.glob("val/*/image/*.png"))
    sparse = img.parent.parent / "sparse" / img.name
    Image.fromarray(np.asarray(Image.open(img))[:30, :61]).save(tmp_path / "c.png")
    Image.fromarray(np.asarray(Image.open(sparse))[:30, :61]).save(tmp_path / "s.png")
    assert main(["infer", "--checkpoint", str(trained / "best"), "--image", str(tmp_path / "c.png"),
                 "--sparse", str(tmp_path / "s.png"), "--out", str(tmp_path / "p.png")]) == 0
    assert read_depth_png(tmp_path / "p.png").shape == (30, 61)
    assert main(["infer", "--checkpoint", str(trained / "best"), "--image", str(tmp_path / "c.png"),
                 "--sparse", str(sparse), "--out", str(tmp_path / "q.png")]) == 3


def test_ablate(dataset, tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", "--data", str(dataset), "--out", str(out), "--epochs", "1"]) == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0] == "variant,params,iRMSE,iMAE,RMSE,MAE,status" and len(rows) == 5
    assert (out / "ablation.png").exists() and (out / "manifest.txt").exists()
