import json

import numpy as np
import pytest
import yaml
from PIL import Image

from fse.checkpoint import save_checkpoint
from fse.cli import main, render_table
from fse.metrics import MetricReport, mse, psnr
from fse.imaging import load_paired_dataset
from fse.synth import make_clean_image
from fse.imaging import save_image
from fse.train import TrainConfig, train

from conftest import synthetic_pairs, tiny_config


@pytest.fixture
def clean_dir(tmp_path):
    d = tmp_path / "clean"
    d.mkdir()
    for i in range(3):
        save_image(make_clean_image(32, i), d / f"face{i}.png")
    return d


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_synth_counts_and_determinism(clean_dir, tmp_path, capsys):
    assert main(["synth", "--clean", str(clean_dir), "--count", "2", "--seed", "4", "--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert "pairs written: 6" in out and "opacity" in out and "feather" in out
    pairs = load_paired_dataset(tmp_path / "a")
    assert len(pairs) == 6
    spec = json.loads((tmp_path / "a" / "spec" / f"{pairs[0].id}.json").read_text())
    assert 0.15 <= spec["opacity"] <= 0.45
    assert main(["synth", "--clean", str(clean_dir), "--count", "2", "--seed", "4", "--out", str(tmp_path / "b")]) == 0
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_synth_validation(clean_dir, tmp_path, capsys):
    assert main(["synth", "--clean", str(clean_dir), "--count", "0", "--out", str(tmp_path)]) == 2
    assert "count must be positive" in capsys.readouterr().err
    assert main(["synth", "--clean", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 2


def _write_config(path, data_root, **train):
    cfg = {
        "seed": 0,
        "data": {"root": str(data_root)},
        "model": {
            "mask": {"base_channels": 8, "num_residual_blocks": 1},
            "coarse": {"base_channels": 4, "num_experts": 2},
            "refine": {"embed_dim": 8, "num_heads": 2, "irc_hidden": 4},
        },
        "train": {"total_steps": 10, "batch_size": 2, **train},
        "augment": {"crop_size": 16},
    }
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture
def data_root(clean_dir, tmp_path):
    root = tmp_path / "data"
    assert main(["synth", "--clean", str(clean_dir), "--count", "1", "--out", str(root)]) == 0
    return root


def test_train_smoke_and_resume(data_root, tmp_path):
    cfg = _write_config(tmp_path / "run.yaml", data_root, checkpoint_every=5)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    lines = (out / "loss_log.csv").read_text().splitlines()
    assert len(lines) == 11 and lines[0].startswith("step,lr,total")
    assert (out / "last.fse").is_file() and (out / "step_0000005.fse").is_file()

    # resume from step 5 into a fresh directory: the continued log starts at step 6
    out2 = tmp_path / "resumed"
    assert main(["train", "--config", str(cfg), "--out", str(out2), "--resume", str(out / "step_0000005.fse")]) == 0
    resumed = (out2 / "loss_log.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in resumed[1:]] == [str(s) for s in range(6, 11)]
    assert resumed[1:] == lines[6:]


def test_train_unknown_key(data_root, tmp_path, capsys):
    cfg = _write_config(tmp_path / "bad.yaml", data_root, lrr=0.1)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "lrr" in capsys.readouterr().err


def test_train_nonfinite_exit_code(tmp_path, capsys):
    root = tmp_path / "nan"
    for sub in ("shadow", "target"):
        (root / sub).mkdir(parents=True)
    # an absurd learning rate blows the weights up within a few steps
    pairs = synthetic_pairs(2, 32)
    for p in pairs:
        save_image(p.shadow, root / "shadow" / f"{p.id}.png")
        save_image(p.target, root / "target" / f"{p.id}.png")
    cfg = _write_config(tmp_path / "nan.yaml", root, lr_init=1e30, total_steps=20)
    code = main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 3
    assert "step" in capsys.readouterr().err


def test_output_root_env(data_root, tmp_path, monkeypatch):
    monkeypatch.setenv("FSE_OUTPUT_ROOT", str(tmp_path / "envroot"))
    cfg = _write_config(tmp_path / "envrun.yaml", data_root, total_steps=1)
    assert main(["train", "--config", str(cfg)]) == 0
    assert (tmp_path / "envroot" / "envrun" / "last.fse").is_file()


@pytest.fixture
def identity_ckpt(tmp_path):
    bundle, _ = train(synthetic_pairs(1, 32), tiny_config(), TrainConfig(total_steps=0, stages=("mask",)))
    return save_checkpoint(bundle, tmp_path / "identity.fse")


def test_eval_identity_and_determinism(identity_ckpt, data_root, tmp_path, capsys):
    args = ["eval", "--checkpoint", str(identity_ckpt), "--data", str(data_root)]
    assert main(args + ["--out", str(tmp_path / "e1")]) == 0
    assert "proxy" in capsys.readouterr().out
    assert main(args + ["--out", str(tmp_path / "e2")]) == 0
    t1 = (tmp_path / "e1" / "report.txt").read_text()
    assert t1 == (tmp_path / "e2" / "report.txt").read_text()
    report = MetricReport.from_text(t1)
    pairs = load_paired_dataset(data_root)
    assert abs(report.psnr - np.mean([psnr(p.shadow, p.target) for p in pairs])) < 1e-5
    assert abs(report.mse - np.mean([float(mse(p.shadow.double(), p.target.double())) for p in pairs])) < 1e-7


@pytest.mark.parametrize("res", [24, 48])
def test_eval_resolution(identity_ckpt, data_root, tmp_path, res):
    out = tmp_path / f"r{res}"
    assert main(["eval", "--checkpoint", str(identity_ckpt), "--data", str(data_root), "--resolution", str(res),
                 "--save-outputs", "--out", str(out)]) == 0
    imgs = sorted((out / "outputs").glob("*.png"))
    assert imgs and all(Image.open(p).size == (res, res) for p in imgs)


def test_eval_pairing_failure(identity_ckpt, data_root, tmp_path):
    (data_root / "shadow" / "orphan.png").write_bytes((data_root / "shadow").glob("*.png").__next__().read_bytes())
    assert main(["eval", "--checkpoint", str(identity_ckpt), "--data", str(data_root), "--out", str(tmp_path)]) == 2


def test_infer(identity_ckpt, clean_dir, tmp_path):
    out = tmp_path / "inf"
    assert main(["infer", "--checkpoint", str(identity_ckpt), str(clean_dir), "--out", str(out), "--save-mask"]) == 0
    for i in range(3):
        img = Image.open(out / f"face{i}.png")
        assert img.size == (32, 32)
        m = np.asarray(Image.open(out / f"face{i}_mask.png"))
        assert m.ndim == 2 and m.min() >= 0 and m.max() <= 255
    # identity pipeline: output equals the quantized input
    assert np.array_equal(np.asarray(Image.open(out / "face0.png")), np.asarray(Image.open(clean_dir / "face0.png")))


def test_infer_unreadable(identity_ckpt, tmp_path, capsys):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"garbage")
    assert main(["infer", "--checkpoint", str(identity_ckpt), str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "broken.png" in capsys.readouterr().err


def test_report_table(tmp_path, capsys):
    for method, ds, val in [("FSE", "synthA", 31.2), ("Input", "synthA", 26.4), ("FSE", "synthB", 28.0)]:
        d = tmp_path / method / ds
        d.mkdir(parents=True)
        r = MetricReport(psnr=val, ssim=0.95, mse=0.001, lpips=0.02, n_samples=4, dataset=ds, method=method)
        (d / "report.txt").write_text(r.to_text())
    files = sorted(str(p) for p in tmp_path.rglob("report.txt"))
    assert main(["report", *files, "--out", str(tmp_path / "table.txt")]) == 0
    table = capsys.readouterr().out
    lines = table.splitlines()
    assert "synthA" in lines[0] and "synthB" in lines[0]
    assert "PSNR" in lines[1] and "LPIPS*" in lines[1]
    row = next(l for l in lines if l.startswith("FSE"))
    assert "31.20" in row and "28.00" in row
    assert "proxy" in lines[-1]
    assert (tmp_path / "table.txt").read_text() == table


def test_render_table_missing_cell():
    a = MetricReport(psnr=30, ssim=0.9, mse=0.001, lpips=None, n_samples=1, lpips_proxy=False, dataset="A", method="m1")
    b = MetricReport(psnr=20, ssim=0.8, mse=0.01, lpips=None, n_samples=1, lpips_proxy=False, dataset="B", method="m2")
    table = render_table([a, b])
    assert "n/a" in table and "LPIPS*" not in table


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
