import json

import numpy as np
import pytest
import yaml
from PIL import Image

from conftest import tiny_config
from obow.cli import main
from obow.data import make_shapes_dataset


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ds = make_shapes_dataset(n_images=24, size=64, seed=0, n_classes=4)
    data = root / "data"
    for n, (img, label) in enumerate(zip(ds.images, ds.labels)):
        d = data / ds.class_names[label]
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(d / f"{n:03d}.png")
    cfg = tiny_config(root, epochs=1, data=str(data), dtype="float32")
    cfg_path = root / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg.to_dict()))
    return root, cfg_path, data


def _json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_train_and_resume(trained, capsys):
    root, cfg_path, _ = trained
    assert main(["train", "--config", str(cfg_path)]) == 0
    out = _json(capsys)
    lines = (root / "run" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 24 // 4
    assert out["checkpoint"].endswith("checkpoint_last.pt")
    assert main(["train", "--config", str(cfg_path), "--resume", out["checkpoint"]]) == 0
    assert (root / "run" / "metrics.jsonl").read_text().splitlines() == lines


def test_eval_commands(trained, capsys):
    root, cfg_path, data = trained
    ckpt = root / "run" / "checkpoint_last.pt"
    if not ckpt.exists():
        main(["train", "--config", str(cfg_path)])
        capsys.readouterr()
    assert main(["eval-linear", "--ckpt", str(ckpt), "--data", str(data), "--epochs", "3"]) == 0
    res = _json(capsys)
    assert 0.0 <= res["top1"] <= 1.0 and res["test_size"] == 4
    assert main(["eval-fewshot", "--ckpt", str(ckpt), "--data", str(data), "--n-way", "3", "--k-shot", "1",
                 "--episodes", "5", "--seed", "1"]) == 0
    res = _json(capsys)
    assert 0.0 <= res["accuracy"] <= 1.0 and res["episodes"] == 5
    out_dir = root / "words"
    assert main(["inspect-words", "--ckpt", str(ckpt), "--data", str(data), "--words", "0,3", "--top-k", "8",
                 "--out", str(out_dir)]) == 0
    res = _json(capsys)
    assert set(res) == {"0", "3"} and all(len(v) == 8 for v in res.values())
    assert len(list(out_dir.glob("*.png"))) == 2


def test_cli_errors(trained, capsys, tmp_path):
    root, cfg_path, data = trained
    bad = tmp_path / "bad.yaml"
    bad.write_text("vocab_size: 1\n")
    assert main(["train", "--config", str(bad), "--data", str(data)]) == 1
    junk = tmp_path / "x.pt"
    junk.write_bytes(b"junk")
    assert main(["eval-linear", "--ckpt", str(junk), "--data", str(data)]) == 1
    assert "error" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["no-such-command"])
