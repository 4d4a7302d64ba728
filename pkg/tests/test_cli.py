from pathlib import Path

import pytest
import yaml

from hnpm import kernels
from hnpm.cli import _resolve_config, build_parser, main
from hnpm.gradcheck import CASES

FIXTURES = Path(__file__).parent / "fixtures"

TOY = {
    "epochs": 2,
    "batch_size": 16,
    "dataset": {"kind": "synthetic", "k": 3, "d": 8, "n_per_class": 30, "spread": 1.0, "separation": 12.0, "seed": 0},
    "encoder": {"kind": "mlp", "hidden": 8, "n_blocks": 1, "rep_dim": 4},
}


@pytest.fixture
def toy_config(tmp_path):
    path = tmp_path / "toy.yaml"
    path.write_text(yaml.safe_dump(TOY))
    return path


@pytest.fixture
def toy_run(tmp_path, toy_config):
    out = tmp_path / "run"
    assert main(["train", "--config", str(toy_config), "--seed", "1", "--out", str(out)]) == 0
    return out


def test_train_outputs(toy_run):
    names = sorted(p.name for p in toy_run.iterdir())
    assert names == ["config.yaml", "final.hnpm", "manifest.json", "metrics.jsonl"]
    assert len((toy_run / "metrics.jsonl").read_text().splitlines()) == 2


def test_train_missing_config(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "absent.yaml"), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "absent.yaml" in capsys.readouterr().err


def test_train_invalid_field(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("tau: 3.0\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "tau" in capsys.readouterr().err


def test_reference_preset_pins_training_values():
    args = build_parser().parse_args(["train", "--preset", "paper", "--out", "x"])
    cfg = _resolve_config(args)
    assert cfg.tau == 0.5 and cfg.batch_size == 160 and cfg.lr == 0.1 and cfg.clip_norm == 1.0
    assert (cfg.alpha1, cfg.alpha2) == (0.8, 0.1)


def test_train_twice_identical(tmp_path, toy_config, toy_run):
    again = tmp_path / "again"
    assert main(["train", "--config", str(toy_config), "--seed", "1", "--out", str(again)]) == 0
    for name in ("metrics.jsonl", "final.hnpm"):
        assert (again / name).read_bytes() == (toy_run / name).read_bytes()


def test_eval_modes(toy_run, capsys):
    assert main(["eval", "--checkpoint", str(toy_run / "final.hnpm"), "--mode", "linear"]) == 0
    assert "top1: 1.000" in capsys.readouterr().out
    for mode in ("linear", "knn"):
        assert main(["eval", "--checkpoint", str(toy_run / "final.hnpm"), "--mode", mode]) == 0
        report = dict(
            line.split(": ") for line in (toy_run / f"eval_{mode}.txt").read_text().splitlines()
        )
        assert float(report["top5"]) >= float(report["top1"])


def test_eval_corrupt_checkpoint(tmp_path, toy_run):
    data = bytearray((toy_run / "final.hnpm").read_bytes())
    data[100] ^= 0xFF
    bad = tmp_path / "bad.hnpm"
    bad.write_bytes(bytes(data))
    assert main(["eval", "--checkpoint", str(bad)]) == 3


def test_gradcheck_all_passes(capsys):
    assert main(["gradcheck", "--ops", "all", "--trials", "1"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()[1:]
    assert len(rows) == len(CASES)
    assert [r.split()[0] for r in rows] == list(CASES)


def test_gradcheck_detects_perturbed_backward(monkeypatch, capsys):
    real = kernels.pairwise_sqdist_backward
    monkeypatch.setattr(kernels, "pairwise_sqdist_backward", lambda g, a, b: tuple(1.01 * x for x in real(g, a, b)))
    assert main(["gradcheck", "--ops", "pairwise_sqdist", "--trials", "1"]) == 1
    assert "pairwise_sqdist" in capsys.readouterr().err


def test_gradcheck_unknown_op():
    assert main(["gradcheck", "--ops", "fft"]) == 2


def test_ablate_rows(tmp_path, toy_config, capsys):
    code = main(["ablate", "--config", str(toy_config), "--axis", "tau", "--values", "0.0,0.5,1.0", "--out", str(tmp_path / "ab")])
    assert code == 0
    rows = capsys.readouterr().out.strip().splitlines()[1:]
    assert [r.split()[0] for r in rows] == ["0.0", "0.5", "1.0"]
    assert (tmp_path / "ab" / "tau_0.5" / "final.hnpm").is_file()


def test_ablate_hnpm_switch(tmp_path, toy_config, capsys):
    assert main(["ablate", "--config", str(toy_config), "--axis", "hnpm", "--values", "on,off"]) == 0
    assert len(capsys.readouterr().out.strip().splitlines()) == 3
    assert main(["ablate", "--config", str(toy_config), "--axis", "hnpm", "--values", "maybe"]) == 2
    assert main(["ablate", "--config", str(toy_config), "--axis", "depth", "--values", "1"]) == 2


def test_ablate_continues_after_failure(tmp_path, toy_config, capsys):
    assert main(["ablate", "--config", str(toy_config), "--axis", "tau", "--values", "0.5,2.0"]) == 1
    assert len(capsys.readouterr().out.strip().splitlines()) == 3


def test_augment_preview_golden_and_determinism(tmp_path):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    for out in (a, b):
        assert main(["augment-preview", "--in", str(FIXTURES / "preview_in.png"), "--out", str(out), "--seed", "7"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() == (FIXTURES / "preview_seed7.png").read_bytes()


def test_augment_preview_disabled_is_identity(tmp_path):
    from hnpm.cli import read_png

    cfg = tmp_path / "off.yaml"
    cfg.write_text(yaml.safe_dump({"jitter_prob": 0.0, "grayscale_prob": 0.0, "hflip_prob": 0.0, "blur_prob": 0.0,
                                   "crop_scale_range": [1.0, 1.0]}))
    out = tmp_path / "o.png"
    src = FIXTURES / "preview_in.png"
    assert main(["augment-preview", "--in", str(src), "--out", str(out), "--seed", "3", "--config", str(cfg)]) == 0
    assert (read_png(out) == read_png(src)).all()


def test_augment_preview_bad_image(tmp_path):
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"not a png")
    assert main(["augment-preview", "--in", str(junk), "--out", str(tmp_path / "o.png")]) == 2
    assert main(["augment-preview", "--in", str(tmp_path / "nope.png"), "--out", str(tmp_path / "o.png")]) == 2


def test_usage_errors():
    assert main([]) == 2
    assert main(["train"]) == 2
    assert main(["--version"]) == 0
