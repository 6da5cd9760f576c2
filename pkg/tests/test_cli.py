import csv

import numpy as np
import pytest

from anatomy_modality import cli
from anatomy_modality.factor_model import NumericFailure

TINY = ["--set", "base_filters=4", "--set", "decoder_filters=4", "--set", "unlabeled_pool=8", "--set", "learning_rate=1e-3"]


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "d"
    assert cli.dispatch(["generate-data", "--subjects", "4", "--seed", "7", "--phases", "4", "--slices", "1",
                         "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    ck = tmp_path_factory.mktemp("run") / "model.ckpt"
    code = cli.dispatch(["train", "--data-root", str(dataset), "--mode", "sdnet", "--fold", "0",
                         "--epochs", "5", "--out", str(ck), *TINY])
    assert code == 0
    return ck


def test_generate_data_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.dispatch(["generate-data", "--subjects", "20", "--seed", "7", "--out", str(d) + "/"]) == 0
    ta, tb = _tree(a), _tree(b)
    assert len(ta) > 20 * 30 and ta == tb
    assert (tmp_path / "a.run.txt").is_file()


def test_missing_data_root_names_the_flag(tmp_path, capsys):
    assert cli.dispatch(["train", "--out", str(tmp_path / "m.ckpt")]) == 1
    assert "--data-root" in capsys.readouterr().err


def test_unknown_flag_and_subcommand(capsys):
    assert cli.dispatch(["generate-data", "--out", "x", "--frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert cli.dispatch(["launch"]) == 1


def test_invalid_values_exit_1(tmp_path, dataset):
    assert cli.dispatch(["generate-data", "--subjects", "2", "--out", str(tmp_path / "x")]) == 1
    assert cli.dispatch(["train", "--data-root", str(tmp_path / "missing"), "--out", str(tmp_path / "m")]) == 1
    assert cli.dispatch(["train", "--data-root", str(dataset), "--out", str(tmp_path / "m"), "--set", "bogus=1"]) == 1
    assert cli.dispatch(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data-root", str(dataset)]) == 1


def test_numeric_failure_exit_2(tmp_path, dataset, monkeypatch):
    def boom(*a, **k):
        raise NumericFailure("loss became nan")

    monkeypatch.setattr(cli, "fit", boom)
    assert cli.dispatch(["train", "--data-root", str(dataset), "--out", str(tmp_path / "m.ckpt")]) == 2


def test_config_file_with_overrides(tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("# desk scale\nlearning_rate=0.001\nmax_epochs=3\nbase_filters=8\nweight_adv=1\n")
    args = cli.build_parser().parse_args(["train", "--data-root", "d", "--out", "m", "--config", str(cfg),
                                          "--epochs", "9", "--mode", "gan"])
    train_cfg, model_kw, _ = cli._train_options(args)
    assert train_cfg.learning_rate == 0.001 and train_cfg.max_epochs == 9
    assert train_cfg.mode == "gan_baseline" and train_cfg.weights.adv == 1.0
    assert model_kw == {"base_filters": 8}


def test_smoke_train_then_eval(checkpoint, dataset, tmp_path):
    losses = checkpoint.with_name("model_losses.csv")
    assert losses.read_text().splitlines()[0] == "step,kl,segm,adv_gen,adv_disc,rec,z_rec,total"
    manifest = checkpoint.with_name("model.ckpt.run.txt").read_text()
    assert "command=train" in manifest and "seed=0" in manifest and "config.weight_adv=" in manifest
    before = _tree(dataset)
    out = tmp_path / "ev"
    assert cli.dispatch(["eval", "--ckpt", str(checkpoint), "--data-root", str(dataset), "--fold", "0",
                         "--out", str(out)]) == 0
    rows = list(csv.reader(open(tmp_path / "ev_dice.csv")))
    assert rows[0] == ["class", "mean", "std"] and len(rows) == 1 + 3
    assert all(0 <= float(r[1]) <= 1 for r in rows[1:])
    assert "average" in (tmp_path / "ev_report.txt").read_text()
    assert _tree(dataset) == before


def test_analysis_subcommands(checkpoint, dataset, tmp_path):
    img = next(dataset.glob("subject_000/img_*.png"))
    other = next(dataset.glob("subject_001/img_*.png"))
    ck = str(checkpoint)
    assert cli.dispatch(["capacity", "--ckpt", ck, "--data-root", str(dataset), "--out", str(tmp_path / "cap.csv")]) == 0
    rows = list(csv.reader(open(tmp_path / "cap.csv")))
    assert rows[0] == ["dimension", "mean_variance"] and len(rows) == 1 + 8
    # a single-modality dataset cannot support the probe
    assert cli.dispatch(["probe", "--ckpt", ck, "--data-root", str(dataset), "--out", str(tmp_path / "p.csv")]) == 1
    assert cli.dispatch(["lvv", "--ckpt", ck, "--data-root", str(dataset), "--out", str(tmp_path / "lvv.csv")]) == 0
    assert list(csv.reader(open(tmp_path / "lvv.csv")))[0][:2] == ["subject", "phase"]
    from PIL import Image

    assert cli.dispatch(["decompose", "--ckpt", ck, "--image", str(img), "--out", str(tmp_path / "dec.png")]) == 0
    assert Image.open(tmp_path / "dec.png").size == (9 * 64 + 8 * 2, 64)
    assert cli.dispatch(["swap", "--ckpt", ck, "--anatomy-from", str(img), "--modality-from", str(other),
                         "--out", str(tmp_path / "swap.png")]) == 0
    assert cli.dispatch(["interpolate", "--ckpt", ck, "--image", str(img), "--out", str(tmp_path / "grid.png")]) == 0
    grid = Image.open(tmp_path / "grid.png")
    assert grid.size == (9 * 64 + 8 * 2, 8 * 64 + 7 * 2)
    assert (tmp_path / "grid.png.run.txt").is_file()
    # reruns reproduce outputs exactly
    first = (tmp_path / "grid.png").read_bytes()
    cli.dispatch(["interpolate", "--ckpt", ck, "--image", str(img), "--out", str(tmp_path / "grid.png")])
    assert (tmp_path / "grid.png").read_bytes() == first


def test_lvv_finetune_and_probe_on_two_modalities(tmp_path):
    d = tmp_path / "d2"
    assert cli.dispatch(["generate-data", "--subjects", "4", "--phases", "2", "--slices", "1", "--modalities", "A,B",
                         "--out", str(d)]) == 0
    ck = tmp_path / "m.ckpt"
    assert cli.dispatch(["train", "--data-root", str(d), "--epochs", "1", "--out", str(ck), *TINY]) == 0
    assert cli.dispatch(["probe", "--ckpt", str(ck), "--data-root", str(d), "--out", str(tmp_path / "p.csv")]) == 0
    rows = list(csv.reader(open(tmp_path / "p.csv")))
    assert rows[1][0] == "all" and len(rows) == 2 + 8
    ft = tmp_path / "ft.ckpt"
    assert cli.dispatch(["lvv", "--ckpt", str(ck), "--data-root", str(d), "--out", str(tmp_path / "l.csv"),
                         "--finetune-out", str(ft), "--epochs", "1", *TINY]) == 0
    assert ft.is_file()
    vals = [float(r[3]) for r in list(csv.reader(open(tmp_path / "l.csv")))[1:]]
    assert vals and np.all(np.array(vals) > 0)
