"""Command-line entry point: ``anatomy-modality <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input or usage, 2 numeric failure during a run.
Every successful run writes a ``<output>.run.txt`` manifest next to its main output.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass
from importlib import metadata
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_model, save_model
from .dataset_io import load_dataset, read_image_png, read_key_values, save_dataset, write_png_u8
from .evaluation import (
    capacity_analysis,
    encode_posteriors,
    evaluate_dice,
    modality_probe,
    subject_lvv_table,
)
from .factor_model import FactorModel, ModelConfig, NumericFailure
from .latent_lab import build_grid, swap_modality
from .objectives import write_loss_csv
from .phantom import (
    ALL_CLASSES,
    PhantomConfig,
    all_images,
    annotated_images,
    generate_dataset,
    make_split,
    sample_semi_supervised,
)
from .training import TrainConfig, TrainingData, finetune_multitask, fit

log = logging.getLogger("anatomy_modality")

# model options a training config file may set; size and class count come from the data
MODEL_KEYS = ("channels", "latent_dims", "encoder_depth", "base_filters", "decoder_filters", "film_stages")
DATA_KEYS = ("unlabeled_pool",)


class UsageError(Exception):
    """Bad flags or inputs; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    code_version: str
    inputs: dict
    outputs: dict
    duration_seconds: float = 0.0

    def text(self) -> str:
        lines = [
            f"command={self.command}",
            f"argv={' '.join(self.argv)}",
            f"seed={self.seed}",
            f"code_version={self.code_version}",
            f"duration_seconds={self.duration_seconds:.3f}",
        ]
        lines += [f"input.{k}={v}" for k, v in self.inputs.items()]
        lines += [f"output.{k}={v}" for k, v in self.outputs.items()]
        lines += [f"config.{k}={v}" for k, v in self.config.items()]
        return "\n".join(lines) + "\n"


def manifest_path(output) -> Path:
    p = Path(output)
    return p.parent / (p.name + ".run.txt")


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def code_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


# -- shared loading ----------------------------------------------------------------


def _load_data(root):
    subjects = load_dataset(root)
    shapes = {s.images.shape[1:] for s in subjects}
    if len(shapes) != 1:
        raise UsageError(f"subjects under {root} have differing image sizes {sorted(shapes)}")
    return subjects


def _classes(subjects) -> tuple[str, ...]:
    return subjects[0].classes or tuple(f"class_{i + 1}" for i in range(3))


def _load_ckpt(path) -> tuple[FactorModel, dict]:
    if not Path(path).is_file():
        raise UsageError(f"--ckpt: no such file {path}")
    return load_model(path)


def _load_image(path, model: FactorModel) -> torch.Tensor:
    if not Path(path).is_file():
        raise UsageError(f"no such image {path}")
    img = read_image_png(path)
    want = (model.cfg.height, model.cfg.width)
    if img.shape != want:
        raise UsageError(f"{path}: image is {img.shape[0]}x{img.shape[1]}, model expects {want[0]}x{want[1]}")
    return torch.from_numpy(img[None, None].copy())


def _montage(tiles, cols: int, gap: int = 2) -> np.ndarray:
    """Tile equally sized [0, 1] images row-major on a white background."""
    h, w = tiles[0].shape
    rows = -(-len(tiles) // cols)
    out = np.ones((rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap))
    for k, t in enumerate(tiles):
        r, c = divmod(k, cols)
        out[r * (h + gap) : r * (h + gap) + h, c * (w + gap) : c * (w + gap) + w] = t
    return out


def _to01(img) -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0


# -- subcommands -------------------------------------------------------------------


def cmd_generate_data(args) -> RunManifest:
    cfg = PhantomConfig(
        image_size=args.image_size,
        num_subjects=args.subjects,
        slices_per_subject=args.slices,
        phases_per_subject=args.phases,
        modalities=tuple(args.modalities.split(",")),
        classes=tuple(args.classes.split(",")),
        noise_std=args.noise,
        seed=args.seed,
    )
    save_dataset(args.out, generate_dataset(cfg), cfg)
    return RunManifest(
        "generate-data", [], {k: ",".join(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}, cfg.seed, code_version(), {}, {"data_root": args.out}
    )


def _train_options(args) -> tuple[TrainConfig, dict, dict]:
    values = read_key_values(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.mode is not None:
        values["mode"] = args.mode
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.epochs is not None:
        values["max_epochs"] = str(args.epochs)
    model_kw = {k: int(values.pop(k)) for k in MODEL_KEYS if k in values}
    data_kw = {k: int(values.pop(k)) for k in DATA_KEYS if k in values}
    try:
        cfg = TrainConfig.from_flat(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"training config: {exc}") from exc
    return cfg, model_kw, data_kw


def cmd_train(args) -> RunManifest:
    cfg, model_kw, data_kw = _train_options(args)
    subjects = _load_data(args.data_root)
    plan = make_split([s.id for s in subjects], args.fold)
    pool = data_kw.get("unlabeled_pool", 300)
    ss = sample_semi_supervised(subjects, plan, args.labeled_fraction, pool, seed=cfg.seed)
    n = subjects[0].images.shape[1]
    model_cfg = ModelConfig(height=n, width=n, num_classes=len(_classes(subjects)), seed=cfg.seed, **model_kw)
    data = TrainingData(ss.labeled, ss.unlabeled, ss.mask_pool, annotated_images(subjects, plan.val))
    res = fit(data, model_cfg, cfg, on_epoch=lambda e, v, h: log.info("epoch %d val_dice_loss %.4f", e, v))
    out = Path(args.out)
    state = {**res.state(), **{f"train.{k}": v for k, v in cfg.to_flat().items()}}
    state.update({"fold": args.fold, "labeled_fraction": repr(args.labeled_fraction), "unlabeled_pool": pool})
    state["classes"] = ",".join(_classes(subjects))
    save_model(out, res.model, state)
    loss_csv = out.with_name(out.stem + "_losses.csv")
    write_loss_csv(loss_csv, res.history)
    config = {**cfg.to_flat(), **model_cfg.to_dict(), "unlabeled_pool": pool, "fold": args.fold,
              "labeled_fraction": args.labeled_fraction}
    return RunManifest(
        "train", [], config, cfg.seed, code_version(),
        {"data_root": args.data_root, "config": args.config or ""},
        {"checkpoint": str(out), "losses": str(loss_csv)},
    )


def _eval_prefix(args) -> Path:
    if args.out:
        return Path(args.out)
    ck = Path(args.ckpt)
    return ck.with_name(ck.stem + f"_eval_fold{args.fold}")


def cmd_eval(args) -> RunManifest:
    model, state = _load_ckpt(args.ckpt)
    subjects = _load_data(args.data_root)
    plan = make_split([s.id for s in subjects], args.fold)
    test = annotated_images(subjects, plan.test)
    if model.cfg.num_classes != len(_classes(subjects)):
        raise UsageError("checkpoint and dataset disagree on the number of classes")
    classes = _classes(subjects)
    rep = evaluate_dice(model, test, classes)
    prefix = _eval_prefix(args)
    dice_csv = prefix.with_name(prefix.name + "_dice.csv")
    per_image_csv = prefix.with_name(prefix.name + "_dice_per_image.csv")
    report_txt = prefix.with_name(prefix.name + "_report.txt")
    _write_csv(dice_csv, ["class", "mean", "std"],
               [[c, _fmt(m), _fmt(s)] for c, m, s in zip(classes, rep.per_class_mean, rep.per_class_std)])
    _write_csv(per_image_csv, ["index", "subject", "modality", *classes],
               [[i, test.subject[i], test.modality[i], *map(_fmt, row)] for i, row in enumerate(rep.per_image)])
    lines = [f"checkpoint: {args.ckpt}", f"fold: {args.fold}", f"test subjects: {', '.join(plan.test)}",
             f"test images: {len(test)}", ""]
    lines += [f"{c:<12s} {100 * m:6.2f} +- {100 * s:5.2f}" for c, m, s in zip(classes, rep.per_class_mean, rep.per_class_std)]
    lines.append(f"{'average':<12s} {100 * rep.average:6.2f} +- {100 * rep.average_std:5.2f}")
    write_atomic(report_txt, "\n".join(lines) + "\n")
    print("\n".join(lines[-len(classes) - 1:]))
    return RunManifest("eval", [], {"fold": args.fold}, None, code_version(),
                       {"checkpoint": args.ckpt, "data_root": args.data_root},
                       {"dice": str(dice_csv), "per_image": str(per_image_csv), "report": str(report_txt)})


def cmd_probe(args) -> RunManifest:
    model, _ = _load_ckpt(args.ckpt)
    subjects = _load_data(args.data_root)
    plan = make_split([s.id for s in subjects], args.fold)
    train, test = all_images(subjects, plan.train), all_images(subjects, plan.test)
    z_train, _ = encode_posteriors(model, train.images)
    z_test, _ = encode_posteriors(model, test.images)
    try:
        rep = modality_probe(z_train, train.modality, z_test, test.modality)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rows = [["all", _fmt(rep.all_dims_accuracy)]] + [[i, _fmt(a)] for i, a in enumerate(rep.per_dim_accuracy)]
    _write_csv(args.out, ["dimension", "accuracy"], rows)
    print(f"all-dimension probe accuracy {rep.all_dims_accuracy:.4f}")
    return RunManifest("probe", [], {"fold": args.fold}, None, code_version(),
                       {"checkpoint": args.ckpt, "data_root": args.data_root}, {"csv": args.out})


def cmd_capacity(args) -> RunManifest:
    model, _ = _load_ckpt(args.ckpt)
    subjects = _load_data(args.data_root)
    plan = make_split([s.id for s in subjects], args.fold)
    images = all_images(subjects, plan.test).images
    _, logvar = encode_posteriors(model, images)
    cap = capacity_analysis(logvar)
    _write_csv(args.out, ["dimension", "mean_variance"], [[i, _fmt(v)] for i, v in enumerate(cap)])
    return RunManifest("capacity", [], {"fold": args.fold}, None, code_version(),
                       {"checkpoint": args.ckpt, "data_root": args.data_root}, {"csv": args.out})


def cmd_lvv(args) -> RunManifest:
    model, state = _load_ckpt(args.ckpt)
    subjects = _load_data(args.data_root)
    plan = make_split([s.id for s in subjects], args.fold)
    outputs = {"csv": args.out}
    config = {"fold": args.fold}
    seed = None
    if args.finetune_out:
        cfg, _, data_kw = _train_options(args)
        seed = cfg.seed
        pool = data_kw.get("unlabeled_pool", 300)
        ss = sample_semi_supervised(subjects, plan, args.labeled_fraction, pool, seed=cfg.seed)
        data = TrainingData(ss.labeled, ss.unlabeled, ss.mask_pool, annotated_images(subjects, plan.val),
                            lvv=all_images(subjects, plan.train))
        res = finetune_multitask(model, data, cfg, all_images(subjects, plan.val))
        model = res.model
        save_model(args.finetune_out, model, {**state, **res.state(), "finetuned": "lvv"})
        outputs["checkpoint"] = args.finetune_out
        config.update(cfg.to_flat())
    rows = subject_lvv_table(model, subjects, plan.test)
    _write_csv(args.out, ["subject", "phase", "modality", "true_ml", "predicted_ml", "relative_error"],
               [[r[0], r[1], r[2], _fmt(r[3]), _fmt(r[4]), _fmt(r[5])] for r in rows])
    if rows:
        print(f"mean relative LVV error {np.mean([r[5] for r in rows]):.4f}")
    return RunManifest("lvv", [], config, seed, code_version(),
                       {"checkpoint": args.ckpt, "data_root": args.data_root}, outputs)


def cmd_decompose(args) -> RunManifest:
    model, _ = _load_ckpt(args.ckpt)
    x = _load_image(args.image, model)
    s, _, _ = model.factorize(x)
    tiles = [_to01(x[0, 0].numpy())] + [c.numpy() for c in s[0]]
    write_png_u8(args.out, _montage(tiles, cols=len(tiles)))
    return RunManifest("decompose", [], {}, None, code_version(), {"checkpoint": args.ckpt, "image": args.image},
                       {"png": args.out})


def cmd_swap(args) -> RunManifest:
    model, _ = _load_ckpt(args.ckpt)
    xa, xb = _load_image(args.anatomy_from, model), _load_image(args.modality_from, model)
    s_a, z_a, _ = model.factorize(xa)
    s_b, z_b, _ = model.factorize(xb)
    ab = swap_modality(model, s_a, z_b)[0, 0].numpy()
    ba = swap_modality(model, s_b, z_a)[0, 0].numpy()
    # row 1: anatomy source and its re-rendering; row 2: modality source and its re-rendering
    tiles = [_to01(xa[0, 0].numpy()), _to01(ab), _to01(xb[0, 0].numpy()), _to01(ba)]
    write_png_u8(args.out, _montage(tiles, cols=2))
    return RunManifest("swap", [], {}, None, code_version(),
                       {"checkpoint": args.ckpt, "anatomy_from": args.anatomy_from, "modality_from": args.modality_from},
                       {"png": args.out})


def cmd_interpolate(args) -> RunManifest:
    model, _ = _load_ckpt(args.ckpt)
    x = _load_image(args.image, model)
    s, mean, _ = model.factorize(x)
    grid = build_grid(model, s, mean)
    tiles = []
    for i in range(len(grid.images)):
        tiles += [_to01(im) for im in grid.images[i]]
        tiles.append((grid.correlation[i] + 1.0) / 2.0)
        tiles.append((grid.difference[i] + 1.0) / 2.0)
    write_png_u8(args.out, _montage(tiles, cols=len(grid.values) + 2))
    return RunManifest("interpolate", [], {"values": ",".join(map(str, grid.values))}, None, code_version(),
                       {"checkpoint": args.ckpt, "image": args.image}, {"png": args.out})


# -- parser ------------------------------------------------------------------------


def _train_flags(p, require_out=True):
    p.add_argument("--config", help="flat key=value file of TrainConfig fields and model sizes")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config entry")
    p.add_argument("--mode", choices=["sdnet", "supervised", "gan"])
    p.add_argument("--labeled-fraction", type=float, default=1.0)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="overrides max_epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anatomy-modality", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", help="write a phantom dataset directory")
    p.add_argument("--subjects", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--slices", type=int, default=3)
    p.add_argument("--phases", type=int, default=10)
    p.add_argument("--modalities", default="A", help="comma list from A,B")
    p.add_argument("--classes", default=",".join(ALL_CLASSES))
    p.add_argument("--noise", type=float, default=0.03)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a model on one fold")
    p.add_argument("--data-root", required=True)
    p.add_argument("--fold", type=int, default=0, choices=[0, 1, 2])
    p.add_argument("--out", required=True, help="checkpoint path")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class test Dice")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--fold", type=int, default=0, choices=[0, 1, 2])
    p.add_argument("--out", help="output prefix (default: beside the checkpoint)")
    p.set_defaults(func=cmd_eval)

    for name, func, text in (
        ("probe", cmd_probe, "modality probe accuracy on z"),
        ("capacity", cmd_capacity, "mean posterior variance per z dimension"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--data-root", required=True)
        p.add_argument("--fold", type=int, default=0, choices=[0, 1, 2])
        p.add_argument("--out", required=True, help="CSV path")
        p.set_defaults(func=func)

    p = sub.add_parser("lvv", help="LV volumes per test subject, optionally after multi-task fine-tuning")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data-root", required=True)
    p.add_argument("--fold", type=int, default=0, choices=[0, 1, 2])
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--finetune-out", help="fine-tune with the LV-area regressor and save here first")
    _train_flags(p)
    p.set_defaults(func=cmd_lvv)

    p = sub.add_parser("decompose", help="montage of the anatomy channels of one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("swap", help="render one image's anatomy with another image's modality")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--anatomy-from", required=True)
    p.add_argument("--modality-from", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_swap)

    p = sub.add_parser("interpolate", help="z-dimension sweep grid with correlation and difference columns")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interpolate)
    return parser


def _main_output(args) -> str:
    return args.out


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    start = time.perf_counter()
    try:
        manifest = args.func(args)
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    manifest.argv = argv
    manifest.duration_seconds = time.perf_counter() - start
    write_atomic(manifest_path(_main_output(args)), manifest.text())
    return 0


def main() -> None:
    sys.exit(dispatch())
