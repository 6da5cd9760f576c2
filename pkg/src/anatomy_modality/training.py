"""Alternating adversarial training, the supervised baselines and LVV multi-task fine-tuning."""

from __future__ import annotations

import contextlib
import copy
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch
from torch import Tensor

from .factor_model import FactorModel, ModelConfig, NumericFailure, binarize, sample_posterior
from .objectives import (
    LossReport,
    LossWeights,
    adversarial_losses,
    dice_loss,
    kl_loss,
    reconstruction_loss,
    total_loss,
    z_reconstruction_loss,
)
from .phantom import ImageSet, augment_rotation, labels_to_onehot

log = logging.getLogger(__name__)

MODES = ("sdnet", "supervised_baseline", "gan_baseline")
MODE_ALIASES = {"supervised": "supervised_baseline", "gan": "gan_baseline", "unet": "supervised_baseline"}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    lr_decay_per_epoch: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 100
    patience: int = 10
    weights: LossWeights = field(default_factory=LossWeights)
    mode: str = "sdnet"
    augment: bool = True
    area_weight: float = 1.0
    # learning rate of a freshly added LVV head during fine-tuning; 0 means learning_rate
    head_learning_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode in MODE_ALIASES:
            object.__setattr__(self, "mode", MODE_ALIASES[self.mode])
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.learning_rate > 0 or self.lr_decay_per_epoch < 0:
            raise ValueError("learning_rate must be > 0 and lr_decay_per_epoch >= 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")
        if self.area_weight < 0:
            raise ValueError("area_weight must be >= 0")
        if self.head_learning_rate < 0:
            raise ValueError("head_learning_rate must be >= 0")

    def lr_at(self, epoch: int) -> float:
        """Inverse-time decay; ``epoch`` counts from 0."""
        return self.learning_rate / (1.0 + self.lr_decay_per_epoch * epoch)

    def to_flat(self) -> dict[str, str]:
        out = {k: str(v) for k, v in asdict(self).items() if k != "weights"}
        out.update({f"weight_{k}": str(v) for k, v in asdict(self.weights).items()})
        return out

    @classmethod
    def from_flat(cls, values: dict) -> "TrainConfig":
        """Build from ``key=value`` strings; ``weight_<term>`` keys set the loss weights."""
        kinds = {f.name: f.type for f in fields(cls)}
        kw, wkw = {}, {}
        for k, v in values.items():
            if k.startswith("weight_"):
                wkw[k[len("weight_"):]] = float(v)
            elif k in kinds and k != "weights":
                default = getattr(cls(), k)
                if isinstance(default, bool):
                    kw[k] = str(v).strip().lower() in ("1", "true", "yes", "on")
                else:
                    kw[k] = type(default)(v)
            else:
                raise ValueError(f"unknown training option {k!r}")
        if wkw:
            kw["weights"] = LossWeights(**{**asdict(LossWeights()), **wkw})
        return cls(**kw)


# CPU-sized settings used by the acceptance runs: a faster rate, a lighter adversarial
# weight and narrow networks (see README)
DESK_SCALE_TRAINING = {"learning_rate": 1e-3, "max_epochs": 20, "patience": 6}
DESK_SCALE_WEIGHTS = {"adv": 1.0}
DESK_SCALE_MODEL = {"base_filters": 8, "decoder_filters": 8}


def desk_scale_config(**overrides) -> TrainConfig:
    weights = LossWeights(**{**asdict(LossWeights()), **DESK_SCALE_WEIGHTS})
    return replace(TrainConfig(weights=weights, **DESK_SCALE_TRAINING), **overrides)


@dataclass
class TrainingData:
    """Inputs to ``fit``. ``labeled.labels`` and ``mask_pool`` are integer label maps."""

    labeled: ImageSet
    unlabeled: ImageSet | None
    mask_pool: np.ndarray
    val: ImageSet
    lvv: ImageSet | None = None  # images whose LV pixel fraction is a regression target


@dataclass
class FitResult:
    model: FactorModel
    best_epoch: int
    epochs_run: int
    best_val: float
    history: list[tuple[int, LossReport]]
    val_history: list[float]

    def state(self) -> dict[str, str]:
        return {
            "best_epoch": str(self.best_epoch),
            "epochs_run": str(self.epochs_run),
            "best_val": repr(self.best_val),
            "steps": str(len(self.history)),
        }


@contextlib.contextmanager
def frozen_norm_statistics(module: torch.nn.Module):
    """Batch norm keeps normalising with batch statistics but stops updating its running averages."""
    norms = [m for m in module.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    saved = [(m.momentum, m.num_batches_tracked.clone()) for m in norms]
    for m in norms:
        m.momentum = 0.0
    try:
        yield
    finally:
        for m, (mom, nbt) in zip(norms, saved):
            m.momentum = mom
            m.num_batches_tracked.copy_(nbt)


class Trainer:
    """Owns the model, both optimisers and every random stream of a training run."""

    def __init__(self, model: FactorModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.L = model.cfg.num_classes
        self.np_rng = np.random.default_rng(cfg.seed)
        self.torch_gen = torch.Generator().manual_seed(cfg.seed)
        head = {id(p) for p in model.lvv_regressor.parameters()} if model.lvv_regressor is not None else set()
        body = [p for p in model.generator_parameters() if id(p) not in head]
        groups = [{"params": body, "lr_scale": 1.0}]
        if head:
            scale = cfg.head_learning_rate / cfg.learning_rate if cfg.head_learning_rate > 0 else 1.0
            groups.append({"params": list(model.lvv_regressor.parameters()), "lr_scale": scale})
        self.opt_g = torch.optim.Adam(
            [{**g, "lr": cfg.learning_rate * g["lr_scale"]} for g in groups], lr=cfg.learning_rate
        )
        self.opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=cfg.learning_rate)
        self.step = 0

    def set_epoch(self, epoch: int) -> None:
        lr = self.cfg.lr_at(epoch)
        for opt in (self.opt_g, self.opt_d):
            for g in opt.param_groups:
                g["lr"] = lr * g.get("lr_scale", 1.0)

    # batch assembly

    def _augment(self, images, labels=None):
        if not self.cfg.augment:
            return images, labels
        out_i, out_l = [], []
        for k in range(len(images)):
            img, lab = augment_rotation(images[k], None if labels is None else labels[k], self.np_rng)
            out_i.append(img)
            out_l.append(lab)
        return np.stack(out_i), (None if labels is None else np.stack(out_l))

    def make_batch(self, data: ImageSet, idx, with_labels: bool):
        images = data.images[idx]
        labels = data.labels[idx] if with_labels else None
        images, labels = self._augment(images, labels)
        x = torch.from_numpy(np.ascontiguousarray(images[:, None], dtype=np.float32))
        y = None if labels is None else torch.from_numpy(labels_to_onehot(labels, self.L))
        return x, y

    def real_masks(self, pool: np.ndarray, n: int) -> Tensor:
        idx = self.np_rng.integers(0, len(pool), size=n)
        masks = pool[idx]
        if self.cfg.augment:
            masks = np.stack([augment_rotation(np.zeros(m.shape, np.float32), m, self.np_rng)[1] for m in masks])
        return torch.from_numpy(labels_to_onehot(masks, self.L))

    # one optimisation step

    def train_step(
        self,
        labeled: tuple[Tensor, Tensor] | None,
        unlabeled: Tensor | None,
        real_masks: Tensor | None,
        lvv: tuple[Tensor, Tensor] | None = None,
    ) -> LossReport:
        """One discriminator update then one generator update.

        ``labeled`` is ``(images, one-hot foreground masks)``; ``lvv`` is
        ``(images, LV pixel fractions)`` for the regression head.
        """
        if labeled is None and unlabeled is None:
            raise ValueError("train_step needs a labeled or an unlabeled batch")
        mode, w, m = self.cfg.mode, self.cfg.weights, self.model
        use_unlabeled = mode != "supervised_baseline"
        if labeled is None and not use_unlabeled:
            raise ValueError("supervised_baseline cannot train on unlabeled batches")
        parts = []
        if labeled is not None:
            parts.append(labeled[0])
        if unlabeled is not None and use_unlabeled:
            parts.append(unlabeled)
        x = torch.cat(parts)
        n_lab = 0 if labeled is None else len(labeled[0])
        m.train()

        soft = m.encode_anatomy(x)
        s = binarize(soft)
        pred = m.segment(s)[:, : self.L]
        rep: dict[str, Tensor] = {k: torch.zeros(()) for k in ("kl", "segm", "adv_gen", "adv_disc", "rec", "z_rec")}

        adversarial = mode in ("sdnet", "gan_baseline")
        if adversarial:
            if real_masks is None:
                raise ValueError("adversarial modes need real masks")
            m.discriminator.requires_grad_(True)
            self.opt_d.zero_grad(set_to_none=True)
            _, d_loss = adversarial_losses(m.discriminate(pred.detach()), m.discriminate(real_masks))
            if not torch.isfinite(d_loss):
                raise NumericFailure("non-finite discriminator loss")
            d_loss.backward()
            self.opt_d.step()
            rep["adv_disc"] = d_loss.detach()
            m.discriminator.requires_grad_(False)
            rep["adv_gen"], _ = adversarial_losses(m.discriminate(pred), torch.ones(()))

        if n_lab:
            rep["segm"] = dice_loss(labeled[1], pred[:n_lab])

        if mode == "sdnet":
            mean, logvar = m.encode_modality(x, s)
            z = sample_posterior(mean, logvar, self.torch_gen)
            rep["rec"] = reconstruction_loss(x, m.decode(s, z))
            rep["kl"] = kl_loss(mean, logvar)
            z_prior = torch.randn(mean.shape, generator=self.torch_gen)
            y = m.decode(s, z_prior)
            # synthetic images must not leak into the inference-time normalisation statistics
            with frozen_norm_statistics(m):
                z_re, _ = m.encode_modality(y, binarize(m.encode_anatomy(y)))
            rep["z_rec"] = z_reconstruction_loss(z_prior, z_re)

        total = total_loss(rep, w, has_labels=n_lab > 0)
        if lvv is not None:
            area = m.predict_lvv_fraction(binarize(m.encode_anatomy(lvv[0])))
            total = total + self.cfg.area_weight * torch.mean((area - lvv[1]) ** 2)
        if not torch.isfinite(total):
            raise NumericFailure(f"non-finite generator loss at step {self.step}")
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        m.discriminator.requires_grad_(True)
        self.step += 1
        out = LossReport(**{k: float(v.detach()) for k, v in rep.items()})
        out.total = float(total_loss(out, w, has_labels=n_lab > 0))
        return out

    # epochs

    def _batches(self, n: int, count: int):
        """``count`` index batches cycling through fresh permutations of ``range(n)``."""
        bs = self.cfg.batch_size
        out, perm = [], np.array([], dtype=np.int64)
        while len(out) < count:
            if len(perm) < bs:
                perm = np.concatenate([perm, self.np_rng.permutation(n)])
            out.append(perm[:bs])
            perm = perm[bs:]
        return out

    def run_epoch(self, data: TrainingData) -> list[LossReport]:
        """Alternate labeled and unlabeled batches for one pass over the larger pool.

        The smaller pool is cycled with fresh shuffles so the alternation holds for
        the whole epoch. supervised_baseline takes the same number of labeled steps
        but ignores the unlabeled images.
        """
        bs = self.cfg.batch_size
        n_l = len(data.labeled)
        n_u = 0 if data.unlabeled is None else len(data.unlabeled)
        if n_l == 0 and self.cfg.mode != "sdnet":
            raise ValueError(f"{self.cfg.mode} needs labeled images")
        nb = max(math.ceil(n_l / bs), math.ceil(n_u / bs))
        lab_batches = self._batches(n_l, nb) if n_l else []
        unl_batches = self._batches(n_u, nb) if n_u and self.cfg.mode != "supervised_baseline" else []
        lvv_batches = self._batches(len(data.lvv), nb) if data.lvv is not None else []
        reports = []
        for b in range(nb):
            lvv = None
            if lvv_batches:
                xi, _ = self.make_batch(data.lvv, lvv_batches[b], False)
                lvv = (xi, torch.from_numpy(data.lvv.lv_fraction[lvv_batches[b]]))
            steps = []
            if lab_batches:
                steps.append((self.make_batch(data.labeled, lab_batches[b], True), None))
            if unl_batches:
                steps.append((None, self.make_batch(data.unlabeled, unl_batches[b], False)[0]))
            for k, (lab, unl) in enumerate(steps):
                n = len(lab[0]) if lab is not None else len(unl)
                real = self.real_masks(data.mask_pool, n) if self.cfg.mode != "supervised_baseline" else None
                reports.append(self.train_step(lab, unl, real, lvv if k == 0 else None))
        return reports


@torch.no_grad()
def validation_dice_loss(model: FactorModel, data: ImageSet, batch_size: int = 32) -> float:
    """Soft Dice loss of the segmentor on labeled images, in inference mode."""
    model.eval()
    L = model.cfg.num_classes
    total, n = 0.0, len(data)
    for i in range(0, n, batch_size):
        x = torch.from_numpy(data.images[i : i + batch_size, None])
        y = torch.from_numpy(labels_to_onehot(data.labels[i : i + batch_size], L))
        pred = model.segment(binarize(model.encode_anatomy(x)))[:, :L]
        total += float(dice_loss(y, pred)) * len(x)
    return total / n


@torch.no_grad()
def validation_area_error(model: FactorModel, data: ImageSet, batch_size: int = 32) -> float:
    """Mean relative error of the predicted LV pixel fraction."""
    model.eval()
    errs = []
    for i in range(0, len(data), batch_size):
        x = torch.from_numpy(data.images[i : i + batch_size, None])
        pred = model.predict_lvv_fraction(binarize(model.encode_anatomy(x))).numpy()
        true = data.lv_fraction[i : i + batch_size]
        errs.append(np.abs(pred - true) / np.maximum(true, 1e-6))
    return float(np.concatenate(errs).mean())


def _fit_loop(model: FactorModel, data: TrainingData, cfg: TrainConfig, score, on_epoch=None) -> FitResult:
    if len(data.val) == 0 or data.val.labels is None:
        raise ValueError("fit needs labeled validation images")
    trainer = Trainer(model, cfg)
    best, best_state, best_epoch, wait = math.inf, None, 0, 0
    history: list[tuple[int, LossReport]] = []
    val_history: list[float] = []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        trainer.set_epoch(epoch - 1)
        for rep in trainer.run_epoch(data):
            history.append((len(history), rep))
        val = score(model)
        val_history.append(val)
        if on_epoch is not None:
            on_epoch(epoch, val, history)
        log.info("epoch %d  val=%.4f  last_total=%.4f", epoch, val, history[-1][1].total)
        if val < best:
            best, best_epoch, wait = val, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return FitResult(model, best_epoch, epoch, best, history, val_history)


def fit(data: TrainingData, model_cfg: ModelConfig, cfg: TrainConfig, on_epoch=None) -> FitResult:
    """Train from scratch and return the weights with the best validation Dice loss."""
    if cfg.mode != "sdnet" and len(data.labeled) == 0:
        raise ValueError(f"{cfg.mode} needs labeled images")
    if data.lvv is not None:
        raise ValueError("LVV targets are only used by finetune_multitask")
    torch.manual_seed(cfg.seed)
    model = FactorModel(model_cfg)
    return _fit_loop(model, data, cfg, lambda m: validation_dice_loss(m, data.val), on_epoch)


def finetune_multitask(model: FactorModel, data: TrainingData, cfg: TrainConfig, val_lvv: ImageSet, on_epoch=None) -> FitResult:
    """Continue training the whole model jointly with an LV-area regressor on the anatomy map.

    The objective adds ``area_weight * MSE`` on LV pixel fractions (pixel counts
    over H*W) to the usual loss. Model selection uses validation Dice loss plus
    the mean relative area error on ``val_lvv``.
    """
    if data.lvv is None or len(data.lvv) == 0:
        raise ValueError("finetune_multitask needs LVV-labeled images (data.lvv)")
    if val_lvv is None or len(val_lvv) == 0:
        raise ValueError("finetune_multitask needs LVV-labeled validation images")
    model = copy.deepcopy(model)
    model.add_lvv_regressor()
    torch.manual_seed(cfg.seed)

    def score(m):
        return validation_dice_loss(m, data.val) + validation_area_error(m, val_lvv)

    return _fit_loop(model, data, cfg, score, on_epoch)


def with_weights(cfg: TrainConfig, **weights) -> TrainConfig:
    return replace(cfg, weights=replace(cfg.weights, **weights))
