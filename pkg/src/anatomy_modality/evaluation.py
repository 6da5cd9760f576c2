"""Dice scores, LV volumes, the posthoc modality probe and per-dimension capacity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from .factor_model import FactorModel, binarize
from .phantom import ImageSet


@dataclass
class DiceReport:
    classes: tuple[str, ...]
    per_image: np.ndarray  # (N, L)

    @property
    def per_class_mean(self) -> np.ndarray:
        return self.per_image.mean(axis=0)

    @property
    def per_class_std(self) -> np.ndarray:
        return self.per_image.std(axis=0)

    @property
    def average(self) -> float:
        return float(self.per_image.mean())

    @property
    def average_std(self) -> float:
        return float(self.per_image.mean(axis=1).std())


@dataclass
class ProbeReport:
    all_dims_accuracy: float
    per_dim_accuracy: np.ndarray


def dice_score(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Per-class hard Dice between two integer label maps; an empty pair scores 1."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"dice_score shape mismatch: {pred.shape} vs {gt.shape}")
    out = np.empty(num_classes)
    for c in range(1, num_classes + 1):
        p, g = pred == c, gt == c
        denom = p.sum() + g.sum()
        out[c - 1] = 1.0 if denom == 0 else 2.0 * (p & g).sum() / denom
    return out


@torch.no_grad()
def predict_labels(model: FactorModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Argmax segmentation as integer label maps (0 = background)."""
    model.eval()
    L = model.cfg.num_classes
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(images[i : i + batch_size, None], dtype=np.float32))
        idx = model.segment(binarize(model.encode_anatomy(x))).argmax(dim=1).numpy()
        # channel L is background
        out.append(np.where(idx == L, 0, idx + 1).astype(np.uint8))
    return np.concatenate(out)


def evaluate_dice(model: FactorModel, data: ImageSet, classes=None) -> DiceReport:
    L = model.cfg.num_classes
    pred = predict_labels(model, data.images)
    scores = np.stack([dice_score(p, g, L) for p, g in zip(pred, data.labels)])
    return DiceReport(tuple(classes or [f"class_{i + 1}" for i in range(L)]), scores)


def compute_lvv(lv_pixel_counts, resolution: float, thickness: float) -> float:
    """Volume in mL from per-slice LV pixel counts, pixel area (mm^2) and slice thickness (mm)."""
    counts = np.asarray(lv_pixel_counts, dtype=np.float64)
    return float(counts.sum() * resolution * thickness / 1000.0)


@torch.no_grad()
def encode_posteriors(model: FactorModel, images: np.ndarray, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and log-variances for a stack of images."""
    model.eval()
    means, logvars = [], []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(images[i : i + batch_size, None], dtype=np.float32))
        _, mu, lv = model.factorize(x)
        means.append(mu.numpy())
        logvars.append(lv.numpy())
    return np.concatenate(means), np.concatenate(logvars)


@torch.no_grad()
def predict_lv_counts(model: FactorModel, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    model.eval()
    area = model.cfg.height * model.cfg.width
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(images[i : i + batch_size, None], dtype=np.float32))
        out.append(model.predict_lvv_fraction(binarize(model.encode_anatomy(x))).numpy() * area)
    return np.concatenate(out)


def _fit_probe(x_train, y_train, x_test, y_test) -> float:
    # standardising first makes accuracy independent of the scale of z
    clf = make_pipeline(StandardScaler(), LogisticRegression(C=1.0, tol=1e-6, max_iter=10_000))
    clf.fit(x_train, y_train)
    return float((clf.predict(x_test) == y_test).mean())


def modality_probe(z_train, tags_train, z_test, tags_test) -> ProbeReport:
    """Held-out accuracy of L2-regularised logistic regression predicting the modality tag.

    Fits one classifier on all dimensions of z and one per single dimension.
    """
    z_train, z_test = np.asarray(z_train, float), np.asarray(z_test, float)
    tags_train, tags_test = np.asarray(tags_train), np.asarray(tags_test)
    if len(np.unique(tags_train)) < 2 or len(np.unique(tags_test)) < 2:
        raise ValueError("modality_probe needs at least two modalities in both splits")
    overall = _fit_probe(z_train, tags_train, z_test, tags_test)
    per_dim = np.array([
        _fit_probe(z_train[:, [i]], tags_train, z_test[:, [i]], tags_test) for i in range(z_train.shape[1])
    ])
    return ProbeReport(overall, per_dim)


def capacity_analysis(log_variances) -> np.ndarray:
    """Mean posterior variance per latent dimension; lower means more informative."""
    lv = np.asarray(log_variances, dtype=np.float64)
    if lv.ndim != 2 or len(lv) == 0:
        raise ValueError("capacity_analysis needs a non-empty (N, n_z) array of log-variances")
    return np.exp(lv).mean(axis=0)


def subject_lvv_table(model: FactorModel, subjects, ids) -> list[list]:
    """Rows ``[subject, phase, modality, true_ml, predicted_ml, relative_error]`` per annotated phase.

    Predicted pixel counts come from the LVV regressor when the model has one,
    otherwise from counting LV pixels in the segmentation.
    """
    use_regressor = model.lvv_regressor is not None
    rows = []
    by_id = {s.id: s for s in subjects}
    for sid in ids:
        s = by_id[sid]
        ann = s.annotated
        for phase in sorted(set(s.phase_index[ann].tolist())):
            for mod in sorted(set(s.modality.tolist())):
                idx = np.nonzero(ann & (s.phase_index == phase) & (s.modality == mod))[0]
                if use_regressor:
                    counts = predict_lv_counts(model, s.images[idx])
                else:
                    counts = (predict_labels(model, s.images[idx]) == 1).sum(axis=(1, 2))
                true = compute_lvv(s.lv_pixel_counts[idx], s.resolution, s.thickness)
                pred = compute_lvv(counts, s.resolution, s.thickness)
                rows.append([sid, int(phase), mod, true, pred, abs(pred - true) / max(true, 1e-9)])
    return rows
