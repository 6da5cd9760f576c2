"""Latent-space arithmetic: anatomy channel edits, z-interpolation grids and modality swaps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .factor_model import FactorModel

INTERPOLATION_STEPS = 7
INTERPOLATION_RANGE = (-3.0, 3.0)


@dataclass(frozen=True)
class ChannelEdit:
    """``merge``: channel ``a`` is folded into ``b`` and zeroed; ``swap``: exchange ``a`` and ``b``;
    ``permute``: output channel ``i`` is input channel ``order[i]``."""

    kind: str
    a: int = 0
    b: int = 0
    order: tuple[int, ...] = ()


def edit_channels(hard_s: Tensor, edit: ChannelEdit) -> Tensor:
    """Apply a channel edit to a one-hot anatomy factor ``(N, C, H, W)``; the result stays one-hot."""
    c = hard_s.shape[1]
    out = hard_s.clone()
    if edit.kind in ("merge", "swap"):
        for i in (edit.a, edit.b):
            if not 0 <= i < c:
                raise ValueError(f"channel index {i} outside [0, {c})")
        if edit.kind == "merge":
            if edit.a != edit.b:
                out[:, edit.b] = torch.maximum(hard_s[:, edit.a], hard_s[:, edit.b])
                out[:, edit.a] = 0
        else:
            out[:, edit.a], out[:, edit.b] = hard_s[:, edit.b], hard_s[:, edit.a]
        return out
    if edit.kind == "permute":
        if sorted(edit.order) != list(range(c)):
            raise ValueError(f"permutation must be a bijection on {c} channels, got {edit.order}")
        return hard_s[:, list(edit.order)].clone()
    raise ValueError(f"unknown channel edit {edit.kind!r}")


def interpolation_values(steps: int = INTERPOLATION_STEPS, span=INTERPOLATION_RANGE) -> np.ndarray:
    return np.linspace(span[0], span[1], steps)


def pearson_map(values: np.ndarray, images: np.ndarray) -> np.ndarray:
    """Per-pixel Pearson correlation between ``values`` (J,) and ``images`` (J, H, W).

    Pixels with zero intensity variance get 0.
    """
    v = np.asarray(values, dtype=np.float64)
    y = np.asarray(images, dtype=np.float64)
    vc = v - v.mean()
    yc = y - y.mean(axis=0)
    cov = np.tensordot(vc, yc, axes=(0, 0))
    sy = np.sqrt((yc**2).sum(axis=0))
    sv = np.sqrt((vc**2).sum())
    out = np.zeros(y.shape[1:])
    ok = sy > 0
    out[ok] = cov[ok] / (sv * sy[ok])
    return np.clip(out, -1.0, 1.0)


@dataclass
class InterpolationGrid:
    values: np.ndarray  # (J,) interpolation values
    images: np.ndarray  # (n_z, J, H, W) decoded images in [-1, 1]
    correlation: np.ndarray  # (n_z, H, W)
    difference: np.ndarray  # (n_z, H, W), last minus first column on a [0, 1] scale


@torch.no_grad()
def build_grid(model: FactorModel, hard_s: Tensor, z: Tensor, values=None) -> InterpolationGrid:
    """Decode ``hard_s`` while sweeping each z dimension over ``values`` with the rest fixed."""
    model.eval()
    values = interpolation_values() if values is None else np.asarray(values, dtype=np.float64)
    if hard_s.dim() == 3:
        hard_s = hard_s[None]
    z = z.reshape(1, -1)
    nz, j = z.shape[1], len(values)
    zs = z.repeat(nz * j, 1).view(nz, j, nz)
    for i in range(nz):
        zs[i, :, i] = torch.as_tensor(values, dtype=z.dtype)
    # one image per call so each cell is bitwise what a plain reconstruction would produce
    flat = zs.view(nz * j, nz)
    imgs = torch.cat([model.decode(hard_s, flat[k : k + 1]) for k in range(nz * j)])
    imgs = imgs.view(nz, j, *imgs.shape[2:]).numpy()
    corr = np.stack([pearson_map(values, imgs[i]) for i in range(nz)])
    diff = (imgs[:, -1] - imgs[:, 0]) / 2.0
    return InterpolationGrid(values, imgs, corr, diff)


@torch.no_grad()
def swap_modality(model: FactorModel, s_from_a: Tensor, z_from_b: Tensor) -> Tensor:
    """Render the anatomy of one image with the modality code of another."""
    model.eval()
    if s_from_a.shape[1:] != (model.cfg.channels, model.cfg.height, model.cfg.width):
        raise ValueError("anatomy factor does not match the model configuration")
    if z_from_b.shape[-1] != model.cfg.latent_dims:
        raise ValueError("modality factor does not match the model configuration")
    return model.decode(s_from_a, z_from_b.reshape(len(s_from_a), -1))


def match_channels(hard_s: np.ndarray, labels: np.ndarray, num_classes: int) -> list[int]:
    """For each class, the anatomy channel with the highest Dice overlap against the label maps.

    ``hard_s`` is ``(N, C, H, W)`` one-hot, ``labels`` ``(N, H, W)``.
    """
    out = []
    for cls in range(1, num_classes + 1):
        g = labels == cls
        best, best_c = -1.0, 0
        for ch in range(hard_s.shape[1]):
            p = hard_s[:, ch] > 0.5
            d = 2.0 * (p & g).sum() / max(p.sum() + g.sum(), 1)
            if d > best:
                best, best_c = d, ch
        out.append(best_c)
    return out
