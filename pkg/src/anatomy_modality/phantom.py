"""Synthetic cardiac phantoms, subject-level splits and the semi-supervised data protocol.

A phantom subject is a short stack of short-axis slices imaged over a cardiac
cycle: a blood-pool disc (LV cavity), a muscle ring (myocardium) and a crescent
(RV) inside a body ellipse with some clutter. Only the two extreme phases
(the end-diastole / end-systole analogues) carry masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

ALL_CLASSES = ("lv_cavity", "myocardium", "rv")
MODALITY_TRANSFERS = ("A", "B")


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 64
    num_subjects: int = 20
    slices_per_subject: int = 3
    phases_per_subject: int = 10
    classes: tuple[str, ...] = ALL_CLASSES
    modalities: tuple[str, ...] = ("A",)
    noise_std: float = 0.03
    geometry_jitter: float = 1.0
    # per-subject contrast: tissue intensities are raised to a power drawn log-uniformly from [1/k, k]
    contrast_jitter: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if self.num_subjects < 3:
            raise ValueError("num_subjects must be >= 3 for 3-fold splits")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.contrast_jitter < 1:
            raise ValueError("contrast_jitter must be >= 1")
        if self.phases_per_subject < 2 or self.slices_per_subject < 1:
            raise ValueError("need >= 2 phases and >= 1 slice per subject")
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        unknown = set(self.classes) - set(ALL_CLASSES)
        if unknown or not self.classes:
            raise ValueError(f"classes must be a non-empty subset of {ALL_CLASSES}")
        bad = set(self.modalities) - set(MODALITY_TRANSFERS)
        if bad or not self.modalities:
            raise ValueError(f"modalities must be a non-empty subset of {MODALITY_TRANSFERS}")

    @property
    def annotated_phases(self) -> tuple[int, int]:
        return 0, self.phases_per_subject // 2


@dataclass
class Subject:
    """All images of one phantom subject.

    ``masks[k]`` is the integer label map (0 = background, i = ``classes[i-1]``)
    of image ``mask_index[k]``; unannotated images have no mask.
    ``lv_pixel_counts`` is known for every image.
    """

    id: str
    images: np.ndarray  # (n, H, W) float32 in [-1, 1]
    slice_index: np.ndarray
    phase_index: np.ndarray
    modality: np.ndarray  # (n,) str tags
    mask_index: np.ndarray
    masks: np.ndarray  # (m, H, W) uint8
    lv_pixel_counts: np.ndarray
    resolution: float  # mm^2 per pixel
    thickness: float  # mm
    classes: tuple[str, ...] = ALL_CLASSES

    def mask_for(self, i: int) -> np.ndarray | None:
        hit = np.nonzero(self.mask_index == i)[0]
        return self.masks[hit[0]] if len(hit) else None

    @property
    def annotated(self) -> np.ndarray:
        flags = np.zeros(len(self.images), dtype=bool)
        flags[self.mask_index] = True
        return flags


def normalize(raw: np.ndarray) -> np.ndarray:
    """Affinely map ``[min, max]`` of ``raw`` to ``[-1, 1]``; a constant image maps to zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros(raw.shape, dtype=np.float32)
    return (2.0 * (raw - lo) / (hi - lo) - 1.0).astype(np.float32)


def labels_to_onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Integer label maps ``(..., H, W)`` to foreground channels ``(..., L, H, W)``."""
    out = np.stack([labels == c for c in range(1, num_classes + 1)], axis=-3)
    return out.astype(np.float32)


# -- geometry -----------------------------------------------------------------


def _disc(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _ellipse(yy, xx, cy, cx, ry, rx, angle=0.0):
    c, s = math.cos(angle), math.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _largest_component(mask: np.ndarray) -> np.ndarray:
    lab, n = ndimage.label(mask)
    if n <= 1:
        return mask
    sizes = ndimage.sum(mask, lab, index=range(1, n + 1))
    return lab == (int(np.argmax(sizes)) + 1)


@dataclass
class _Anatomy:
    cy: float
    cx: float
    r_lv: float
    t_myo: float
    rv_angle: float
    rv_radius: float
    body: tuple
    clutter: list = field(default_factory=list)
    lungs: list = field(default_factory=list)


def _subject_anatomy(cfg: PhantomConfig, rng: np.random.Generator, jitter: float) -> _Anatomy:
    n = cfg.image_size
    unit = n / 64.0
    c = n / 2.0
    body = (
        c + rng.uniform(-2, 2) * jitter * unit,
        c + rng.uniform(-2, 2) * jitter * unit,
        rng.uniform(24, 28) * unit,
        rng.uniform(27, 30) * unit,
        rng.uniform(-0.2, 0.2) * jitter,
    )
    lungs = []
    for side in (-1, 1):
        lungs.append((
            body[0] + rng.uniform(-3, 3) * unit,
            body[1] + side * rng.uniform(15, 18) * unit,
            rng.uniform(9, 12) * unit,
            rng.uniform(5, 7) * unit,
            rng.uniform(-0.3, 0.3),
        ))
    clutter = []
    for _ in range(int(rng.integers(1, 4))):
        clutter.append((
            c + rng.uniform(-18, 18) * unit,
            c + rng.uniform(-18, 18) * unit,
            rng.uniform(3, 6) * unit,
            rng.uniform(3, 7) * unit,
            rng.uniform(0, math.pi),
            rng.uniform(0.52, 0.6),
        ))
    return _Anatomy(
        cy=c + rng.uniform(-4, 4) * jitter * unit,
        cx=c + rng.uniform(-4, 4) * jitter * unit,
        r_lv=rng.uniform(7.5, 10.0) * unit,
        t_myo=rng.uniform(2.5, 3.5) * unit,
        rv_angle=math.pi + rng.uniform(-0.6, 0.6) * jitter,
        rv_radius=rng.uniform(8.0, 10.5) * unit,
        body=body,
        clutter=clutter,
        lungs=lungs,
    )


def _slice_labels(cfg: PhantomConfig, a: _Anatomy, slice_i: int, phase: int, yy, xx):
    """Label map over all three structures (1 lv, 2 myo, 3 rv) plus the scene layers."""
    contraction = 0.5 * (1.0 - math.cos(2.0 * math.pi * phase / cfg.phases_per_subject))
    taper = 1.0 - 0.3 * slice_i / max(cfg.slices_per_subject - 1, 1)
    r_lv = a.r_lv * taper * (1.0 - 0.3 * contraction)
    t_myo = a.t_myo * (1.0 + 0.4 * contraction)
    r_epi = r_lv + t_myo
    # the heart also shifts slightly over the cycle
    cy = a.cy + 0.8 * contraction
    cx = a.cx - 0.5 * contraction
    rho = a.rv_radius * taper * (1.0 - 0.2 * contraction)
    d = r_epi + 0.55 * rho
    ry, rx = cy + d * math.sin(a.rv_angle), cx + d * math.cos(a.rv_angle)

    lv = _disc(yy, xx, cy, cx, r_lv)
    epi = _disc(yy, xx, cy, cx, r_epi)
    myo = epi & ~lv
    rv = _disc(yy, xx, ry, rx, rho) & ~epi
    rv = _largest_component(rv)
    labels = np.zeros(yy.shape, dtype=np.uint8)
    labels[lv] = 1
    labels[myo] = 2
    labels[rv] = 3
    return labels


def _in_bounds(labels: np.ndarray, margin: int = 2) -> bool:
    fg = labels > 0
    return not (fg[:margin].any() or fg[-margin:].any() or fg[:, :margin].any() or fg[:, -margin:].any())


def _transfer(intensity: np.ndarray, modality: str) -> np.ndarray:
    if modality == "A":
        return intensity
    # inverted contrast with gamma compression, clipped to keep the power defined
    return np.clip(1.0 - intensity, 0.0, 1.0) ** 0.5


def generate_subject(cfg: PhantomConfig, subject_seed: int, subject_id: str | None = None) -> Subject:
    """Deterministically render one subject (all slices, phases and modalities)."""
    n = cfg.image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    rng = np.random.default_rng([cfg.seed, subject_seed])

    jitter = cfg.geometry_jitter
    for _ in range(20):
        anatomy = _subject_anatomy(cfg, rng, jitter)
        stacks = [
            [_slice_labels(cfg, anatomy, s, p, yy, xx) for p in range(cfg.phases_per_subject)]
            for s in range(cfg.slices_per_subject)
        ]
        if all(_in_bounds(lab) for row in stacks for lab in row):
            break
        jitter *= 0.5
    else:
        raise RuntimeError("could not place phantom anatomy inside the image")

    tissue = {
        "outside": 0.0,
        "body": rng.uniform(0.4, 0.5),
        "lung": rng.uniform(0.08, 0.15),
        "lv": rng.uniform(0.88, 0.95),
        "myo": rng.uniform(0.25, 0.35),
        "rv": rng.uniform(0.66, 0.74),
    }
    resolution = float(rng.uniform(1.2, 1.7))
    thickness = float(rng.uniform(6.0, 10.0))
    # scanner and protocol differences: one contrast curve and one coil shading pattern per subject
    k = math.log(cfg.contrast_jitter)
    gamma = math.exp(rng.uniform(-k, k))
    shade_y, shade_x = rng.uniform(-0.3, 0.3, size=2)

    keep = [ALL_CLASSES.index(c) + 1 for c in cfg.classes]
    images, slices, phases, mods, counts = [], [], [], [], []
    mask_index, masks = [], []
    for s in range(cfg.slices_per_subject):
        for p in range(cfg.phases_per_subject):
            full = stacks[s][p]
            scene = np.full((n, n), tissue["outside"])
            by, bx, bry, brx, bang = anatomy.body
            scene[_ellipse(yy, xx, by, bx, bry, brx, bang)] = tissue["body"]
            for ly, lx, lry, lrx, lang in anatomy.lungs:
                scene[_ellipse(yy, xx, ly, lx, lry, lrx, lang) & (full == 0)] = tissue["lung"]
            for cy_, cx_, cry, crx, cang, val in anatomy.clutter:
                scene[_ellipse(yy, xx, cy_, cx_, cry, crx, cang) & (full == 0)] = val
            scene[full == 1] = tissue["lv"]
            scene[full == 2] = tissue["myo"]
            scene[full == 3] = tissue["rv"]
            # mild partial-volume blur and a smooth multiplicative bias field
            scene = ndimage.gaussian_filter(scene, 0.6)
            gy, gx = rng.uniform(-0.1, 0.1, size=2)
            bias = 1.0 + (shade_y + gy) * (yy / n - 0.5) + (shade_x + gx) * (xx / n - 0.5)
            scene = np.clip(scene * bias, 0.0, 1.0) ** gamma

            labels = np.zeros_like(full)
            for new, old in enumerate(keep, start=1):
                labels[full == old] = new
            annotated = p in cfg.annotated_phases
            for m in cfg.modalities:
                raw = _transfer(scene, m) + rng.normal(0.0, cfg.noise_std, size=scene.shape)
                images.append(normalize(raw))
                slices.append(s)
                phases.append(p)
                mods.append(m)
                counts.append(int((full == 1).sum()))
                if annotated:
                    mask_index.append(len(images) - 1)
                    masks.append(labels.copy())

    return Subject(
        id=subject_id or f"subject_{subject_seed:03d}",
        images=np.stack(images).astype(np.float32),
        slice_index=np.array(slices),
        phase_index=np.array(phases),
        modality=np.array(mods),
        mask_index=np.array(mask_index, dtype=np.int64),
        masks=np.stack(masks).astype(np.uint8) if masks else np.zeros((0, n, n), np.uint8),
        lv_pixel_counts=np.array(counts, dtype=np.int64),
        resolution=resolution,
        thickness=thickness,
        classes=tuple(cfg.classes),
    )


def generate_dataset(cfg: PhantomConfig) -> list[Subject]:
    return [generate_subject(cfg, i) for i in range(cfg.num_subjects)]


# -- splits and the semi-supervised protocol ----------------------------------


@dataclass(frozen=True)
class SplitPlan:
    fold: int
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    labeled_subject_count: int = 0
    unlabeled_pool_size: int = 0


def make_split(subject_ids, fold: int) -> SplitPlan:
    """Rotating 70/15/15 subject partition; val and test take floor(15%) (at least one) each."""
    ids = list(subject_ids)
    n = len(ids)
    if n < 3:
        raise ValueError("need at least 3 subjects for a train/val/test split")
    if fold not in (0, 1, 2):
        raise ValueError("fold must be 0, 1 or 2")
    if len(set(ids)) != n:
        raise ValueError("subject ids must be unique")
    n_hold = max(1, math.floor(0.15 * n))
    shift = (fold * n_hold) % n
    rotated = ids[shift:] + ids[:shift]
    test = rotated[:n_hold]
    val = rotated[n_hold : 2 * n_hold]
    train = rotated[2 * n_hold :]
    return SplitPlan(fold=fold, train=tuple(train), val=tuple(val), test=tuple(test))


@dataclass
class ImageSet:
    """Flat arrays of images, optional label maps and provenance, ready for batching."""

    images: np.ndarray  # (N, H, W)
    labels: np.ndarray | None  # (N, H, W) uint8
    subject: np.ndarray
    modality: np.ndarray
    lv_fraction: np.ndarray  # LV pixels / (H * W)

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "ImageSet":
        return ImageSet(
            self.images[idx],
            None if self.labels is None else self.labels[idx],
            self.subject[idx],
            self.modality[idx],
            self.lv_fraction[idx],
        )


def _collect(subjects, ids, annotated: bool | None, modalities=None) -> ImageSet:
    imgs, labs, subj, mods, frac = [], [], [], [], []
    by_id = {s.id: s for s in subjects}
    for sid in ids:
        s = by_id[sid]
        area = s.images.shape[1] * s.images.shape[2]
        flags = s.annotated
        for i in range(len(s.images)):
            if annotated is not None and flags[i] != annotated:
                continue
            if modalities is not None and s.modality[i] not in modalities:
                continue
            imgs.append(s.images[i])
            labs.append(s.mask_for(i) if annotated else None)
            subj.append(sid)
            mods.append(s.modality[i])
            frac.append(s.lv_pixel_counts[i] / area)
    n = subjects[0].images.shape[1]
    labels = np.stack(labs) if annotated and labs else (np.zeros((0, n, n), np.uint8) if annotated else None)
    return ImageSet(
        np.stack(imgs) if imgs else np.zeros((0, n, n), np.float32),
        labels,
        np.array(subj),
        np.array(mods),
        np.array(frac, dtype=np.float32),
    )


def annotated_images(subjects, ids, modalities=None) -> ImageSet:
    return _collect(subjects, ids, annotated=True, modalities=modalities)


def all_images(subjects, ids) -> ImageSet:
    return _collect(subjects, ids, annotated=None)


@dataclass
class SemiSupervisedData:
    plan: SplitPlan
    labeled: ImageSet
    unlabeled: ImageSet
    mask_pool: np.ndarray  # (M, H, W) label maps of the labeled set


def labeled_subject_count(labeled_fraction: float, n_train: int) -> int:
    return math.ceil(labeled_fraction * n_train - 1e-9)


def sample_semi_supervised(
    subjects,
    plan: SplitPlan,
    labeled_fraction: float,
    pool_size: int = 300,
    seed: int = 0,
) -> SemiSupervisedData:
    """Pick whole labeled subjects from the training set plus a fixed-size unlabeled pool.

    Labeled: every annotated image of the first ``ceil(fraction * |train|)`` subjects
    of a seeded permutation of ``plan.train``. Unlabeled: a uniform random draw of
    ``pool_size`` non-annotated images over all training subjects.
    """
    if not 0 < labeled_fraction <= 1:
        raise ValueError("labeled_fraction must be in (0, 1]")
    k = labeled_subject_count(labeled_fraction, len(plan.train))
    if k < 1:
        raise ValueError("labeled_fraction selects no subject")
    rng = np.random.default_rng([seed, plan.fold])
    order = rng.permutation(len(plan.train))
    chosen = [plan.train[i] for i in sorted(order[:k])]
    labeled = annotated_images(subjects, chosen)
    pool = _collect(subjects, plan.train, annotated=False)
    if len(pool) > pool_size:
        pick = np.sort(rng.choice(len(pool), size=pool_size, replace=False))
        pool = pool.subset(pick)
    return SemiSupervisedData(
        plan=replace(plan, labeled_subject_count=k, unlabeled_pool_size=len(pool)),
        labeled=labeled,
        unlabeled=pool,
        mask_pool=labeled.labels,
    )


# -- augmentation ---------------------------------------------------------------


def augment_rotation(image: np.ndarray, mask: np.ndarray | None = None, rng=None, angle: float | None = None):
    """Rotate image (bilinear) and label map (nearest) by one angle drawn from [-90, 90] degrees."""
    if angle is None:
        rng = rng if rng is not None else np.random.default_rng()
        angle = float(rng.uniform(-90.0, 90.0))
    if angle == 0.0:
        return image.copy(), None if mask is None else mask.copy()
    rot = ndimage.rotate(image, angle, reshape=False, order=1, mode="nearest")
    rot = np.clip(rot, -1.0, 1.0).astype(image.dtype)
    if mask is None:
        return rot, None
    rmask = ndimage.rotate(mask, angle, reshape=False, order=0, mode="constant", cval=0)
    return rot, rmask.astype(mask.dtype)
