"""On-disk phantom datasets: one directory per subject with PNG images, PNG label maps and metadata.

Layout::

    <root>/dataset.txt                      generator settings, one key=value per line
    <root>/<subject>/metadata.txt           subject fields plus one ``image`` line per image
    <root>/<subject>/img_s<S>_p<PP>_<M>.png 16-bit grayscale, [-1, 1] mapped onto [0, 65535]
    <root>/<subject>/mask_s<S>_p<PP>.png    8-bit palette image of integer labels

Label maps are shared across modalities of the same slice and phase.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .phantom import PhantomConfig, Subject

# background black, then one distinct colour per structure
_PALETTE = [0, 0, 0, 220, 50, 50, 50, 180, 60, 60, 90, 220] + [255, 255, 255] * 252
_U16 = 65535


def image_to_u16(image: np.ndarray) -> np.ndarray:
    return np.round((np.clip(image, -1.0, 1.0) + 1.0) * 0.5 * _U16).astype(np.uint16)


def u16_to_image(raw: np.ndarray) -> np.ndarray:
    return (raw.astype(np.float64) / _U16 * 2.0 - 1.0).astype(np.float32)


def write_png_u16(path, image: np.ndarray) -> None:
    Image.fromarray(image_to_u16(image)).save(path, format="PNG")


def write_png_u8(path, image01: np.ndarray) -> None:
    """Write an array with values in [0, 1] as 8-bit grayscale."""
    Image.fromarray(np.round(np.clip(image01, 0.0, 1.0) * 255).astype(np.uint8)).save(path, format="PNG")


def write_label_png(path, labels: np.ndarray) -> None:
    im = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    im.putpalette(_PALETTE)
    im.save(path, format="PNG")


def read_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "P" and im.mode != "L":
            raise ValueError(f"{path}: expected an indexed or 8-bit label image, got mode {im.mode}")
        return np.array(im, dtype=np.uint8)


def read_image_png(path) -> np.ndarray:
    """Read a grayscale PNG into [-1, 1]; 16-bit files use the full 16-bit range, others 8-bit."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            return u16_to_image(np.array(im, dtype=np.int64).clip(0, _U16))
        if im.mode not in ("L", "P"):
            im = im.convert("L")
        arr = np.array(im, dtype=np.float64)
    return (arr / 255.0 * 2.0 - 1.0).astype(np.float32)


def _kv_lines(items: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in items.items())


def _parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#") and "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _image_name(s: int, p: int, m: str) -> str:
    return f"img_s{s}_p{p:02d}_{m}.png"


def _mask_name(s: int, p: int) -> str:
    return f"mask_s{s}_p{p:02d}.png"


def save_dataset(root, subjects: list[Subject], cfg: PhantomConfig | None = None) -> None:
    """Write ``subjects`` under ``root``; output bytes depend only on the subjects and ``cfg``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if cfg is not None:
        settings = {k: (",".join(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}
        (root / "dataset.txt").write_text(_kv_lines(settings))
    for subj in subjects:
        d = root / subj.id
        d.mkdir(exist_ok=True)
        lines = [
            f"id={subj.id}",
            f"resolution={subj.resolution!r}",
            f"thickness={subj.thickness!r}",
            f"classes={','.join(subj.classes)}",
        ]
        written = set()
        for i in range(len(subj.images)):
            s, p, m = int(subj.slice_index[i]), int(subj.phase_index[i]), str(subj.modality[i])
            name = _image_name(s, p, m)
            write_png_u16(d / name, subj.images[i])
            mask = subj.mask_for(i)
            mname = "-"
            if mask is not None:
                mname = _mask_name(s, p)
                if mname not in written:
                    write_label_png(d / mname, mask)
                    written.add(mname)
            lines.append(
                f"image={name} slice={s} phase={p} modality={m} lv_pixels={int(subj.lv_pixel_counts[i])} mask={mname}"
            )
        (d / "metadata.txt").write_text("\n".join(lines) + "\n")


def load_subject(directory) -> Subject:
    d = Path(directory)
    meta_path = d / "metadata.txt"
    if not meta_path.is_file():
        raise FileNotFoundError(f"{d}: missing metadata.txt")
    head, rows = {}, []
    for line in meta_path.read_text().splitlines():
        if line.startswith("image="):
            rows.append(dict(tok.split("=", 1) for tok in line.split()))
        elif "=" in line:
            k, v = line.split("=", 1)
            head[k] = v
    if not rows:
        raise ValueError(f"{d}: metadata lists no images")
    images, slices, phases, mods, counts, mask_index, masks = [], [], [], [], [], [], []
    for i, r in enumerate(rows):
        images.append(read_image_png(d / r["image"]))
        slices.append(int(r["slice"]))
        phases.append(int(r["phase"]))
        mods.append(r["modality"])
        counts.append(int(r["lv_pixels"]))
        if r.get("mask", "-") != "-":
            mask_index.append(i)
            masks.append(read_label_png(d / r["mask"]))
    n = images[0].shape
    return Subject(
        id=head.get("id", d.name),
        images=np.stack(images),
        slice_index=np.array(slices),
        phase_index=np.array(phases),
        modality=np.array(mods),
        mask_index=np.array(mask_index, dtype=np.int64),
        masks=np.stack(masks) if masks else np.zeros((0, *n), np.uint8),
        lv_pixel_counts=np.array(counts, dtype=np.int64),
        resolution=float(head["resolution"]),
        thickness=float(head["thickness"]),
        classes=tuple(head.get("classes", "").split(",")) if head.get("classes") else (),
    )


def load_dataset(root) -> list[Subject]:
    """Read every subject directory under ``root`` in sorted order.

    Any directory tree following this layout works, including converted real data.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"data root {root} is not a directory")
    subjects = [load_subject(p) for p in sorted(root.iterdir()) if (p / "metadata.txt").is_file()]
    if not subjects:
        raise ValueError(f"no subject directories with metadata.txt under {root}")
    return subjects


def read_dataset_settings(root) -> dict[str, str]:
    path = Path(root) / "dataset.txt"
    return _parse_kv(path.read_text()) if path.is_file() else {}


def read_key_values(path) -> dict[str, str]:
    """Parse a flat ``key=value`` text file; ``#`` starts a comment line."""
    return _parse_kv(Path(path).read_text())
