"""Image file plumbing: PFM for linear float data, PNG for previews and
label images (palette JSON on the side)."""

from __future__ import annotations

import json

import numpy as np
from PIL import Image

# label id -> RGB for label-image previews
DEFAULT_PALETTE = {
    0: (0, 0, 0),        # background
    1: (200, 80, 80),    # face
    2: (80, 120, 200),   # eye socket
    3: (230, 220, 90),   # eyeball
    255: (255, 255, 255),  # ignore
}


def write_pfm(path, img: np.ndarray) -> None:
    """Little-endian PFM, color (PF) or grayscale (Pf); rows bottom-to-top."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 3 and img.shape[2] == 3:
        header = b"PF"
    elif img.ndim == 2:
        header = b"Pf"
    else:
        raise ValueError(f"PFM needs HxW or HxWx3, got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale = little-endian
        f.write(np.flipud(img).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file: {header!r}")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        count = w * h * (3 if header == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4")
    img = data.reshape(h, w, 3) if header == b"PF" else data.reshape(h, w)
    return np.flipud(img).astype(np.float64)


def write_png(path, img: np.ndarray) -> None:
    """8-bit sRGB preview of linear [0,1] data (clamped at write time)."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    srgb = np.where(arr <= 0.0031308, 12.92 * arr, 1.055 * arr ** (1 / 2.4) - 0.055)
    u8 = (srgb * 255.0 + 0.5).astype(np.uint8)
    if u8.ndim == 2:
        Image.fromarray(u8, mode="L").save(path)
    else:
        Image.fromarray(u8, mode="RGB").save(path)


def write_label_png(path, labels: np.ndarray, palette: dict | None = None) -> None:
    """PNG-8 label image plus a <name>.palette.json documenting the colors."""
    palette = palette or DEFAULT_PALETTE
    lab = np.asarray(labels)
    if lab.max() > 255 or lab.min() < 0:
        raise ValueError("label ids must fit in uint8")
    img = Image.fromarray(lab.astype(np.uint8), mode="P")
    flat = [0] * (256 * 3)
    for lid, rgb in palette.items():
        flat[3 * int(lid): 3 * int(lid) + 3] = list(rgb)
    img.putpalette(flat)
    img.save(path)
    with open(str(path) + ".palette.json", "w") as f:
        json.dump({str(k): list(v) for k, v in palette.items()}, f)


def read_label_png(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode != "P":
        raise ValueError("label images must be palettized PNG-8")
    return np.asarray(img, dtype=np.int64)


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)
