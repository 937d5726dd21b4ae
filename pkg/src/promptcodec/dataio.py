"""Image files, dataset iteration, map/CSV writers, synthetic toy data.

Mandatory image container is binary PPM (P6, maxval 255); maps are written
as binary PGM plus a raw CSV.  Pixel tensors are (3, H, W) float arrays in
[0, 1], scaled by v / 255.
"""

import csv
import io
import os
import warnings

import numpy as np

from .formats import atomic_write


class ImageFormatError(Exception):
    pass


def _read_token(f):
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            raise ImageFormatError("unexpected end of header")
        if c == b"#":
            while c and c != b"\n":
                c = f.read(1)
            continue
        if c.isspace():
            if tok:
                return tok
            continue
        tok += c


def load_ppm(path):
    """Binary PPM -> (3, H, W) float array in [0, 1] (lossless for 8-bit)."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P6":
            raise ImageFormatError(f"{path}: not a binary PPM (magic {magic!r})")
        w = int(_read_token(f))
        h = int(_read_token(f))
        maxval = int(_read_token(f))
        if maxval != 255:
            raise ImageFormatError(f"{path}: maxval {maxval} unsupported, need 255")
        raw = f.read(3 * w * h)
    if len(raw) != 3 * w * h:
        raise ImageFormatError(f"{path}: pixel data truncated ({len(raw)} of {3 * w * h} bytes)")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float32) / 255.0


def save_ppm(path, image):
    """(3, H, W) float in [0, 1] -> canonical binary PPM."""
    u8 = to_uint8(image)
    header = f"P6\n{u8.shape[2]} {u8.shape[1]}\n255\n".encode()
    atomic_write(path, header + u8.transpose(1, 2, 0).tobytes())


def save_pgm(path, grid):
    """2-d array -> 8-bit grayscale PGM, normalized to the grid's range."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    norm = np.zeros_like(g) if hi <= lo else (g - lo) / (hi - lo)
    u8 = np.round(norm * 255.0).astype(np.uint8)
    header = f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode()
    atomic_write(path, header + u8.tobytes())


def to_uint8(image):
    """Quantize [0, 1] floats to the 8-bit grid used for metrics and files."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    return np.round(arr * 255.0).astype(np.uint8)


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write(path, buf.getvalue().encode())


def read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


# -- padding ------------------------------------------------------------------


def pad_to_multiple(image, multiple):
    """Replicate-pad (C, H, W) so H and W are multiples; returns (padded, (H, W))."""
    _, h, w = image.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return image, (h, w)
    padded = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return padded, (h, w)


def crop_to(image, size):
    h, w = size
    return image[:, :h, :w]


# -- datasets -------------------------------------------------------------------------


def list_images(directory):
    names = sorted(n for n in os.listdir(directory) if n.endswith(".ppm"))
    if not names:
        raise ImageFormatError(f"no .ppm images in {directory}")
    return [os.path.join(directory, n) for n in names]


def load_dir(directory):
    return [(os.path.basename(p), load_ppm(p)) for p in list_images(directory)]


def random_crop(image, crop, rng):
    """Uniform random crop; images smaller than the crop are replicate-padded."""
    _, h, w = image.shape
    if h < crop or w < crop:
        warnings.warn(f"image {h}x{w} smaller than crop {crop}, replicate-padding")
        image = np.pad(image, ((0, 0), (0, max(0, crop - h)), (0, max(0, crop - w))), mode="edge")
        _, h, w = image.shape
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    return image[:, top : top + crop, left : left + crop]


def batch_iter(images, crop, batch_size, rng):
    """Endless stream of (B, 3, crop, crop) batches; one epoch = one shuffled
    pass over the image list, deterministic given the rng state."""
    n = len(images)
    if n == 0:
        raise ImageFormatError("empty dataset")
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            yield np.stack([random_crop(images[i], crop, rng) for i in idx])


def worker_count():
    """Evaluation parallelism from LPMC_THREADS (0 or unset = auto)."""
    raw = os.environ.get("LPMC_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        return os.cpu_count() or 1
    return n


# -- synthetic toy corpus ----------------------------------------------------------------


def synthetic_images(count=16, size=64, seed=1234):
    """Structured 64x64 test images: gradients, shapes, stripes, mild noise."""
    rng = np.random.default_rng(seed)
    images = []
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    for i in range(count):
        base = np.zeros((3, size, size), dtype=np.float64)
        angle = rng.uniform(0, 2 * np.pi)
        ramp = (np.cos(angle) * xx + np.sin(angle) * yy + 1) / 2
        for c in range(3):
            base[c] = ramp * rng.uniform(0.3, 1.0) + rng.uniform(0.0, 0.3)
        for _ in range(rng.integers(2, 5)):
            cx, cy = rng.uniform(0.2, 0.8, size=2) * size
            r = rng.uniform(4, 14)
            mask = (xx * (size - 1) - cx) ** 2 + (yy * (size - 1) - cy) ** 2 < r * r
            color = rng.uniform(0, 1, size=3)
            for c in range(3):
                base[c][mask] = color[c]
        if rng.random() < 0.5:
            period = rng.integers(4, 12)
            stripes = ((np.arange(size) // period) % 2).astype(np.float64)
            base[rng.integers(0, 3)] = 0.7 * base[rng.integers(0, 3)] + 0.3 * stripes[None, :]
        base += rng.normal(0, 0.01, size=base.shape)
        images.append(np.clip(base, 0, 1).astype(np.float32))
    return images


def write_toy_dataset(directory, count=16, size=64, seed=1234):
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, img in enumerate(synthetic_images(count, size, seed)):
        p = os.path.join(directory, f"toy_{i:02d}.ppm")
        save_ppm(p, img)
        paths.append(p)
    return paths
