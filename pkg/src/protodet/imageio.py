"""Binary PGM/PPM reading and writing (8-bit, dependency-free)."""

import numpy as np


class ImageFormatError(ValueError):
    pass


def write_pgm(path, values):
    """Write an (H, W) array of scores in [0, 1] as binary PGM (P5).

    Pixel value = round(255 * score).
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ImageFormatError(f"PGM expects a 2-d map, got shape {list(arr.shape)}")
    pix = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(pix.tobytes())


def write_ppm(path, image):
    """Write an (H, W, 3) image in [0, 1] as binary PPM (P6)."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageFormatError(f"PPM expects (H, W, 3), got shape {list(arr.shape)}")
    pix = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        f.write(pix.tobytes())


def _read_header(f, path):
    # magic, width, height, maxval; '#' comments allowed between tokens
    tokens = []
    while len(tokens) < 4:
        line = f.readline()
        if not line:
            raise ImageFormatError(f"{path}: truncated header at byte {f.tell()}")
        text = line.split(b"#", 1)[0]
        tokens.extend(text.split())
    return tokens[:4]


def read_ppm(path):
    """Read a binary P6 PPM into an (H, W, 3) float array in [0, 1]."""
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_header(f, path)
        if magic != b"P6":
            raise ImageFormatError(f"{path}: expected P6 magic, got {magic!r}")
        if maxval != b"255":
            raise ImageFormatError(f"{path}: only 8-bit PPM supported, maxval={maxval!r}")
        w, h = int(w), int(h)
        raw = f.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise ImageFormatError(
                f"{path}: truncated pixel data at byte {f.tell()} "
                f"(expected {w * h * 3} bytes, got {len(raw)})")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0
