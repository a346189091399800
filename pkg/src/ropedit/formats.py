"""File formats: PPM (P6) images, PBM (P1) masks, flat float32 latents."""

from __future__ import annotations

import struct

import numpy as np

from .errors import InputError

LATENT_MAGIC = b"MMDL"
LATENT_VERSION = 1


def to_rgb8(img: np.ndarray) -> np.ndarray:
    """First three channels of a ``[0, 1]`` image as uint8 (channels repeat if fewer)."""
    if img.ndim != 3:
        raise InputError(f"expected an (h, w, c) image, got shape {img.shape}")
    idx = [min(i, img.shape[2] - 1) for i in range(3)]
    rgb = np.clip(img[:, :, idx], 0.0, 1.0)
    return np.floor(rgb * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    rgb = to_rgb8(img)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def _header_tokens(data: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError("truncated header")
        tokens.append(data[start:pos].decode("ascii"))
    return tokens, pos


def read_ppm(path) -> np.ndarray:
    """Read a P6 file into an ``(h, w, 3)`` float array in ``[0, 1]``."""
    with open(path, "rb") as f:
        data = f.read()
    (magic, w, h, maxval), pos = _header_tokens(data, 4)
    if magic != "P6" or int(maxval) != 255:
        raise InputError(f"{path}: only 8-bit P6 images are supported")
    w, h = int(w), int(h)
    body = data[pos + 1:]
    if len(body) != w * h * 3:
        raise InputError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3) / 255.0


def write_pbm(path, mask: np.ndarray, comment: str | None = None) -> None:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    lines = ["P1"]
    if comment:
        lines.append(f"# {comment}")
    lines.append(f"{w} {h}")
    lines += [" ".join("1" if b else "0" for b in row) for row in mask]
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


def read_pbm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    (magic, w, h), pos = _header_tokens(data, 3)
    if magic != "P1":
        raise InputError(f"{path}: only ASCII P1 bitmaps are supported")
    w, h = int(w), int(h)
    bits = [c for c in data[pos:].decode("ascii") if c in "01"]
    if len(bits) != w * h:
        raise InputError(f"{path}: expected {w * h} bits, found {len(bits)}")
    return np.array([b == "1" for b in bits], dtype=bool).reshape(h, w)


def write_latent(path, z: np.ndarray) -> None:
    if z.ndim != 3:
        raise InputError(f"latent must be (h, w, c), got {z.shape}")
    with open(path, "wb") as f:
        f.write(LATENT_MAGIC)
        f.write(struct.pack("<IIII", LATENT_VERSION, *z.shape))
        f.write(np.ascontiguousarray(z, dtype="<f4").tobytes())


def read_latent(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != LATENT_MAGIC:
        raise InputError(f"{path}: not a latent file (bad magic)")
    version, h, w, c = struct.unpack_from("<IIII", data, 4)
    if version != LATENT_VERSION:
        raise InputError(f"{path}: unsupported latent version {version}")
    body = data[20:]
    if len(body) != h * w * c * 4:
        raise InputError(f"{path}: expected {h * w * c} values, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float32)
