"""File formats: TNSR tensors, binary PGM images, key=value configs, manifests."""

import struct
from pathlib import Path

import numpy as np

TNSR_MAGIC = b"TNSR1"


class FormatError(ValueError):
    """A file does not follow the expected on-disk layout."""


def write_tnsr(path, array):
    array = np.asarray(array, dtype="<f4", order="C")
    with open(path, "wb") as fh:
        fh.write(TNSR_MAGIC)
        fh.write(struct.pack("<I", array.ndim))
        fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def read_tnsr(path):
    raw = Path(path).read_bytes()
    if raw[:5] != TNSR_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:5]!r}")
    (rank,) = struct.unpack_from("<I", raw, 5)
    shape = struct.unpack_from(f"<{rank}I", raw, 9)
    offset = 9 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(raw) - offset != 4 * count:
        raise FormatError(f"{path}: payload holds {len(raw) - offset} bytes, expected {4 * count}")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return data.reshape(shape).astype(np.float32)


def write_pgm(path, image):
    """Write an 8-bit binary PGM (P5, maxval 255)."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError(f"PGM needs a 2-D array, got {image.shape}")
    h, w = image.shape
    data = np.clip(image, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PGM not supported")
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).copy()


def to_gray8(values, lo=0.0, hi=1.0):
    """Map values in [lo, hi] linearly onto 0..255."""
    scaled = (np.asarray(values, dtype=np.float64) - lo) / max(hi - lo, 1e-12)
    return np.round(np.clip(scaled, 0.0, 1.0) * 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# key = value configs


def parse_config(text):
    """Parse ``key = value`` lines with ``#`` comments into a flat dict of strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise FormatError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_config(path):
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# checkpoints: one TNSR per tensor plus a manifest of "name<TAB>file" lines


MANIFEST = "manifest.txt"


def save_checkpoint(directory, params):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, value) in enumerate(sorted(params.items())):
        fname = f"t{i:04d}.tnsr"
        write_tnsr(directory / fname, value)
        lines.append(f"{name}\t{fname}")
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")
    return directory / MANIFEST


def read_manifest(directory):
    directory = Path(directory)
    entries = {}
    for line in (directory / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        name, fname = line.split("\t")
        entries[name] = directory / fname
    return entries


def load_checkpoint(directory):
    return {name: read_tnsr(path) for name, path in read_manifest(directory).items()}
