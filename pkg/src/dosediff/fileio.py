"""On-disk formats: sample files, dataset manifests, PGM previews, checkpoints."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .ctsim import CtSample

SAMPLE_MAGIC = "CTS1"
CHECKPOINT_VERSION = 1
PERCEPTION_MAGIC = b"DACP"
DENOISER_MAGIC = b"DADF"


class FormatError(ValueError):
    pass


# ------------------------------------------------------------------ samples


def sample_filename(sample: CtSample, index: int) -> str:
    return f"{sample.anatomy}_{int(round(1 / sample.y_d))}_{index:05d}.cts"


def write_sample(path: str | Path, sample: CtSample) -> None:
    h, w = sample.ndct.shape
    seed = int(sample.meta.get("seed", 0))
    header = f"{SAMPLE_MAGIC} {h} {w} {sample.y_d!r} {sample.anatomy} {seed}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.asarray(sample.ndct, dtype="<f4").tobytes())
        fh.write(np.asarray(sample.ldct, dtype="<f4").tobytes())


def read_sample(path: str | Path) -> CtSample:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header line")
    parts = raw[:nl].decode("ascii").split()
    if len(parts) != 6 or parts[0] != SAMPLE_MAGIC:
        raise FormatError(f"{path}: bad header {raw[:nl]!r}")
    h, w = int(parts[1]), int(parts[2])
    body = np.frombuffer(raw[nl + 1 :], dtype="<f4")
    if body.size != 2 * h * w:
        raise FormatError(f"{path}: expected {2 * h * w} floats, found {body.size}")
    ndct = body[: h * w].reshape(h, w).astype(np.float32)
    ldct = body[h * w :].reshape(h, w).astype(np.float32)
    return CtSample(ndct, ldct, float(parts[3]), parts[4], {"seed": int(parts[5])})


def write_dataset(directory: str | Path, samples: Iterable[CtSample]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        name = sample_filename(s, i)
        write_sample(directory / name, s)
        lines.append(f"{name} {s.y_d!r} {s.anatomy}\n")
    manifest = directory / "manifest.txt"
    manifest.write_text("".join(lines))
    return manifest


def read_manifest(directory: str | Path) -> list[tuple[str, float, str]]:
    directory = Path(directory)
    rows = []
    for line in (directory / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        name, y, anatomy = line.split()
        rows.append((name, float(y), anatomy))
    return rows


def read_dataset(directory: str | Path) -> list[CtSample]:
    directory = Path(directory)
    return [read_sample(directory / name) for name, _, _ in read_manifest(directory)]


def write_pgm16(path: str | Path, image: np.ndarray) -> None:
    """16-bit binary PGM of an image in [0, 1] (values clipped)."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    q = np.rint(img * 65535).astype(">u2")
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())


def read_pgm16(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = raw.split(maxsplit=4)
    if fields[0] != b"P5" or int(fields[3]) != 65535:
        raise FormatError(f"{path}: not a 16-bit binary PGM")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(fields[4][: 2 * w * h], dtype=">u2").reshape(h, w)
    return data.astype(np.float64) / 65535


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(path: str | Path, magic: bytes, params: dict[str, np.ndarray]) -> None:
    """Versioned binary: magic, version, count, then (name, rank, dims, f32 data)."""
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    chunks = [magic, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path, magic: bytes) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != magic:
        raise FormatError(f"{path}: magic {raw[:4]!r}, expected {magic!r}")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
        off += 4 * size
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return out
