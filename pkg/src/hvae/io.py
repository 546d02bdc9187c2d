"""Datasets (HVDS container, PGM/PPM directories) and checkpoints.

HVDS layout, little-endian::

    b"HVDS" | u8 version=1 | u32 count | u32 height | u32 width | u32 channels
    | u8 has_labels | count*H*W*C u8 pixels (each image H, W, C row-major)
    | [count u16 labels]

HVCK checkpoint layout, little-endian::

    b"HVCK" | u32 version=1 | u32 len + UTF-8 config text
    | u64 step | u64 applied | u32 len + UTF-8 JSON rng state
    | u32 tensor count | per tensor: u16 name len, name, u8 dtype (1 = f64),
      u8 ndim, ndim * u32 shape, payload
    | u32 skip count | per skip: u64 step, f64 grad norm
"""

import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import parse_config
from .optim import OptimizerState, SkipEvent


class FormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# datasets


@dataclass
class DatasetContainer:
    pixels: np.ndarray  # (count, H, W, C) uint8
    labels: np.ndarray = None  # (count,) int64 or None

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 4:
            raise FormatError(f"pixels must be (count, H, W, C), got {self.pixels.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.pixels),):
                raise FormatError("one label per image required")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 0xFFFF):
                raise FormatError("labels must fit in u16")

    def __len__(self):
        return len(self.pixels)

    @property
    def shape(self):
        return self.pixels.shape[1:]

    @classmethod
    def from_chw(cls, pixels, labels=None):
        return cls(np.asarray(pixels).transpose(0, 2, 3, 1), labels)

    def images(self, index=None):
        """Model input: (B, C, H, W) floats with level k -> 2k/255 - 1."""
        px = self.pixels if index is None else self.pixels[index]
        return px.transpose(0, 3, 1, 2).astype(np.float64) * (2.0 / 255.0) - 1.0

    def batch_labels(self, index=None):
        if self.labels is None:
            return None
        return self.labels if index is None else self.labels[index]

    def check_labels(self, num_classes):
        if num_classes and self.labels is None:
            raise FormatError("class-conditional config but the dataset has no labels")
        if self.labels is not None and num_classes and self.labels.max(initial=0) >= num_classes:
            raise FormatError(f"label {self.labels.max()} out of range for {num_classes} classes")


_HVDS_HEADER = struct.Struct("<4sBIIIIB")


def write_hvds(path, data):
    count, H, W, C = data.pixels.shape
    has = data.labels is not None
    with open(path, "wb") as f:
        f.write(_HVDS_HEADER.pack(b"HVDS", 1, count, H, W, C, int(has)))
        f.write(data.pixels.tobytes())
        if has:
            f.write(data.labels.astype("<u2").tobytes())


def read_hvds(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HVDS_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, count, H, W, C, has = _HVDS_HEADER.unpack_from(raw)
    if magic != b"HVDS":
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}")
    if has not in (0, 1):
        raise FormatError(f"{path}: bad labels flag {has}")
    npx = count * H * W * C
    want = _HVDS_HEADER.size + npx + (2 * count if has else 0)
    if len(raw) != want:
        raise FormatError(f"{path}: expected {want} bytes, found {len(raw)}")
    off = _HVDS_HEADER.size
    pixels = np.frombuffer(raw, np.uint8, npx, off).reshape(count, H, W, C)
    labels = np.frombuffer(raw, "<u2", count, off + npx).astype(np.int64) if has else None
    return DatasetContainer(pixels.copy(), labels)


_PNM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pnm(path):
    """Binary PGM (P5) or PPM (P6) with maxval 255 -> (H, W, C) uint8."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    for _ in range(4):
        m = _PNM_TOKEN.match(raw, pos)
        if not m:
            raise FormatError(f"{path}: truncated header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = tokens
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported format {magic!r} (need P5 or P6)")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise FormatError(f"{path}: maxval must be 255, got {maxval}")
    c = 1 if magic == b"P5" else 3
    pos += 1  # single whitespace byte after maxval
    body = raw[pos:pos + w * h * c]
    if len(body) != w * h * c:
        raise FormatError(f"{path}: expected {w * h * c} pixel bytes, found {len(body)}")
    return np.frombuffer(body, np.uint8).reshape(h, w, c).copy()


def write_pnm(path, img):
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise FormatError(f"cannot write {c}-channel image as PGM/PPM")
    magic = b"P5" if c == 1 else b"P6"
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def ingest(path, num_classes=0):
    """Load an HVDS file, or a directory of same-sized PGM/PPM images.

    A directory may carry ``labels.txt`` with one integer per image, in
    sorted filename order.
    """
    path = Path(path)
    if path.is_file():
        data = read_hvds(path)
    elif path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
        if not files:
            raise FormatError(f"{path}: no .pgm/.ppm images")
        imgs = []
        for f in files:
            img = read_pnm(f)
            if imgs and img.shape != imgs[0].shape:
                raise FormatError(f"{f}: size {img.shape} differs from {imgs[0].shape}")
            imgs.append(img)
        labels = None
        sidecar = path / "labels.txt"
        if sidecar.exists():
            lines = [ln.strip() for ln in sidecar.read_text().splitlines() if ln.strip()]
            if len(lines) != len(files):
                raise FormatError(f"{sidecar}: {len(lines)} labels for {len(files)} images")
            try:
                labels = np.array([int(v) for v in lines])
            except ValueError as exc:
                raise FormatError(f"{sidecar}: {exc}") from None
            if num_classes:
                bad = np.flatnonzero((labels < 0) | (labels >= num_classes))
                if bad.size:
                    raise FormatError(f"{files[bad[0]]}: label {labels[bad[0]]} out of range")
        data = DatasetContainer(np.stack(imgs), labels)
    else:
        raise FormatError(f"{path}: no such file or directory")
    if num_classes:
        data.check_labels(num_classes)
    return data


def flip_horizontal(x):
    return x[..., ::-1]


def random_flips(x, rng, p=0.5):
    flip = rng.random(x.shape[0]) < p
    return np.where(flip[:, None, None, None], flip_horizontal(x), x)


def to_pixels(x):
    """[-1, 1] images (B, C, H, W) -> uint8 levels."""
    return np.clip(np.rint((np.asarray(x) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def image_grid(x, ncols=8, pad=1):
    """Tile (B, C, H, W) images in [-1, 1] into one (H', W', C) uint8 array."""
    px = to_pixels(x).transpose(0, 2, 3, 1)
    B, H, W, C = px.shape
    ncols = max(1, min(ncols, B))
    nrows = -(-B // ncols)
    grid = np.zeros((nrows * (H + pad) + pad, ncols * (W + pad) + pad, C), dtype=np.uint8)
    for n in range(B):
        r, c = divmod(n, ncols)
        y, x0 = pad + r * (H + pad), pad + c * (W + pad)
        grid[y:y + H, x0:x0 + W] = px[n]
    return grid


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: object  # hvae.config.Config
    params: dict
    opt_state: OptimizerState
    rng_state: dict

    @property
    def step(self):
        return self.opt_state.step


def _atomic_write(path, payload):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode_checkpoint(ckpt):
    parts = [b"HVCK", struct.pack("<I", 1), _pack_str(ckpt.config.dumps())]
    st = ckpt.opt_state
    parts.append(struct.pack("<QQ", st.step, st.applied))
    parts.append(_pack_str(json.dumps(ckpt.rng_state, sort_keys=True)))
    tables = [("param/", ckpt.params), ("adamax.m/", st.m), ("adamax.u/", st.u), ("ema/", st.ema)]
    entries = [(prefix + name, arr) for prefix, table in tables for name, arr in table.items()]
    parts.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", 1, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    parts.append(struct.pack("<I", len(st.skips)))
    for ev in st.skips:
        parts.append(struct.pack("<Qd", ev.step, ev.grad_norm))
    return b"".join(parts)


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.raw):
            raise FormatError(f"{self.path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += size
        return vals

    def bytes(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated checkpoint")
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b

    def string(self):
        (n,) = self.take("<I")
        return self.bytes(n).decode("utf-8")


def decode_checkpoint(raw, path="<bytes>"):
    r = _Reader(raw, path)
    if r.bytes(4) != b"HVCK":
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.take("<I")
    if version != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    config = parse_config(r.string())
    step, applied = r.take("<QQ")
    rng_state = json.loads(r.string())
    (count,) = r.take("<I")
    tables = {"param/": {}, "adamax.m/": {}, "adamax.u/": {}, "ema/": {}}
    for _ in range(count):
        (nlen,) = r.take("<H")
        name = r.bytes(nlen).decode("utf-8")
        dtype, ndim = r.take("<BB")
        if dtype != 1:
            raise FormatError(f"{path}: unknown dtype tag {dtype} for {name}")
        shape = r.take(f"<{ndim}I")
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.bytes(8 * n), "<f8").reshape(shape).astype(np.float64)
        prefix = next((p for p in tables if name.startswith(p)), None)
        if prefix is None:
            raise FormatError(f"{path}: unexpected tensor {name}")
        key = name[len(prefix):]
        if key in tables[prefix]:
            raise FormatError(f"{path}: duplicate tensor {name}")
        tables[prefix][key] = arr
    (nskip,) = r.take("<I")
    skips = [SkipEvent(*r.take("<Qd")) for _ in range(nskip)]
    if r.pos != len(raw):
        raise FormatError(f"{path}: trailing bytes")
    state = OptimizerState(
        m=tables["adamax.m/"], u=tables["adamax.u/"], ema=tables["ema/"], step=step, applied=applied, skips=skips
    )
    return Checkpoint(config=config, params=tables["param/"], opt_state=state, rng_state=rng_state)


def audit(ckpt, model):
    """Reject a checkpoint whose tensors do not match ``model`` exactly."""
    want = {k: t.shape for k, t in model.params.items()}
    for label, table in [("param", ckpt.params), ("ema", ckpt.opt_state.ema),
                         ("adamax.m", ckpt.opt_state.m), ("adamax.u", ckpt.opt_state.u)]:
        if set(table) != set(want):
            missing = sorted(set(want) - set(table))
            extra = sorted(set(table) - set(want))
            raise FormatError(f"checkpoint {label} table mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, shape in want.items():
            if table[k].shape != shape:
                raise FormatError(f"checkpoint {label} {k}: shape {table[k].shape}, model expects {shape}")


def save_checkpoint(path, ckpt):
    _atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path, model=None):
    """Read a checkpoint; if ``model`` is given, audit shapes against it."""
    ckpt = decode_checkpoint(Path(path).read_bytes(), path)
    if model is not None:
        audit(ckpt, model)
    return ckpt
