"""Aligned 3D scan volumes and their 2D mosaic representation.

Axial slices of a volume are tiled row-major, ascending z, into a square
grid of ``ceil(sqrt(nz))`` cells per side.  Slice ``z`` occupies cell
``(z // cols, z % cols)`` and its pixel ``(x, y)`` lands at mosaic pixel
``(row * ny + y, col * nx + x)``.  Cells past the last slice are zero.

Voxel data is held as a numpy array of shape ``(nz, ny, nx)``, which is
exactly slice-major order (z outermost, then y, then x) when flattened.
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class VolumeFormatError(ValueError):
    """A volume file could not be parsed."""


class CohortAlignmentError(ValueError):
    """Volumes in a cohort do not share dims and spacing."""

    def __init__(self, message, offending=()):
        super().__init__(message)
        self.offending = list(offending)


class LayoutError(ValueError):
    """Mosaic pixels disagree with their layout."""


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    subject_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D (nz, ny, nx), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"volume dims must be >= 1, got {self.dims}")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"volume {self.subject_id!r} contains non-finite intensities")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self):
        """Voxel counts as ``(nx, ny, nz)``."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    def voxel(self, x, y, z):
        return self.data[z, y, x]


@dataclass(frozen=True)
class MosaicLayout:
    slice_dims: tuple  # (nx, ny)
    n_slices: int
    grid: tuple  # (rows, cols)

    @classmethod
    def for_dims(cls, nx, ny, nz):
        side = math.isqrt(nz - 1) + 1 if nz > 1 else 1
        return cls(slice_dims=(int(nx), int(ny)), n_slices=int(nz), grid=(side, side))

    @property
    def shape(self):
        """Mosaic pixel shape ``(rows * ny, cols * nx)``."""
        nx, ny = self.slice_dims
        rows, cols = self.grid
        return (rows * ny, cols * nx)

    def cell_of(self, z):
        cols = self.grid[1]
        return divmod(z, cols)

    def pixel_of(self, x, y, z):
        """Mosaic pixel ``(r, c)`` holding voxel ``(x, y, z)``."""
        nx, ny = self.slice_dims
        row, col = self.cell_of(z)
        return (row * ny + y, col * nx + x)

    def voxel_of(self, r, c):
        """Voxel ``(x, y, z)`` shown at mosaic pixel ``(r, c)``, or None for padding."""
        nx, ny = self.slice_dims
        row, y = divmod(r, ny)
        col, x = divmod(c, nx)
        z = row * self.grid[1] + col
        if z >= self.n_slices:
            return None
        return (x, y, z)

    def to_dict(self):
        return {
            "slice_dims": list(self.slice_dims),
            "n_slices": self.n_slices,
            "grid": list(self.grid),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["slice_dims"]), int(d["n_slices"]), tuple(d["grid"]))


@dataclass(frozen=True)
class Mosaic:
    layout: MosaicLayout
    pixels: np.ndarray
    subject_id: str = ""
    spacing: tuple | None = field(default=None, compare=False)


# ---------------------------------------------------------------------------
# stitching


def stitch(v: Volume) -> Mosaic:
    nx, ny, nz = v.dims
    layout = MosaicLayout.for_dims(nx, ny, nz)
    rows, cols = layout.grid
    padded = np.zeros((rows * cols, ny, nx), dtype=np.float64)
    padded[:nz] = v.data
    # (rows, cols, ny, nx) -> (rows, ny, cols, nx)
    pixels = padded.reshape(rows, cols, ny, nx).transpose(0, 2, 1, 3).reshape(layout.shape)
    return Mosaic(layout=layout, pixels=pixels, subject_id=v.subject_id, spacing=v.spacing)


def unstitch(m: Mosaic, spacing=None) -> Volume:
    """Invert :func:`stitch`.  Padding cells are discarded whatever they hold.

    Spacing is taken from ``spacing`` if given, then from the mosaic, else unit.
    """
    layout = m.layout
    pixels = np.asarray(m.pixels, dtype=np.float64)
    if pixels.shape != layout.shape:
        raise LayoutError(f"mosaic pixels have shape {pixels.shape}, layout expects {layout.shape}")
    nx, ny = layout.slice_dims
    rows, cols = layout.grid
    if rows * cols < layout.n_slices:
        raise LayoutError(f"grid {layout.grid} cannot hold {layout.n_slices} slices")
    cells = pixels.reshape(rows, ny, cols, nx).transpose(0, 2, 1, 3).reshape(rows * cols, ny, nx)
    if spacing is None:
        spacing = m.spacing if m.spacing is not None else (1.0, 1.0, 1.0)
    return Volume(cells[: layout.n_slices].copy(), spacing=spacing, subject_id=m.subject_id)


def resize_bilinear(grid, target):
    """Bilinear resize with corner-aligned sampling.

    Output pixel ``i`` samples input coordinate ``i * (H - 1) / (h - 1)``, so the
    four corners map exactly onto the input corners.  Accepts a Mosaic or a 2D
    array.
    """
    img = np.asarray(grid.pixels if isinstance(grid, Mosaic) else grid, dtype=np.float64)
    h, w = int(target[0]), int(target[1])
    if h < 1 or w < 1:
        raise ValueError(f"target dims must be >= 1, got {(h, w)}")
    H, W = img.shape
    if (H, W) == (h, w):
        return img.copy()

    def axis_weights(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = pos - lo
        return lo, hi, frac

    r0, r1, fr = axis_weights(H, h)
    c0, c1, fc = axis_weights(W, w)
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bot = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    # convex combinations can drift by an ulp past the input range
    return np.clip(out, img.min(), img.max())


def upsample_to_mosaic(g, layout: MosaicLayout, subject_id="") -> Mosaic:
    pixels = resize_bilinear(g, layout.shape)
    return Mosaic(layout=layout, pixels=pixels, subject_id=subject_id)


def validate_cohort(volumes):
    """Return the shared ``(nx, ny, nz)`` of a cohort or raise CohortAlignmentError."""
    volumes = list(volumes)
    if not volumes:
        raise CohortAlignmentError("cohort is empty")
    ref = volumes[0]
    bad = [v.subject_id for v in volumes[1:] if v.dims != ref.dims or v.spacing != ref.spacing]
    if bad:
        raise CohortAlignmentError(
            f"volumes disagree with {ref.subject_id!r} (dims {ref.dims}, spacing {ref.spacing}): "
            + ", ".join(map(str, bad)),
            offending=bad,
        )
    return ref.dims


def intensity_range(volumes):
    lo = min(float(v.data.min()) for v in volumes)
    hi = max(float(v.data.max()) for v in volumes)
    return lo, hi


def normalize_intensity(v: Volume, lo, hi) -> Volume:
    """Rescale into [0, 1] using cohort-wide bounds."""
    scale = hi - lo
    data = (v.data - lo) / scale if scale > 0 else np.zeros_like(v.data)
    return Volume(data, spacing=v.spacing, subject_id=v.subject_id)


def prepare_input(v: Volume, size, lo=None, hi=None):
    """Volume -> normalized, stitched, resized classifier input grid."""
    if lo is not None:
        v = normalize_intensity(v, lo, hi)
    m = stitch(v)
    return resize_bilinear(m, size), m.layout


# ---------------------------------------------------------------------------
# file formats

RAWGRID_MAGIC = "RAWGRID"
RAWGRID_VERSION = "v1"


def _fmt_float(x):
    return repr(float(x))


def save_rawgrid(v: Volume, path):
    nx, ny, nz = v.dims
    header = " ".join([RAWGRID_MAGIC, RAWGRID_VERSION, str(nx), str(ny), str(nz)]
                      + [_fmt_float(s) for s in v.spacing])
    payload = v.data.astype("<f4").tobytes()
    Path(path).write_bytes(header.encode("ascii") + b"\n" + payload)


def load_rawgrid(path, subject_id=None):
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise VolumeFormatError(f"{path}: missing header line")
    try:
        fields = raw[:nl].decode("ascii").split()
    except UnicodeDecodeError:
        raise VolumeFormatError(f"{path}: header is not ASCII") from None
    if len(fields) != 8 or fields[0] != RAWGRID_MAGIC:
        raise VolumeFormatError(f"{path}: header must be 'RAWGRID v1 nx ny nz sx sy sz', got {raw[:nl]!r}")
    if fields[1] != RAWGRID_VERSION:
        raise VolumeFormatError(f"{path}: unsupported version {fields[1]!r}")
    try:
        nx, ny, nz = (int(f) for f in fields[2:5])
    except ValueError:
        raise VolumeFormatError(f"{path}: dims field is not integer: {fields[2:5]}") from None
    try:
        spacing = tuple(float(f) for f in fields[5:8])
    except ValueError:
        raise VolumeFormatError(f"{path}: spacing field is not numeric: {fields[5:8]}") from None
    if min(nx, ny, nz) < 1:
        raise VolumeFormatError(f"{path}: dims must be >= 1, got {(nx, ny, nz)}")
    body = raw[nl + 1:]
    expected = nx * ny * nz
    if len(body) % 4 or len(body) // 4 != expected:
        raise VolumeFormatError(
            f"{path}: data length mismatch: dims {(nx, ny, nz)} need {expected} values, "
            f"file has {len(body) / 4:g}"
        )
    data = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(nz, ny, nx)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{path}: data contains non-finite values")
    sid = subject_id if subject_id is not None else Path(path).stem
    return Volume(data, spacing=spacing, subject_id=sid)


NIFTI_HEADER_SIZE = 348
NIFTI_DTYPES = {2: np.dtype("u1"), 4: np.dtype("i2"), 16: np.dtype("f4")}


def load_nifti(path, subject_id=None):
    """Read a single-file uncompressed NIfTI-1 volume (``.nii``).

    Only what is needed for aligned cohorts is honoured: dim, datatype,
    pixdim, vox_offset and scl_slope/scl_inter.  Orientation is ignored.
    """
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raise VolumeFormatError(f"{path}: compressed NIfTI is not supported")
    if len(raw) < NIFTI_HEADER_SIZE:
        raise VolumeFormatError(f"{path}: file shorter than the 348-byte header")

    endian = None
    for e in "<>":
        if struct.unpack(e + "i", raw[0:4])[0] == NIFTI_HEADER_SIZE:
            endian = e
            break
    if endian is None:
        raise VolumeFormatError(f"{path}: sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    if magic == b"ni1\x00":
        raise VolumeFormatError(f"{path}: split header/image pairs are not supported")

    dim = struct.unpack(endian + "8h", raw[40:56])
    if dim[0] != 3:
        raise VolumeFormatError(f"{path}: dim[0] must be 3, got {dim[0]}")
    nx, ny, nz = dim[1:4]
    if min(nx, ny, nz) < 1:
        raise VolumeFormatError(f"{path}: dim must be >= 1, got {(nx, ny, nz)}")
    datatype, bitpix = struct.unpack(endian + "hh", raw[70:74])
    if datatype not in NIFTI_DTYPES:
        raise VolumeFormatError(f"{path}: unsupported datatype code {datatype}")
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset = int(struct.unpack(endian + "f", raw[108:112])[0])
    slope, inter = struct.unpack(endian + "ff", raw[112:120])

    dtype = NIFTI_DTYPES[datatype].newbyteorder(endian)
    n = nx * ny * nz
    body = raw[vox_offset:]
    if len(body) < n * dtype.itemsize:
        raise VolumeFormatError(
            f"{path}: data length mismatch: dims {(nx, ny, nz)} need {n} values, "
            f"file has {len(body) // dtype.itemsize}"
        )
    data = np.frombuffer(body, dtype=dtype, count=n).astype(np.float64)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * (slope if slope != 0.0 else 1.0) + inter
    # NIfTI stores x fastest, then y, then z, which is already slice-major
    data = data.reshape(nz, ny, nx)
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{path}: data contains non-finite values")
    spacing = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
    sid = subject_id if subject_id is not None else Path(path).name.split(".")[0]
    return Volume(data, spacing=spacing, subject_id=sid)


def save_nifti(v: Volume, path):
    """Write a float32 single-file NIfTI-1 volume readable by :func:`load_nifti`."""
    nx, ny, nz = v.dims
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 16, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, *v.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    payload = v.data.astype("<f4").tobytes()
    Path(path).write_bytes(bytes(hdr) + b"\x00" * 4 + payload)


def load_volume(path, format=None, subject_id=None) -> Volume:
    """Load a volume as ``raw-grid`` or ``nifti-subset``; guessed from the suffix if not given."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format is None:
        format = "nifti-subset" if path.name.endswith((".nii", ".nii.gz")) else "raw-grid"
    if format == "raw-grid":
        return load_rawgrid(path, subject_id)
    if format == "nifti-subset":
        return load_nifti(path, subject_id)
    raise ValueError(f"unknown volume format {format!r}")


def pgm_bytes(img, value_range=None):
    """Encode a 2D grid as binary PGM, rescaled by round(255*(x-min)/(max-min)).

    ``value_range=(lo, hi)`` pins the scale instead of using the grid's own
    extremes, so several images can share one normalization.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2D grid, got shape {img.shape}")
    lo, hi = (float(img.min()), float(img.max())) if value_range is None else map(float, value_range)
    if hi > lo:
        scaled = np.round(255.0 * np.clip((img - lo) / (hi - lo), 0.0, 1.0))
    else:
        scaled = np.zeros_like(img)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + scaled.astype(np.uint8).tobytes()


def write_pgm(img, path, value_range=None):
    Path(path).write_bytes(pgm_bytes(img, value_range))


def read_pgm(path):
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise VolumeFormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    data = np.frombuffer(raw[m.end():], dtype=np.uint8)
    if maxval != 255 or data.size != w * h:
        raise VolumeFormatError(f"{path}: PGM body does not match {w}x{h}")
    return data.reshape(h, w)
