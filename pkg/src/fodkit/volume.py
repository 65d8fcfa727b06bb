"""Volumetric containers and the on-disk volume format.

Container layout (little-endian):

    bytes 0..3    magic ``FODV``
    bytes 4..7    uint32 format version (currently 1)
    bytes 8..11   uint32 header length H
    bytes 12..    H bytes of UTF-8 JSON header
    then          raw value raster, value axis fastest (C-order, last axis)

The JSON header declares dtype, dims, value count, voxel size, kind
("coeff", "dwi", "mask", "labels"), coefficient metadata (l_max, tissue
layout, normalization scale) and a provenance dict. Declared sizes must
match the payload byte length exactly.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FODV"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": np.dtype("<f4"),
    "uint8": np.dtype("u1"),
    "int32": np.dtype("<i4"),
}


class VolumeFormatError(ValueError):
    pass


def write_volume(path, data, kind, voxel_size=(1.0, 1.0, 1.0), l_max=None,
                 tissues=None, norm_scale=None, provenance=None):
    """Write a 3D or 4D raster to the container format."""
    data = np.asarray(data)
    if data.ndim == 3:
        data = data[..., None]
    if data.ndim != 4:
        raise VolumeFormatError(f"expected 3D or 4D data, got shape {data.shape}")
    dtype_name = {np.dtype("float32"): "float32", np.dtype("uint8"): "uint8",
                  np.dtype("int32"): "int32"}.get(data.dtype)
    if dtype_name is None:
        raise VolumeFormatError(f"unsupported dtype {data.dtype}")
    header = {
        "dims": list(data.shape[:3]),
        "n_values": int(data.shape[3]),
        "dtype": dtype_name,
        "kind": kind,
        "voxel_size_mm": [float(v) for v in voxel_size],
        "l_max": l_max,
        "tissues": [[name, int(count)] for name, count in tissues] if tissues else None,
        "norm_scale": None if norm_scale is None else float(norm_scale),
        "provenance": provenance or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(data, dtype=_DTYPES[dtype_name]).tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def read_volume(path):
    """Read a container file; returns (data, header dict)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic at byte offset 0 (got {raw[:4]!r})")
    if len(raw) < 12:
        raise VolumeFormatError(f"{path}: truncated preamble ({len(raw)} bytes)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise VolumeFormatError(f"{path}: unrecognized format version {version}")
    if len(raw) < 12 + hlen:
        raise VolumeFormatError(f"{path}: truncated header at byte offset 12")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: malformed header at byte offset 12: {exc}") from exc
    dtype = _DTYPES.get(header.get("dtype"))
    if dtype is None:
        raise VolumeFormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    dims = header["dims"]
    shape = (dims[0], dims[1], dims[2], header["n_values"])
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = raw[12 + hlen:]
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload is {len(payload)} bytes at offset {12 + hlen}, "
            f"header declares {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return data, header


@dataclass
class CoeffVolume:
    """3D raster of per-tissue SH coefficient vectors.

    data: (X, Y, Z, C) float32 with the WM coefficient block first, then one
    column per isotropic tissue, per ``tissues`` = [(name, n_values), ...].
    """

    data: np.ndarray
    l_max: int
    tissues: list
    voxel_size: tuple = (1.0, 1.0, 1.0)
    norm_scale: float = 1.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        # float64 is kept for in-memory precision; files always store float32
        if self.data.dtype != np.float64:
            self.data = np.asarray(self.data, dtype=np.float32)
        total = sum(count for _, count in self.tissues)
        if self.data.ndim != 4 or self.data.shape[3] != total:
            raise ValueError(
                f"data shape {self.data.shape} does not match tissue layout "
                f"{self.tissues} (total {total})"
            )

    @property
    def dims(self):
        return self.data.shape[:3]

    @property
    def n_coeffs(self):
        return self.data.shape[3]

    def tissue_slice(self, name):
        offset = 0
        for tname, count in self.tissues:
            if tname == name:
                return slice(offset, offset + count)
            offset += count
        raise KeyError(f"no tissue {name!r} in layout {self.tissues}")

    def tissue(self, name):
        return self.data[..., self.tissue_slice(name)]

    @property
    def wm(self):
        return self.tissue("wm")

    def save(self, path):
        write_volume(path, self.data.astype(np.float32), "coeff",
                     voxel_size=self.voxel_size,
                     l_max=self.l_max, tissues=self.tissues,
                     norm_scale=self.norm_scale, provenance=self.provenance)

    @classmethod
    def load(cls, path):
        data, header = read_volume(path)
        if header["kind"] != "coeff":
            raise VolumeFormatError(f"{path}: expected a coeff volume, got {header['kind']!r}")
        return cls(
            data=data,
            l_max=header["l_max"],
            tissues=[(name, count) for name, count in header["tissues"]],
            voxel_size=tuple(header["voxel_size_mm"]),
            norm_scale=header["norm_scale"] if header["norm_scale"] is not None else 1.0,
            provenance=header.get("provenance", {}),
        )


@dataclass
class DwiVolume:
    """Diffusion-weighted signal raster plus its gradient scheme."""

    data: np.ndarray  # (X, Y, Z, N) float32, N = len(scheme)
    scheme: object
    voxel_size: tuple = (1.0, 1.0, 1.0)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4 or self.data.shape[3] != len(self.scheme):
            raise ValueError(
                f"signal shape {self.data.shape} does not match scheme length "
                f"{len(self.scheme)}"
            )
        if self.data.size and float(self.data.min()) < 0:
            raise ValueError("negative signal values")

    @property
    def dims(self):
        return self.data.shape[:3]

    def take_volumes(self, indices):
        from .gradients import GradientScheme  # local to avoid cycle at import

        indices = np.asarray(indices, dtype=int)
        return DwiVolume(
            data=np.ascontiguousarray(self.data[..., indices]),
            scheme=self.scheme.take(indices),
            voxel_size=self.voxel_size,
            provenance=dict(self.provenance),
        )

    def save(self, path):
        write_volume(path, self.data, "dwi", voxel_size=self.voxel_size,
                     provenance=self.provenance)


def save_mask(path, mask, voxel_size=(1.0, 1.0, 1.0), provenance=None):
    write_volume(path, np.asarray(mask, dtype=np.uint8), "mask",
                 voxel_size=voxel_size, provenance=provenance)


def load_mask(path):
    data, header = read_volume(path)
    if header["kind"] != "mask":
        raise VolumeFormatError(f"{path}: expected a mask volume, got {header['kind']!r}")
    return data[..., 0].astype(bool)


def save_labels(path, labels, voxel_size=(1.0, 1.0, 1.0), provenance=None):
    write_volume(path, np.asarray(labels, dtype=np.int32), "labels",
                 voxel_size=voxel_size, provenance=provenance)


def load_labels(path):
    data, header = read_volume(path)
    if header["kind"] != "labels":
        raise VolumeFormatError(f"{path}: expected a labels volume, got {header['kind']!r}")
    return data[..., 0]


def load_dwi(path, scheme):
    data, header = read_volume(path)
    if header["kind"] != "dwi":
        raise VolumeFormatError(f"{path}: expected a dwi volume, got {header['kind']!r}")
    return DwiVolume(data=data, scheme=scheme,
                     voxel_size=tuple(header["voxel_size_mm"]),
                     provenance=header.get("provenance", {}))
