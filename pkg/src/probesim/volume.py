"""Voxel volumes: storage, `.svol` file I/O, sampling, skin-surface
extraction, and oblique plane slicing.

The `.svol` container is a single UTF-8 JSON header line terminated by a
NUL byte, followed by the raw payload in x-fastest order, little-endian.
Header keys: dims (3 ints), spacing_mm, origin_mm, elem in {f32, u8, u16},
kind in {ct, label}. Landmark sidecars are plain JSON with named poses
(position + wxyz quaternion).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import _kernels
from .geometry import Pose

DEFAULT_CT_BACKGROUND = -1000.0
BACKGROUND_LABEL = 0

_ELEM_DTYPES = {"f32": np.float32, "u8": np.uint8, "u16": np.uint16}
_DTYPE_ELEMS = {np.dtype(v): k for k, v in _ELEM_DTYPES.items()}


class VolumeFormatError(ValueError):
    """Base class for `.svol` parsing failures."""


class MalformedHeaderError(VolumeFormatError):
    pass


class PayloadSizeError(VolumeFormatError):
    pass


class UnsupportedElementError(VolumeFormatError):
    pass


@dataclass
class Volume:
    """Axis-aligned voxel grid.

    data has shape (nx, ny, nz); origin_mm is the world position of the
    center of voxel (0, 0, 0). Instances are read-only after construction
    so they can be sampled concurrently.
    """

    data: np.ndarray
    spacing_mm: np.ndarray
    origin_mm: np.ndarray
    kind: str = "ct"
    background: float = DEFAULT_CT_BACKGROUND

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.ndim != 3:
            raise ValueError("volume data must be 3-dimensional")
        self.spacing_mm = np.asarray(self.spacing_mm, dtype=np.float64).reshape(3)
        self.origin_mm = np.asarray(self.origin_mm, dtype=np.float64).reshape(3)
        if np.any(self.spacing_mm <= 0):
            raise ValueError("voxel spacing must be positive")
        if self.kind not in ("ct", "label"):
            raise ValueError(f"unknown volume kind {self.kind!r}")
        if self.kind == "label":
            self.background = BACKGROUND_LABEL
        self._inv_spacing = 1.0 / self.spacing_mm

    @property
    def dims(self):
        return self.data.shape

    def voxel_centers_max(self):
        """World position of the last voxel center along each axis."""
        return self.origin_mm + (np.array(self.dims) - 1) * self.spacing_mm

    def world_to_voxel(self, points):
        return (np.asarray(points, dtype=np.float64) - self.origin_mm) * self._inv_spacing

    def sample_trilinear(self, points):
        """Trilinear interpolation at world points (N, 3) or (3,); points
        outside the grid return the configured background value."""
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        out = np.empty(pts.shape[0], dtype=np.float32)
        _kernels.trilinear(
            self.data.astype(np.float32, copy=False),
            self.origin_mm,
            self._inv_spacing,
            pts,
            np.float32(self.background),
            out,
        )
        return out[0] if np.asarray(points).ndim == 1 else out

    def sample_label(self, points):
        """Nearest-neighbor label at world points; background label 0
        outside. Midpoint ties go to the lower voxel index."""
        if self.kind != "label":
            raise ValueError("sample_label requires a label volume")
        pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
        out = np.empty(pts.shape[0], dtype=self.data.dtype)
        _kernels.nearest_label(
            self.data, self.origin_mm, self._inv_spacing, pts, self.data.dtype.type(0), out
        )
        return out[0] if np.asarray(points).ndim == 1 else out


def save_volume(volume: Volume, path):
    header = {
        "dims": [int(d) for d in volume.dims],
        "spacing_mm": [float(s) for s in volume.spacing_mm],
        "origin_mm": [float(o) for o in volume.origin_mm],
        "elem": _DTYPE_ELEMS[volume.data.dtype],
        "kind": volume.kind,
    }
    payload = np.ascontiguousarray(volume.data.transpose(2, 1, 0))
    if payload.dtype.byteorder == ">":
        payload = payload.astype(payload.dtype.newbyteorder("<"))
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\x00")
        f.write(payload.tobytes())


def load_volume(path, background=None) -> Volume:
    with open(path, "rb") as f:
        raw = f.read()
    sep = raw.find(b"\x00")
    if sep < 0:
        raise MalformedHeaderError(f"{path}: missing NUL header terminator")
    try:
        header = json.loads(raw[:sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: header is not valid JSON: {exc}") from exc
    for key in ("dims", "spacing_mm", "origin_mm", "elem", "kind"):
        if key not in header:
            raise MalformedHeaderError(f"{path}: header missing key {key!r}")
    elem = header["elem"]
    if elem not in _ELEM_DTYPES:
        raise UnsupportedElementError(f"{path}: unsupported element type {elem!r}")
    dims = header["dims"]
    if len(dims) != 3 or any(int(d) < 1 for d in dims):
        raise MalformedHeaderError(f"{path}: bad dims {dims!r}")
    nx, ny, nz = (int(d) for d in dims)
    dtype = np.dtype(_ELEM_DTYPES[elem]).newbyteorder("<")
    payload = raw[sep + 1 :]
    expected = nx * ny * nz * dtype.itemsize
    if len(payload) != expected:
        raise PayloadSizeError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx).transpose(2, 1, 0)
    kind = header["kind"]
    if kind not in ("ct", "label"):
        raise MalformedHeaderError(f"{path}: unknown kind {kind!r}")
    if background is None:
        background = DEFAULT_CT_BACKGROUND if kind == "ct" else BACKGROUND_LABEL
    return Volume(
        data=np.ascontiguousarray(data.astype(data.dtype.newbyteorder("="))),
        spacing_mm=header["spacing_mm"],
        origin_mm=header["origin_mm"],
        kind=kind,
        background=background,
    )


def save_landmarks(path, landmarks: dict):
    doc = {
        "frames": {
            name: {
                "position_mm": [float(v) for v in pose.position],
                "quaternion_wxyz": [float(v) for v in pose.quaternion()],
            }
            for name, pose in landmarks.items()
        }
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)


def load_landmarks(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    return {
        name: Pose.from_quat(entry["position_mm"], entry["quaternion_wxyz"])
        for name, entry in doc["frames"].items()
    }


@dataclass(frozen=True)
class SliceSpec:
    """Image-plane geometry: rows advance with depth (res_z mm/px), columns
    span the lateral axis (res_x mm/px), elevation sheets are res_e apart."""

    height: int = 200
    width: int = 150
    res_x: float = 0.5
    res_z: float = 0.5
    elevation: int = 1
    res_e: float = 1.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.elevation < 1:
            raise ValueError("slice dimensions must be >= 1")
        if self.res_x <= 0 or self.res_z <= 0 or self.res_e <= 0:
            raise ValueError("slice resolutions must be positive")

    @property
    def n_pixels(self):
        return self.height * self.width * self.elevation

    @property
    def depth_mm(self):
        return (self.height - 1) * self.res_z

    @property
    def half_width_mm(self):
        return (self.width - 1) / 2.0 * self.res_x


@lru_cache(maxsize=16)
def _local_grid(spec: SliceSpec):
    lx = (np.arange(spec.width) - (spec.width - 1) / 2.0) * spec.res_x
    ly = (np.arange(spec.elevation) - (spec.elevation - 1) / 2.0) * spec.res_e
    lz = np.arange(spec.height) * spec.res_z
    grid = np.empty((spec.elevation, spec.height, spec.width, 3), dtype=np.float64)
    grid[..., 0] = lx[None, None, :]
    grid[..., 1] = ly[:, None, None]
    grid[..., 2] = lz[None, :, None]
    return grid.reshape(-1, 3)


def pixel_world_positions(probe: Pose, spec: SliceSpec, out=None):
    """World positions of every pixel, flat (E*H*W, 3), ordered (e, r, c)."""
    if out is None:
        out = np.empty((spec.n_pixels, 3), dtype=np.float64)
    _kernels.plane_positions(
        probe.rotation,
        probe.position,
        spec.height,
        spec.width,
        spec.elevation,
        spec.res_x,
        spec.res_z,
        spec.res_e,
        out,
    )
    return out


@dataclass
class PlaneSlices:
    """CT and label slices on a probe plane plus per-pixel world positions.

    Arrays are (E, H, W) and (E, H, W, 3); use ct2d/labels2d for the
    single-plane case.
    """

    ct: np.ndarray
    labels: np.ndarray
    positions: np.ndarray
    spec: SliceSpec
    probe: Pose

    @property
    def ct2d(self):
        return self.ct[0]

    @property
    def labels2d(self):
        return self.labels[0]


def extract_plane_slices(ct: Volume, labels: Volume, probe: Pose, spec: SliceSpec) -> PlaneSlices:
    """Sample CT (trilinear) and labels (nearest) on the probe plane(s)."""
    pts = pixel_world_positions(probe, spec)
    ct_vals = np.empty(spec.n_pixels, dtype=np.float32)
    _kernels.trilinear(
        ct.data.astype(np.float32, copy=False),
        ct.origin_mm,
        ct._inv_spacing,
        pts,
        np.float32(ct.background),
        ct_vals,
    )
    lb_vals = np.empty(spec.n_pixels, dtype=labels.data.dtype)
    _kernels.nearest_label(
        labels.data, labels.origin_mm, labels._inv_spacing, pts, labels.data.dtype.type(0), lb_vals
    )
    shape = (spec.elevation, spec.height, spec.width)
    return PlaneSlices(
        ct=ct_vals.reshape(shape),
        labels=lb_vals.reshape(shape),
        positions=pts.reshape(shape + (3,)),
        spec=spec,
        probe=probe,
    )


@dataclass
class SkinSurface:
    """Dorsal skin as a heightfield z(x, y) over the volume's (x, y) grid,
    with outward unit normals; columns without body voxels are invalid."""

    heightfield: np.ndarray
    normals: np.ndarray
    valid: np.ndarray
    origin_xy: np.ndarray
    spacing_xy: np.ndarray

    def sample(self, x, y):
        """Bilinear (z, normal) at world (x, y); raises outside the valid
        footprint. The normal is renormalized after interpolation."""
        cx = (x - self.origin_xy[0]) / self.spacing_xy[0]
        cy = (y - self.origin_xy[1]) / self.spacing_xy[1]
        nx, ny = self.heightfield.shape
        if not (0.0 <= cx <= nx - 1.0 and 0.0 <= cy <= ny - 1.0):
            raise ValueError(f"({x}, {y}) outside the skin grid")
        x0 = min(int(cx), nx - 2) if nx > 1 else 0
        y0 = min(int(cy), ny - 2) if ny > 1 else 0
        x1 = min(x0 + 1, nx - 1)
        y1 = min(y0 + 1, ny - 1)
        if not (
            self.valid[x0, y0] and self.valid[x0, y1] and self.valid[x1, y0] and self.valid[x1, y1]
        ):
            raise ValueError(f"({x}, {y}) touches an empty skin column")
        fx = cx - x0
        fy = cy - y0
        w00 = (1 - fx) * (1 - fy)
        w01 = (1 - fx) * fy
        w10 = fx * (1 - fy)
        w11 = fx * fy
        z = (
            w00 * self.heightfield[x0, y0]
            + w01 * self.heightfield[x0, y1]
            + w10 * self.heightfield[x1, y0]
            + w11 * self.heightfield[x1, y1]
        )
        n = (
            w00 * self.normals[x0, y0]
            + w01 * self.normals[x0, y1]
            + w10 * self.normals[x1, y0]
            + w11 * self.normals[x1, y1]
        )
        return z, n / np.linalg.norm(n)


def _gaussian_kernel1d(sigma, truncate=3.0):
    radius = max(1, int(math.ceil(truncate * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth3d(field, sigma):
    """Separable zero-padded Gaussian smoothing of a 3D array."""
    kernel = _gaussian_kernel1d(sigma)
    radius = len(kernel) // 2
    out = field.astype(np.float32)
    for axis in range(3):
        acc = np.zeros_like(out)
        for k, w in enumerate(kernel):
            shift = k - radius
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if shift > 0:
                src[axis] = slice(shift, None)
                dst[axis] = slice(None, -shift)
            elif shift < 0:
                src[axis] = slice(None, shift)
                dst[axis] = slice(-shift, None)
            acc[tuple(dst)] += np.float32(w) * out[tuple(src)]
        out = acc
    return out


def extract_skin_surface(body: Volume, body_labels=None, smooth_sigma=2.0) -> SkinSurface:
    """Topmost body voxel per (x, y) column as a heightfield, with normals
    from the negative gradient of the Gaussian-smoothed occupancy field
    (sigma in voxels), oriented into the +z hemisphere."""
    if body.kind != "label":
        raise ValueError("skin extraction requires a label volume")
    if body_labels is None:
        occupancy = body.data != BACKGROUND_LABEL
    else:
        occupancy = np.isin(body.data, np.asarray(list(body_labels)))
    if not occupancy.any():
        raise ValueError("volume contains no body voxels")

    nx, ny, nz = body.dims
    valid = occupancy.any(axis=2)
    # index of the topmost occupied voxel per column
    top = nz - 1 - np.argmax(occupancy[:, :, ::-1], axis=2)
    heightfield = np.where(valid, body.origin_mm[2] + top * body.spacing_mm[2], np.nan)

    smooth = _smooth3d(occupancy.astype(np.float32), smooth_sigma)
    gx, gy, gz = np.gradient(smooth, *body.spacing_mm)
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    kk = np.clip(top, 1, nz - 2)
    normals = np.stack([-gx[ii, jj, kk], -gy[ii, jj, kk], -gz[ii, jj, kk]], axis=-1)
    norms = np.linalg.norm(normals, axis=-1)
    fallback = norms < 1e-8
    normals[fallback] = (0.0, 0.0, 1.0)
    norms[fallback] = 1.0
    normals /= norms[..., None]
    flip = normals[..., 2] < 0.0
    normals[flip] *= -1.0
    normals[~valid] = np.nan

    return SkinSurface(
        heightfield=heightfield,
        normals=normals,
        valid=valid,
        origin_xy=body.origin_mm[:2].copy(),
        spacing_xy=body.spacing_mm[:2].copy(),
    )
