"""Physics-based ultrasound image formation from CT/label plane slices.

The image is a reflection term plus a backscatter term. Reflection comes
from acoustic-impedance steps along the beam (impedance mapped affinely
from CT intensity), weighted by the remaining beam energy after per-tissue
attenuation and by the incidence angle at the boundary, and blurred by a
separable Gaussian point-spread function. Backscatter is a gated speckle
pattern drawn from 3D noise fields that are anchored in the patient frame,
so the texture at a fixed world point is identical across overlapping
frames and over time.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels, rng
from .geometry import Pose
from .volume import PlaneSlices, SliceSpec, Volume, extract_plane_slices, pixel_world_positions

log = logging.getLogger(__name__)

LUT_FIELDS = ("impedance_scale", "attenuation", "sigma0", "mu0", "mu1")


@dataclass(frozen=True)
class TissueAcoustics:
    """Acoustic parameters of one tissue label.

    attenuation is in nepers per mm per MHz; sigma0/mu0 set the speckle
    brightness distribution and mu1 the scatterer density gate.
    """

    impedance_scale: float = 1.0
    attenuation: float = 0.010
    sigma0: float = 0.20
    mu0: float = 0.35
    mu1: float = 0.55
    name: str = "soft tissue"

    def __post_init__(self):
        if self.attenuation < 0:
            raise ValueError(f"{self.name}: attenuation must be >= 0")
        if self.sigma0 < 0:
            raise ValueError(f"{self.name}: sigma0 must be >= 0")
        if not 0.0 <= self.mu1 <= 1.0:
            raise ValueError(f"{self.name}: mu1 must be in [0, 1]")


_FALLBACK = TissueAcoustics()

# speckle levels tuned so boundary echoes stay brighter than the texture
# while the slab phantom still shows visible speckle at depth
_DEFAULT_ENTRIES = {
    0: TissueAcoustics(1.0, 0.0, 0.0, 0.0, 0.0, name="air"),
    1: TissueAcoustics(1.0, 0.015, 0.20, 0.30, 0.70, name="skin"),
    2: TissueAcoustics(1.0, 0.0075, 0.15, 0.18, 0.50, name="fat"),
    3: TissueAcoustics(1.0, 0.012, 0.12, 0.16, 0.45, name="muscle"),
    4: TissueAcoustics(1.5, 0.15, 0.05, 0.05, 0.05, name="cortical bone"),
    5: TissueAcoustics(1.2, 0.05, 0.10, 0.15, 0.30, name="trabecular bone"),
}


class AcousticTable:
    """Per-label acoustic parameters with a logged soft-tissue fallback for
    labels without an entry."""

    def __init__(self, entries=None, fallback=_FALLBACK):
        self.entries = dict(entries) if entries else dict(_DEFAULT_ENTRIES)
        self.fallback = fallback
        self._warned = set()

    @staticmethod
    def default() -> "AcousticTable":
        return AcousticTable()

    def get(self, label: int) -> TissueAcoustics:
        entry = self.entries.get(int(label))
        if entry is None:
            if label not in self._warned:
                log.warning("no acoustic entry for label %d, using fallback", label)
                self._warned.add(int(label))
            return self.fallback
        return entry

    def lookup_arrays(self, max_label: int):
        """Dense float32 LUTs (impedance_scale, attenuation, sigma0, mu0,
        mu1) indexed by label id."""
        luts = {name: np.empty(max_label + 1, dtype=np.float32) for name in LUT_FIELDS}
        for label in range(max_label + 1):
            entry = self.get(label)
            for name in LUT_FIELDS:
                luts[name][label] = getattr(entry, name)
        return luts

    def to_json(self, path):
        doc = {
            "version": 1,
            "fallback": {f: getattr(self.fallback, f) for f in LUT_FIELDS + ("name",)},
            "labels": {
                str(label): {f: getattr(e, f) for f in LUT_FIELDS + ("name",)}
                for label, e in sorted(self.entries.items())
            },
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)

    @staticmethod
    def from_json(path) -> "AcousticTable":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        entries = {
            int(label): TissueAcoustics(**params) for label, params in doc["labels"].items()
        }
        fallback = TissueAcoustics(**doc["fallback"]) if "fallback" in doc else _FALLBACK
        return AcousticTable(entries, fallback)


def _upsample_linear(arr, scale, n_out, axis):
    """Exact linear upsampling of one axis by an integer factor."""
    idx = np.arange(n_out)
    lo = idx // scale
    hi = np.minimum(lo + 1, arr.shape[axis] - 1)
    frac = (idx % scale) / scale
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    shape = [1, 1, 1]
    shape[axis] = n_out
    return a + (b - a) * frac.reshape(shape)


@dataclass
class NoiseFields:
    """Multi-octave 3D noise anchored in the patient frame: per octave one
    standard-normal grid (speckle brightness) and one uniform grid (the
    density gate). Built once per patient and never mutated."""

    seed: int
    n0: list
    n1: list
    origins: list
    inv_spacings: list
    scales: tuple

    @staticmethod
    def for_volume(vol: Volume, seed: int, scales=(1.0, 4.0, 16.0)) -> "NoiseFields":
        n0, n1, origins, inv_spacings = [], [], [], []
        for o, scale in enumerate(scales):
            spacing = vol.spacing_mm * scale
            dims = np.maximum(2, np.ceil((np.array(vol.dims) - 1) / scale).astype(int) + 1)
            gen0 = rng.stream(seed, rng.NOISE_FIELD, o, 0)
            gen1 = rng.stream(seed, rng.NOISE_FIELD, o, 1)
            n0.append(gen0.standard_normal(tuple(dims), dtype=np.float32))
            n1.append(gen1.random(tuple(dims), dtype=np.float32))
            origins.append(vol.origin_mm.copy())
            inv_spacings.append(1.0 / spacing)
        return NoiseFields(seed, n0, n1, origins, inv_spacings, tuple(scales))

    def combined_base_field(self, weights):
        """Weighted multi-octave N0 resampled onto the base lattice, or
        None when the octave lattices do not nest into the base one.

        A trilinear interpolant restricted to a sub-cell is still
        trilinear, so for integer scale factors with a shared origin the
        upsampled field interpolates to exactly the same values as the
        per-octave sum (one float32 rounding apart)."""
        base = self.n0[0]
        shape = base.shape
        acc = np.float64(weights[0]) * base.astype(np.float64)
        for o in range(1, len(self.n0)):
            w = weights[o] if o < len(weights) else 0.0
            if w == 0.0:
                continue
            scale = self.scales[o] / self.scales[0]
            if scale != int(scale) or not np.array_equal(self.origins[o], self.origins[0]):
                return None
            up = self.n0[o].astype(np.float64)
            for axis in range(3):
                up = _upsample_linear(up, int(scale), shape[axis], axis)
            acc += w * up
        return acc.astype(np.float32)

    def sample_n0(self, points, weights, out=None):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if out is None:
            out = np.zeros(pts.shape[0], dtype=np.float32)
        else:
            out[:] = 0.0
        for grid, origin, inv_sp, w in zip(self.n0, self.origins, self.inv_spacings, weights):
            _kernels.trilinear_clamped_accum(grid, origin, inv_sp, pts, np.float32(w), out)
        return out

    def sample_gate(self, points, n_octaves=1, out=None):
        """Gate value: max of the uniform grids over the first octaves."""
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if out is None:
            out = np.empty(pts.shape[0], dtype=np.float32)
        out[:] = -np.inf
        for o in range(min(n_octaves, len(self.n1))):
            _kernels.trilinear_clamped_max(
                self.n1[o], self.origins[o], self.inv_spacings[o], pts, out
            )
        return out


@dataclass(frozen=True)
class UsParams:
    """Image-formation constants. PSF sigmas are fractions of the image
    height/width, truncated at 3 sigma (odd kernel size)."""

    frequency_mhz: float = 5.0
    initial_energy: float = 1.0
    psf_frac_rows: float = 0.01
    psf_frac_cols: float = 0.01
    psf_truncate: float = 3.0
    octave_weights: tuple = (0.6, 0.3, 0.1)
    gate_octaves: int = 1
    gain: float = 3.0
    gamma: float = 1.0
    ct_floor: float = -1000.0
    impedance_eps: float = 1e-3
    impedance_offset: float = 0.0
    theta_smooth_px: float = 2.0

    def __post_init__(self):
        if self.frequency_mhz <= 0 or self.initial_energy <= 0:
            raise ValueError("frequency and initial energy must be positive")


@dataclass
class UsFrame:
    """Simulated image(s) in [0, 1] plus the slices they were formed from."""

    image: np.ndarray  # (E, H, W) float32
    ct: np.ndarray
    labels: np.ndarray
    positions: np.ndarray
    spec: SliceSpec
    probe: Pose

    @property
    def image2d(self):
        return self.image[0]


def _gaussian_kernel(sigma, truncate):
    radius = max(1, int(math.ceil(truncate * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / max(sigma, 1e-6)) ** 2)
    return (k / k.sum()).astype(np.float32)


def psf_kernels(spec: SliceSpec, params: UsParams):
    rows = _gaussian_kernel(params.psf_frac_rows * spec.height, params.psf_truncate)
    cols = _gaussian_kernel(params.psf_frac_cols * spec.width, params.psf_truncate)
    return rows, cols


def impedance_map(ct_slice, label_slice, table: AcousticTable, params: UsParams):
    """Acoustic impedance, affine in CT intensity and strictly positive."""
    ct = np.ascontiguousarray(ct_slice, dtype=np.float32)
    labels = np.ascontiguousarray(label_slice)
    lut = table.lookup_arrays(int(labels.max()))["impedance_scale"]
    out = np.empty_like(ct)
    _kernels.impedance(
        ct,
        labels,
        lut,
        np.float32(params.ct_floor),
        np.float32(params.impedance_eps),
        np.float32(params.impedance_offset),
        out,
    )
    return out


def _decay_lut(alpha_lut, params: UsParams, res_z_mm: float):
    return np.exp(
        -np.float64(params.frequency_mhz * res_z_mm) * alpha_lut.astype(np.float64)
    ).astype(np.float32)


def remaining_energy(label_slice, table: AcousticTable, params: UsParams, res_z_mm: float):
    """Beam energy left at each pixel after attenuation down its column."""
    labels = np.ascontiguousarray(label_slice)
    lut = table.lookup_arrays(int(labels.max()))["attenuation"]
    out = np.empty(labels.shape, dtype=np.float32)
    _kernels.column_energy(
        labels,
        _decay_lut(lut, params, res_z_mm),
        np.float32(params.initial_energy),
        out,
    )
    return out


def _sepconv(img, rows, cols):
    h, w = img.shape
    kc = len(cols) // 2
    tmp = np.empty_like(img)
    pad_in = np.zeros((h, w + 2 * kc), dtype=np.float32)
    pad_acc = np.empty_like(pad_in)
    out = np.empty_like(img)
    _kernels.sepconv2d(img, rows, cols, tmp, pad_in, pad_acc, out)
    return out


def boundary_and_incidence(label_slice, params: UsParams = UsParams()):
    """Boundary indicator G (label change from the row above) and the
    incidence angle theta in [0, pi/2] between the beam and the boundary
    normal, estimated from Sobel gradients of the smoothed cumulative
    label-transition field."""
    labels = np.ascontiguousarray(label_slice)
    g = np.empty(labels.shape, dtype=np.float32)
    _kernels.boundary_mask(labels, g)
    cum = np.empty_like(g)
    _kernels.column_cumsum(g, cum)
    k = _gaussian_kernel(params.theta_smooth_px, params.psf_truncate)
    smooth = _sepconv(cum, k, k)
    cos = np.empty_like(g)
    _kernels.incidence_cos(smooth, cos)
    return g, np.arccos(np.clip(cos, 0.0, 1.0))


def reflection_term(z, energy, g, theta, params: UsParams, spec: SliceSpec):
    """|E cos(theta) dZ/sumZ| modulated by the PSF-convolved boundary map."""
    rows, cols = psf_kernels(spec, params)
    conv_g = _sepconv(np.ascontiguousarray(g, dtype=np.float32), rows, cols)
    out = np.empty_like(conv_g)
    _kernels.reflection(
        np.ascontiguousarray(z, dtype=np.float32),
        np.ascontiguousarray(energy, dtype=np.float32),
        np.ascontiguousarray(np.cos(theta), dtype=np.float32),
        conv_g,
        out,
    )
    return out


def scatter_pattern(label_slice, positions, noise: NoiseFields, table: AcousticTable, params: UsParams):
    """World-anchored gated speckle pattern T before PSF blur: where the
    gate noise is below the tissue mu1, T = N0 sigma0 + mu0, else 0."""
    labels = np.ascontiguousarray(label_slice)
    pts = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    n0 = noise.sample_n0(pts, params.octave_weights)
    n1 = noise.sample_gate(pts, params.gate_octaves)
    luts = table.lookup_arrays(int(labels.max()))
    out = np.empty(labels.shape, dtype=np.float32)
    _kernels.scatter_pattern(
        labels, n0, n1, luts["sigma0"], luts["mu0"], luts["mu1"], out
    )
    return out


def scatter_term(label_slice, positions, noise, table, energy, params: UsParams, spec: SliceSpec):
    """Backscatter B = E * (PSF x T)."""
    t = scatter_pattern(label_slice, positions, noise, table, params)
    rows, cols = psf_kernels(spec, params)
    conv_t = _sepconv(t, rows, cols)
    return np.ascontiguousarray(energy, dtype=np.float32) * conv_t


def simulate_us(slices: PlaneSlices, table: AcousticTable, noise: NoiseFields, params: UsParams) -> UsFrame:
    """Full image formation for one probe pose (all elevation sheets)."""
    spec = slices.spec
    image = np.empty((spec.elevation, spec.height, spec.width), dtype=np.float32)
    for e in range(spec.elevation):
        labels = slices.labels[e]
        ct = slices.ct[e]
        z = impedance_map(ct, labels, table, params)
        energy = remaining_energy(labels, table, params, spec.res_z)
        g, theta = boundary_and_incidence(labels, params)
        r = reflection_term(z, energy, g, theta, params, spec)
        b = scatter_term(
            labels, slices.positions[e], noise, table, energy, params, spec
        )
        _kernels.combine_image(
            r, np.ones_like(energy), b, np.float32(params.gain), np.float32(params.gamma), image[e]
        )
    return UsFrame(
        image=image,
        ct=slices.ct,
        labels=slices.labels,
        positions=slices.positions,
        spec=spec,
        probe=slices.probe,
    )


class _Workspace:
    """Scratch buffers for one rendering thread. The pad_*_in buffers keep
    their pad columns zeroed across calls (the conv kernel never writes
    them)."""

    def __init__(self, spec: SliceSpec, label_dtype, kc_theta: int, kc_psf: int):
        n = spec.n_pixels
        h, w = spec.height, spec.width
        self.pts = np.empty((n, 3), dtype=np.float64)
        self.ct = np.empty(n, dtype=np.float32)
        self.lb = np.empty(n, dtype=label_dtype)
        self.n0 = np.empty(n, dtype=np.float32)
        self.n1 = np.empty(n, dtype=np.float32)
        names = ("energy", "g", "cum", "smooth", "cos", "z", "tmp", "conv", "t", "r")
        for name in names:
            setattr(self, name, np.empty((h, w), dtype=np.float32))
        self.pad_theta_in = np.zeros((h, w + 2 * kc_theta), dtype=np.float32)
        self.pad_theta_acc = np.empty_like(self.pad_theta_in)
        self.pad_psf_in = np.zeros((h, w + 2 * kc_psf), dtype=np.float32)
        self.pad_psf_acc = np.empty_like(self.pad_psf_in)


class UsSimulator:
    """Reusable renderer binding a patient's volumes, acoustic table, noise
    fields, and imaging parameters. render_batch fans independent frames
    out over a thread pool; every output is a pure function of (pose, seed,
    parameters) so results do not depend on thread count."""

    def __init__(
        self,
        ct: Volume,
        labels: Volume,
        table: AcousticTable,
        noise: NoiseFields,
        params: UsParams,
        spec: SliceSpec,
        threads: int = 1,
    ):
        self.ct = ct
        self.labels = labels
        self.table = table
        self.noise = noise
        self.params = params
        self.spec = spec
        self.threads = max(1, int(threads))
        max_label = int(labels.data.max())
        self.luts = table.lookup_arrays(max_label)
        self.psf_rows, self.psf_cols = psf_kernels(spec, params)
        self.theta_kernel = _gaussian_kernel(params.theta_smooth_px, params.psf_truncate)
        self._ct_f32 = ct.data.astype(np.float32, copy=False)
        self._decay = _decay_lut(self.luts["attenuation"], params, spec.res_z)
        self._workspaces = [
            _Workspace(
                spec,
                labels.data.dtype,
                len(self.theta_kernel) // 2,
                len(self.psf_cols) // 2,
            )
            for _ in range(self.threads)
        ]
        # when CT, labels, and the base noise octave live on one grid, pack
        # (ct, combined multi-octave n0, base n1) into a single 3-channel
        # volume: one gather pass instead of three or more
        aligned = (
            np.array_equal(noise.origins[0], ct.origin_mm)
            and np.array_equal(noise.inv_spacings[0], 1.0 / ct.spacing_mm)
            and noise.n0[0].shape == ct.dims
            and labels.dims == ct.dims
            and np.array_equal(labels.origin_mm, ct.origin_mm)
            and np.array_equal(labels.spacing_mm, ct.spacing_mm)
        )
        combined = noise.combined_base_field(params.octave_weights) if aligned else None
        if combined is not None:
            packed = np.empty(ct.dims + (3,), dtype=np.float32)
            packed[..., 0] = self._ct_f32
            packed[..., 1] = combined
            packed[..., 2] = noise.n1[0]
            self._packed = packed
        else:
            self._packed = None
        # world positions are only needed separately when extra gate
        # octaves sample them (or on the generic path)
        self._need_pts = self._packed is None or params.gate_octaves > 1
        self._chunk_ok = self._packed is not None and params.gate_octaves == 1
        self._pool = (
            ThreadPoolExecutor(max_workers=self.threads, thread_name_prefix="usrender")
            if self.threads > 1
            else None
        )

    def _sample(self, probe: Pose, ws: _Workspace):
        """Fill ws.ct/lb/n0/n1 for all sheets of one frame."""
        spec, params = self.spec, self.params
        if self._need_pts or self._packed is None:
            _kernels.plane_positions(
                probe.rotation,
                probe.position,
                spec.height,
                spec.width,
                spec.elevation,
                spec.res_x,
                spec.res_z,
                spec.res_e,
                ws.pts,
            )
        if self._packed is not None:
            _kernels.sample_fused(
                self._packed,
                self.labels.data,
                self.ct.origin_mm,
                self.ct._inv_spacing,
                probe.rotation,
                probe.position,
                spec.height,
                spec.width,
                spec.elevation,
                spec.res_x,
                spec.res_z,
                spec.res_e,
                np.float32(self.ct.background),
                np.float32(1.0),
                ws.ct,
                ws.lb,
                ws.n0,
                ws.n1,
            )
            extra_n0 = range(0)
            extra_n1 = range(1, min(params.gate_octaves, len(self.noise.n1)))
        else:
            _kernels.trilinear(
                self._ct_f32,
                self.ct.origin_mm,
                self.ct._inv_spacing,
                ws.pts,
                np.float32(self.ct.background),
                ws.ct,
            )
            _kernels.nearest_label(
                self.labels.data,
                self.labels.origin_mm,
                self.labels._inv_spacing,
                ws.pts,
                self.labels.data.dtype.type(0),
                ws.lb,
            )
            ws.n0[:] = 0.0
            ws.n1[:] = -np.inf
            extra_n0 = range(0, len(self.noise.n0))
            extra_n1 = range(0, min(params.gate_octaves, len(self.noise.n1)))
        for o in extra_n0:
            weight = params.octave_weights[o] if o < len(params.octave_weights) else 0.0
            if weight == 0.0:
                continue
            _kernels.trilinear_clamped_accum(
                self.noise.n0[o],
                self.noise.origins[o],
                self.noise.inv_spacings[o],
                ws.pts,
                np.float32(weight),
                ws.n0,
            )
        for o in extra_n1:
            _kernels.trilinear_clamped_max(
                self.noise.n1[o],
                self.noise.origins[o],
                self.noise.inv_spacings[o],
                ws.pts,
                ws.n1,
            )

    def render_into(self, probe: Pose, out, ws: _Workspace):
        """Render all sheets of one frame into out (E, H, W) float32."""
        spec, params = self.spec, self.params
        h, w = spec.height, spec.width
        self._sample(probe, ws)
        n_sheet = h * w
        for e in range(spec.elevation):
            _kernels.form_image(
                ws.lb[e * n_sheet : (e + 1) * n_sheet].reshape(h, w),
                ws.ct[e * n_sheet : (e + 1) * n_sheet].reshape(h, w),
                ws.n0[e * n_sheet : (e + 1) * n_sheet],
                ws.n1[e * n_sheet : (e + 1) * n_sheet],
                self._decay,
                self.luts["impedance_scale"],
                self.luts["sigma0"],
                self.luts["mu0"],
                self.luts["mu1"],
                self.theta_kernel,
                self.psf_rows,
                self.psf_cols,
                np.float32(params.ct_floor),
                np.float32(params.impedance_eps),
                np.float32(params.impedance_offset),
                np.float32(params.initial_energy),
                np.float32(params.gain),
                np.float32(params.gamma),
                ws.energy,
                ws.g,
                ws.cum,
                ws.smooth,
                ws.cos,
                ws.z,
                ws.tmp,
                ws.conv,
                ws.t,
                ws.r,
                ws.pad_theta_in,
                ws.pad_theta_acc,
                ws.pad_psf_in,
                ws.pad_psf_acc,
                out[e],
            )
        return out

    def render(self, probe: Pose) -> UsFrame:
        """Convenience single-frame render retaining the slices."""
        slices = extract_plane_slices(self.ct, self.labels, probe, self.spec)
        return simulate_us(slices, self.table, self.noise, self.params)

    def _render_span(self, rotations, positions, out, ws: _Workspace):
        params, spec = self.params, self.spec
        _kernels.render_chunk(
            rotations,
            positions,
            self._packed,
            self.labels.data,
            self.ct.origin_mm,
            self.ct._inv_spacing,
            spec.height,
            spec.width,
            spec.elevation,
            spec.res_x,
            spec.res_z,
            spec.res_e,
            np.float32(self.ct.background),
            self._decay,
            self.luts["impedance_scale"],
            self.luts["sigma0"],
            self.luts["mu0"],
            self.luts["mu1"],
            self.theta_kernel,
            self.psf_rows,
            self.psf_cols,
            np.float32(params.ct_floor),
            np.float32(params.impedance_eps),
            np.float32(params.impedance_offset),
            np.float32(params.initial_energy),
            np.float32(params.gain),
            np.float32(params.gamma),
            ws.ct,
            ws.lb,
            ws.n0,
            ws.n1,
            ws.energy,
            ws.g,
            ws.cum,
            ws.smooth,
            ws.cos,
            ws.z,
            ws.tmp,
            ws.conv,
            ws.t,
            ws.r,
            ws.pad_theta_in,
            ws.pad_theta_acc,
            ws.pad_psf_in,
            ws.pad_psf_acc,
            out,
        )

    def render_batch(self, poses, out=None):
        """Render n independent frames into (n, E, H, W) float32."""
        n = len(poses)
        spec = self.spec
        if out is None:
            out = np.empty((n, spec.elevation, spec.height, spec.width), dtype=np.float32)
        if self._chunk_ok:
            rotations = np.empty((n, 3, 3), dtype=np.float64)
            positions = np.empty((n, 3), dtype=np.float64)
            for i, p in enumerate(poses):
                rotations[i] = p.rotation
                positions[i] = p.position
            if self._pool is None or n == 1:
                self._render_span(rotations, positions, out, self._workspaces[0])
                return out
            spans = np.array_split(np.arange(n), self.threads)

            def work_chunk(thread_idx):
                span = spans[thread_idx]
                a, b = span[0], span[-1] + 1
                self._render_span(
                    rotations[a:b], positions[a:b], out[a:b], self._workspaces[thread_idx]
                )

            futures = [
                self._pool.submit(work_chunk, t) for t in range(self.threads) if len(spans[t])
            ]
            for f in futures:
                f.result()
            return out
        if self._pool is None or n == 1:
            for i in range(n):
                self.render_into(poses[i], out[i], self._workspaces[0])
            return out
        chunks = np.array_split(np.arange(n), self.threads)

        def work(thread_idx):
            ws = self._workspaces[thread_idx]
            for i in chunks[thread_idx]:
                self.render_into(poses[i], out[i], ws)

        futures = [self._pool.submit(work, t) for t in range(self.threads) if len(chunks[t])]
        for f in futures:
            f.result()
        return out

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None
