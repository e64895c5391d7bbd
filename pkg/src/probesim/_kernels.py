"""Numba kernels for the sampling and image-formation hot paths.

All kernels are nogil so batched rendering can fan env slots out over a
thread pool, and compiled without fastmath so results are bit-reproducible
regardless of thread count. Coordinates and interpolation weights are
float64; grid payloads float32.

Two codegen patterns matter for speed here: gathers index flat views with
uint64 offsets (avoids numba's negative-index wraparound handling on every
access), and convolution taps run over hoisted contiguous slices (lets
LLVM emit packed FMA without reordering any per-element sum).
"""

import math

import numpy as np
from numba import njit

_OPTS = dict(cache=True, nogil=True)


@njit(**_OPTS)
def trilinear(data, origin, inv_spacing, pts, background, out):
    """Trilinear interpolation at world points; outside the voxel-center
    bounding box returns `background`."""
    nx, ny, nz = data.shape
    df = data.reshape(nx * ny * nz)
    sx = ny * nz
    for i in range(pts.shape[0]):
        cx = (pts[i, 0] - origin[0]) * inv_spacing[0]
        cy = (pts[i, 1] - origin[1]) * inv_spacing[1]
        cz = (pts[i, 2] - origin[2]) * inv_spacing[2]
        if (
            cx < 0.0
            or cy < 0.0
            or cz < 0.0
            or cx > nx - 1.0
            or cy > ny - 1.0
            or cz > nz - 1.0
        ):
            out[i] = background
            continue
        x0 = int(cx)
        y0 = int(cy)
        z0 = int(cz)
        fx = cx - x0
        fy = cy - y0
        fz = cz - z0
        dx = sx if x0 + 1 < nx else 0
        dy = nz if y0 + 1 < ny else 0
        dz = 1 if z0 + 1 < nz else 0
        b = np.uint64(x0 * sx + y0 * nz + z0)
        c000 = df[b]
        c001 = df[b + np.uint64(dz)]
        c010 = df[b + np.uint64(dy)]
        c011 = df[b + np.uint64(dy + dz)]
        c100 = df[b + np.uint64(dx)]
        c101 = df[b + np.uint64(dx + dz)]
        c110 = df[b + np.uint64(dx + dy)]
        c111 = df[b + np.uint64(dx + dy + dz)]
        c00 = c000 + (c001 - c000) * fz
        c01 = c010 + (c011 - c010) * fz
        c10 = c100 + (c101 - c100) * fz
        c11 = c110 + (c111 - c110) * fz
        c0 = c00 + (c01 - c00) * fy
        c1 = c10 + (c11 - c10) * fy
        out[i] = c0 + (c1 - c0) * fx


@njit(**_OPTS)
def trilinear_clamped_accum(data, origin, inv_spacing, pts, weight, out):
    """out += weight * trilinear(data, pts) with edge-clamped coordinates."""
    nx, ny, nz = data.shape
    df = data.reshape(nx * ny * nz)
    sx = ny * nz
    for i in range(pts.shape[0]):
        cx = (pts[i, 0] - origin[0]) * inv_spacing[0]
        cy = (pts[i, 1] - origin[1]) * inv_spacing[1]
        cz = (pts[i, 2] - origin[2]) * inv_spacing[2]
        cx = min(max(cx, 0.0), nx - 1.0)
        cy = min(max(cy, 0.0), ny - 1.0)
        cz = min(max(cz, 0.0), nz - 1.0)
        x0 = int(cx)
        y0 = int(cy)
        z0 = int(cz)
        fx = cx - x0
        fy = cy - y0
        fz = cz - z0
        dx = sx if x0 + 1 < nx else 0
        dy = nz if y0 + 1 < ny else 0
        dz = 1 if z0 + 1 < nz else 0
        b = np.uint64(x0 * sx + y0 * nz + z0)
        c000 = df[b]
        c001 = df[b + np.uint64(dz)]
        c010 = df[b + np.uint64(dy)]
        c011 = df[b + np.uint64(dy + dz)]
        c100 = df[b + np.uint64(dx)]
        c101 = df[b + np.uint64(dx + dz)]
        c110 = df[b + np.uint64(dx + dy)]
        c111 = df[b + np.uint64(dx + dy + dz)]
        c00 = c000 + (c001 - c000) * fz
        c01 = c010 + (c011 - c010) * fz
        c10 = c100 + (c101 - c100) * fz
        c11 = c110 + (c111 - c110) * fz
        c0 = c00 + (c01 - c00) * fy
        c1 = c10 + (c11 - c10) * fy
        out[i] += weight * (c0 + (c1 - c0) * fx)


@njit(**_OPTS)
def trilinear_clamped_max(data, origin, inv_spacing, pts, out):
    """out = max(out, trilinear(data, pts)) with edge-clamped coordinates."""
    nx, ny, nz = data.shape
    df = data.reshape(nx * ny * nz)
    sx = ny * nz
    for i in range(pts.shape[0]):
        cx = (pts[i, 0] - origin[0]) * inv_spacing[0]
        cy = (pts[i, 1] - origin[1]) * inv_spacing[1]
        cz = (pts[i, 2] - origin[2]) * inv_spacing[2]
        cx = min(max(cx, 0.0), nx - 1.0)
        cy = min(max(cy, 0.0), ny - 1.0)
        cz = min(max(cz, 0.0), nz - 1.0)
        x0 = int(cx)
        y0 = int(cy)
        z0 = int(cz)
        fx = cx - x0
        fy = cy - y0
        fz = cz - z0
        dx = sx if x0 + 1 < nx else 0
        dy = nz if y0 + 1 < ny else 0
        dz = 1 if z0 + 1 < nz else 0
        b = np.uint64(x0 * sx + y0 * nz + z0)
        c000 = df[b]
        c001 = df[b + np.uint64(dz)]
        c010 = df[b + np.uint64(dy)]
        c011 = df[b + np.uint64(dy + dz)]
        c100 = df[b + np.uint64(dx)]
        c101 = df[b + np.uint64(dx + dz)]
        c110 = df[b + np.uint64(dx + dy)]
        c111 = df[b + np.uint64(dx + dy + dz)]
        c00 = c000 + (c001 - c000) * fz
        c01 = c010 + (c011 - c010) * fz
        c10 = c100 + (c101 - c100) * fz
        c11 = c110 + (c111 - c110) * fz
        c0 = c00 + (c01 - c00) * fy
        c1 = c10 + (c11 - c10) * fy
        v = c0 + (c1 - c0) * fx
        if v > out[i]:
            out[i] = v


@njit(**_OPTS)
def nearest_label(data, origin, inv_spacing, pts, background, out):
    """Nearest-neighbor label lookup. At exact half-voxel midpoints the
    lower index wins; outside the voxel footprint box returns background."""
    nx, ny, nz = data.shape
    df = data.reshape(nx * ny * nz)
    sx = ny * nz
    for i in range(pts.shape[0]):
        cx = (pts[i, 0] - origin[0]) * inv_spacing[0]
        cy = (pts[i, 1] - origin[1]) * inv_spacing[1]
        cz = (pts[i, 2] - origin[2]) * inv_spacing[2]
        ix = int(math.ceil(cx - 0.5))
        iy = int(math.ceil(cy - 0.5))
        iz = int(math.ceil(cz - 0.5))
        if ix < 0 or iy < 0 or iz < 0 or ix >= nx or iy >= ny or iz >= nz:
            out[i] = background
        else:
            out[i] = df[np.uint64(ix * sx + iy * nz + iz)]


@njit(**_OPTS)
def plane_positions(rotation, position, height, width, elevation, res_x, res_z, res_e, out):
    """World positions of slice pixels, flattened (e, r, c) -> row index.

    Pixel (r, c, e) sits at position + R @ [(c - (W-1)/2) res_x,
    (e - (E-1)/2) res_e, r res_z]; row 0 is at the probe face.
    """
    half_w = (width - 1) / 2.0
    half_e = (elevation - 1) / 2.0
    idx = 0
    for e in range(elevation):
        ly = (e - half_e) * res_e
        for r in range(height):
            lz = r * res_z
            for c in range(width):
                lx = (c - half_w) * res_x
                out[idx, 0] = (
                    rotation[0, 0] * lx + rotation[0, 1] * ly + rotation[0, 2] * lz + position[0]
                )
                out[idx, 1] = (
                    rotation[1, 0] * lx + rotation[1, 1] * ly + rotation[1, 2] * lz + position[1]
                )
                out[idx, 2] = (
                    rotation[2, 0] * lx + rotation[2, 1] * ly + rotation[2, 2] * lz + position[2]
                )
                idx += 1


@njit(**_OPTS)
def sample_fused(
    packed,
    lab,
    origin,
    inv_spacing,
    rotation,
    position,
    height,
    width,
    elevation,
    res_x,
    res_z,
    res_e,
    ct_bg,
    base_weight,
    out_ct,
    out_lb,
    out_n0,
    out_n1,
):
    """One-pass slice sampling when CT, labels, and base-octave noise share
    one grid: packed is (nx, ny, nz, 3) float32 holding (ct, n0, n1).

    Iterates depth innermost (the fastest-varying memory axis of the
    volumes) for cache locality; outputs land at the canonical (e, r, c)
    flat index. CT outside the grid gets the background, noise channels
    clamp to the border, labels use the nearest-neighbor footprint rule.
    """
    nx, ny, nz = lab.shape
    pf = packed.reshape(nx * ny * nz * 3)
    lf = lab.reshape(nx * ny * nz)
    psx = ny * nz * 3
    psy = nz * 3
    lsx = ny * nz
    half_w = (width - 1) / 2.0
    half_e = (elevation - 1) / 2.0
    for e in range(elevation):
        ly = (e - half_e) * res_e
        for c in range(width):
            lx = (c - half_w) * res_x
            for r in range(height):
                lz = r * res_z
                px = rotation[0, 0] * lx + rotation[0, 1] * ly + rotation[0, 2] * lz + position[0]
                py = rotation[1, 0] * lx + rotation[1, 1] * ly + rotation[1, 2] * lz + position[1]
                pz = rotation[2, 0] * lx + rotation[2, 1] * ly + rotation[2, 2] * lz + position[2]
                i = np.uint64((e * height + r) * width + c)
                cx = (px - origin[0]) * inv_spacing[0]
                cy = (py - origin[1]) * inv_spacing[1]
                cz = (pz - origin[2]) * inv_spacing[2]

                ix = int(math.ceil(cx - 0.5))
                iy = int(math.ceil(cy - 0.5))
                iz = int(math.ceil(cz - 0.5))
                if 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz:
                    out_lb[i] = lf[np.uint64(ix * lsx + iy * nz + iz)]
                else:
                    out_lb[i] = 0

                inside = (
                    0.0 <= cx <= nx - 1.0
                    and 0.0 <= cy <= ny - 1.0
                    and 0.0 <= cz <= nz - 1.0
                )
                ccx = min(max(cx, 0.0), nx - 1.0)
                ccy = min(max(cy, 0.0), ny - 1.0)
                ccz = min(max(cz, 0.0), nz - 1.0)
                x0 = int(ccx)
                y0 = int(ccy)
                z0 = int(ccz)
                fx = ccx - x0
                fy = ccy - y0
                fz = ccz - z0
                dx = psx if x0 + 1 < nx else 0
                dy = psy if y0 + 1 < ny else 0
                dz = 3 if z0 + 1 < nz else 0
                b = x0 * psx + y0 * psy + z0 * 3

                b000 = np.uint64(b)
                b001 = np.uint64(b + dz)
                b010 = np.uint64(b + dy)
                b011 = np.uint64(b + dy + dz)
                b100 = np.uint64(b + dx)
                b101 = np.uint64(b + dx + dz)
                b110 = np.uint64(b + dx + dy)
                b111 = np.uint64(b + dx + dy + dz)
                one = np.uint64(1)
                two = np.uint64(2)

                v00 = pf[b000] + (pf[b001] - pf[b000]) * fz
                v01 = pf[b010] + (pf[b011] - pf[b010]) * fz
                v10 = pf[b100] + (pf[b101] - pf[b100]) * fz
                v11 = pf[b110] + (pf[b111] - pf[b110]) * fz
                v0 = v00 + (v01 - v00) * fy
                v1 = v10 + (v11 - v10) * fy
                out_ct[i] = v0 + (v1 - v0) * fx if inside else ct_bg

                v00 = pf[b000 + one] + (pf[b001 + one] - pf[b000 + one]) * fz
                v01 = pf[b010 + one] + (pf[b011 + one] - pf[b010 + one]) * fz
                v10 = pf[b100 + one] + (pf[b101 + one] - pf[b100 + one]) * fz
                v11 = pf[b110 + one] + (pf[b111 + one] - pf[b110 + one]) * fz
                v0 = v00 + (v01 - v00) * fy
                v1 = v10 + (v11 - v10) * fy
                out_n0[i] = base_weight * (v0 + (v1 - v0) * fx)

                v00 = pf[b000 + two] + (pf[b001 + two] - pf[b000 + two]) * fz
                v01 = pf[b010 + two] + (pf[b011 + two] - pf[b010 + two]) * fz
                v10 = pf[b100 + two] + (pf[b101 + two] - pf[b100 + two]) * fz
                v11 = pf[b110 + two] + (pf[b111 + two] - pf[b110 + two]) * fz
                v0 = v00 + (v01 - v00) * fy
                v1 = v10 + (v11 - v10) * fy
                out_n1[i] = v0 + (v1 - v0) * fx


@njit(**_OPTS)
def column_energy(labels, decay_lut, e0, out):
    """Remaining beam energy per pixel: E[0] = e0 and each row multiplies by
    the per-label decay factor exp(-f * alpha * dy) of the row above."""
    h, w = labels.shape
    for c in range(w):
        e = e0
        out[0, c] = e
        for r in range(1, h):
            e *= decay_lut[labels[r - 1, c]]
            out[r, c] = e


@njit(**_OPTS)
def boundary_mask(labels, out):
    """1.0 where the label differs from the pixel above, 0 elsewhere."""
    h, w = labels.shape
    for c in range(w):
        out[0, c] = 0.0
        for r in range(1, h):
            out[r, c] = 1.0 if labels[r, c] != labels[r - 1, c] else 0.0


@njit(**_OPTS)
def column_cumsum(img, out):
    h, w = img.shape
    for c in range(w):
        acc = 0.0
        for r in range(h):
            acc += img[r, c]
            out[r, c] = acc


@njit(**_OPTS)
def sepconv2d(img, kernel_rows, kernel_cols, tmp, pad_in, pad_acc, out):
    """Separable zero-padded 2D convolution (kernels odd-length).

    Vertical pass first on flat trimmed spans, then the horizontal pass on
    a column-padded copy so every tap is one contiguous saxpy; the garbage
    accumulated in the pad columns is never read back. pad_in must arrive
    with zeroed pad columns and keeps them zeroed. Per output element the
    taps still accumulate in ascending order, and the padding contributes
    exact zeros, so results match the direct zero-padded sum.
    """
    h, w = img.shape
    klenr = kernel_rows.shape[0]
    klenc = kernel_cols.shape[0]
    kr = klenr // 2
    kc = klenc // 2
    wp = w + 2 * kc
    n = h * w
    npad = h * wp
    imf = img.reshape(n)
    tmf = tmp.reshape(n)
    pin = pad_in.reshape(npad)
    pac = pad_acc.reshape(npad)
    ouf = out.reshape(n)

    for i in range(n):
        tmf[i] = 0.0
    for k in range(klenr):
        kv = kernel_rows[k]
        shift = k - kr
        a = -shift if shift < 0 else 0
        b = h - shift if shift > 0 else h
        if b <= a:
            continue
        m = (b - a) * w
        d = tmf[a * w : a * w + m]
        s = imf[(a + shift) * w : (a + shift) * w + m]
        for i in range(m):
            d[i] += kv * s[i]

    for r in range(h):
        d = pin[r * wp + kc : r * wp + kc + w]
        s = tmf[r * w : r * w + w]
        for i in range(w):
            d[i] = s[i]
    for i in range(npad):
        pac[i] = 0.0
    for k in range(klenc):
        kv = kernel_cols[k]
        shift = k - kc
        a = -shift if shift < 0 else 0
        b = npad - shift if shift > 0 else npad
        if b <= a:
            continue
        m = b - a
        d = pac[a : a + m]
        s = pin[a + shift : a + shift + m]
        for i in range(m):
            d[i] += kv * s[i]
    for r in range(h):
        d = ouf[r * w : r * w + w]
        s = pac[r * wp + kc : r * wp + kc + w]
        for i in range(w):
            d[i] = s[i]


@njit(**_OPTS)
def _sobel_cos_at(field, r, c, h, w):
    r0 = max(r - 1, 0)
    r1 = min(r + 1, h - 1)
    c0 = max(c - 1, 0)
    c1 = min(c + 1, w - 1)
    gx = (field[r0, c1] + 2.0 * field[r, c1] + field[r1, c1]) - (
        field[r0, c0] + 2.0 * field[r, c0] + field[r1, c0]
    )
    gy = (field[r1, c0] + 2.0 * field[r1, c] + field[r1, c1]) - (
        field[r0, c0] + 2.0 * field[r0, c] + field[r0, c1]
    )
    mag = math.sqrt(gx * gx + gy * gy)
    if mag < 1e-12:
        return 1.0
    v = abs(gy) / mag
    return 1.0 if v > 1.0 else v


@njit(**_OPTS)
def incidence_cos(field, out):
    """cos of the angle between the +depth ray and the boundary normal,
    from 3x3 Sobel gradients of `field` (edge-clamped); flat regions count
    as normal incidence (cos = 1)."""
    h, w = field.shape
    if h > 2 and w > 2:
        for r in range(1, h - 1):
            fa = field[r - 1]
            fb = field[r]
            fc = field[r + 1]
            orow = out[r]
            for c in range(1, w - 1):
                gx = (fa[c + 1] + 2.0 * fb[c + 1] + fc[c + 1]) - (
                    fa[c - 1] + 2.0 * fb[c - 1] + fc[c - 1]
                )
                gy = (fc[c - 1] + 2.0 * fc[c] + fc[c + 1]) - (
                    fa[c - 1] + 2.0 * fa[c] + fa[c + 1]
                )
                mag = math.sqrt(gx * gx + gy * gy)
                if mag < 1e-12:
                    orow[c] = 1.0
                else:
                    v = abs(gy) / mag
                    orow[c] = 1.0 if v > 1.0 else v
            out[r, 0] = _sobel_cos_at(field, r, 0, h, w)
            out[r, w - 1] = _sobel_cos_at(field, r, w - 1, h, w)
        for c in range(w):
            out[0, c] = _sobel_cos_at(field, 0, c, h, w)
            out[h - 1, c] = _sobel_cos_at(field, h - 1, c, h, w)
    else:
        for r in range(h):
            for c in range(w):
                out[r, c] = _sobel_cos_at(field, r, c, h, w)


@njit(**_OPTS)
def impedance(ct, labels, scale_lut, floor, eps, offset, out):
    h, w = ct.shape
    for r in range(h):
        for c in range(w):
            ex = ct[r, c] - floor
            if ex < eps:
                ex = eps
            out[r, c] = scale_lut[labels[r, c]] * ex + offset


@njit(**_OPTS)
def reflection(z, energy, cos_theta, conv_g, out):
    """|E cos(theta) (Z_below - Z) / (Z_below + Z)| * (PSF x G); the last
    row has no below-neighbor and reflects nothing."""
    h, w = z.shape
    for r in range(h):
        for c in range(w):
            if r + 1 < h:
                num = z[r + 1, c] - z[r, c]
                den = z[r + 1, c] + z[r, c]
                ratio = num / den if den != 0.0 else 0.0
            else:
                ratio = 0.0
            out[r, c] = abs(energy[r, c] * cos_theta[r, c] * ratio) * conv_g[r, c]


@njit(**_OPTS)
def scatter_pattern(labels, n0, n1, sigma0_lut, mu0_lut, mu1_lut, out):
    """Gated scattering pattern: n0 * sigma0 + mu0 where n1 <= mu1, else 0."""
    h, w = labels.shape
    idx = 0
    for r in range(h):
        for c in range(w):
            lb = labels[r, c]
            if n1[idx] <= mu1_lut[lb]:
                out[r, c] = n0[idx] * sigma0_lut[lb] + mu0_lut[lb]
            else:
                out[r, c] = 0.0
            idx += 1


@njit(**_OPTS)
def combine_image(refl, energy, conv_t, gain, gamma, out):
    """Final image: clip(gain * (R + E * (PSF x T)), 0, 1) ** gamma."""
    h, w = refl.shape
    for r in range(h):
        for c in range(w):
            v = gain * (refl[r, c] + energy[r, c] * conv_t[r, c])
            if v < 0.0:
                v = 0.0
            elif v > 1.0:
                v = 1.0
            out[r, c] = v if gamma == 1.0 else v**gamma


@njit(**_OPTS)
def form_image(
    lb,
    ctv,
    n0,
    n1,
    decay_lut,
    imp_lut,
    sigma0_lut,
    mu0_lut,
    mu1_lut,
    theta_kernel,
    psf_rows,
    psf_cols,
    ct_floor,
    imp_eps,
    imp_offset,
    e0,
    gain,
    gamma,
    energy,
    g,
    cum,
    smooth,
    cosb,
    z,
    tmp,
    conv,
    t,
    refl,
    pad_theta_in,
    pad_theta_acc,
    pad_psf_in,
    pad_psf_acc,
    out,
):
    """Whole 2D image-formation chain for one sheet, minimizing the number
    of interpreter round trips per frame."""
    column_energy(lb, decay_lut, e0, energy)
    boundary_mask(lb, g)
    column_cumsum(g, cum)
    sepconv2d(cum, theta_kernel, theta_kernel, tmp, pad_theta_in, pad_theta_acc, smooth)
    incidence_cos(smooth, cosb)
    impedance(ctv, lb, imp_lut, ct_floor, imp_eps, imp_offset, z)
    sepconv2d(g, psf_rows, psf_cols, tmp, pad_psf_in, pad_psf_acc, conv)
    reflection(z, energy, cosb, conv, refl)
    scatter_pattern(lb, n0, n1, sigma0_lut, mu0_lut, mu1_lut, t)
    sepconv2d(t, psf_rows, psf_cols, tmp, pad_psf_in, pad_psf_acc, conv)
    combine_image(refl, energy, conv, gain, gamma, out)


@njit(**_OPTS)
def render_chunk(
    rotations,
    positions,
    packed,
    lab,
    origin,
    inv_spacing,
    height,
    width,
    elevation,
    res_x,
    res_z,
    res_e,
    ct_bg,
    decay_lut,
    imp_lut,
    sigma0_lut,
    mu0_lut,
    mu1_lut,
    theta_kernel,
    psf_rows,
    psf_cols,
    ct_floor,
    imp_eps,
    imp_offset,
    e0,
    gain,
    gamma,
    ws_ct,
    ws_lb,
    ws_n0,
    ws_n1,
    energy,
    g,
    cum,
    smooth,
    cosb,
    z,
    tmp,
    conv,
    t,
    refl,
    pad_theta_in,
    pad_theta_acc,
    pad_psf_in,
    pad_psf_acc,
    out,
):
    """Render a sequence of frames entirely inside one compiled call so
    worker threads never touch the interpreter between frames."""
    n_sheet = height * width
    for f in range(rotations.shape[0]):
        sample_fused(
            packed,
            lab,
            origin,
            inv_spacing,
            rotations[f],
            positions[f],
            height,
            width,
            elevation,
            res_x,
            res_z,
            res_e,
            ct_bg,
            np.float32(1.0),
            ws_ct,
            ws_lb,
            ws_n0,
            ws_n1,
        )
        for e in range(elevation):
            lb2d = ws_lb[e * n_sheet : (e + 1) * n_sheet].reshape(height, width)
            ct2d = ws_ct[e * n_sheet : (e + 1) * n_sheet].reshape(height, width)
            form_image(
                lb2d,
                ct2d,
                ws_n0[e * n_sheet : (e + 1) * n_sheet],
                ws_n1[e * n_sheet : (e + 1) * n_sheet],
                decay_lut,
                imp_lut,
                sigma0_lut,
                mu0_lut,
                mu1_lut,
                theta_kernel,
                psf_rows,
                psf_cols,
                ct_floor,
                imp_eps,
                imp_offset,
                e0,
                gain,
                gamma,
                energy,
                g,
                cum,
                smooth,
                cosb,
                z,
                tmp,
                conv,
                t,
                refl,
                pad_theta_in,
                pad_theta_acc,
                pad_psf_in,
                pad_psf_acc,
                out[f, e],
            )
