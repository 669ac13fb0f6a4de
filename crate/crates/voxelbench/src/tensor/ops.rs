//! Differentiable operations.
//!
//! Every op computes its forward result eagerly and, when a [`Tape`] is
//! supplied and an input is tracked, registers a backward closure. Inputs
//! with no tape node are treated as constants and their gradients are
//! skipped entirely.
//!
//! Reduction orders inside every op are fixed, so results are bit-identical
//! regardless of thread count: parallelism only ever splits work across
//! disjoint output regions.

use rand::Rng;
use rayon::prelude::*;

use super::tape::{Grads, NodeId, Tape, Var};
use super::{check_same_shape, s, Scalar, Tensor};
use crate::error::{Error, Result};

/// Padding rule for [`conv3d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// Train/inference switch for stochastic and statistics-bearing layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

// ---------------------------------------------------------------------------
// low-level kernels
// ---------------------------------------------------------------------------

/// Convolution micro-kernel: accumulates an `R x W` register tile of one
/// output slab (R adjacent y-rows, W contiguous z-elements) over every input
/// channel and kernel tap before touching memory again. Keeping the tile in
/// registers is what makes the whole engine fast; a naive per-tap sweep is
/// store-forward latency-bound and several times slower.
///
/// Per-element accumulation order is channel-major then tap-major and does
/// not depend on R/W, so results are bit-identical across tile splits.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn conv_micro<T: Scalar, const R: usize, const W: usize>(
    out: &mut [T],
    ostart: usize,
    ostride: usize,
    x: &[T],
    cin: usize,
    vin: usize,
    wd: &[T],
    k3: usize,
    id: [usize; 3],
    k: usize,
    i: usize,
    j: usize,
    z0: usize,
) {
    let mut acc = [[T::zero(); W]; R];
    for r in 0..R {
        let o = ostart + r * ostride;
        acc[r].copy_from_slice(&out[o..o + W]);
    }
    for ci in 0..cin {
        let slab = &x[ci * vin..(ci + 1) * vin];
        let wb = &wd[ci * k3..(ci + 1) * k3];
        for kx in 0..k {
            for ky in 0..k {
                let base = ((i + kx) * id[1] + (j + ky)) * id[2] + z0;
                for kz in 0..k {
                    let s = wb[(kx * k + ky) * k + kz];
                    for r in 0..R {
                        let at = base + r * id[2] + kz;
                        let src = &slab[at..at + W];
                        for t in 0..W {
                            acc[r][t] = src[t].mul_add(s, acc[r][t]);
                        }
                    }
                }
            }
        }
    }
    for r in 0..R {
        let o = ostart + r * ostride;
        out[o..o + W].copy_from_slice(&acc[r]);
    }
}

/// Runs the micro-kernel over one z-row block, splitting z into tiles.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn conv_z_chain<T: Scalar, const R: usize>(
    out: &mut [T],
    x: &[T],
    cin: usize,
    vin: usize,
    wd: &[T],
    k3: usize,
    id: [usize; 3],
    od: [usize; 3],
    k: usize,
    i: usize,
    j: usize,
) {
    let oz = od[2];
    let row0 = (i * od[1] + j) * oz;
    let mut z = 0usize;
    while oz - z >= 16 {
        conv_micro::<T, R, 16>(out, row0 + z, oz, x, cin, vin, wd, k3, id, k, i, j, z);
        z += 16;
    }
    if oz - z >= 8 {
        conv_micro::<T, R, 8>(out, row0 + z, oz, x, cin, vin, wd, k3, id, k, i, j, z);
        z += 8;
    }
    if oz - z >= 4 {
        conv_micro::<T, R, 4>(out, row0 + z, oz, x, cin, vin, wd, k3, id, k, i, j, z);
        z += 4;
    }
    if oz - z >= 2 {
        conv_micro::<T, R, 2>(out, row0 + z, oz, x, cin, vin, wd, k3, id, k, i, j, z);
        z += 2;
    }
    if oz - z >= 1 {
        conv_micro::<T, R, 1>(out, row0 + z, oz, x, cin, vin, wd, k3, id, k, i, j, z);
    }
}

/// Accumulates one full output slab: `out += conv(x, w)` for a single
/// output channel, where `x` holds `cin` input slabs and `wd` the matching
/// `cin * k^3` kernel block.
fn conv_slab<T: Scalar>(
    out: &mut [T],
    x: &[T],
    cin: usize,
    vin: usize,
    wd: &[T],
    k3: usize,
    id: [usize; 3],
    od: [usize; 3],
    k: usize,
) {
    let oy = od[1];
    for i in 0..od[0] {
        let mut j = 0usize;
        while oy - j >= 4 {
            conv_z_chain::<T, 4>(out, x, cin, vin, wd, k3, id, od, k, i, j);
            j += 4;
        }
        if oy - j >= 2 {
            conv_z_chain::<T, 2>(out, x, cin, vin, wd, k3, id, od, k, i, j);
            j += 2;
        }
        if oy - j >= 1 {
            conv_z_chain::<T, 1>(out, x, cin, vin, wd, k3, id, od, k, i, j);
        }
    }
}

/// Dot product with a fixed lane-wise reduction order (deterministic and
/// SIMD-friendly).
fn dot_rows<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let i = c * LANES;
        for l in 0..LANES {
            acc[l] = a[i + l].mul_add(b[i + l], acc[l]);
        }
    }
    let mut tail = T::zero();
    for i in chunks * LANES..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    let mut total = T::zero();
    for v in acc {
        total += v;
    }
    total + tail
}

/// Kernel-gradient tile for one (out-channel, in-channel) slab pair with a
/// 3x3x3 kernel: all three z-taps of a (kx,ky) pair accumulate in registers
/// during a single joint sweep of the two slabs.
fn dw_pair_k3<T: Scalar>(
    gd: &[T],
    xd: &[T],
    g: &ConvGeom,
    co: usize,
    ci: usize,
    vout: usize,
    vin: usize,
    taps: &mut [T],
) {
    const LANES: usize = 8;
    for kx in 0..3 {
        for ky in 0..3 {
            let mut acc = [[T::zero(); LANES]; 3];
            let mut tail = [T::zero(); 3];
            for b in 0..g.batch {
                let gs = &gd[(b * g.cout + co) * vout..(b * g.cout + co + 1) * vout];
                let xs = &xd[(b * g.cin + ci) * vin..(b * g.cin + ci + 1) * vin];
                for i in 0..g.od[0] {
                    for j in 0..g.od[1] {
                        let grow = &gs[(i * g.od[1] + j) * g.od[2]..][..g.od[2]];
                        let xbase = ((i + kx) * g.id[1] + (j + ky)) * g.id[2];
                        let xrow = &xs[xbase..xbase + g.od[2] + 2];
                        let chunks = g.od[2] / LANES;
                        for c in 0..chunks {
                            let t0 = c * LANES;
                            for kz in 0..3 {
                                for l in 0..LANES {
                                    acc[kz][l] =
                                        grow[t0 + l].mul_add(xrow[t0 + kz + l], acc[kz][l]);
                                }
                            }
                        }
                        for t in chunks * LANES..g.od[2] {
                            for kz in 0..3 {
                                tail[kz] = grow[t].mul_add(xrow[t + kz], tail[kz]);
                            }
                        }
                    }
                }
            }
            for kz in 0..3 {
                let mut total = T::zero();
                for l in 0..LANES {
                    total += acc[kz][l];
                }
                taps[(kx * 3 + ky) * 3 + kz] = total + tail[kz];
            }
        }
    }
}

/// Sum of a shifted-box dot product between two slabs.
#[allow(clippy::too_many_arguments)]
fn dot_box<T: Scalar>(
    a: &[T],
    adims: [usize; 3],
    aoff: [usize; 3],
    b: &[T],
    bdims: [usize; 3],
    boff: [usize; 3],
    bx: [usize; 3],
) -> T {
    let mut total = T::zero();
    for i in 0..bx[0] {
        for j in 0..bx[1] {
            let a0 = ((i + aoff[0]) * adims[1] + (j + aoff[1])) * adims[2] + aoff[2];
            let b0 = ((i + boff[0]) * bdims[1] + (j + boff[1])) * bdims[2] + boff[2];
            total += dot_rows(&a[a0..a0 + bx[2]], &b[b0..b0 + bx[2]]);
        }
    }
    total
}

/// Copy a box between two slabs (`dst = src`, no accumulation).
#[allow(clippy::too_many_arguments)]
fn copy_box<T: Scalar>(
    dst: &mut [T],
    ddims: [usize; 3],
    doff: [usize; 3],
    src: &[T],
    sdims: [usize; 3],
    soff: [usize; 3],
    bx: [usize; 3],
) {
    for i in 0..bx[0] {
        for j in 0..bx[1] {
            let d0 = ((i + doff[0]) * ddims[1] + (j + doff[1])) * ddims[2] + doff[2];
            let s0 = ((i + soff[0]) * sdims[1] + (j + soff[1])) * sdims[2] + soff[2];
            dst[d0..d0 + bx[2]].copy_from_slice(&src[s0..s0 + bx[2]]);
        }
    }
}

/// Zero-pad the spatial axes of a 5-D tensor.
pub(crate) fn pad3_tensor<T: Scalar>(x: &Tensor<T>, lo: [usize; 3], hi: [usize; 3]) -> Tensor<T> {
    let [b, c, xd, yd, zd] = x.dims5().expect("pad3 on 5-D tensor");
    let pd = [xd + lo[0] + hi[0], yd + lo[1] + hi[1], zd + lo[2] + hi[2]];
    let mut out = Tensor::zeros(&[b, c, pd[0], pd[1], pd[2]]);
    let vin = xd * yd * zd;
    let vout = pd[0] * pd[1] * pd[2];
    let src = x.data();
    let dst = out.data_mut();
    for slab in 0..b * c {
        copy_box(
            &mut dst[slab * vout..(slab + 1) * vout],
            pd,
            lo,
            &src[slab * vin..(slab + 1) * vin],
            [xd, yd, zd],
            [0, 0, 0],
            [xd, yd, zd],
        );
    }
    out
}

/// Crop a spatial box out of a 5-D tensor.
pub(crate) fn crop3_tensor<T: Scalar>(
    x: &Tensor<T>,
    off: [usize; 3],
    extent: [usize; 3],
) -> Tensor<T> {
    let [b, c, xd, yd, zd] = x.dims5().expect("crop3 on 5-D tensor");
    assert!(
        off[0] + extent[0] <= xd && off[1] + extent[1] <= yd && off[2] + extent[2] <= zd,
        "crop box out of bounds"
    );
    let mut out = Tensor::zeros(&[b, c, extent[0], extent[1], extent[2]]);
    let vin = xd * yd * zd;
    let vout = extent.iter().product::<usize>();
    let src = x.data();
    let dst = out.data_mut();
    for slab in 0..b * c {
        copy_box(
            &mut dst[slab * vout..(slab + 1) * vout],
            extent,
            [0, 0, 0],
            &src[slab * vin..(slab + 1) * vin],
            [xd, yd, zd],
            off,
            extent,
        );
    }
    out
}

/// 3x3x3 average pooling with stride 3 on a plain tensor (data-side
/// downsampling for the low-resolution pathway; not differentiable).
pub fn avgpool3<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, xd, yd, zd] = x.dims5()?;
    for (axis, e) in [("x", xd), ("y", yd), ("z", zd)] {
        if e % 3 != 0 {
            return Err(Error::invalid(
                "avgpool3",
                format!("spatial axis {axis} extent {e} not divisible by 3"),
            ));
        }
    }
    let (ox, oy, oz) = (xd / 3, yd / 3, zd / 3);
    let inv = s::<T>(1.0 / 27.0);
    let vin = xd * yd * zd;
    let vout = ox * oy * oz;
    let src = x.data();
    let mut out = Tensor::zeros(&[b, c, ox, oy, oz]);
    let dst = out.data_mut();
    for slab in 0..b * c {
        let sl = &src[slab * vin..(slab + 1) * vin];
        let ol = &mut dst[slab * vout..(slab + 1) * vout];
        for i in 0..ox {
            for j in 0..oy {
                for k in 0..oz {
                    let mut acc = T::zero();
                    for di in 0..3 {
                        for dj in 0..3 {
                            for dk in 0..3 {
                                acc += sl[((3 * i + di) * yd + 3 * j + dj) * zd + 3 * k + dk];
                            }
                        }
                    }
                    ol[(i * oy + j) * oz + k] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    k: usize,
    /// padded input spatial extents
    id: [usize; 3],
    /// output spatial extents
    od: [usize; 3],
    pad_lo: [usize; 3],
    padded: bool,
    /// unpadded input spatial extents
    raw: [usize; 3],
}

fn conv_geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, padding: Padding) -> Result<ConvGeom> {
    let [batch, cin, xd, yd, zd] = x.dims5()?;
    let wshape = w.shape();
    if wshape.len() != 5 {
        return Err(Error::invalid(
            "conv3d",
            format!("kernel must be 5-D [Cout,Cin,k,k,k], got {wshape:?}"),
        ));
    }
    let (cout, wcin, k) = (wshape[0], wshape[1], wshape[2]);
    if wshape[3] != k || wshape[4] != k {
        return Err(Error::invalid(
            "conv3d",
            format!("kernel must be cubic, got {:?}", &wshape[2..]),
        ));
    }
    if wcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv3d",
            axis: "channel (input)".into(),
            expected: cin,
            got: wcin,
        });
    }
    let raw = [xd, yd, zd];
    match padding {
        Padding::Valid => {
            for (axis, e) in [("x", xd), ("y", yd), ("z", zd)] {
                if k > e {
                    return Err(Error::invalid(
                        "conv3d",
                        format!("kernel extent {k} exceeds spatial axis {axis} extent {e}"),
                    ));
                }
            }
            Ok(ConvGeom {
                batch,
                cin,
                cout,
                k,
                id: raw,
                od: [xd - k + 1, yd - k + 1, zd - k + 1],
                pad_lo: [0; 3],
                padded: false,
                raw,
            })
        }
        Padding::Same => {
            // low side gets floor((k-1)/2); the leftover pad voxel, if any,
            // lands on the high side
            let lo = (k - 1) / 2;
            Ok(ConvGeom {
                batch,
                cin,
                cout,
                k,
                id: [xd + k - 1, yd + k - 1, zd + k - 1],
                od: raw,
                pad_lo: [lo; 3],
                padded: k > 1,
                raw,
            })
        }
    }
}

fn conv3d_forward_core<T: Scalar>(
    xp: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let vout = g.od.iter().product::<usize>();
    let vin = g.id.iter().product::<usize>();
    let k3 = g.k * g.k * g.k;
    let mut out = Tensor::zeros(&[g.batch, g.cout, g.od[0], g.od[1], g.od[2]]);
    let xd = xp.data();
    let wd = w.data();
    let odata = out.data_mut();
    odata
        .par_chunks_mut(vout)
        .enumerate()
        .for_each(|(slab, ochunk)| {
            let (b, co) = (slab / g.cout, slab % g.cout);
            if let Some(bias) = bias {
                let bv = bias.data()[co];
                ochunk.iter_mut().for_each(|v| *v = bv);
            }
            conv_slab(
                ochunk,
                &xd[b * g.cin * vin..(b + 1) * g.cin * vin],
                g.cin,
                vin,
                &wd[co * g.cin * k3..(co + 1) * g.cin * k3],
                k3,
                g.id,
                g.od,
                g.k,
            );
        });
    out
}

/// 3-D convolution (cross-correlation) with a cubic kernel.
///
/// `valid` padding shrinks each spatial extent by `k-1`; `same` padding
/// preserves extents, putting the extra pad voxel on the high side when
/// `k-1` is odd.
pub fn conv3d<T: Scalar>(
    tape: Option<&Tape<T>>,
    x: &Var<T>,
    w: &Var<T>,
    bias: Option<&Var<T>>,
    padding: Padding,
) -> Result<Var<T>> {
    let g = conv_geometry(&x.value, &w.value, padding)?;
    if let Some(b) = bias {
        if b.value.shape() != [g.cout] {
            return Err(Error::ShapeMismatch {
                op: "conv3d",
                axis: "channel (bias)".into(),
                expected: g.cout,
                got: b.value.numel(),
            });
        }
    }
    let xp = if g.padded {
        pad3_tensor(&x.value, g.pad_lo, [
            g.id[0] - g.raw[0] - g.pad_lo[0],
            g.id[1] - g.raw[1] - g.pad_lo[1],
            g.id[2] - g.raw[2] - g.pad_lo[2],
        ])
    } else {
        x.value.clone()
    };
    let out = conv3d_forward_core(&xp, &w.value, bias.map(|b| &b.value), &g);

    let tracked = x.tracked() || w.tracked() || bias.is_some_and(|b| b.tracked());
    let node = match tape {
        Some(tape) if tracked => {
            let (xn, wn, bn) = (x.node, w.node, bias.and_then(|b| b.node));
            let wv = w.value.clone();
            Some(tape.push(Box::new(move |grad, sink| {
                conv3d_backward(grad, &xp, &wv, &g, xn, wn, bn, sink);
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

#[allow(clippy::too_many_arguments)]
fn conv3d_backward<T: Scalar>(
    grad: &Tensor<T>,
    xp: &Tensor<T>,
    w: &Tensor<T>,
    g: &ConvGeom,
    xn: Option<NodeId>,
    wn: Option<NodeId>,
    bn: Option<NodeId>,
    sink: &mut Grads<T>,
) {
    let vout = g.od.iter().product::<usize>();
    let vin = g.id.iter().product::<usize>();
    let k3 = g.k * g.k * g.k;
    let gd = grad.data();
    let wd = w.data();
    let xd = xp.data();

    if let Some(wn) = wn {
        let mut dw = Tensor::zeros(w.shape());
        let dwv = dw.data_mut();
        dwv.par_chunks_mut(g.cin * k3).enumerate().for_each(|(co, dwc)| {
            for ci in 0..g.cin {
                let taps = &mut dwc[ci * k3..(ci + 1) * k3];
                if g.k == 3 {
                    dw_pair_k3(gd, xd, g, co, ci, vout, vin, taps);
                } else {
                    for kx in 0..g.k {
                        for ky in 0..g.k {
                            for kz in 0..g.k {
                                let mut acc = T::zero();
                                for b in 0..g.batch {
                                    let gs =
                                        &gd[(b * g.cout + co) * vout..(b * g.cout + co + 1) * vout];
                                    let xs =
                                        &xd[(b * g.cin + ci) * vin..(b * g.cin + ci + 1) * vin];
                                    acc += dot_box(
                                        gs,
                                        g.od,
                                        [0, 0, 0],
                                        xs,
                                        g.id,
                                        [kx, ky, kz],
                                        g.od,
                                    );
                                }
                                taps[(kx * g.k + ky) * g.k + kz] = acc;
                            }
                        }
                    }
                }
            }
        });
        sink.accumulate(wn, dw);
    }

    if let Some(bn) = bn {
        let mut db = Tensor::zeros(&[g.cout]);
        let dbv = db.data_mut();
        for co in 0..g.cout {
            let mut acc = T::zero();
            for b in 0..g.batch {
                let gs = &gd[(b * g.cout + co) * vout..(b * g.cout + co + 1) * vout];
                for &v in gs {
                    acc += v;
                }
            }
            dbv[co] = acc;
        }
        sink.accumulate(bn, db);
    }

    if let Some(xn) = xn {
        // dx is itself a convolution: pad the output gradient by k-1 on
        // every side and convolve with the kernel flipped on all axes and
        // transposed in its channel pair. This reuses the fast slab kernel.
        let gp = pad3_tensor(grad, [g.k - 1; 3], [g.k - 1; 3]);
        let gpd = [g.od[0] + 2 * (g.k - 1), g.od[1] + 2 * (g.k - 1), g.od[2] + 2 * (g.k - 1)];
        let vgp = gpd.iter().product::<usize>();
        // wflip[ci][co][q] = w[co][ci][k3-1-q]; reversing the flat cubic
        // index reverses all three axes at once
        let mut wflip = vec![T::zero(); g.cin * g.cout * k3];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                let src = &wd[(co * g.cin + ci) * k3..(co * g.cin + ci + 1) * k3];
                let dst = &mut wflip[(ci * g.cout + co) * k3..(ci * g.cout + co + 1) * k3];
                for q in 0..k3 {
                    dst[q] = src[k3 - 1 - q];
                }
            }
        }
        let mut dxp = Tensor::zeros(&[g.batch, g.cin, g.id[0], g.id[1], g.id[2]]);
        let dxv = dxp.data_mut();
        let gpv = gp.data();
        dxv.par_chunks_mut(vin).enumerate().for_each(|(slab, dxc)| {
            let (b, ci) = (slab / g.cin, slab % g.cin);
            conv_slab(
                dxc,
                &gpv[b * g.cout * vgp..(b + 1) * g.cout * vgp],
                g.cout,
                vgp,
                &wflip[ci * g.cout * k3..(ci + 1) * g.cout * k3],
                k3,
                gpd,
                g.id,
                g.k,
            );
        });
        let dx = if g.padded {
            crop3_tensor(&dxp, g.pad_lo, g.raw)
        } else {
            dxp
        };
        sink.accumulate(xn, dx);
    }
}

/// `out[t] += sum_ci w[ci] * x[ci][t]` over contiguous slabs, four input
/// channels per pass so the output row round-trips memory 4x less often.
fn conv1_slab<T: Scalar>(out: &mut [T], x: &[T], v: usize, w_row: &[T]) {
    let cin = w_row.len();
    let mut ci = 0usize;
    while cin - ci >= 4 {
        let (w0, w1, w2, w3) = (w_row[ci], w_row[ci + 1], w_row[ci + 2], w_row[ci + 3]);
        let x0 = &x[ci * v..(ci + 1) * v];
        let x1 = &x[(ci + 1) * v..(ci + 2) * v];
        let x2 = &x[(ci + 2) * v..(ci + 3) * v];
        let x3 = &x[(ci + 3) * v..(ci + 4) * v];
        for t in 0..v {
            let mut s = x0[t].mul_add(w0, out[t]);
            s = x1[t].mul_add(w1, s);
            s = x2[t].mul_add(w2, s);
            out[t] = x3[t].mul_add(w3, s);
        }
        ci += 4;
    }
    while ci < cin {
        let w0 = w_row[ci];
        let x0 = &x[ci * v..(ci + 1) * v];
        for t in 0..v {
            out[t] = x0[t].mul_add(w0, out[t]);
        }
        ci += 1;
    }
}

/// Per-voxel linear map across channels (a 1x1x1 convolution).
pub fn conv1<T: Scalar>(
    tape: Option<&Tape<T>>,
    x: &Var<T>,
    w: &Var<T>,
    bias: Option<&Var<T>>,
) -> Result<Var<T>> {
    let [batch, cin, xd, yd, zd] = x.value.dims5()?;
    let wshape = w.value.shape();
    if wshape.len() != 5 || wshape[2..] != [1, 1, 1] {
        return Err(Error::invalid(
            "conv1",
            format!("kernel must be [Cout,Cin,1,1,1], got {wshape:?}"),
        ));
    }
    let cout = wshape[0];
    if wshape[1] != cin {
        return Err(Error::ShapeMismatch {
            op: "conv1",
            axis: "channel (input)".into(),
            expected: cin,
            got: wshape[1],
        });
    }
    if let Some(b) = bias {
        if b.value.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv1",
                axis: "channel (bias)".into(),
                expected: cout,
                got: b.value.numel(),
            });
        }
    }
    let v = xd * yd * zd;
    let mut out = Tensor::zeros(&[batch, cout, xd, yd, zd]);
    {
        let xv = x.value.data();
        let wv = w.value.data();
        let ov = out.data_mut();
        ov.par_chunks_mut(v).enumerate().for_each(|(slab, oc)| {
            let (b, co) = (slab / cout, slab % cout);
            if let Some(bias) = bias {
                let bv = bias.value.data()[co];
                oc.iter_mut().for_each(|p| *p = bv);
            }
            conv1_slab(
                oc,
                &xv[b * cin * v..(b + 1) * cin * v],
                v,
                &wv[co * cin..(co + 1) * cin],
            );
        });
    }
    let tracked = x.tracked() || w.tracked() || bias.is_some_and(|b| b.tracked());
    let node = match tape {
        Some(tape) if tracked => {
            let (xn, wn, bn) = (x.node, w.node, bias.and_then(|b| b.node));
            let xv = x.value.clone();
            let wv = w.value.clone();
            Some(tape.push(Box::new(move |grad, sink| {
                let gd = grad.data();
                if let Some(wn) = wn {
                    let mut dw = Tensor::zeros(&[cout, cin, 1, 1, 1]);
                    let dwv = dw.data_mut();
                    for co in 0..cout {
                        for ci in 0..cin {
                            let mut acc = T::zero();
                            for b in 0..batch {
                                let gs = &gd[(b * cout + co) * v..(b * cout + co + 1) * v];
                                let xs = &xv.data()[(b * cin + ci) * v..(b * cin + ci + 1) * v];
                                acc += dot_rows(gs, xs);
                            }
                            dwv[co * cin + ci] = acc;
                        }
                    }
                    sink.accumulate(wn, dw);
                }
                if let Some(bn) = bn {
                    let mut db = Tensor::zeros(&[cout]);
                    let dbv = db.data_mut();
                    for co in 0..cout {
                        let mut acc = T::zero();
                        for b in 0..batch {
                            for &g in &gd[(b * cout + co) * v..(b * cout + co + 1) * v] {
                                acc += g;
                            }
                        }
                        dbv[co] = acc;
                    }
                    sink.accumulate(bn, db);
                }
                if let Some(xn) = xn {
                    // transpose the weight matrix once so dx slabs can use
                    // the same blocked kernel
                    let wvd = wv.data();
                    let mut wt = vec![T::zero(); cin * cout];
                    for co in 0..cout {
                        for ci in 0..cin {
                            wt[ci * cout + co] = wvd[co * cin + ci];
                        }
                    }
                    let mut dx = Tensor::zeros(xv.shape());
                    let dxv = dx.data_mut();
                    dxv.par_chunks_mut(v).enumerate().for_each(|(slab, dc)| {
                        let (b, ci) = (slab / cin, slab % cin);
                        conv1_slab(
                            dc,
                            &gd[b * cout * v..(b + 1) * cout * v],
                            v,
                            &wt[ci * cout..(ci + 1) * cout],
                        );
                    });
                    sink.accumulate(xn, dx);
                }
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

// ---------------------------------------------------------------------------
// pooling / resampling
// ---------------------------------------------------------------------------

/// Non-overlapping 3x3x3 max pooling, stride 3. Ties break on the first
/// element in scan order so the backward pass is deterministic.
pub fn maxpool3<T: Scalar>(tape: Option<&Tape<T>>, x: &Var<T>) -> Result<Var<T>> {
    let [b, c, xd, yd, zd] = x.value.dims5()?;
    for (axis, e) in [("x", xd), ("y", yd), ("z", zd)] {
        if e % 3 != 0 {
            return Err(Error::invalid(
                "maxpool3",
                format!("spatial axis {axis} extent {e} not divisible by 3"),
            ));
        }
    }
    let (ox, oy, oz) = (xd / 3, yd / 3, zd / 3);
    let vin = xd * yd * zd;
    let vout = ox * oy * oz;
    let src = x.value.data();
    let mut out = Tensor::zeros(&[b, c, ox, oy, oz]);
    let mut argmax: Vec<u32> = vec![0; b * c * vout];
    {
        let dst = out.data_mut();
        for slab in 0..b * c {
            let sl = &src[slab * vin..(slab + 1) * vin];
            let ol = &mut dst[slab * vout..(slab + 1) * vout];
            let al = &mut argmax[slab * vout..(slab + 1) * vout];
            for i in 0..ox {
                for j in 0..oy {
                    for k in 0..oz {
                        let mut best = T::neg_infinity();
                        let mut best_at = 0usize;
                        for di in 0..3 {
                            for dj in 0..3 {
                                for dk in 0..3 {
                                    let at = ((3 * i + di) * yd + 3 * j + dj) * zd + 3 * k + dk;
                                    if sl[at] > best {
                                        best = sl[at];
                                        best_at = at;
                                    }
                                }
                            }
                        }
                        ol[(i * oy + j) * oz + k] = best;
                        al[(i * oy + j) * oz + k] = best_at as u32;
                    }
                }
            }
        }
    }
    let node = match tape {
        Some(tape) if x.tracked() => {
            let xn = x.node.unwrap();
            let in_shape = x.value.shape().to_vec();
            Some(tape.push(Box::new(move |grad, sink| {
                let mut dx = Tensor::zeros(&in_shape);
                let dxv = dx.data_mut();
                let gd = grad.data();
                for slab in 0..b * c {
                    let gl = &gd[slab * vout..(slab + 1) * vout];
                    let al = &argmax[slab * vout..(slab + 1) * vout];
                    let dl = &mut dxv[slab * vin..(slab + 1) * vin];
                    for (g, &at) in gl.iter().zip(al.iter()) {
                        dl[at as usize] += *g;
                    }
                }
                sink.accumulate(xn, dx);
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

/// Nearest-neighbour up-sampling by a factor of 3 per spatial axis.
pub fn upsample3<T: Scalar>(tape: Option<&Tape<T>>, x: &Var<T>) -> Result<Var<T>> {
    let [b, c, xd, yd, zd] = x.value.dims5()?;
    let (ox, oy, oz) = (3 * xd, 3 * yd, 3 * zd);
    let vin = xd * yd * zd;
    let vout = ox * oy * oz;
    let src = x.value.data();
    let mut out = Tensor::zeros(&[b, c, ox, oy, oz]);
    {
        let dst = out.data_mut();
        for slab in 0..b * c {
            let sl = &src[slab * vin..(slab + 1) * vin];
            let ol = &mut dst[slab * vout..(slab + 1) * vout];
            for i in 0..ox {
                for j in 0..oy {
                    let srow = &sl[((i / 3) * yd + j / 3) * zd..((i / 3) * yd + j / 3 + 1) * zd];
                    let orow = &mut ol[(i * oy + j) * oz..(i * oy + j) * oz + oz];
                    for k in 0..oz {
                        orow[k] = srow[k / 3];
                    }
                }
            }
        }
    }
    let node = match tape {
        Some(tape) if x.tracked() => {
            let xn = x.node.unwrap();
            let in_shape = x.value.shape().to_vec();
            Some(tape.push(Box::new(move |grad, sink| {
                let mut dx = Tensor::zeros(&in_shape);
                let dxv = dx.data_mut();
                let gd = grad.data();
                for slab in 0..b * c {
                    let gl = &gd[slab * vout..(slab + 1) * vout];
                    let dl = &mut dxv[slab * vin..(slab + 1) * vin];
                    for i in 0..ox {
                        for j in 0..oy {
                            let grow = &gl[(i * oy + j) * oz..(i * oy + j) * oz + oz];
                            let drow = &mut dl[((i / 3) * yd + j / 3) * zd..((i / 3) * yd + j / 3 + 1) * zd];
                            for k in 0..oz {
                                drow[k / 3] += grow[k];
                            }
                        }
                    }
                }
                sink.accumulate(xn, dx);
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

/// Running statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

fn check_affine<T: Scalar>(
    op: &'static str,
    c: usize,
    gamma: &Var<T>,
    beta: &Var<T>,
) -> Result<()> {
    for (name, t) in [("gamma", gamma), ("beta", beta)] {
        if t.value.shape() != [c] {
            return Err(Error::ShapeMismatch {
                op,
                axis: format!("channel ({name})"),
                expected: c,
                got: t.value.numel(),
            });
        }
    }
    Ok(())
}

/// Batch normalization: per-channel statistics over batch and spatial axes.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running estimates (`running = momentum * running + (1-momentum) * batch`).
pub fn batchnorm_train<T: Scalar>(
    tape: Option<&Tape<T>>,
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    state: &mut BnState<T>,
    eps: T,
    momentum: T,
) -> Result<Var<T>> {
    let [b, c, xd, yd, zd] = x.value.dims5()?;
    check_affine("batchnorm", c, gamma, beta)?;
    let v = xd * yd * zd;
    let m = b * v;
    let inv_m = T::one() / s::<T>(m as f64);
    let src = x.value.data();
    let gv = gamma.value.data();
    let bv = beta.value.data();

    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for bi in 0..b {
            let sl = &src[(bi * c + ch) * v..(bi * c + ch + 1) * v];
            for &x in sl {
                acc += x;
            }
        }
        mean[ch] = acc * inv_m;
        let mut sq = T::zero();
        for bi in 0..b {
            let sl = &src[(bi * c + ch) * v..(bi * c + ch + 1) * v];
            for &x in sl {
                let d = x - mean[ch];
                sq = d.mul_add(d, sq);
            }
        }
        var[ch] = sq * inv_m;
    }
    for ch in 0..c {
        state.running_mean[ch] =
            momentum * state.running_mean[ch] + (T::one() - momentum) * mean[ch];
        state.running_var[ch] = momentum * state.running_var[ch] + (T::one() - momentum) * var[ch];
    }

    let inv_std: Vec<T> = var.iter().map(|&vv| T::one() / (vv + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.value.shape());
    let mut out = Tensor::zeros(x.value.shape());
    {
        let xh = xhat.data_mut();
        for bi in 0..b {
            for ch in 0..c {
                let o = (bi * c + ch) * v;
                let sl = &src[o..o + v];
                let xl = &mut xh[o..o + v];
                for i in 0..v {
                    xl[i] = (sl[i] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let ov = out.data_mut();
        let xh = xhat.data();
        for bi in 0..b {
            for ch in 0..c {
                let o = (bi * c + ch) * v;
                for i in 0..v {
                    ov[o + i] = xh[o + i].mul_add(gv[ch], bv[ch]);
                }
            }
        }
    }

    let tracked = x.tracked() || gamma.tracked() || beta.tracked();
    let node = match tape {
        Some(tape) if tracked => {
            let (xn, gn, bn) = (x.node, gamma.node, beta.node);
            let gamma_v = gamma.value.clone();
            Some(tape.push(Box::new(move |grad, sink| {
                norm_backward(
                    grad,
                    &xhat,
                    &inv_std,
                    &gamma_v,
                    NormScope::PerChannel { batch: b },
                    c,
                    v,
                    xn,
                    gn,
                    bn,
                    sink,
                );
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

/// Batch normalization in inference mode: a per-channel affine transform
/// using the running statistics.
pub fn batchnorm_infer<T: Scalar>(
    tape: Option<&Tape<T>>,
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    state: &BnState<T>,
    eps: T,
) -> Result<Var<T>> {
    let [b, c, xd, yd, zd] = x.value.dims5()?;
    check_affine("batchnorm", c, gamma, beta)?;
    let v = xd * yd * zd;
    let inv_std: Vec<T> = state
        .running_var
        .iter()
        .map(|&vv| T::one() / (vv + eps).sqrt())
        .collect();
    let src = x.value.data();
    let gv = gamma.value.data();
    let bv = beta.value.data();
    let mut out = Tensor::zeros(x.value.shape());
    {
        let ov = out.data_mut();
        for bi in 0..b {
            for ch in 0..c {
                let o = (bi * c + ch) * v;
                let scale = gv[ch] * inv_std[ch];
                let shift = bv[ch] - state.running_mean[ch] * scale;
                for i in 0..v {
                    ov[o + i] = src[o + i].mul_add(scale, shift);
                }
            }
        }
    }
    let tracked = x.tracked() || gamma.tracked() || beta.tracked();
    let node = match tape {
        Some(tape) if tracked => {
            let (xn, gn, bnn) = (x.node, gamma.node, beta.node);
            let gamma_v = gamma.value.clone();
            let xv = x.value.clone();
            let mean = state.running_mean.clone();
            Some(tape.push(Box::new(move |grad, sink| {
                let gd = grad.data();
                if let Some(xn) = xn {
                    let mut dx = Tensor::zeros(xv.shape());
                    let dxv = dx.data_mut();
                    for bi in 0..b {
                        for ch in 0..c {
                            let o = (bi * c + ch) * v;
                            let scale = gamma_v.data()[ch] * inv_std[ch];
                            for i in 0..v {
                                dxv[o + i] = gd[o + i] * scale;
                            }
                        }
                    }
                    sink.accumulate(xn, dx);
                }
                if gn.is_some() || bnn.is_some() {
                    let mut dg = Tensor::zeros(&[c]);
                    let mut db = Tensor::zeros(&[c]);
                    let dgv = dg.data_mut();
                    let dbv = db.data_mut();
                    for bi in 0..b {
                        for ch in 0..c {
                            let o = (bi * c + ch) * v;
                            for i in 0..v {
                                let xh = (xv.data()[o + i] - mean[ch]) * inv_std[ch];
                                dgv[ch] = gd[o + i].mul_add(xh, dgv[ch]);
                                dbv[ch] += gd[o + i];
                            }
                        }
                    }
                    if let Some(gn) = gn {
                        sink.accumulate(gn, dg);
                    }
                    if let Some(bnn) = bnn {
                        sink.accumulate(bnn, db);
                    }
                }
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

/// Instance normalization: statistics per (batch item, channel) over the
/// spatial axes only. No running state.
pub fn instancenorm<T: Scalar>(
    tape: Option<&Tape<T>>,
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    eps: T,
) -> Result<Var<T>> {
    let [b, c, xd, yd, zd] = x.value.dims5()?;
    check_affine("instancenorm", c, gamma, beta)?;
    let v = xd * yd * zd;
    let inv_m = T::one() / s::<T>(v as f64);
    let src = x.value.data();
    let gv = gamma.value.data();
    let bv = beta.value.data();

    let groups = b * c;
    let mut inv_std = vec![T::zero(); groups];
    let mut xhat = Tensor::zeros(x.value.shape());
    let mut out = Tensor::zeros(x.value.shape());
    {
        let xh = xhat.data_mut();
        for gidx in 0..groups {
            let o = gidx * v;
            let sl = &src[o..o + v];
            let mut acc = T::zero();
            for &x in sl {
                acc += x;
            }
            let mean = acc * inv_m;
            let mut sq = T::zero();
            for &x in sl {
                let d = x - mean;
                sq = d.mul_add(d, sq);
            }
            let istd = T::one() / (sq * inv_m + eps).sqrt();
            inv_std[gidx] = istd;
            let xl = &mut xh[o..o + v];
            for i in 0..v {
                xl[i] = (sl[i] - mean) * istd;
            }
        }
        let ov = out.data_mut();
        let xh = xhat.data();
        for gidx in 0..groups {
            let ch = gidx % c;
            let o = gidx * v;
            for i in 0..v {
                ov[o + i] = xh[o + i].mul_add(gv[ch], bv[ch]);
            }
        }
    }

    let tracked = x.tracked() || gamma.tracked() || beta.tracked();
    let node = match tape {
        Some(tape) if tracked => {
            let (xn, gn, bn) = (x.node, gamma.node, beta.node);
            let gamma_v = gamma.value.clone();
            Some(tape.push(Box::new(move |grad, sink| {
                norm_backward(
                    grad,
                    &xhat,
                    &inv_std,
                    &gamma_v,
                    NormScope::PerInstance { batch: b },
                    c,
                    v,
                    xn,
                    gn,
                    bn,
                    sink,
                );
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

enum NormScope {
    /// statistics shared across the batch: group = channel, `inv_std[c]`
    PerChannel { batch: usize },
    /// statistics per (item, channel): group = b*C + c, `inv_std[b*C+c]`
    PerInstance { batch: usize },
}

/// Shared backward rule for both normalizations.
///
/// With m the group size, g the upstream gradient and xh the normalized
/// activations:
///   d_gamma = sum(g * xh)        (per channel)
///   d_beta  = sum(g)             (per channel)
///   dx = gamma * inv_std * (g - mean(g) - xh * mean(g * xh))
/// where the means run over the normalization group.
#[allow(clippy::too_many_arguments)]
fn norm_backward<T: Scalar>(
    grad: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    scope: NormScope,
    c: usize,
    v: usize,
    xn: Option<NodeId>,
    gn: Option<NodeId>,
    bn: Option<NodeId>,
    sink: &mut Grads<T>,
) {
    let gd = grad.data();
    let xh = xhat.data();
    let batch = match scope {
        NormScope::PerChannel { batch } | NormScope::PerInstance { batch } => batch,
    };

    if gn.is_some() || bn.is_some() {
        let mut dg = Tensor::zeros(&[c]);
        let mut db = Tensor::zeros(&[c]);
        let dgv = dg.data_mut();
        let dbv = db.data_mut();
        for bi in 0..batch {
            for ch in 0..c {
                let o = (bi * c + ch) * v;
                let mut ag = T::zero();
                let mut agx = T::zero();
                for i in 0..v {
                    ag += gd[o + i];
                    agx = gd[o + i].mul_add(xh[o + i], agx);
                }
                dgv[ch] += agx;
                dbv[ch] += ag;
            }
        }
        if let Some(gn) = gn {
            sink.accumulate(gn, dg);
        }
        if let Some(bn) = bn {
            sink.accumulate(bn, db);
        }
    }

    if let Some(xn) = xn {
        let mut dx = Tensor::zeros(xhat.shape());
        let dxv = dx.data_mut();
        match scope {
            NormScope::PerChannel { batch } => {
                let m = s::<T>((batch * v) as f64);
                for ch in 0..c {
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for bi in 0..batch {
                        let o = (bi * c + ch) * v;
                        for i in 0..v {
                            sum_g += gd[o + i];
                            sum_gx = gd[o + i].mul_add(xh[o + i], sum_gx);
                        }
                    }
                    let mg = sum_g / m;
                    let mgx = sum_gx / m;
                    let scale = gamma.data()[ch] * inv_std[ch];
                    for bi in 0..batch {
                        let o = (bi * c + ch) * v;
                        for i in 0..v {
                            dxv[o + i] = scale * (gd[o + i] - mg - xh[o + i] * mgx);
                        }
                    }
                }
            }
            NormScope::PerInstance { batch } => {
                let m = s::<T>(v as f64);
                for gidx in 0..batch * c {
                    let ch = gidx % c;
                    let o = gidx * v;
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for i in 0..v {
                        sum_g += gd[o + i];
                        sum_gx = gd[o + i].mul_add(xh[o + i], sum_gx);
                    }
                    let mg = sum_g / m;
                    let mgx = sum_gx / m;
                    let scale = gamma.data()[ch] * inv_std[gidx];
                    for i in 0..v {
                        dxv[o + i] = scale * (gd[o + i] - mg - xh[o + i] * mgx);
                    }
                }
            }
        }
        sink.accumulate(xn, dx);
    }
}

// ---------------------------------------------------------------------------
// pointwise and structural ops
// ---------------------------------------------------------------------------

pub fn relu<T: Scalar>(tape: Option<&Tape<T>>, x: &Var<T>) -> Result<Var<T>> {
    let out = x.value.map(|v| if v > T::zero() { v } else { T::zero() });
    let node = match tape {
        Some(tape) if x.tracked() => {
            let xn = x.node.unwrap();
            let xv = x.value.clone();
            Some(tape.push(Box::new(move |grad, sink| {
                let mut dx = Tensor::zeros(xv.shape());
                let dxv = dx.data_mut();
                let gd = grad.data();
                let xd = xv.data();
                for i in 0..dxv.len() {
                    dxv[i] = if xd[i] > T::zero() { gd[i] } else { T::zero() };
                }
                sink.accumulate(xn, dx);
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

/// Softmax over the channel axis; outputs sum to one per voxel.
pub fn softmax_channels<T: Scalar>(tape: Option<&Tape<T>>, x: &Var<T>) -> Result<Var<T>> {
    let [b, c, xd, yd, zd] = x.value.dims5()?;
    let v = xd * yd * zd;
    let src = x.value.data();
    let mut out = Tensor::zeros(x.value.shape());
    {
        let ov = out.data_mut();
        for bi in 0..b {
            let base = bi * c * v;
            for i in 0..v {
                let mut mx = T::neg_infinity();
                for ch in 0..c {
                    let val = src[base + ch * v + i];
                    if val > mx {
                        mx = val;
                    }
                }
                let mut denom = T::zero();
                for ch in 0..c {
                    let e = (src[base + ch * v + i] - mx).exp();
                    ov[base + ch * v + i] = e;
                    denom += e;
                }
                for ch in 0..c {
                    ov[base + ch * v + i] /= denom;
                }
            }
        }
    }
    let node = match tape {
        Some(tape) if x.tracked() => {
            let xn = x.node.unwrap();
            let p = out.clone();
            Some(tape.push(Box::new(move |grad, sink| {
                let mut dx = Tensor::zeros(p.shape());
                let dxv = dx.data_mut();
                let gd = grad.data();
                let pd = p.data();
                for bi in 0..b {
                    let base = bi * c * v;
                    for i in 0..v {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let at = base + ch * v + i;
                            dot = pd[at].mul_add(gd[at], dot);
                        }
                        for ch in 0..c {
                            let at = base + ch * v + i;
                            dxv[at] = pd[at] * (gd[at] - dot);
                        }
                    }
                }
                sink.accumulate(xn, dx);
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

/// Concatenate along the channel axis. All other extents must match.
pub fn concat_channels<T: Scalar>(tape: Option<&Tape<T>>, parts: &[&Var<T>]) -> Result<Var<T>> {
    if parts.is_empty() {
        return Err(Error::invalid("concat_channels", "no inputs"));
    }
    let [b, _, xd, yd, zd] = parts[0].value.dims5()?;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let [pb, pc, px, py, pz] = p.value.dims5()?;
        for (axis, expected, got) in [
            ("batch", b, pb),
            ("x", xd, px),
            ("y", yd, py),
            ("z", zd, pz),
        ] {
            if expected != got {
                return Err(Error::ShapeMismatch {
                    op: "concat_channels",
                    axis: axis.into(),
                    expected,
                    got,
                });
            }
        }
        channels.push(pc);
    }
    let ctot: usize = channels.iter().sum();
    let v = xd * yd * zd;
    let mut out = Tensor::zeros(&[b, ctot, xd, yd, zd]);
    {
        let ov = out.data_mut();
        for bi in 0..b {
            let mut coff = 0usize;
            for (pi, p) in parts.iter().enumerate() {
                let pc = channels[pi];
                let src = p.value.data();
                let dst_at = (bi * ctot + coff) * v;
                let src_at = bi * pc * v;
                ov[dst_at..dst_at + pc * v].copy_from_slice(&src[src_at..src_at + pc * v]);
                coff += pc;
            }
        }
    }
    let tracked = parts.iter().any(|p| p.tracked());
    let node = match tape {
        Some(tape) if tracked => {
            let nodes: Vec<Option<NodeId>> = parts.iter().map(|p| p.node).collect();
            let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.value.shape().to_vec()).collect();
            Some(tape.push(Box::new(move |grad, sink| {
                let gd = grad.data();
                let mut coff = 0usize;
                for (pi, pn) in nodes.iter().enumerate() {
                    let pc = shapes[pi][1];
                    if let Some(pn) = pn {
                        let mut dp = Tensor::zeros(&shapes[pi]);
                        let dv = dp.data_mut();
                        for bi in 0..b {
                            let src_at = (bi * ctot + coff) * v;
                            let dst_at = bi * pc * v;
                            dv[dst_at..dst_at + pc * v]
                                .copy_from_slice(&gd[src_at..src_at + pc * v]);
                        }
                        sink.accumulate(*pn, dp);
                    }
                    coff += pc;
                }
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`; inference is the
/// identity.
pub fn dropout<T: Scalar, R: Rng>(
    tape: Option<&Tape<T>>,
    x: &Var<T>,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(
            "dropout",
            format!("rate must be in [0,1), got {rate}"),
        ));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok(x.clone());
    }
    let keep_scale = s::<T>(1.0 / (1.0 - rate));
    let mask = Tensor::from_fn(x.value.shape(), |_| {
        if rng.gen::<f64>() < rate {
            T::zero()
        } else {
            keep_scale
        }
    });
    let mut out = x.value.clone();
    {
        let ov = out.data_mut();
        let mv = mask.data();
        for i in 0..ov.len() {
            ov[i] *= mv[i];
        }
    }
    let node = match tape {
        Some(tape) if x.tracked() => {
            let xn = x.node.unwrap();
            Some(tape.push(Box::new(move |grad, sink| {
                let mut dx = grad.clone();
                let dv = dx.data_mut();
                let mv = mask.data();
                for i in 0..dv.len() {
                    dv[i] *= mv[i];
                }
                sink.accumulate(xn, dx);
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

/// Zero-pad the spatial axes.
pub fn pad3<T: Scalar>(
    tape: Option<&Tape<T>>,
    x: &Var<T>,
    lo: [usize; 3],
    hi: [usize; 3],
) -> Result<Var<T>> {
    x.value.dims5()?;
    let out = pad3_tensor(&x.value, lo, hi);
    let node = match tape {
        Some(tape) if x.tracked() => {
            let xn = x.node.unwrap();
            let raw = {
                let sh = x.value.shape();
                [sh[2], sh[3], sh[4]]
            };
            Some(tape.push(Box::new(move |grad, sink| {
                sink.accumulate(xn, crop3_tensor(grad, lo, raw));
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

/// Crop a spatial box.
pub fn crop3<T: Scalar>(
    tape: Option<&Tape<T>>,
    x: &Var<T>,
    off: [usize; 3],
    extent: [usize; 3],
) -> Result<Var<T>> {
    let [_, _, xd, yd, zd] = x.value.dims5()?;
    for (axis, o, e, full) in [
        ("x", off[0], extent[0], xd),
        ("y", off[1], extent[1], yd),
        ("z", off[2], extent[2], zd),
    ] {
        if o + e > full {
            return Err(Error::invalid(
                "crop3",
                format!("axis {axis}: offset {o} + extent {e} exceeds {full}"),
            ));
        }
    }
    let out = crop3_tensor(&x.value, off, extent);
    let node = match tape {
        Some(tape) if x.tracked() => {
            let xn = x.node.unwrap();
            let full = [xd, yd, zd];
            Some(tape.push(Box::new(move |grad, sink| {
                let hi = [
                    full[0] - off[0] - extent[0],
                    full[1] - off[1] - extent[1],
                    full[2] - off[2] - extent[2],
                ];
                sink.accumulate(xn, pad3_tensor(grad, off, hi));
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

/// Extract a single channel as a `[B,1,X,Y,Z]` tensor.
pub fn channel_slice<T: Scalar>(tape: Option<&Tape<T>>, x: &Var<T>, ch: usize) -> Result<Var<T>> {
    let [b, c, xd, yd, zd] = x.value.dims5()?;
    if ch >= c {
        return Err(Error::invalid(
            "channel_slice",
            format!("channel {ch} out of range for {c} channels"),
        ));
    }
    let v = xd * yd * zd;
    let src = x.value.data();
    let mut out = Tensor::zeros(&[b, 1, xd, yd, zd]);
    {
        let ov = out.data_mut();
        for bi in 0..b {
            ov[bi * v..(bi + 1) * v]
                .copy_from_slice(&src[(bi * c + ch) * v..(bi * c + ch + 1) * v]);
        }
    }
    let node = match tape {
        Some(tape) if x.tracked() => {
            let xn = x.node.unwrap();
            let full_shape = x.value.shape().to_vec();
            Some(tape.push(Box::new(move |grad, sink| {
                let mut dx = Tensor::zeros(&full_shape);
                let dv = dx.data_mut();
                let gd = grad.data();
                for bi in 0..b {
                    dv[(bi * c + ch) * v..(bi * c + ch + 1) * v]
                        .copy_from_slice(&gd[bi * v..(bi + 1) * v]);
                }
                sink.accumulate(xn, dx);
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

/// Sum of all elements, as a scalar.
pub fn sum<T: Scalar>(tape: Option<&Tape<T>>, x: &Var<T>) -> Result<Var<T>> {
    let mut acc = T::zero();
    for &v in x.value.data() {
        acc += v;
    }
    let out = Tensor::scalar(acc);
    let node = match tape {
        Some(tape) if x.tracked() => {
            let xn = x.node.unwrap();
            let shape = x.value.shape().to_vec();
            Some(tape.push(Box::new(move |grad, sink| {
                let g = grad.data()[0];
                sink.accumulate(xn, Tensor::full(&shape, g));
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

/// Elementwise product of two tensors of identical shape.
pub fn mul<T: Scalar>(tape: Option<&Tape<T>>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    check_same_shape("mul", &a.value, &b.value)?;
    let mut out = a.value.clone();
    {
        let ov = out.data_mut();
        let bv = b.value.data();
        for i in 0..ov.len() {
            ov[i] *= bv[i];
        }
    }
    let tracked = a.tracked() || b.tracked();
    let node = match tape {
        Some(tape) if tracked => {
            let (an, bn) = (a.node, b.node);
            let av = a.value.clone();
            let bv = b.value.clone();
            Some(tape.push(Box::new(move |grad, sink| {
                let gd = grad.data();
                if let Some(an) = an {
                    let mut da = Tensor::zeros(av.shape());
                    let dv = da.data_mut();
                    let other = bv.data();
                    for i in 0..dv.len() {
                        dv[i] = gd[i] * other[i];
                    }
                    sink.accumulate(an, da);
                }
                if let Some(bn) = bn {
                    let mut db = Tensor::zeros(bv.shape());
                    let dv = db.data_mut();
                    let other = av.data();
                    for i in 0..dv.len() {
                        dv[i] = gd[i] * other[i];
                    }
                    sink.accumulate(bn, db);
                }
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}

/// Elementwise sum of two tensors of identical shape.
pub fn add<T: Scalar>(tape: Option<&Tape<T>>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    lincomb(tape, a, T::one(), b, T::one())
}

/// `ca * a + cb * b` elementwise (used to combine scalar loss terms).
pub fn lincomb<T: Scalar>(
    tape: Option<&Tape<T>>,
    a: &Var<T>,
    ca: T,
    b: &Var<T>,
    cb: T,
) -> Result<Var<T>> {
    check_same_shape("lincomb", &a.value, &b.value)?;
    let mut out = Tensor::zeros(a.value.shape());
    {
        let ov = out.data_mut();
        let av = a.value.data();
        let bv = b.value.data();
        for i in 0..ov.len() {
            ov[i] = ca * av[i] + cb * bv[i];
        }
    }
    let tracked = a.tracked() || b.tracked();
    let node = match tape {
        Some(tape) if tracked => {
            let (an, bn) = (a.node, b.node);
            Some(tape.push(Box::new(move |grad, sink| {
                if let Some(an) = an {
                    sink.accumulate(an, grad.scale(ca));
                }
                if let Some(bn) = bn {
                    sink.accumulate(bn, grad.scale(cb));
                }
            })))
        }
        _ => None,
    };
    Ok(Var { value: out, node })
}
