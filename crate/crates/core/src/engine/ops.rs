//! Forward and backward kernels for every layer kind used by the networks.
//!
//! All kernels work on `[batch, channels, spatial...]` tensors with spatial
//! rank 2 or 3. Internally a 2D plane is treated as a volume of depth 1 so the
//! same loops serve both cases. Kernels are pure: backward functions take
//! whatever the forward pass cached and return fresh gradient buffers.

use rand::Rng;

use crate::engine::{Real, Tensor};
use crate::error::{Error, Result};

/// Spatial geometry with 2D planes stored as depth-1 volumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geo {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub volumetric: bool,
}

impl Geo {
    pub fn of(op: &'static str, t: &[usize]) -> Result<Self> {
        match t.len() {
            4 => Ok(Geo {
                d: 1,
                h: t[2],
                w: t[3],
                volumetric: false,
            }),
            5 => Ok(Geo {
                d: t[2],
                h: t[3],
                w: t[4],
                volumetric: true,
            }),
            _ => Err(Error::shape(
                op,
                format!("expected [batch, channels, spatial...] with spatial rank 2 or 3, got {t:?}"),
            )),
        }
    }

    pub fn size(&self) -> usize {
        self.d * self.h * self.w
    }

    fn dims(&self) -> Vec<usize> {
        if self.volumetric {
            vec![self.d, self.h, self.w]
        } else {
            vec![self.h, self.w]
        }
    }

    /// Depth factor for 2^dim windows: 1 for planes, 2 for volumes.
    fn depth_factor(&self) -> usize {
        if self.volumetric {
            2
        } else {
            1
        }
    }

    fn taps(&self) -> Vec<(isize, isize, isize)> {
        let zs: &[isize] = if self.volumetric { &[-1, 0, 1] } else { &[0] };
        let mut out = Vec::with_capacity(zs.len() * 9);
        for &z in zs {
            for y in -1..=1 {
                for x in -1..=1 {
                    out.push((z, y, x));
                }
            }
        }
        out
    }
}

fn shape_with(batch: usize, channels: usize, g: &Geo) -> Vec<usize> {
    let mut s = vec![batch, channels];
    s.extend(g.dims());
    s
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

fn im2col<T: Real>(x: &[T], channels: usize, g: &Geo, col: &mut [T]) {
    let s = g.size();
    let taps = g.taps();
    let k = taps.len();
    let (d, h, w) = (g.d as isize, g.h as isize, g.w as isize);
    for ci in 0..channels {
        let xc = &x[ci * s..(ci + 1) * s];
        for (t, &(oz, oy, ox)) in taps.iter().enumerate() {
            let row = &mut col[(ci * k + t) * s..(ci * k + t + 1) * s];
            for z in 0..d {
                let zz = z + oz;
                for y in 0..h {
                    let yy = y + oy;
                    let dst = &mut row[((z * h + y) * w) as usize..((z * h + y + 1) * w) as usize];
                    if zz < 0 || zz >= d || yy < 0 || yy >= h {
                        dst.fill(T::zero());
                        continue;
                    }
                    let base = ((zz * h + yy) * w) as usize;
                    let src = &xc[base..base + g.w];
                    let wu = g.w;
                    match ox {
                        0 => dst.copy_from_slice(src),
                        1 => {
                            dst[..wu - 1].copy_from_slice(&src[1..]);
                            dst[wu - 1] = T::zero();
                        }
                        _ => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..wu - 1]);
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], channels: usize, g: &Geo, dx: &mut [T]) {
    let s = g.size();
    let taps = g.taps();
    let k = taps.len();
    let (d, h, w) = (g.d as isize, g.h as isize, g.w as isize);
    for ci in 0..channels {
        let xc = &mut dx[ci * s..(ci + 1) * s];
        for (t, &(oz, oy, ox)) in taps.iter().enumerate() {
            let row = &col[(ci * k + t) * s..(ci * k + t + 1) * s];
            for z in 0..d {
                let zz = z + oz;
                if zz < 0 || zz >= d {
                    continue;
                }
                for y in 0..h {
                    let yy = y + oy;
                    if yy < 0 || yy >= h {
                        continue;
                    }
                    let src = &row[((z * h + y) * w) as usize..((z * h + y + 1) * w) as usize];
                    let base = ((zz * h + yy) * w) as usize;
                    let dst = &mut xc[base..base + g.w];
                    let wu = g.w;
                    match ox {
                        0 => dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b),
                        1 => dst[1..]
                            .iter_mut()
                            .zip(&src[..wu - 1])
                            .for_each(|(a, &b)| *a += b),
                        _ => dst[..wu - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(a, &b)| *a += b),
                    }
                }
            }
        }
    }
}

struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    taps: usize,
    geo: Geo,
}

fn conv_dims<T: Real>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    kernel: usize,
) -> Result<ConvDims> {
    let geo = Geo::of(op, input.shape())?;
    let rank = input.shape().len();
    let ws = weight.shape();
    let expected_kernel = vec![kernel; rank - 2];
    if ws.len() != rank || ws[2..] != expected_kernel[..] {
        return Err(Error::shape(
            op,
            format!(
                "weight {:?} is not a {kernel}-per-axis kernel for input {:?}",
                ws,
                input.shape()
            ),
        ));
    }
    if ws[1] != input.channels() {
        return Err(Error::shape(
            op,
            format!(
                "input {:?} has {} channels but weight {:?} expects {}",
                input.shape(),
                input.channels(),
                ws,
                ws[1]
            ),
        ));
    }
    if bias.shape() != [ws[0]] {
        return Err(Error::shape(
            op,
            format!("bias {:?} does not match weight {:?}", bias.shape(), ws),
        ));
    }
    let taps = if kernel == 1 { 1 } else { geo.taps().len() };
    Ok(ConvDims {
        batch: input.batch(),
        cin: ws[1],
        cout: ws[0],
        taps,
        geo,
    })
}

fn conv_forward<T: Real>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    kernel: usize,
) -> Result<Tensor<T>> {
    let cd = conv_dims(op, input, weight, bias, kernel)?;
    let s = cd.geo.size();
    let kk = cd.cin * cd.taps;
    let mut out = vec![T::zero(); cd.batch * cd.cout * s];
    let mut col = if kernel == 1 {
        Vec::new()
    } else {
        vec![T::zero(); kk * s]
    };
    for b in 0..cd.batch {
        let x = &input.data()[b * cd.cin * s..(b + 1) * cd.cin * s];
        let y = &mut out[b * cd.cout * s..(b + 1) * cd.cout * s];
        for (co, plane) in y.chunks_mut(s).enumerate() {
            plane.fill(bias.data()[co]);
        }
        let rhs: &[T] = if kernel == 1 {
            x
        } else {
            im2col(x, cd.cin, &cd.geo, &mut col);
            &col
        };
        T::gemm(cd.cout, kk, s, T::one(), weight.data(), false, rhs, false, T::one(), y);
    }
    Tensor::new(shape_with(cd.batch, cd.cout, &cd.geo), out)
}

/// Gradients of a convolution with respect to its operands.
#[derive(Debug)]
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

fn conv_backward_impl<T: Real>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &[T],
    need_input: bool,
    kernel: usize,
) -> Result<ConvGrads<T>> {
    let cd = conv_dims(op, input, weight, bias, kernel)?;
    let s = cd.geo.size();
    let kk = cd.cin * cd.taps;
    if grad_out.len() != cd.batch * cd.cout * s {
        return Err(Error::shape(op, "output gradient has the wrong length"));
    }
    let mut dw = vec![T::zero(); cd.cout * kk];
    let mut db = vec![T::zero(); cd.cout];
    let mut dx = if need_input {
        Some(vec![T::zero(); input.len()])
    } else {
        None
    };
    let mut col = if kernel == 1 {
        Vec::new()
    } else {
        vec![T::zero(); kk * s]
    };
    let mut dcol = if kernel == 1 || !need_input {
        Vec::new()
    } else {
        vec![T::zero(); kk * s]
    };
    for b in 0..cd.batch {
        let x = &input.data()[b * cd.cin * s..(b + 1) * cd.cin * s];
        let dy = &grad_out[b * cd.cout * s..(b + 1) * cd.cout * s];
        for (co, plane) in dy.chunks(s).enumerate() {
            db[co] += plane.iter().copied().sum::<T>();
        }
        let rhs: &[T] = if kernel == 1 {
            x
        } else {
            im2col(x, cd.cin, &cd.geo, &mut col);
            &col
        };
        T::gemm(cd.cout, s, kk, T::one(), dy, false, rhs, true, T::one(), &mut dw);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * cd.cin * s..(b + 1) * cd.cin * s];
            if kernel == 1 {
                T::gemm(kk, cd.cout, s, T::one(), weight.data(), true, dy, false, T::one(), dxb);
            } else {
                T::gemm(kk, cd.cout, s, T::one(), weight.data(), true, dy, false, T::zero(), &mut dcol);
                col2im(&dcol, cd.cin, &cd.geo, dxb);
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

/// Same-padded, stride-1 convolution with a 3-per-axis kernel.
/// `weight` is `[out, in, 3, 3]` or `[out, in, 3, 3, 3]`.
pub fn conv_nd<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    conv_forward("conv_nd", input, weight, bias, 3)
}

pub fn conv_nd_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &[T],
    need_input: bool,
) -> Result<ConvGrads<T>> {
    conv_backward_impl("conv_nd", input, weight, bias, grad_out, need_input, 3)
}

/// Pointwise (1-per-axis kernel) convolution: a per-pixel linear map across channels.
pub fn conv_1x<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    conv_forward("conv_1x", input, weight, bias, 1)
}

pub fn conv_1x_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &[T],
    need_input: bool,
) -> Result<ConvGrads<T>> {
    conv_backward_impl("conv_1x", input, weight, bias, grad_out, need_input, 1)
}

// ---------------------------------------------------------------------------
// Pooling and upsampling
// ---------------------------------------------------------------------------

/// 2-per-axis max pooling with stride 2. Returns the output and, per output
/// element, the linear input index that won (first index on ties).
pub fn maxpool_nd<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let g = Geo::of("maxpool_nd", input.shape())?;
    let pd = g.depth_factor();
    if g.h % 2 != 0 || g.w % 2 != 0 || g.d % pd != 0 {
        return Err(Error::shape(
            "maxpool_nd",
            format!("odd spatial dim in {:?}", input.shape()),
        ));
    }
    let og = Geo {
        d: g.d / pd,
        h: g.h / 2,
        w: g.w / 2,
        volumetric: g.volumetric,
    };
    let planes = input.batch() * input.channels();
    let (s, os) = (g.size(), og.size());
    let mut out = Vec::with_capacity(planes * os);
    let mut arg = Vec::with_capacity(planes * os);
    let x = input.data();
    for p in 0..planes {
        let base = p * s;
        for z in 0..og.d {
            for y in 0..og.h {
                for xo in 0..og.w {
                    let mut best_i = usize::MAX;
                    let mut best = T::neg_infinity();
                    for dz in 0..pd {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base
                                    + ((z * pd + dz) * g.h + (y * 2 + dy)) * g.w
                                    + (xo * 2 + dx);
                                if best_i == usize::MAX || x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((
        Tensor::new(shape_with(input.batch(), input.channels(), &og), out)?,
        arg,
    ))
}

pub fn maxpool_nd_backward<T: Real>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&i, &g) in argmax.iter().zip(grad_out) {
        dx[i] += g;
    }
    dx
}

/// Nearest-neighbour upsampling by 2 per spatial axis.
pub fn upsample_nd<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let g = Geo::of("upsample_nd", input.shape())?;
    let pd = g.depth_factor();
    let og = Geo {
        d: g.d * pd,
        h: g.h * 2,
        w: g.w * 2,
        volumetric: g.volumetric,
    };
    let planes = input.batch() * input.channels();
    let (s, os) = (g.size(), og.size());
    let mut out = vec![T::zero(); planes * os];
    let x = input.data();
    for p in 0..planes {
        for z in 0..og.d {
            for y in 0..og.h {
                let src = &x[p * s + ((z / pd) * g.h + y / 2) * g.w..][..g.w];
                let dst = &mut out[p * os + (z * og.h + y) * og.w..][..og.w];
                for (xo, v) in dst.iter_mut().enumerate() {
                    *v = src[xo / 2];
                }
            }
        }
    }
    Tensor::new(shape_with(input.batch(), input.channels(), &og), out)
}

pub fn upsample_nd_backward<T: Real>(input_shape: &[usize], grad_out: &[T]) -> Result<Vec<T>> {
    let g = Geo::of("upsample_nd", input_shape)?;
    let pd = g.depth_factor();
    let (oh, ow) = (g.h * 2, g.w * 2);
    let os = g.d * pd * oh * ow;
    let planes = input_shape[0] * input_shape[1];
    let s = g.size();
    let mut dx = vec![T::zero(); planes * s];
    for p in 0..planes {
        for z in 0..g.d * pd {
            for y in 0..oh {
                let src = &grad_out[p * os + (z * oh + y) * ow..][..ow];
                let dst = &mut dx[p * s + ((z / pd) * g.h + y / 2) * g.w..][..g.w];
                for (xo, &v) in src.iter().enumerate() {
                    dst[xo / 2] += v;
                }
            }
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Values cached by a training-mode batch normalization for its backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Batch statistics from a training-mode pass, used to update running stats.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Bessel-corrected variance.
    pub var_unbiased: Vec<f64>,
}

fn bn_layout<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (b, c) = (x.batch(), x.channels());
    if x.shape().len() < 2 || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm",
            format!(
                "input {:?} with scale {:?} / shift {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok((b, c, x.spatial_size()))
}

/// Training-mode normalization over the batch and spatial axes, per channel.
pub fn batchnorm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>, BnStats)> {
    let (b, c, s) = bn_layout(x, gamma, beta)?;
    let n = b * s;
    if n < 2 {
        return Err(Error::Degenerate {
            op: "batchnorm",
            detail: format!(
                "variance over a single element (batch {b}, spatial size {s}) is undefined"
            ),
        });
    }
    let data = x.data();
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for bi in 0..b {
            sum += data[(bi * c + ch) * s..][..s].iter().map(|v| v.to_f64c()).sum::<f64>();
        }
        let m = sum / n as f64;
        let mut sq = 0.0f64;
        for bi in 0..b {
            sq += data[(bi * c + ch) * s..][..s]
                .iter()
                .map(|v| {
                    let d = v.to_f64c() - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / n as f64;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::from_f64c(1.0 / (v + eps).sqrt())).collect();
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * s;
            let m = T::from_f64c(mean[ch]);
            let (g, bt, is) = (gamma.data()[ch], beta.data()[ch], inv_std[ch]);
            for i in off..off + s {
                let h = (data[i] - m) * is;
                xhat[i] = h;
                out[i] = g * h + bt;
            }
        }
    }
    let var_unbiased = var.iter().map(|&v| v * n as f64 / (n - 1) as f64).collect();
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BnCache { xhat, inv_std },
        BnStats { mean, var_unbiased },
    ))
}

/// Returns `(dx, dscale, dshift)`.
pub fn batchnorm_train_backward<T: Real>(
    grad_out: &[T],
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
    shape: &[usize],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c) = (shape[0], shape[1]);
    let s: usize = shape[2..].iter().product();
    let n = (b * s) as f64;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * s;
            for i in off..off + s {
                let g = grad_out[i].to_f64c();
                dbeta[ch] += g;
                dgamma[ch] += g * cache.xhat[i].to_f64c();
            }
        }
    }
    let mut dx = vec![T::zero(); grad_out.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * s;
            let k = gamma.data()[ch].to_f64c() * cache.inv_std[ch].to_f64c() / n;
            for i in off..off + s {
                let v = n * grad_out[i].to_f64c() - dbeta[ch] - cache.xhat[i].to_f64c() * dgamma[ch];
                dx[i] = T::from_f64c(k * v);
            }
        }
    }
    (
        dx,
        dgamma.into_iter().map(T::from_f64c).collect(),
        dbeta.into_iter().map(T::from_f64c).collect(),
    )
}

/// Evaluation-mode normalization with running statistics.
pub fn batchnorm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (b, c, s) = bn_layout(x, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::shape("batchnorm", "running statistics do not match channels"));
    }
    let mut out = x.data().to_vec();
    for bi in 0..b {
        for ch in 0..c {
            let is = T::from_f64c(1.0 / (running_var.data()[ch].to_f64c() + eps).sqrt());
            let scale = gamma.data()[ch] * is;
            let shift = beta.data()[ch] - running_mean.data()[ch] * scale;
            for v in &mut out[(bi * c + ch) * s..][..s] {
                *v = *v * scale + shift;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn batchnorm_eval_backward<T: Real>(
    grad_out: &[T],
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c, s) = (x.batch(), x.channels(), x.spatial_size());
    let mut dx = vec![T::zero(); grad_out.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let is = T::from_f64c(1.0 / (running_var.data()[ch].to_f64c() + eps).sqrt());
            let off = (bi * c + ch) * s;
            for i in off..off + s {
                let g = grad_out[i];
                dx[i] = g * gamma.data()[ch] * is;
                dbeta[ch] += g;
                dgamma[ch] += g * (x.data()[i] - running_mean.data()[ch]) * is;
            }
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Elementwise, structural and dense ops
// ---------------------------------------------------------------------------

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let data = input.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Subgradient 0 at the kink.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    input
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect()
}

/// Inverted dropout. In training mode returns the per-element multiplier
/// (0 or `1/(1-rate)`), which is also the backward mask.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    input: &Tensor<T>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok((input.clone_values(), None));
    }
    let keep = T::from_f64c(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Ok((Tensor::new(input.shape().to_vec(), data)?, Some(mask)))
}

/// Concatenate along the channel axis.
pub fn concat<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let b = first.batch();
    let s = first.spatial();
    for t in inputs {
        if t.batch() != b || t.spatial() != s || t.shape().len() != first.shape().len() {
            return Err(Error::shape(
                "concat",
                format!("{:?} vs {:?}", t.shape(), first.shape()),
            ));
        }
    }
    let ss = first.spatial_size();
    let total_c: usize = inputs.iter().map(|t| t.channels()).sum();
    let mut out = Vec::with_capacity(b * total_c * ss);
    for bi in 0..b {
        for t in inputs {
            let per = t.channels() * ss;
            out.extend_from_slice(&t.data()[bi * per..(bi + 1) * per]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = total_c;
    Tensor::new(shape, out)
}

/// Split a channel-concatenated buffer back into per-input pieces.
pub fn concat_backward<T: Real>(grad_out: &[T], batch: usize, channels: &[usize], spatial: usize) -> Vec<Vec<T>> {
    let total: usize = channels.iter().sum();
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&c| Vec::with_capacity(batch * c * spatial)).collect();
    for bi in 0..batch {
        let mut off = bi * total * spatial;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&grad_out[off..off + c * spatial]);
            off += c * spatial;
        }
    }
    parts
}

/// Inverse of [`concat`]: slice a tensor into consecutive channel groups.
pub fn split_channels<T: Real>(input: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    if channels.iter().sum::<usize>() != input.channels() {
        return Err(Error::shape("split_channels", "channel counts do not add up"));
    }
    concat_backward(input.data(), input.batch(), channels, input.spatial_size())
        .into_iter()
        .zip(channels)
        .map(|(data, &c)| {
            let mut shape = input.shape().to_vec();
            shape[1] = c;
            Tensor::new(shape, data)
        })
        .collect()
}

pub fn residual_add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "residual_add",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Affine map `x W^T + b` with `x: [batch, in]`, `W: [out, in]`.
pub fn dense<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, fin) = dense_dims(input, weight, bias)?;
    let fout = weight.shape()[0];
    let mut out = Vec::with_capacity(b * fout);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    T::gemm(b, fin, fout, T::one(), input.data(), false, weight.data(), true, T::one(), &mut out);
    Tensor::new(vec![b, fout], out)
}

fn dense_dims<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize)> {
    if input.shape().len() != 2 || weight.shape().len() != 2 {
        return Err(Error::shape(
            "dense",
            format!("input {:?} must be [batch, features], weight {:?} [out, in]", input.shape(), weight.shape()),
        ));
    }
    let fin = input.shape()[1];
    if weight.shape()[1] != fin || bias.shape() != [weight.shape()[0]] {
        return Err(Error::shape(
            "dense",
            format!(
                "input {:?} has {fin} features, weight {:?} bias {:?}",
                input.shape(),
                weight.shape(),
                bias.shape()
            ),
        ));
    }
    Ok((input.shape()[0], fin))
}

/// Returns `(dx, dweight, dbias)`.
pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (b, fin) = (input.shape()[0], input.shape()[1]);
    let fout = weight.shape()[0];
    let mut dw = vec![T::zero(); fout * fin];
    T::gemm(fout, b, fin, T::one(), grad_out, true, input.data(), false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); fout];
    for row in grad_out.chunks(fout) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); b * fin];
        T::gemm(b, fout, fin, T::one(), grad_out, false, weight.data(), false, T::zero(), &mut dx);
        dx
    });
    (dx, dw, db)
}

/// Softmax over the channel axis, max-subtracted.
pub fn softmax<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let (b, c, s) = (input.batch(), input.channels(), input.spatial_size());
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    let mut e = vec![0.0f64; c];
    for bi in 0..b {
        let base = bi * c * s;
        for p in 0..s {
            let mut mx = f64::NEG_INFINITY;
            for ch in 0..c {
                mx = mx.max(x[base + ch * s + p].to_f64c());
            }
            let mut sum = 0.0;
            for ch in 0..c {
                e[ch] = (x[base + ch * s + p].to_f64c() - mx).exp();
                sum += e[ch];
            }
            for ch in 0..c {
                out[base + ch * s + p] = T::from_f64c(e[ch] / sum);
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out).expect("same shape")
}

/// Backward of softmax given its output `y`.
pub fn softmax_backward<T: Real>(output: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    let (b, c, s) = (output.batch(), output.channels(), output.spatial_size());
    let y = output.data();
    let mut dx = vec![T::zero(); y.len()];
    for bi in 0..b {
        let base = bi * c * s;
        for p in 0..s {
            let mut dot = 0.0f64;
            for ch in 0..c {
                let i = base + ch * s + p;
                dot += y[i].to_f64c() * grad_out[i].to_f64c();
            }
            for ch in 0..c {
                let i = base + ch * s + p;
                dx[i] = T::from_f64c(y[i].to_f64c() * (grad_out[i].to_f64c() - dot));
            }
        }
    }
    dx
}

impl<T: Real> Tensor<T> {
    /// Copy of the values without the gradient slot.
    pub fn clone_values(&self) -> Tensor<T> {
        Tensor::new(self.shape().to_vec(), self.data().to_vec()).expect("valid tensor")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    fn ones_kernel(cout: usize, cin: usize) -> Tensor<f64> {
        Tensor::full(vec![cout, cin, 3, 3], 1.0)
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::full(vec![3, 2, 3, 3], 0.7);
        let b = t(&[3], &[1.0, -2.0, 0.5]);
        let y = conv_nd(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4]);
        for (c, plane) in y.data().chunks(16).enumerate() {
            assert!(plane.iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let mut w = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        w.data_mut()[4] = 1.0;
        let y = conv_nd(&x, &w, &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_all_ones_kernel_padded_sums() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let y = conv_nd(&x, &ones_kernel(1, 1), &t(&[1], &[0.0])).unwrap();
        // centre sees every pixel, corner (0,0) sees 1+2+4+5.
        assert_eq!(y.data()[4], 45.0);
        assert_eq!(y.data()[0], 12.0);
    }

    #[test]
    fn conv_3d_delta_kernel_is_identity() {
        let vals: Vec<f64> = (0..2 * 4 * 4 * 4).map(|i| i as f64).collect();
        let x = t(&[1, 2, 4, 4, 4], &vals);
        let mut w = Tensor::<f64>::zeros(vec![2, 2, 3, 3, 3]);
        // out0 <- in0 centre, out1 <- in1 centre
        w.data_mut()[13] = 1.0;
        w.data_mut()[27 * 3 + 13] = 1.0;
        let y = conv_nd(&x, &w, &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(vec![1, 3, 3, 3]);
        let err = conv_nd(&x, &w, &t(&[1], &[0.0])).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 4, 4]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn conv_1x_examples() {
        let x = t(&[1, 2, 1, 1], &[3.0, 4.0]);
        let y = conv_1x(&x, &t(&[1, 2, 1, 1], &[1.0, 1.0]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(y.data(), &[7.0]);
        let eye = t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]);
        let y = conv_1x(&x, &eye, &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(y.data(), x.data());
        let z = conv_1x(&x, &Tensor::zeros(vec![1, 2, 1, 1]), &t(&[1], &[5.0])).unwrap();
        assert_eq!(z.data(), &[5.0]);
    }

    #[test]
    fn maxpool_examples() {
        let (y, _) = maxpool_nd(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let ramp: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let (y, _) = maxpool_nd(&t(&[1, 1, 4, 4], &ramp)).unwrap();
        assert_eq!(y.data(), &[5., 7., 13., 15.]);
    }

    #[test]
    fn maxpool_ties_route_to_first_element() {
        let x = Tensor::<f64>::full(vec![1, 1, 4, 4], 3.0);
        let (y, arg) = maxpool_nd(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        assert_eq!(arg, vec![0, 2, 8, 10]);
        let dx = maxpool_nd_backward(16, &arg, &[1.0; 4]);
        let hit: Vec<usize> = dx.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect();
        assert_eq!(hit, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        assert!(maxpool_nd(&Tensor::<f64>::zeros(vec![1, 1, 3, 4])).is_err());
        assert!(maxpool_nd(&Tensor::<f64>::zeros(vec![1, 1, 3, 4, 4])).is_err());
    }

    #[test]
    fn upsample_examples() {
        let y = upsample_nd(&t(&[1, 1, 1, 1], &[2.5])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
        let y = upsample_nd(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        #[rustfmt::skip]
        let expect = [1., 1., 2., 2.,
                      1., 1., 2., 2.,
                      3., 3., 4., 4.,
                      3., 3., 4., 4.];
        assert_eq!(y.data(), &expect);
        let y3 = upsample_nd(&t(&[1, 1, 1, 1, 1], &[7.0])).unwrap();
        assert_eq!(y3.shape(), &[1, 1, 2, 2, 2]);
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let vals: Vec<f64> = (0..18).map(|i| (i as f64 * 1.3).cos()).collect();
        let x = t(&[1, 2, 3, 3], &vals);
        let (y, _) = maxpool_nd(&upsample_nd(&x).unwrap()).unwrap();
        assert_eq!(y.data(), x.data());
        let x3 = t(&[1, 1, 2, 3, 3], &vals);
        let (y3, _) = maxpool_nd(&upsample_nd(&x3).unwrap()).unwrap();
        assert_eq!(y3.data(), x3.data());
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let vals: Vec<f64> = (0..2 * 3 * 16).map(|i| ((i * 37 % 11) as f64) * 0.9 + i as f64 * 0.01).collect();
        let x = t(&[2, 3, 4, 4], &vals);
        let one = Tensor::full(vec![3], 1.0);
        let zero = Tensor::zeros(vec![3]);
        let (y, _, _) = batchnorm_train(&x, &one, &zero, 1e-5).unwrap();
        for ch in 0..3 {
            let v: Vec<f64> = (0..2).flat_map(|b| y.data()[(b * 3 + ch) * 16..][..16].to_vec()).collect();
            let m = v.iter().sum::<f64>() / 32.0;
            let var = v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 32.0;
            assert!(m.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
        let two = Tensor::full(vec![3], 2.0);
        let three = Tensor::full(vec![3], 3.0);
        let (y, _, _) = batchnorm_train(&x, &two, &three, 1e-5).unwrap();
        for ch in 0..3 {
            let v: Vec<f64> = (0..2).flat_map(|b| y.data()[(b * 3 + ch) * 16..][..16].to_vec()).collect();
            let m = v.iter().sum::<f64>() / 32.0;
            let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 32.0).sqrt();
            assert!((m - 3.0).abs() < 1e-6);
            assert!((sd - 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_affine() {
        let x = t(&[1, 2, 1, 2], &[1.0, -2.0, 0.5, 4.0]);
        let g = t(&[2], &[2.0, -1.0]);
        let b = t(&[2], &[0.5, 1.0]);
        let y = batchnorm_eval(&x, &g, &b, &Tensor::zeros(vec![2]), &Tensor::full(vec![2], 1.0), 0.0).unwrap();
        assert_eq!(y.data(), &[2.5, -3.5, 0.5, -3.0]);
    }

    #[test]
    fn batchnorm_single_element_is_degenerate() {
        let x = Tensor::<f64>::zeros(vec![1, 4]);
        let err = batchnorm_train(&x, &Tensor::full(vec![4], 1.0), &Tensor::zeros(vec![4]), 1e-5);
        assert!(matches!(err, Err(Error::Degenerate { .. })));
    }

    #[test]
    fn relu_examples() {
        let x = t(&[1, 3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = t(&[1, 2], &[-1.0, -3.0]);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        assert_eq!(relu_backward(&neg, &[1.0, 1.0]), vec![0.0, 0.0]);
        assert_eq!(relu_backward(&t(&[1, 2], &[-1.0, 2.0]), &[1.0, 1.0]), vec![0.0, 1.0]);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        let (y, m) = dropout(&x, 0.5, false, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(m.is_none());
        let (y, _) = dropout(&x, 0.0, true, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
        assert!(dropout(&x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::<f64>::full(vec![1, 10_000], 3.0);
        let (y, _) = dropout(&x, 0.5, true, &mut rng).unwrap();
        let mean = y.data().iter().sum::<f64>() / 10_000.0;
        // Each draw is 0 or 6: sd 3, standard error 0.03.
        assert!((mean - 3.0).abs() < 0.15, "mean {mean}");
    }

    #[test]
    fn concat_examples() {
        let a = t(&[1, 2, 1, 2], &[1., 2., 3., 4.]);
        let b = t(&[1, 3, 1, 2], &[5., 6., 7., 8., 9., 10.]);
        assert_eq!(concat(&[&a]).unwrap(), a);
        let c = concat(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[1, 5, 1, 2]);
        assert_eq!(c.data(), &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10.]);
        let parts = split_channels(&c, &[2, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        let bad = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        assert!(concat(&[&a, &bad]).is_err());
    }

    #[test]
    fn residual_add_examples() {
        let a = t(&[1, 3], &[1.0, -2.0, 3.0]);
        assert_eq!(residual_add(&a, &Tensor::zeros(vec![1, 3])).unwrap(), a);
        assert_eq!(residual_add(&a, &a).unwrap().data(), &[2.0, -4.0, 6.0]);
        assert!(residual_add(&a, &Tensor::zeros(vec![1, 2])).is_err());
    }

    #[test]
    fn dense_examples() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 1.0, 1.0, -1.0]);
        let y = dense(&x, &w, &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(dense(&x, &eye, &t(&[2], &[0.0, 0.0])).unwrap().data(), x.data());
        let z = dense(&Tensor::zeros(vec![2, 2]), &w, &t(&[2], &[0.5, -1.5])).unwrap();
        assert_eq!(z.data(), &[0.5, -1.5, 0.5, -1.5]);
        assert!(dense(&t(&[1, 3], &[0.0; 3]), &w, &t(&[2], &[0.0, 0.0])).is_err());
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&t(&[1, 2], &[0.0, 0.0]));
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&t(&[1, 2], &[1000.0, 0.0]));
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1] >= 0.0 && y.is_finite());
        let y = softmax(&t(&[1, 3], &[1.0, 2.0, 3.0]));
        for (a, b) in y.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
