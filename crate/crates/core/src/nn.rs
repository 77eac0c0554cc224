//! Layer primitives whose backward passes reduce to matrix products and
//! gathers (the backend's native convolution backward is very slow on CPU).

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::{Error, Result};

/// Stride-1 cross-correlation of `(B, Cin, H, W)` with `(Cout, Cin, kh, kw)`
/// and symmetric zero padding, computed as im2col followed by one batched
/// matmul.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize) -> Result<Tensor> {
    let (b, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    if cin != wcin {
        return Err(Error::Shape(format!(
            "conv input has {cin} channels, kernel expects {wcin}"
        )));
    }
    if h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} larger than padded input {h}x{wd}"
        )));
    }
    let geom = Geometry {
        channels: cin,
        height: h,
        width: wd,
        kh,
        kw,
        padding,
    };
    let (oh, ow) = geom.output();
    let cols = if kh == 1 && kw == 1 && padding == 0 {
        x.reshape((b, cin, h * wd))?
    } else {
        x.contiguous()?.apply_op1(Im2Col(geom))?
    };
    let k = cin * kh * kw;
    let wm = w
        .contiguous()?
        .reshape((1, cout, k))?
        .broadcast_as((b, cout, k))?
        .contiguous()?;
    Ok(wm.matmul(&cols)?.reshape((b, cout, oh, ow))?)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    padding: usize,
}

impl Geometry {
    fn output(&self) -> (usize, usize) {
        (
            self.height + 2 * self.padding - self.kh + 1,
            self.width + 2 * self.padding - self.kw + 1,
        )
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Visits every (column entry, image entry) pair that overlaps; rows are
    /// ordered (c, dy, dx) to match a plain reshape of the kernel.
    fn for_each(&self, batch: usize, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = self.output();
        let (h, w, p) = (self.height as isize, self.width as isize, self.padding as isize);
        let plane = self.height * self.width;
        let n = oh * ow;
        for bi in 0..batch {
            for c in 0..self.channels {
                let src_base = (bi * self.channels + c) * plane;
                for dy in 0..self.kh {
                    for dx in 0..self.kw {
                        let row = (c * self.kh + dy) * self.kw + dx;
                        let dst_base = (bi * self.rows() + row) * n;
                        for oy in 0..oh {
                            let y = oy as isize + dy as isize - p;
                            if y < 0 || y >= h {
                                continue;
                            }
                            for ox in 0..ow {
                                let x = ox as isize + dx as isize - p;
                                if x >= 0 && x < w {
                                    f(dst_base + oy * ow + ox, src_base + (y * w + x) as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op} expects a contiguous input"),
    }
}

/// `(B, C, H, W)` to `(B, C*kh*kw, oh*ow)`.
struct Im2Col(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = layout.dims()[0];
        let (oh, ow) = g.output();
        let len = batch * g.rows() * oh * ow;
        let out = match storage {
            CpuStorage::F32(v) => {
                let src = contiguous(v, layout, "im2col")?;
                let mut dst = vec![0f32; len];
                g.for_each(batch, |d, s| dst[d] = src[s]);
                CpuStorage::F32(dst)
            }
            CpuStorage::F64(v) => {
                let src = contiguous(v, layout, "im2col")?;
                let mut dst = vec![0f64; len];
                g.for_each(batch, |d, s| dst[d] = src[s]);
                CpuStorage::F64(dst)
            }
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, Shape::from((batch, g.rows(), oh * ow))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

/// Adjoint of [`Im2Col`]: scatters columns back, summing overlaps.
struct Col2Im(Geometry);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = layout.dims()[0];
        let len = batch * g.channels * g.height * g.width;
        let out = match storage {
            CpuStorage::F32(v) => {
                let src = contiguous(v, layout, "col2im")?;
                let mut dst = vec![0f32; len];
                g.for_each(batch, |c, i| dst[i] += src[c]);
                CpuStorage::F32(dst)
            }
            CpuStorage::F64(v) => {
                let src = contiguous(v, layout, "col2im")?;
                let mut dst = vec![0f64; len];
                g.for_each(batch, |c, i| dst[i] += src[c]);
                CpuStorage::F64(dst)
            }
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((batch, g.channels, g.height, g.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Correlates `x` along `axis` with `taps` (no padding): output length is
/// `n - taps.len() + 1`.
pub fn correlate_axis(x: &Tensor, taps: &[f64], axis: usize) -> Result<Tensor> {
    let n = x.dim(axis)?;
    let k = taps.len();
    if k == 0 || k > n {
        return Err(Error::Shape(format!("filter of {k} taps on axis of length {n}")));
    }
    let out = n - k + 1;
    let mut acc: Option<Tensor> = None;
    for (i, &t) in taps.iter().enumerate() {
        if t == 0.0 {
            continue;
        }
        let term = (x.narrow(axis, i, out)? * t)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => Ok(x.narrow(axis, 0, out)?.zeros_like()?),
    }
}
