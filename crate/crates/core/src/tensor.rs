//! Dense 3-D activation maps and the sampling machinery CT layers run on.
//!
//! Layout is row-major `(y, x, c)` with the channel fastest, so the
//! per-location voting accumulation over output channels touches
//! contiguous memory.

use crate::error::{CtError, Result};

/// A dense `H x W x D` tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    /// All-zero tensor of the given shape.
    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        assert!(h > 0 && w > 0 && d > 0, "tensor extents must be positive");
        Tensor3 { h, w, d, data: vec![0.0; h * w * d] }
    }

    /// Builds a tensor from flat `(y, x, c)`-ordered data.
    pub fn from_data(h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * d {
            return Err(CtError::DataLength { h, w, d, got: data.len() });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CtError::ShapeMismatch {
                expected: "finite values".into(),
                got: "non-finite entry".into(),
            });
        }
        Ok(Tensor3 { h, w, d, data })
    }

    pub fn constant(h: usize, w: usize, d: usize, value: f64) -> Self {
        Tensor3 { h, w, d, data: vec![value; h * w * d] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn depth(&self) -> usize {
        self.d
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        debug_assert!(y < self.h && x < self.w && c < self.d);
        (y * self.w + x) * self.d + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    /// The `D`-vector at one spatial location.
    #[inline]
    pub fn column(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.w + x) * self.d;
        &self.data[base..base + self.d]
    }

    fn check_channel(&self, c: usize) -> Result<()> {
        if c >= self.d {
            Err(CtError::InvalidChannel { channel: c, depth: self.d })
        } else {
            Ok(())
        }
    }

    /// Integer pixel fetch with coordinates clamped to the border.
    #[inline]
    fn at_clamped(&self, yi: isize, xi: isize, c: usize) -> f64 {
        let y = yi.clamp(0, self.h as isize - 1) as usize;
        let x = xi.clamp(0, self.w as isize - 1) as usize;
        self.data[(y * self.w + x) * self.d + c]
    }

    /// Bilinear interpolation at a fractional coordinate; out-of-range
    /// coordinates clamp to the border so samples extend flatly past the
    /// image instead of dropping to zero.
    #[inline]
    pub(crate) fn sample_unchecked(&self, x: f64, y: f64, c: usize) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let v00 = self.at_clamped(yi, xi, c);
        let v01 = self.at_clamped(yi, xi + 1, c);
        let v10 = self.at_clamped(yi + 1, xi, c);
        let v11 = self.at_clamped(yi + 1, xi + 1, c);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
    }

    /// Exact partial derivatives of [`Tensor3::sample_unchecked`] with
    /// respect to `x` and `y`. Piecewise constant in `x` (resp. `y`)
    /// within each interpolation cell; zero where clamping makes the
    /// sample flat.
    #[inline]
    pub(crate) fn sample_grad_unchecked(&self, x: f64, y: f64, c: usize) -> (f64, f64) {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let v00 = self.at_clamped(yi, xi, c);
        let v01 = self.at_clamped(yi, xi + 1, c);
        let v10 = self.at_clamped(yi + 1, xi, c);
        let v11 = self.at_clamped(yi + 1, xi + 1, c);
        let gx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10);
        let gy = (1.0 - fx) * (v10 - v00) + fx * (v11 - v01);
        (gx, gy)
    }

    /// Adjoint of [`Tensor3::sample_unchecked`]: distributes `g` over the
    /// four clamped neighbors with the interpolation weights.
    #[inline]
    pub(crate) fn scatter_unchecked(&mut self, x: f64, y: f64, c: usize, g: f64) {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (xi, yi) = (x0 as isize, y0 as isize);
        let (h, w, d) = (self.h as isize, self.w as isize, self.d);
        let mut add = |yy: isize, xx: isize, wgt: f64| {
            let yc = yy.clamp(0, h - 1) as usize;
            let xc = xx.clamp(0, w - 1) as usize;
            self.data[(yc * self.w + xc) * d + c] += wgt * g;
        };
        add(yi, xi, (1.0 - fy) * (1.0 - fx));
        add(yi, xi + 1, (1.0 - fy) * fx);
        add(yi + 1, xi, fy * (1.0 - fx));
        add(yi + 1, xi + 1, fy * fx);
    }
}

/// Bilinear interpolation of channel `c` at fractional `(x, y)`.
pub fn bilinear_sample(t: &Tensor3, x: f64, y: f64, c: usize) -> Result<f64> {
    t.check_channel(c)?;
    Ok(t.sample_unchecked(x, y, c))
}

/// Exact `(d/dx, d/dy)` of [`bilinear_sample`] at `(x, y)`.
pub fn bilinear_sample_grad(t: &Tensor3, x: f64, y: f64, c: usize) -> Result<(f64, f64)> {
    t.check_channel(c)?;
    Ok(t.sample_grad_unchecked(x, y, c))
}

/// Scatters `g` onto the four integer neighbors of `(x, y)` with the same
/// weights [`bilinear_sample`] would read them with — its exact adjoint.
pub fn bilinear_scatter_add(acc: &mut Tensor3, x: f64, y: f64, c: usize, g: f64) -> Result<()> {
    acc.check_channel(c)?;
    acc.scatter_unchecked(x, y, c, g);
    Ok(())
}

/// Per-channel spatial derivative maps: central differences in the
/// interior, one-sided first-order at the borders.
pub fn spatial_gradients(t: &Tensor3) -> Result<(Tensor3, Tensor3)> {
    let (h, w, d) = t.shape();
    if h < 2 || w < 2 {
        return Err(CtError::DegenerateExtent { h, w, reason: "gradients need extent >= 2" });
    }
    let mut gx = Tensor3::zeros(h, w, d);
    let mut gy = Tensor3::zeros(h, w, d);
    for y in 0..h {
        for x in 0..w {
            for c in 0..d {
                let left = if x == 0 { 0 } else { x - 1 };
                let right = if x + 1 == w { w - 1 } else { x + 1 };
                let scale_x = (right - left) as f64;
                gx.set(y, x, c, (t.get(y, right, c) - t.get(y, left, c)) / scale_x);

                let up = if y == 0 { 0 } else { y - 1 };
                let down = if y + 1 == h { h - 1 } else { y + 1 };
                let scale_y = (down - up) as f64;
                gy.set(y, x, c, (t.get(down, x, c) - t.get(up, x, c)) / scale_y);
            }
        }
    }
    Ok((gx, gy))
}

/// Valid-region mean pooling over `l x l` windows.
pub fn avg_pool(t: &Tensor3, l: usize, stride: usize) -> Result<Tensor3> {
    let (h, w, d) = t.shape();
    assert!(stride > 0, "stride must be positive");
    if l > h || l > w {
        return Err(CtError::WindowTooLarge { window: l, extent: h.min(w) });
    }
    let oh = (h - l) / stride + 1;
    let ow = (w - l) / stride + 1;
    let norm = 1.0 / (l * l) as f64;
    let mut out = Tensor3::zeros(oh, ow, d);
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * d;
            for wy in 0..l {
                let y = oy * stride + wy;
                for wx in 0..l {
                    let x = ox * stride + wx;
                    let col = t.column(y, x);
                    for c in 0..d {
                        out.data[base + c] += col[c];
                    }
                }
            }
            for c in 0..d {
                out.data[base + c] *= norm;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`avg_pool`]: spreads each output gradient uniformly over
/// its window. Overlapping windows accumulate.
pub fn avg_pool_backward(
    d_out: &Tensor3,
    input_shape: (usize, usize, usize),
    l: usize,
    stride: usize,
) -> Result<Tensor3> {
    let (h, w, d) = input_shape;
    let (oh, ow, od) = d_out.shape();
    if od != d || oh != (h - l) / stride + 1 || ow != (w - l) / stride + 1 {
        return Err(CtError::ShapeMismatch {
            expected: format!("gradient for {}x{}x{} pooled by l={} stride={}", h, w, d, l, stride),
            got: format!("{}x{}x{}", oh, ow, od),
        });
    }
    let norm = 1.0 / (l * l) as f64;
    let mut d_in = Tensor3::zeros(h, w, d);
    for oy in 0..oh {
        for ox in 0..ow {
            let col = d_out.column(oy, ox);
            for wy in 0..l {
                let y = oy * stride + wy;
                for wx in 0..l {
                    let x = ox * stride + wx;
                    let base = (y * w + x) * d;
                    for c in 0..d {
                        d_in.data[base + c] += col[c] * norm;
                    }
                }
            }
        }
    }
    Ok(d_in)
}

/// Padding behavior of a CT layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PadMode {
    /// Output shrinks by `l - 1` per spatial dimension.
    Valid,
    /// Input is padded by the patch radius with a fill value so the
    /// output keeps the input extent (at stride 1).
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PadSpec {
    pub mode: PadMode,
    pub fill: f64,
}

impl PadSpec {
    pub fn valid() -> Self {
        PadSpec { mode: PadMode::Valid, fill: 0.0 }
    }

    pub fn same() -> Self {
        PadSpec { mode: PadMode::Same, fill: 0.0 }
    }

    /// Output extent along one dimension for patch size `l` and `stride`.
    pub fn output_extent(&self, extent: usize, l: usize, stride: usize) -> Result<usize> {
        match self.mode {
            PadMode::Valid => {
                if l > extent {
                    return Err(CtError::WindowTooLarge { window: l, extent });
                }
                Ok((extent - l) / stride + 1)
            }
            // padded extent is `extent + l - 1`, so the valid formula
            // reduces to ceil(extent / stride)
            PadMode::Same => Ok((extent - 1) / stride + 1),
        }
    }
}

/// Copies `t` into a tensor grown by `radius` on every spatial side,
/// border cells set to `fill`.
pub fn pad_tensor(t: &Tensor3, radius: usize, fill: f64) -> Tensor3 {
    let (h, w, d) = t.shape();
    let mut out = Tensor3::constant(h + 2 * radius, w + 2 * radius, d, fill);
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * d;
            let dst = ((y + radius) * (w + 2 * radius) + (x + radius)) * d;
            out.data[dst..dst + d].copy_from_slice(&t.data[src..src + d]);
        }
    }
    out
}

/// Crops `radius` cells from every spatial side (adjoint of [`pad_tensor`]
/// for the interior).
pub fn crop_tensor(t: &Tensor3, radius: usize) -> Tensor3 {
    let (h, w, d) = t.shape();
    assert!(h > 2 * radius && w > 2 * radius);
    let (oh, ow) = (h - 2 * radius, w - 2 * radius);
    let mut out = Tensor3::zeros(oh, ow, d);
    for y in 0..oh {
        for x in 0..ow {
            let src = ((y + radius) * w + (x + radius)) * d;
            let dst = (y * ow + x) * d;
            out.data[dst..dst + d].copy_from_slice(&t.data[src..src + d]);
        }
    }
    out
}
