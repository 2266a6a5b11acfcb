//! 2-D convolution with stride, dilation and explicit zero padding,
//! lowered to im2col + GEMM.
//!
//! Weights are `(k_h, k_w, C_in, C_out)`, so the flattened weight matrix is
//! `(k_h·k_w·C_in) × C_out` with rows ordered `(ky, kx, c)`. im2col rows
//! use the same ordering, which makes tap `ky·k_w + kx` line up with the
//! row-major attention index used by the attention operators.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Scalar, Shape, Tensor};

/// Zero padding per side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Padding that keeps the spatial size for stride 1.
    pub const fn same(k: usize, dilation: usize) -> Self {
        Padding::uniform((k - 1) * dilation / 2)
    }
}

/// Stride, dilation and padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            dilation: 1,
            padding: Padding::default(),
        }
    }
}

impl ConvSpec {
    pub fn same(k: usize, dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            dilation,
            padding: Padding::same(k, dilation),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::InvalidArgument(format!(
                "stride and dilation must be >= 1 (stride {}, dilation {})",
                self.stride, self.dilation
            )));
        }
        Ok(())
    }

    /// `floor((in + pad_total − ((k−1)·dilation + 1)) / stride) + 1`.
    pub fn output_size(
        &self,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
    ) -> Result<(usize, usize)> {
        self.validate()?;
        let axis = |input: usize, pad: usize, k: usize| -> Result<usize> {
            let rf = (k - 1) * self.dilation + 1;
            let padded = input + pad;
            if padded < rf {
                return Err(Error::shape(
                    "conv2d",
                    format!("padded extent {padded} smaller than receptive field {rf}"),
                ));
            }
            Ok((padded - rf) / self.stride + 1)
        };
        Ok((
            axis(in_h, self.padding.top + self.padding.bottom, kh)?,
            axis(in_w, self.padding.left + self.padding.right, kw)?,
        ))
    }
}

/// Owned convolution parameters: weights `(k_h, k_w, C_in, C_out)`, bias
/// `(1, 1, 1, C_out)` and geometry.
#[derive(Debug, Clone)]
pub struct ConvKernel<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub spec: ConvSpec,
}

impl<T: Scalar> ConvKernel<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, spec: ConvSpec) -> Result<Self> {
        let ws = weight.shape();
        if ws.n == 0 || ws.h == 0 {
            return Err(Error::InvalidArgument("kernel size must be >= 1".into()));
        }
        if bias.shape() != Shape::vector(ws.c) {
            return Err(Error::shape(
                "conv kernel",
                format!("bias {} for {} outputs", bias.shape(), ws.c),
            ));
        }
        spec.validate()?;
        Ok(ConvKernel { weight, bias, spec })
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().w
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().c
    }

    /// Effective receptive field per axis, `(k − 1)·dilation + 1`.
    pub fn receptive_field(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (
            (s.n - 1) * self.spec.dilation + 1,
            (s.h - 1) * self.spec.dilation + 1,
        )
    }

    /// Adds the kernel to `g` as trainable leaves and applies it to `x`.
    pub fn apply(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight.clone());
        let b = g.param(self.bias.clone());
        conv2d(g, x, w, b, self.spec)
    }
}

/// Geometry of one im2col lowering.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Im2col {
    pub n: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Im2col {
    pub fn rows(&self) -> usize {
        self.n * self.out_h * self.out_w
    }

    pub fn taps(&self) -> usize {
        self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.taps() * self.c
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Source pixel of output `(oy, ox)` for tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let sy = (oy * self.stride + ky * self.dilation) as isize - self.pad_top as isize;
        let sx = (ox * self.stride + kx * self.dilation) as isize - self.pad_left as isize;
        if sy < 0 || sx < 0 || sy >= self.in_h as isize || sx >= self.in_w as isize {
            None
        } else {
            Some((sy as usize, sx as usize))
        }
    }

    /// Lowers `x` to a `rows × cols` matrix; each tap's channel slice is
    /// scaled by `gates[row·taps + tap]` when gates are given.
    pub fn lower<T: Scalar>(&self, x: &[T], gates: Option<&[T]>) -> Vec<T> {
        let (taps, c) = (self.taps(), self.c);
        let mut col = vec![T::zero(); self.rows() * self.cols()];
        let mut row = 0;
        for n in 0..self.n {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    let dst_row = &mut col[row * taps * c..(row + 1) * taps * c];
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let t = ky * self.kw + kx;
                            let Some((sy, sx)) = self.source(oy, ox, ky, kx) else {
                                continue;
                            };
                            let src = &x[((n * self.in_h + sy) * self.in_w + sx) * c..][..c];
                            let dst = &mut dst_row[t * c..(t + 1) * c];
                            match gates {
                                Some(gs) => {
                                    let gv = gs[row * taps + t];
                                    dst.iter_mut().zip(src).for_each(|(d, s)| *d = gv * *s);
                                }
                                None => dst.copy_from_slice(src),
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        col
    }

    /// Adjoint of [`Im2col::lower`] with respect to `x` (scatter-add into
    /// `dx`) and, when gates are given, with respect to the gates.
    pub fn raise<T: Scalar>(
        &self,
        dcol: &[T],
        x: &[T],
        gates: Option<&[T]>,
        mut dx: Option<&mut [T]>,
        mut dgates: Option<&mut [T]>,
    ) {
        let (taps, c) = (self.taps(), self.c);
        let mut row = 0;
        for n in 0..self.n {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let t = ky * self.kw + kx;
                            let Some((sy, sx)) = self.source(oy, ox, ky, kx) else {
                                continue;
                            };
                            let base = ((n * self.in_h + sy) * self.in_w + sx) * c;
                            let d = &dcol[(row * taps + t) * c..][..c];
                            let gv = gates.map_or(T::one(), |gs| gs[row * taps + t]);
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[base..base + c]
                                    .iter_mut()
                                    .zip(d)
                                    .for_each(|(o, v)| *o += gv * *v);
                            }
                            if let Some(dg) = dgates.as_deref_mut() {
                                let src = &x[base..base + c];
                                dg[row * taps + t] = d.iter().zip(src).map(|(a, b)| *a * *b).sum();
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn im2col_for(x: Shape, w: Shape, spec: ConvSpec) -> Result<Im2col> {
    let (kh, kw, cin) = (w.n, w.h, w.w);
    if kh == 0 || kw == 0 {
        return Err(Error::InvalidArgument("kernel size must be >= 1".into()));
    }
    if x.c != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, kernel expects {cin}", x.c),
        ));
    }
    let (out_h, out_w) = spec.output_size(x.h, x.w, kh, kw)?;
    Ok(Im2col {
        n: x.n,
        in_h: x.h,
        in_w: x.w,
        c: x.c,
        kh,
        kw,
        stride: spec.stride,
        dilation: spec.dilation,
        pad_top: spec.padding.top,
        pad_left: spec.padding.left,
        out_h,
        out_w,
    })
}

/// Adds `bias` (length `cols`) to every row of a row-major matrix.
pub(crate) fn add_row_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(o, b)| *o += *b);
    }
}

/// Column sums of a row-major matrix with `cols` columns.
pub(crate) fn column_sums<T: Scalar>(m: &[T], cols: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); cols];
    for row in m.chunks_exact(cols) {
        acc.iter_mut().zip(row).for_each(|(a, v)| *a += *v);
    }
    acc
}

/// Gated im2col convolution shared by [`conv2d`] and attention
/// convolution: `out = lower(x, gates) · W + b`.
pub(crate) fn lowered_conv<T: Scalar>(
    g: &mut Graph<T>,
    name: &'static str,
    x: Var,
    gates: Option<Var>,
    w: Var,
    b: Var,
    geo: Im2col,
) -> Result<Var> {
    let ws = g.shape(w);
    let cout = ws.c;
    if g.shape(b) != Shape::vector(cout) {
        return Err(Error::shape(
            name,
            format!("bias {} for {cout} outputs", g.shape(b)),
        ));
    }
    let out_shape = Shape::new(geo.n, geo.out_h, geo.out_w, cout);
    let pointwise = gates.is_none() && geo.is_pointwise();
    let col = if pointwise {
        Vec::new()
    } else {
        geo.lower(g.value(x).data(), gates.map(|v| g.value(v).data()))
    };
    let mut out = vec![T::zero(); out_shape.len()];
    {
        let lhs = if pointwise {
            g.value(x).data()
        } else {
            &col[..]
        };
        gemm(
            Mat::new(lhs, geo.rows(), geo.cols()),
            Mat::new(g.value(w).data(), geo.cols(), cout),
            &mut out,
            false,
        );
    }
    add_row_bias(&mut out, g.value(b).data());
    let mut inputs = vec![x, w, b];
    inputs.extend(gates);
    let rule = move |xs: &[&Tensor<T>],
                     _: &Tensor<T>,
                     dy: &Tensor<T>,
                     needs: &[bool]|
          -> Vec<Option<Tensor<T>>> {
        let (x, w) = (xs[0], xs[1]);
        let gates = xs.get(3).map(|t| t.data());
        let lhs = if pointwise { x.data() } else { &col[..] };
        let dw = needs[1].then(|| {
            let mut dw = vec![T::zero(); w.len()];
            gemm(
                Mat::new(lhs, geo.rows(), geo.cols()).t(),
                Mat::new(dy.data(), geo.rows(), cout),
                &mut dw,
                false,
            );
            Tensor::from_raw(w.shape(), dw)
        });
        let db =
            needs[2].then(|| Tensor::from_raw(Shape::vector(cout), column_sums(dy.data(), cout)));
        let need_gates = needs.get(3).copied().unwrap_or(false);
        let (mut dx, mut dg) = (None, None);
        if needs[0] || need_gates {
            let mut dcol = vec![T::zero(); geo.rows() * geo.cols()];
            gemm(
                Mat::new(dy.data(), geo.rows(), cout),
                Mat::new(w.data(), geo.cols(), cout).t(),
                &mut dcol,
                false,
            );
            if pointwise {
                dx = Some(Tensor::from_raw(x.shape(), dcol));
            } else {
                let mut dx_buf = needs[0].then(|| vec![T::zero(); x.len()]);
                let mut dg_buf = need_gates.then(|| vec![T::zero(); geo.rows() * geo.taps()]);
                geo.raise(
                    &dcol,
                    x.data(),
                    gates,
                    dx_buf.as_deref_mut(),
                    dg_buf.as_deref_mut(),
                );
                dx = dx_buf.map(|d| Tensor::from_raw(x.shape(), d));
                dg = dg_buf.map(|d| Tensor::from_raw(xs[3].shape(), d));
            }
        }
        let mut grads = vec![dx, dw, db];
        if xs.len() > 3 {
            grads.push(dg);
        }
        grads
    };
    Ok(g.record(name, &inputs, Tensor::from_raw(out_shape, out), rule))
}

/// `y = conv(x, w) + b` with weights `(k_h, k_w, C_in, C_out)` and bias
/// `(1, 1, 1, C_out)`. Out-of-bounds taps read zero.
pub fn conv2d<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
    let geo = im2col_for(g.shape(x), g.shape(w), spec)?;
    lowered_conv(g, "conv2d", x, None, w, b, geo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::fd_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, s: Shape) -> Tensor<f64> {
        Tensor::from_fn(s, |_, _, _, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, Shape::new(2, 3, 4, 1));
        let k = ConvKernel::new(
            Tensor::ones(Shape::new(1, 1, 1, 1)),
            Tensor::zeros(Shape::vector(1)),
            ConvSpec::default(),
        )
        .unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = k.apply(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn all_ones_kernel_on_constant_input() {
        let c = 0.75;
        let k = ConvKernel::new(
            Tensor::ones(Shape::new(3, 3, 1, 1)),
            Tensor::zeros(Shape::vector(1)),
            ConvSpec::same(3, 1),
        )
        .unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(Shape::new(1, 5, 5, 1), c));
        let y = k.apply(&mut g, x).unwrap();
        assert_eq!(g.value(y).at(0, 2, 2, 0), 9.0 * c);
        assert_eq!(g.value(y).at(0, 0, 0, 0), 4.0 * c);
    }

    #[test]
    fn output_size_formula() {
        let spec = ConvSpec {
            stride: 2,
            dilation: 3,
            padding: Padding {
                top: 1,
                bottom: 0,
                left: 2,
                right: 2,
            },
        };
        // h: (10 + 1 − 7)/2 + 1 = 3; w: (9 + 4 − 7)/2 + 1 = 4
        assert_eq!(spec.output_size(10, 9, 3, 3).unwrap(), (3, 4));
        assert!(ConvSpec::default().output_size(2, 2, 3, 3).is_err());
        assert!(ConvSpec {
            stride: 0,
            ..ConvSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 4, 4, 2)));
        let w = g.param(Tensor::zeros(Shape::new(3, 3, 3, 1)));
        let b = g.param(Tensor::zeros(Shape::vector(1)));
        assert!(matches!(
            conv2d(&mut g, x, w, b, ConvSpec::same(3, 1)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, Shape::new(2, 5, 4, 2));
        let w = rand_tensor(&mut rng, Shape::new(3, 2, 2, 3));
        let b = rand_tensor(&mut rng, Shape::vector(3));
        let spec = ConvSpec {
            stride: 2,
            dilation: 2,
            padding: Padding {
                top: 2,
                bottom: 1,
                left: 1,
                right: 0,
            },
        };
        let err = fd_check(|g, v| conv2d(g, v[0], v[1], v[2], spec), &[x, w, b], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
