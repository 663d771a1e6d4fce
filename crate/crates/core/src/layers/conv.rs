use ndarray::{Array2, Array4, Axis};
use rand::Rng;

use super::dense::{DenseCache, DenseGrads, EvalMode, ForwardBatch, LayerKl, VariationalDense};
use super::group::OrderingUnit;
use super::norm::NormAccumulator;
use crate::error::{Result, VndError};
use crate::ordering::{LayerWidth, OrderedMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if self.stride == 0 || kh == 0 || kw == 0 || ph < kh || pw < kw {
            return Err(VndError::ShapeMismatch(format!(
                "kernel {kh}x{kw} stride {} does not fit a {h}x{w} input",
                self.stride
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    /// `[N, C, H, W]` to a `(N * Ho * Wo) x (C * kh * kw)` patch matrix.
    pub fn im2col(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(VndError::ShapeMismatch(format!(
                "conv expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = self.output_hw(h, w)?;
        let (kh, kw) = self.kernel;
        let pad = self.padding as isize;
        let mut cols = Array2::zeros((n * ho * wo, self.patch_len()));
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    let mut col = 0;
                    for ch in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * self.stride + ky) as isize - pad;
                                let ix = (ox * self.stride + kx) as isize - pad;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    cols[[row, col]] = x[[b, ch, iy as usize, ix as usize]];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(cols)
    }

    /// Adjoint of [`Self::im2col`].
    pub fn col2im(&self, cols: &Array2<f64>, n: usize, h: usize, w: usize) -> Result<Array4<f64>> {
        let (ho, wo) = self.output_hw(h, w)?;
        let (kh, kw) = self.kernel;
        let pad = self.padding as isize;
        let mut x = Array4::zeros((n, self.in_channels, h, w));
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    let mut col = 0;
                    for ch in 0..self.in_channels {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * self.stride + ky) as isize - pad;
                                let ix = (ox * self.stride + kx) as isize - pad;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    x[[b, ch, iy as usize, ix as usize]] += cols[[row, col]];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(x)
    }

    fn rows_to_nchw(&self, rows: &Array2<f64>, n: usize, ho: usize, wo: usize) -> Array4<f64> {
        let d = rows.ncols();
        Array4::from_shape_fn((n, d, ho, wo), |(b, ch, y, x)| rows[[(b * ho + y) * wo + x, ch]])
    }

    fn nchw_to_rows(&self, x: &Array4<f64>) -> Array2<f64> {
        let (n, d, ho, wo) = x.dim();
        Array2::from_shape_fn((n * ho * wo, d), |(r, ch)| {
            let b = r / (ho * wo);
            let rem = r % (ho * wo);
            x[[b, ch, rem / wo, rem % wo]]
        })
    }
}

/// Convolution whose output channels are the masked units. Implemented as
/// im2col around a [`VariationalDense`] core, so every output pixel gets its
/// own local-reparameterisation draw and the mask is shared over pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalConv {
    pub geometry: ConvGeometry,
    pub core: VariationalDense,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    pub dense: DenseCache,
    input_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl VariationalConv {
    pub fn init<R: Rng + ?Sized>(geometry: ConvGeometry, log_alpha: f64, bias: bool, rng: &mut R) -> Self {
        Self {
            core: VariationalDense::init(geometry.patch_len(), geometry.out_channels, log_alpha, bias, rng),
            geometry,
        }
    }

    /// Builds a layer from `[D, C, kh, kw]` filters.
    pub fn from_filters(geometry: ConvGeometry, theta: &Array4<f64>, log_alpha: &Array4<f64>) -> Result<Self> {
        let want = (
            geometry.out_channels,
            geometry.in_channels,
            geometry.kernel.0,
            geometry.kernel.1,
        );
        if theta.dim() != want || log_alpha.dim() != want {
            return Err(VndError::ShapeMismatch(format!(
                "filters {:?} / {:?}, expected {want:?}",
                theta.dim(),
                log_alpha.dim()
            )));
        }
        let flat = |a: &Array4<f64>| {
            a.to_shape((geometry.out_channels, geometry.patch_len()))
                .expect("contiguous reshape")
                .t()
                .to_owned()
        };
        Ok(Self {
            core: VariationalDense::new(flat(theta), flat(log_alpha))?,
            geometry,
        })
    }

    /// Filter means as `[D, C, kh, kw]`.
    pub fn filters(&self) -> Array4<f64> {
        let g = &self.geometry;
        self.core
            .theta
            .t()
            .as_standard_layout()
            .into_shape_with_order((g.out_channels, g.in_channels, g.kernel.0, g.kernel.1))
            .expect("filter shape")
            .to_owned()
    }

    pub fn with_ordering(mut self, unit: OrderingUnit) -> Result<Self> {
        self.core = self.core.with_ordering(unit)?;
        Ok(self)
    }

    pub fn with_norm(mut self) -> Self {
        self.core = self.core.with_norm();
        self
    }

    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        x: &Array4<f64>,
        mask: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<(Array4<f64>, ConvCache)> {
        let (n, _, h, w) = x.dim();
        let (ho, wo) = self.geometry.output_hw(h, w)?;
        let cols = self.geometry.im2col(x)?;
        let (rows, dense) = self.core.forward_train(&cols, mask, rng)?;
        Ok((
            self.geometry.rows_to_nchw(&rows, n, ho, wo),
            ConvCache {
                dense,
                input_dim: x.dim(),
                out_hw: (ho, wo),
            },
        ))
    }

    /// Gradients of the core plus the input gradient in `[N, C, H, W]`.
    pub fn backward(&self, cache: &ConvCache, grad_out: &Array4<f64>) -> Result<(Array4<f64>, DenseGrads)> {
        let (n, _, h, w) = cache.input_dim;
        let (ho, wo) = cache.out_hw;
        if grad_out.dim() != (n, self.geometry.out_channels, ho, wo) {
            return Err(VndError::ShapeMismatch(format!(
                "conv output gradient {:?}",
                grad_out.dim()
            )));
        }
        let rows = self.geometry.nchw_to_rows(grad_out);
        let grads = self.core.backward(&cache.dense, &rows);
        let input = self.geometry.col2im(&grads.input, n, h, w)?;
        Ok((input, grads))
    }

    pub fn forward_eval<R: Rng + ?Sized>(
        &self,
        x: &Array4<f64>,
        width: Option<&LayerWidth>,
        mode: EvalMode,
        rng: &mut R,
    ) -> Result<Array4<f64>> {
        let (n, _, h, w) = x.dim();
        let (ho, wo) = self.geometry.output_hw(h, w)?;
        let rows = self.core.forward_eval(&self.geometry.im2col(x)?, width, mode, rng)?;
        Ok(self.geometry.rows_to_nchw(&rows, n, ho, wo))
    }

    pub fn forward_collect(
        &self,
        x: &Array4<f64>,
        width: Option<&LayerWidth>,
        acc: Option<&mut NormAccumulator>,
    ) -> Result<Array4<f64>> {
        let (n, _, h, w) = x.dim();
        let (ho, wo) = self.geometry.output_hw(h, w)?;
        let rows = self.core.forward_collect(&self.geometry.im2col(x)?, width, acc)?;
        Ok(self.geometry.rows_to_nchw(&rows, n, ho, wo))
    }

    pub fn kl(&self) -> Result<LayerKl> {
        self.core.kl()
    }
}

/// Training-mode forward of a convolution under a given mask, returning the
/// pre-mask draws in row form alongside the `[N, D, Ho, Wo]` output.
pub fn forward_conv_train<R: Rng + ?Sized>(
    layer: &VariationalConv,
    x: &Array4<f64>,
    mask: &OrderedMask,
    rng: &mut R,
) -> Result<(Array4<f64>, ForwardBatch)> {
    let (out, cache) = layer.forward_train(x, Some(mask.values()), rng)?;
    Ok((out, cache.dense.batch))
}

/// Sum of a `[N, D, Ho, Wo]` tensor over everything except channels.
pub fn channel_sums(x: &Array4<f64>) -> ndarray::Array1<f64> {
    x.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::stream_rng;
    use crate::layers::GroupMap;

    fn geometry(c: usize, d: usize, k: usize, stride: usize, padding: usize) -> ConvGeometry {
        ConvGeometry {
            in_channels: c,
            out_channels: d,
            kernel: (k, k),
            stride,
            padding,
        }
    }

    fn input(n: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
        Array4::from_shape_fn((n, c, h, w), |(b, ch, y, x)| {
            ((b * 31 + ch * 17 + y * 5 + x * 3) % 11) as f64 / 5.0 - 1.0
        })
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = geometry(2, 3, 3, 2, 1);
        let x = input(2, 2, 5, 4);
        let cols = g.im2col(&x).unwrap();
        let y = Array2::from_shape_fn(cols.dim(), |(r, c)| ((r * 7 + c * 13) % 9) as f64 - 4.0);
        let lhs = (&cols * &y).sum();
        let rhs = (&x * &g.col2im(&y, 2, 5, 4).unwrap()).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn one_by_one_conv_equals_dense() {
        let mut rng = stream_rng(1, 0);
        let g = geometry(3, 4, 1, 1, 0);
        let conv = VariationalConv::init(g, -3.0, true, &mut rng)
            .with_ordering(crate::layers::OrderingUnit::new(GroupMap::new(4, 4, 1).unwrap(), 1.0, 0.9, 0.5).unwrap())
            .unwrap();
        let x = input(2, 3, 2, 3);
        let mask = [1.0, 0.7, 0.3, 0.1];
        let (out, _) = conv.forward_train(&x, Some(&mask), &mut stream_rng(5, 0)).unwrap();
        let rows = g.nchw_to_rows(&x);
        let (dense_out, _) = conv
            .core
            .forward_train(&rows, Some(&mask), &mut stream_rng(5, 0))
            .unwrap();
        assert_eq!(out, g.rows_to_nchw(&dense_out, 2, 2, 3));
    }

    #[test]
    fn mean_forward_matches_direct_convolution() {
        let mut rng = stream_rng(2, 0);
        let g = geometry(2, 3, 3, 1, 1);
        let mut conv = VariationalConv::init(g, -3.0, false, &mut rng);
        conv.core.log_alpha.fill(-8.0);
        let x = input(1, 2, 4, 4);
        let out = conv.forward_eval(&x, None, EvalMode::Mean, &mut rng).unwrap();
        let f = conv.filters();
        for d in 0..3 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut want = 0.0;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                                if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                    want += f[[d, c, ky, kx]] * x[[0, c, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    assert!((out[[0, d, oy, ox]] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn filters_round_trip() {
        let g = geometry(2, 3, 2, 1, 0);
        let theta = Array4::from_shape_fn((3, 2, 2, 2), |(a, b, c, d)| (a * 8 + b * 4 + c * 2 + d) as f64);
        let la = Array4::from_elem((3, 2, 2, 2), -2.0);
        let conv = VariationalConv::from_filters(g, &theta, &la).unwrap();
        assert_eq!(conv.filters(), theta);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = stream_rng(3, 0);
        let g = geometry(2, 2, 3, 2, 1);
        let conv = VariationalConv::init(g, -2.0, true, &mut rng).with_norm();
        let x = input(2, 2, 5, 5);
        let (out, cache) = conv.forward_train(&x, None, &mut stream_rng(8, 0)).unwrap();
        let w = Array4::from_shape_fn(out.dim(), |(a, b, c, d)| ((a + 2 * b + 3 * c + 5 * d) % 7) as f64 - 3.0);
        let (gx, _) = conv.backward(&cache, &w).unwrap();
        let loss = |x: &Array4<f64>| (conv.forward_train(x, None, &mut stream_rng(8, 0)).unwrap().0 * &w).sum();
        let eps = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 1, 2, 3), (0, 1, 4, 4), (1, 0, 3, 1)] {
            let mut p = x.clone();
            p[idx] += eps;
            let mut m = x.clone();
            m[idx] -= eps;
            let fd = (loss(&p) - loss(&m)) / (2.0 * eps);
            assert!(
                (fd - gx[idx]).abs() < 1e-5 * fd.abs().max(1.0),
                "{idx:?}: {fd} vs {}",
                gx[idx]
            );
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let g = geometry(2, 3, 5, 1, 0);
        assert!(g.im2col(&input(1, 2, 3, 3)).is_err());
        assert!(g.im2col(&input(1, 3, 8, 8)).is_err());
    }
}
