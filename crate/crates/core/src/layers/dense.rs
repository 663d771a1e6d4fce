use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::group::OrderingUnit;
use super::kl::{grouped_phi2, neg_kl_weight_approx_derivative, weight_kl};
use super::norm::{BatchNorm, NormAccumulator, NormCache};
use crate::error::{Result, VndError};
use crate::ordering::{keep_probabilities_from_beta, kl_mask, LayerWidth, OrderedMask};

pub const LOG_ALPHA_MIN: f64 = -8.0;
pub const LOG_ALPHA_MAX: f64 = 0.5;

/// Mask-free Gaussian bias `b ~ N(mean, alpha mean^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBias {
    pub mean: Array1<f64>,
    pub log_alpha: Array1<f64>,
}

/// Fully connected Bayesian layer with an optional ordering unit over its
/// output units and an optional batch norm applied before the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalDense {
    /// `inputs x outputs` weight means.
    pub theta: Array2<f64>,
    /// Per-weight `log(alpha)`.
    pub log_alpha: Array2<f64>,
    pub bias: Option<GaussianBias>,
    pub norm: Option<BatchNorm>,
    pub ordering: Option<OrderingUnit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Propagate weight means only.
    Mean,
    /// Draw weights from the posterior as in training.
    Sample,
}

/// Outputs of one training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardBatch {
    pub gamma: Array2<f64>,
    pub delta: Array2<f64>,
    pub noise: Array2<f64>,
    /// `gamma + sqrt(delta) * noise`.
    pub sampled: Array2<f64>,
    /// Per-unit mask values (all ones for unmasked layers).
    pub unit_mask: Vec<f64>,
    pub output: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Array2<f64>,
    pub batch: ForwardBatch,
    std: Array2<f64>,
    norm: Option<NormCache>,
    normalized: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Array2<f64>,
    pub theta: Array2<f64>,
    pub log_alpha: Array2<f64>,
    pub bias_mean: Option<Array1<f64>>,
    pub bias_log_alpha: Option<Array1<f64>>,
    pub norm_weight: Option<Array1<f64>>,
    pub norm_bias: Option<Array1<f64>>,
    /// Gradient with respect to the mask, one entry per ordering dimension.
    pub mask: Option<Vec<f64>>,
    pub logits: Option<Vec<f64>>,
}

/// KL contribution of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LayerKl {
    /// Mask-distribution KL.
    pub phi1: f64,
    /// Weight KL averaged over masks.
    pub phi2: f64,
    pub bias: f64,
}

impl LayerKl {
    pub fn total(&self) -> f64 {
        self.phi1 + self.phi2 + self.bias
    }
}

impl VariationalDense {
    /// Layer from explicit parameters, without bias, norm or ordering.
    pub fn new(theta: Array2<f64>, log_alpha: Array2<f64>) -> Result<Self> {
        if theta.dim() != log_alpha.dim() {
            return Err(VndError::ShapeMismatch(format!(
                "theta {:?} vs log_alpha {:?}",
                theta.dim(),
                log_alpha.dim()
            )));
        }
        let mut layer = Self {
            theta: theta.as_standard_layout().into_owned(),
            log_alpha: log_alpha.as_standard_layout().into_owned(),
            bias: None,
            norm: None,
            ordering: None,
        };
        layer.project();
        Ok(layer)
    }

    /// He-normal means, constant `log(alpha)`, zero-mean bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, log_alpha: f64, bias: bool, rng: &mut R) -> Self {
        let std = (2.0 / inputs as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let theta = Array2::from_shape_simple_fn((inputs, outputs), || normal.sample(rng));
        let la = log_alpha.clamp(LOG_ALPHA_MIN, LOG_ALPHA_MAX);
        Self {
            theta,
            log_alpha: Array2::from_elem((inputs, outputs), la),
            bias: bias.then(|| GaussianBias {
                mean: Array1::zeros(outputs),
                log_alpha: Array1::from_elem(outputs, la),
            }),
            norm: None,
            ordering: None,
        }
    }

    pub fn with_ordering(mut self, unit: OrderingUnit) -> Result<Self> {
        if unit.groups.units() != self.outputs() {
            return Err(VndError::ShapeMismatch(format!(
                "ordering over {} units for a layer with {} outputs",
                unit.groups.units(),
                self.outputs()
            )));
        }
        self.ordering = Some(unit);
        Ok(self)
    }

    pub fn with_norm(mut self) -> Self {
        self.norm = Some(BatchNorm::new(self.outputs()));
        self
    }

    pub fn inputs(&self) -> usize {
        self.theta.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.theta.ncols()
    }

    /// Clamps `log(alpha)` and the ordering logits into their valid ranges.
    pub fn project(&mut self) {
        self.log_alpha.mapv_inplace(|v| v.clamp(LOG_ALPHA_MIN, LOG_ALPHA_MAX));
        if let Some(b) = &mut self.bias {
            b.log_alpha.mapv_inplace(|v| v.clamp(LOG_ALPHA_MIN, LOG_ALPHA_MAX));
        }
        if let Some(u) = &mut self.ordering {
            u.posterior.clamp_logits();
        }
    }

    fn alpha(&self) -> Array2<f64> {
        self.log_alpha.mapv(f64::exp)
    }

    /// `(gamma, delta)` of the Gaussian pre-activations.
    pub fn moments(&self, input: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if input.ncols() != self.inputs() {
            return Err(VndError::ShapeMismatch(format!(
                "layer expects {} inputs, got {:?}",
                self.inputs(),
                input.dim()
            )));
        }
        let var_w = &self.alpha() * &self.theta.mapv(|t| t * t);
        let mut gamma = input.dot(&self.theta);
        let mut delta = input.mapv(|h| h * h).dot(&var_w);
        if let Some(b) = &self.bias {
            gamma += &b.mean;
            let var_b = &b.log_alpha.mapv(f64::exp) * &b.mean.mapv(|m| m * m);
            delta += &var_b;
        }
        Ok((gamma, delta))
    }

    fn unit_mask(&self, mask: Option<&[f64]>) -> Result<Vec<f64>> {
        match (&self.ordering, mask) {
            (Some(u), Some(z)) => {
                if z.len() != u.groups.ordering_dims() {
                    return Err(VndError::ShapeMismatch(format!(
                        "mask of length {} for {} ordering dimensions",
                        z.len(),
                        u.groups.ordering_dims()
                    )));
                }
                Ok(u.groups.expand_dims(z))
            }
            (None, Some(_)) => Err(VndError::ShapeMismatch(
                "mask given to a layer without ordering unit".into(),
            )),
            (_, None) => Ok(vec![1.0; self.outputs()]),
        }
    }

    /// Training-mode forward: sample pre-activations, normalise, multiply by
    /// the mask (one entry per ordering dimension).
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        input: &Array2<f64>,
        mask: Option<&[f64]>,
        rng: &mut R,
    ) -> Result<(Array2<f64>, DenseCache)> {
        let unit_mask = self.unit_mask(mask)?;
        let (gamma, delta) = self.moments(input)?;
        let noise = Array2::from_shape_simple_fn(gamma.dim(), || rng.sample::<f64, _>(StandardNormal));
        let std = delta.mapv(f64::sqrt);
        let sampled = &gamma + &(&std * &noise);
        let (normalized, norm) = match &self.norm {
            Some(bn) => {
                let (y, c) = bn.forward_train(&sampled)?;
                (y, Some(c))
            }
            None => (sampled.clone(), None),
        };
        let output = &normalized * &Array1::from(unit_mask.clone());
        let cache = DenseCache {
            input: input.clone(),
            batch: ForwardBatch {
                gamma,
                delta,
                noise,
                sampled,
                unit_mask,
                output: output.clone(),
            },
            std,
            norm,
            normalized,
        };
        Ok((output, cache))
    }

    pub fn backward(&self, cache: &DenseCache, grad_out: &Array2<f64>) -> DenseGrads {
        let unit_mask = Array1::from(cache.batch.unit_mask.clone());
        let grad_normalized = grad_out * &unit_mask;
        let mask = self.ordering.as_ref().map(|u| {
            let per_unit = (grad_out * &cache.normalized).sum_axis(Axis(0));
            u.groups.reduce_to_dims(per_unit.as_slice().expect("contiguous"))
        });
        let (grad_sampled, norm_weight, norm_bias) = match (&self.norm, &cache.norm) {
            (Some(bn), Some(c)) => {
                let (g, w, b) = bn.backward(c, &grad_normalized);
                (g, Some(w), Some(b))
            }
            _ => (grad_normalized, None, None),
        };
        let grad_gamma = &grad_sampled;
        let mut grad_delta = grad_sampled.clone();
        ndarray::Zip::from(&mut grad_delta)
            .and(&cache.batch.noise)
            .and(&cache.std)
            .for_each(|g, &e, &s| *g = if s > 0.0 { *g * e / (2.0 * s) } else { 0.0 });

        let h = &cache.input;
        let h2 = h.mapv(|v| v * v);
        let alpha = self.alpha();
        let var_w = &alpha * &self.theta.mapv(|t| t * t);
        let h2t_gd = h2.t().dot(&grad_delta);
        let theta = h.t().dot(grad_gamma) + &(&self.theta * &alpha * &h2t_gd * 2.0);
        let log_alpha = &var_w * &h2t_gd;
        let input = grad_gamma.dot(&self.theta.t()) + &(h * &grad_delta.dot(&var_w.t()) * 2.0);
        let (bias_mean, bias_log_alpha) = match &self.bias {
            Some(b) => {
                let sg = grad_gamma.sum_axis(Axis(0));
                let sd = grad_delta.sum_axis(Axis(0));
                let ab = b.log_alpha.mapv(f64::exp);
                let dm = &sg + &(&b.mean * &ab * &sd * 2.0);
                let dla = &ab * &b.mean.mapv(|m| m * m) * &sd;
                (Some(dm), Some(dla))
            }
            None => (None, None),
        };
        DenseGrads {
            input,
            theta,
            log_alpha,
            bias_mean,
            bias_log_alpha,
            norm_weight,
            norm_bias,
            mask,
            logits: None,
        }
    }

    /// Test-time forward at a fixed width: groups beyond the plan are zeroed,
    /// kept groups are scaled by their keep probability.
    pub fn forward_eval<R: Rng + ?Sized>(
        &self,
        input: &Array2<f64>,
        width: Option<&LayerWidth>,
        mode: EvalMode,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        let (gamma, delta) = self.moments(input)?;
        let pre = match mode {
            EvalMode::Mean => gamma,
            EvalMode::Sample => {
                let noise = Array2::from_shape_simple_fn(gamma.dim(), || rng.sample::<f64, _>(StandardNormal));
                gamma + &(delta.mapv(f64::sqrt) * noise)
            }
        };
        let normalized = match &self.norm {
            Some(bn) => bn.forward_eval(&pre)?,
            None => pre,
        };
        self.apply_width(normalized, width)
    }

    fn apply_width(&self, x: Array2<f64>, width: Option<&LayerWidth>) -> Result<Array2<f64>> {
        match (width, &self.ordering) {
            (None, _) => Ok(x),
            (Some(w), Some(u)) => {
                if w.group_scale().len() != u.groups.groups() {
                    return Err(VndError::ShapeMismatch(format!(
                        "width plan for {} groups applied to a layer with {}",
                        w.group_scale().len(),
                        u.groups.groups()
                    )));
                }
                Ok(x * &Array1::from(u.groups.expand_groups(w.group_scale())))
            }
            (Some(_), None) => Err(VndError::ShapeMismatch(
                "width plan given to a layer without ordering unit".into(),
            )),
        }
    }

    /// Mean-mode forward that normalises with batch statistics and
    /// accumulates them for recollection.
    pub fn forward_collect(
        &self,
        input: &Array2<f64>,
        width: Option<&LayerWidth>,
        acc: Option<&mut NormAccumulator>,
    ) -> Result<Array2<f64>> {
        let (gamma, _) = self.moments(input)?;
        let normalized = match (&self.norm, acc) {
            (Some(bn), Some(acc)) => bn.forward_collect(&gamma, acc)?,
            (Some(bn), None) => bn.forward_eval(&gamma)?,
            (None, _) => gamma,
        };
        self.apply_width(normalized, width)
    }

    /// Column sums of `K1` (one per output unit).
    fn unit_weight_kl(&self) -> Array1<f64> {
        self.log_alpha.mapv(weight_kl).sum_axis(Axis(0))
    }

    /// `Phi1 + Phi2` plus the bias KL. Spike components have zero KL, so
    /// dropped groups cost nothing.
    pub fn kl(&self) -> Result<LayerKl> {
        let unit_kl = self.unit_weight_kl();
        let bias = self
            .bias
            .as_ref()
            .map(|b| b.log_alpha.iter().map(|&l| weight_kl(l)).sum())
            .unwrap_or(0.0);
        match &self.ordering {
            None => Ok(LayerKl {
                phi1: 0.0,
                phi2: unit_kl.sum(),
                bias,
            }),
            Some(u) => {
                let beta = u.posterior.beta();
                let dim_sums = u.groups.reduce_to_dims(unit_kl.as_slice().expect("contiguous"));
                Ok(LayerKl {
                    phi1: kl_mask(&beta, &u.prior)?,
                    phi2: grouped_phi2(&dim_sums, &beta),
                    bias,
                })
            }
        }
    }

    /// Gradients of `scale * kl()` as `(log_alpha, bias_log_alpha, logits)`.
    pub fn kl_backward(&self, scale: f64) -> Result<(Array2<f64>, Option<Array1<f64>>, Option<Vec<f64>>)> {
        let dk = self.log_alpha.mapv(|l| -neg_kl_weight_approx_derivative(l) * scale);
        let bias = self
            .bias
            .as_ref()
            .map(|b| b.log_alpha.mapv(|l| -neg_kl_weight_approx_derivative(l) * scale));
        match &self.ordering {
            None => Ok((dk, bias, None)),
            Some(u) => {
                let beta = u.posterior.beta();
                let keep = keep_probabilities_from_beta(&beta);
                let unit_keep = Array1::from(u.groups.expand_dims(&keep));
                let grad_log_alpha = dk * &unit_keep;

                let unit_kl = self.unit_weight_kl();
                let dim_sums = u.groups.reduce_to_dims(unit_kl.as_slice().expect("contiguous"));
                let prior = u.prior.mask_probs();
                let log_beta = u.posterior.log_beta();
                let mut prefix = 0.0;
                let mut grad_log_beta = Vec::with_capacity(beta.len());
                for j in 0..beta.len() {
                    prefix += dim_sums[j];
                    if beta[j] > 0.0 && prior[j] <= 0.0 {
                        return Err(VndError::InfiniteKl {
                            index: j + 1,
                            beta: beta[j],
                        });
                    }
                    let phi1 = if beta[j] > 0.0 {
                        beta[j] * (log_beta[j] - prior[j].ln() + 1.0)
                    } else {
                        0.0
                    };
                    grad_log_beta.push(scale * (phi1 + beta[j] * prefix));
                }
                Ok((
                    grad_log_alpha,
                    bias,
                    Some(u.posterior.grad_logits_from_log_beta(&grad_log_beta)),
                ))
            }
        }
    }

    /// Visits trainable parameters in a fixed order as `(name, shape, data)`.
    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        let (i, o) = self.theta.dim();
        f(
            format!("{prefix}theta"),
            &[i, o],
            self.theta.as_slice().expect("standard layout"),
        );
        f(
            format!("{prefix}log_alpha"),
            &[i, o],
            self.log_alpha.as_slice().expect("standard layout"),
        );
        if let Some(b) = &self.bias {
            f(
                format!("{prefix}bias.mean"),
                &[o],
                b.mean.as_slice().expect("contiguous"),
            );
            f(
                format!("{prefix}bias.log_alpha"),
                &[o],
                b.log_alpha.as_slice().expect("contiguous"),
            );
        }
        if let Some(n) = &self.norm {
            f(
                format!("{prefix}norm.weight"),
                &[o],
                n.weight.as_slice().expect("contiguous"),
            );
            f(
                format!("{prefix}norm.bias"),
                &[o],
                n.bias.as_slice().expect("contiguous"),
            );
        }
        if let Some(u) = &self.ordering {
            let logits = u.posterior.logits();
            f(format!("{prefix}ordering.logits"), &[logits.len()], logits);
        }
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        f(
            format!("{prefix}theta"),
            self.theta.as_slice_mut().expect("standard layout"),
        );
        f(
            format!("{prefix}log_alpha"),
            self.log_alpha.as_slice_mut().expect("standard layout"),
        );
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}bias.mean"), b.mean.as_slice_mut().expect("contiguous"));
            f(
                format!("{prefix}bias.log_alpha"),
                b.log_alpha.as_slice_mut().expect("contiguous"),
            );
        }
        if let Some(n) = &mut self.norm {
            f(
                format!("{prefix}norm.weight"),
                n.weight.as_slice_mut().expect("contiguous"),
            );
            f(format!("{prefix}norm.bias"), n.bias.as_slice_mut().expect("contiguous"));
        }
        if let Some(u) = &mut self.ordering {
            f(format!("{prefix}ordering.logits"), u.posterior.logits_mut());
        }
    }

    /// Non-trainable state (normalisation statistics).
    pub fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        if let Some(n) = &self.norm {
            let o = n.running_mean.len();
            f(
                format!("{prefix}norm.running_mean"),
                &[o],
                n.running_mean.as_slice().expect("contiguous"),
            );
            f(
                format!("{prefix}norm.running_var"),
                &[o],
                n.running_var.as_slice().expect("contiguous"),
            );
        }
    }

    pub fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut [f64])) {
        if let Some(n) = &mut self.norm {
            f(
                format!("{prefix}norm.running_mean"),
                n.running_mean.as_slice_mut().expect("contiguous"),
            );
            f(
                format!("{prefix}norm.running_var"),
                n.running_var.as_slice_mut().expect("contiguous"),
            );
        }
    }

    pub(crate) fn update_running(&mut self, cache: &DenseCache) {
        if let (Some(bn), Some(c)) = (&mut self.norm, &cache.norm) {
            bn.update_running(c);
        }
    }

    pub(crate) fn finish_collect(&mut self, acc: &NormAccumulator) {
        if let Some(bn) = &mut self.norm {
            bn.finish_collect(acc);
        }
    }
}

impl DenseGrads {
    /// Flattens in the order of [`VariationalDense::visit_params`].
    pub fn into_flat(self) -> Vec<Vec<f64>> {
        let mut out = vec![
            self.theta.into_raw_vec_and_offset().0,
            self.log_alpha.into_raw_vec_and_offset().0,
        ];
        if let (Some(m), Some(l)) = (self.bias_mean, self.bias_log_alpha) {
            out.push(m.to_vec());
            out.push(l.to_vec());
        }
        if let (Some(w), Some(b)) = (self.norm_weight, self.norm_bias) {
            out.push(w.to_vec());
            out.push(b.to_vec());
        }
        if let Some(l) = self.logits {
            out.push(l);
        }
        out
    }
}

/// Training-mode forward of a layer under a given mask.
pub fn forward_dense_train<R: Rng + ?Sized>(
    layer: &VariationalDense,
    input: &Array2<f64>,
    mask: &OrderedMask,
    rng: &mut R,
) -> Result<ForwardBatch> {
    Ok(layer.forward_train(input, Some(mask.values()), rng)?.1.batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::stream_rng;
    use crate::layers::GroupMap;
    use crate::ordering::DownhillParams;
    use ndarray::array;

    fn masked_layer(inputs: usize, outputs: usize, groups: usize, seed: u64) -> VariationalDense {
        let mut rng = stream_rng(seed, 0);
        let mut layer = VariationalDense::init(inputs, outputs, -1.0, true, &mut rng);
        layer.log_alpha = Array2::from_shape_fn((inputs, outputs), |(i, j)| -2.0 + 0.3 * ((i * 7 + j * 3) % 8) as f64);
        if let Some(b) = &mut layer.bias {
            b.mean = Array1::from_shape_fn(outputs, |j| 0.1 * j as f64 - 0.2);
        }
        let groups = GroupMap::new(outputs, groups, 1).unwrap();
        let mut unit = OrderingUnit::new(groups, 1.0, 0.9, 0.7).unwrap();
        let dims = unit.posterior.dims();
        unit.posterior = DownhillParams::new((0..dims - 1).map(|i| 0.5 + 0.4 * i as f64).collect(), 0.7).unwrap();
        layer.with_ordering(unit).unwrap()
    }

    #[test]
    fn dot_product_example() {
        let layer = VariationalDense::new(array![[0.5], [0.5]], array![[-30.0], [-30.0]]).unwrap();
        let mut rng = stream_rng(0, 0);
        let (out, _) = layer.forward_train(&array![[1.0, 2.0]], None, &mut rng).unwrap();
        // alpha = e^-8 after clamping: noise sd ~ 0.0275 * 1.58
        assert!((out[[0, 0]] - 1.5).abs() < 0.2);
        let eval = layer
            .forward_eval(&array![[1.0, 2.0]], None, EvalMode::Mean, &mut rng)
            .unwrap();
        assert_eq!(eval[[0, 0]], 1.5);
    }

    #[test]
    fn zero_noise_limit_is_masked_matmul() {
        let mut layer = masked_layer(3, 4, 2, 1);
        layer.log_alpha.fill(LOG_ALPHA_MIN);
        layer.bias = None;
        let h = array![[0.2, -0.5, 1.0], [1.5, 0.3, -0.2]];
        let z = OrderedMask::soft(vec![1.0, 0.4]).unwrap();
        let mut rng = stream_rng(2, 0);
        let batch = forward_dense_train(&layer, &h, &z, &mut rng).unwrap();
        let want = h.dot(&layer.theta) * &array![1.0, 1.0, 0.4, 0.4];
        let sd_bound = batch.delta.mapv(f64::sqrt).fold(0.0f64, |a, b| a.max(*b));
        for (a, b) in batch.output.iter().zip(want.iter()) {
            assert!((a - b).abs() <= 6.0 * sd_bound);
        }
        assert!(sd_bound < 0.05);
    }

    #[test]
    fn moments_match_monte_carlo() {
        let layer = masked_layer(4, 6, 3, 3);
        let h = array![[0.5, -1.0, 0.3, 2.0]];
        let z = OrderedMask::soft(vec![1.0, 0.6, 0.25]).unwrap();
        let (gamma, delta) = layer.moments(&h).unwrap();
        let unit_z = layer.ordering.as_ref().unwrap().groups.expand_dims(z.values());
        let n = 100_000;
        let mut rng = stream_rng(4, 0);
        let mut sum = Array1::<f64>::zeros(6);
        let mut sum_sq = Array1::<f64>::zeros(6);
        for _ in 0..n {
            let out = forward_dense_train(&layer, &h, &z, &mut rng).unwrap().output;
            let row = out.row(0);
            sum += &row;
            sum_sq += &row.mapv(|v| v * v);
        }
        for j in 0..6 {
            let mean = sum[j] / n as f64;
            let var = sum_sq[j] / n as f64 - mean * mean;
            let want_mean = gamma[[0, j]] * unit_z[j];
            let want_var = delta[[0, j]] * unit_z[j] * unit_z[j];
            let se_mean = (want_var / n as f64).sqrt();
            let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
            assert!((mean - want_mean).abs() < 3.0 * se_mean, "unit {j} mean");
            assert!((var - want_var).abs() < 3.0 * se_var, "unit {j} var");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut layer = masked_layer(3, 4, 2, 5).with_norm();
        layer.norm.as_mut().unwrap().weight = array![1.2, 0.8, -0.5, 1.0];
        let h = array![[0.2, -0.5, 1.0], [1.5, 0.3, -0.2], [-0.7, 0.9, 0.4]];
        let z = vec![1.0, 0.6];
        let w = array![[1.0, -2.0, 0.5, 0.3], [0.3, 0.7, -1.1, 2.0], [2.0, 0.1, 0.4, -0.9]];
        let seed = 9;
        let loss = |l: &VariationalDense, h: &Array2<f64>, z: &[f64]| {
            let mut rng = stream_rng(seed, 0);
            (l.forward_train(h, Some(z), &mut rng).unwrap().0 * &w).sum()
        };
        let mut rng = stream_rng(seed, 0);
        let (_, cache) = layer.forward_train(&h, Some(&z), &mut rng).unwrap();
        let grads = layer.backward(&cache, &w);
        let eps = 1e-6;
        let check = |fd: f64, an: f64, what: &str| {
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-4, "{what}: fd {fd} analytic {an}");
        };
        for i in 0..3 {
            for j in 0..4 {
                let mut p = layer.clone();
                p.theta[[i, j]] += eps;
                let mut m = layer.clone();
                m.theta[[i, j]] -= eps;
                check(
                    (loss(&p, &h, &z) - loss(&m, &h, &z)) / (2.0 * eps),
                    grads.theta[[i, j]],
                    "theta",
                );
                let mut p = layer.clone();
                p.log_alpha[[i, j]] += eps;
                let mut m = layer.clone();
                m.log_alpha[[i, j]] -= eps;
                check(
                    (loss(&p, &h, &z) - loss(&m, &h, &z)) / (2.0 * eps),
                    grads.log_alpha[[i, j]],
                    "log_alpha",
                );
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let mut p = h.clone();
                p[[i, j]] += eps;
                let mut m = h.clone();
                m[[i, j]] -= eps;
                check(
                    (loss(&layer, &p, &z) - loss(&layer, &m, &z)) / (2.0 * eps),
                    grads.input[[i, j]],
                    "input",
                );
            }
        }
        let gm = grads.mask.as_ref().unwrap();
        for d in 0..2 {
            let mut p = z.clone();
            p[d] += eps;
            let mut m = z.clone();
            m[d] -= eps;
            check(
                (loss(&layer, &h, &p) - loss(&layer, &h, &m)) / (2.0 * eps),
                gm[d],
                "mask",
            );
        }
        let gb = grads.bias_mean.as_ref().unwrap();
        let gbl = grads.bias_log_alpha.as_ref().unwrap();
        for j in 0..4 {
            let mut p = layer.clone();
            p.bias.as_mut().unwrap().mean[j] += eps;
            let mut m = layer.clone();
            m.bias.as_mut().unwrap().mean[j] -= eps;
            check((loss(&p, &h, &z) - loss(&m, &h, &z)) / (2.0 * eps), gb[j], "bias mean");
            let mut p = layer.clone();
            p.bias.as_mut().unwrap().log_alpha[j] += eps;
            let mut m = layer.clone();
            m.bias.as_mut().unwrap().log_alpha[j] -= eps;
            check(
                (loss(&p, &h, &z) - loss(&m, &h, &z)) / (2.0 * eps),
                gbl[j],
                "bias log_alpha",
            );
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let layer = masked_layer(3, 6, 3, 6);
        let (gla, gb, gl) = layer.kl_backward(1.0).unwrap();
        let kl = |l: &VariationalDense| l.kl().unwrap().total();
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..6 {
                let mut p = layer.clone();
                p.log_alpha[[i, j]] += eps;
                let mut m = layer.clone();
                m.log_alpha[[i, j]] -= eps;
                let fd = (kl(&p) - kl(&m)) / (2.0 * eps);
                assert!((fd - gla[[i, j]]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
        let gb = gb.unwrap();
        for j in 0..6 {
            let mut p = layer.clone();
            p.bias.as_mut().unwrap().log_alpha[j] += eps;
            let mut m = layer.clone();
            m.bias.as_mut().unwrap().log_alpha[j] -= eps;
            let fd = (kl(&p) - kl(&m)) / (2.0 * eps);
            assert!((fd - gb[j]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        let gl = gl.unwrap();
        for d in 0..gl.len() {
            let mut p = layer.clone();
            p.ordering.as_mut().unwrap().posterior.logits_mut()[d] += eps;
            let mut m = layer.clone();
            m.ordering.as_mut().unwrap().posterior.logits_mut()[d] -= eps;
            let fd = (kl(&p) - kl(&m)) / (2.0 * eps);
            assert!(
                (fd - gl[d]).abs() < 1e-5 * fd.abs().max(1.0),
                "logit {d}: {fd} vs {}",
                gl[d]
            );
        }
    }

    #[test]
    fn matched_prior_and_zero_weight_kl_vanish() {
        // K1 = 0 where neg_kl_weight_approx crosses zero.
        let mut lo = -5.0;
        let mut hi = 0.5;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if super::super::neg_kl_weight_approx(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let root = 0.5 * (lo + hi);
        let mut layer = VariationalDense::new(Array2::ones((2, 3)), Array2::from_elem((2, 3), root)).unwrap();
        let groups = GroupMap::new(3, 3, 1).unwrap();
        let mut unit = OrderingUnit::new(groups, 0.0, 0.5, 1.0).unwrap();
        unit.posterior = DownhillParams::from_beta(&[0.5, 0.25, 0.25], 1.0).unwrap();
        layer = layer.with_ordering(unit).unwrap();
        assert!(layer.kl().unwrap().total().abs() < 1e-12);
    }

    #[test]
    fn eval_rescales_and_truncates() {
        let mut layer = VariationalDense::new(Array2::eye(3), Array2::from_elem((3, 3), -8.0)).unwrap();
        let mut unit = OrderingUnit::new(GroupMap::new(3, 3, 1).unwrap(), 0.0, 0.9, 1.0).unwrap();
        unit.posterior = DownhillParams::from_beta(&[0.2, 0.3, 0.5], 1.0).unwrap();
        layer = layer.with_ordering(unit).unwrap();
        let plan = layer.ordering.as_ref().unwrap().width(2.0 / 3.0).unwrap();
        let mut rng = stream_rng(0, 0);
        let h = array![[2.0, 3.0, 4.0]];
        let out = layer.forward_eval(&h, Some(&plan), EvalMode::Mean, &mut rng).unwrap();
        assert!((out[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((out[[0, 1]] - 3.0 * 0.8).abs() < 1e-12);
        assert_eq!(out[[0, 2]], 0.0);
        let again = layer.forward_eval(&h, Some(&plan), EvalMode::Mean, &mut rng).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn full_width_one_hot_last_is_unmasked() {
        let mut layer = masked_layer(3, 4, 4, 7);
        layer.norm = None;
        let unit = layer.ordering.as_mut().unwrap();
        unit.posterior = DownhillParams::constant(4, crate::ordering::LOGIT_CLAMP, 1.0).unwrap();
        let plan = layer.ordering.as_ref().unwrap().width(1.0).unwrap();
        let h = array![[0.3, -0.2, 1.0]];
        let mut rng = stream_rng(0, 0);
        let a = layer.forward_eval(&h, Some(&plan), EvalMode::Mean, &mut rng).unwrap();
        let b = layer.forward_eval(&h, None, EvalMode::Mean, &mut rng).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-4 * y.abs().max(1.0));
        }
    }

    #[test]
    fn shape_errors() {
        let layer = masked_layer(3, 4, 2, 8);
        let mut rng = stream_rng(0, 0);
        assert!(layer
            .forward_train(&Array2::zeros((2, 5)), Some(&[1.0, 0.5]), &mut rng)
            .is_err());
        assert!(layer
            .forward_train(&Array2::zeros((2, 3)), Some(&[1.0]), &mut rng)
            .is_err());
    }
}
