use ndarray::{Array1, Array2, Axis};

use crate::error::{Result, VndError};

/// Batch normalisation over the rows of a `rows x units` matrix (for
/// convolutions the rows are `batch x height x width`).
///
/// Running statistics use the biased batch variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub weight: Array1<f64>,
    pub bias: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    pub(crate) mean: Array1<f64>,
    pub(crate) var: Array1<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Pooled first and second moments accumulated during statistics recollection.
#[derive(Debug, Clone)]
pub struct NormAccumulator {
    sum: Array1<f64>,
    sum_sq: Array1<f64>,
    count: usize,
}

impl NormAccumulator {
    pub fn new(units: usize) -> Self {
        Self {
            sum: Array1::zeros(units),
            sum_sq: Array1::zeros(units),
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

impl BatchNorm {
    pub fn new(units: usize) -> Self {
        Self {
            weight: Array1::ones(units),
            bias: Array1::zeros(units),
            running_mean: Array1::zeros(units),
            running_var: Array1::ones(units),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn units(&self) -> usize {
        self.weight.len()
    }

    fn check(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.units() || x.nrows() == 0 {
            return Err(VndError::ShapeMismatch(format!(
                "batch norm over {} units got {:?}",
                self.units(),
                x.dim()
            )));
        }
        Ok(())
    }

    fn normalise(&self, x: &Array2<f64>, mean: Array1<f64>, var: Array1<f64>) -> (Array2<f64>, NormCache) {
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = (x - &mean) * &inv_std;
        let y = &xhat * &self.weight + &self.bias;
        (
            y,
            NormCache {
                mean,
                var,
                xhat,
                inv_std,
            },
        )
    }

    /// Normalises with batch statistics. Running statistics are updated
    /// separately by [`BatchNorm::update_running`].
    pub fn forward_train(&self, x: &Array2<f64>) -> Result<(Array2<f64>, NormCache)> {
        self.check(x)?;
        let mean = x.mean_axis(Axis(0)).expect("nonempty");
        let var = (x - &mean).mapv(|v| v * v).mean_axis(Axis(0)).expect("nonempty");
        Ok(self.normalise(x, mean, var))
    }

    pub fn update_running(&mut self, cache: &NormCache) {
        let m = self.momentum;
        self.running_mean = &self.running_mean * (1.0 - m) + &cache.mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &cache.var * m;
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(x)?;
        Ok(self.normalise(x, self.running_mean.clone(), self.running_var.clone()).0)
    }

    /// Batch-statistics forward that also accumulates pooled moments.
    pub fn forward_collect(&self, x: &Array2<f64>, acc: &mut NormAccumulator) -> Result<Array2<f64>> {
        let (y, _) = self.forward_train(x)?;
        acc.sum += &x.sum_axis(Axis(0));
        acc.sum_sq += &x.mapv(|v| v * v).sum_axis(Axis(0));
        acc.count += x.nrows();
        Ok(y)
    }

    /// Replaces the running statistics with the pooled moments.
    pub fn finish_collect(&mut self, acc: &NormAccumulator) {
        if acc.count == 0 {
            return;
        }
        let n = acc.count as f64;
        let mean = &acc.sum / n;
        let var = (&acc.sum_sq / n - mean.mapv(|m| m * m)).mapv(|v| v.max(0.0));
        self.running_mean = mean;
        self.running_var = var;
    }

    /// Returns `(grad_input, grad_weight, grad_bias)`.
    pub fn backward(&self, cache: &NormCache, grad_out: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
        let n = grad_out.nrows() as f64;
        let grad_bias = grad_out.sum_axis(Axis(0));
        let grad_weight = (grad_out * &cache.xhat).sum_axis(Axis(0));
        let gxhat = grad_out * &self.weight;
        let mean_g = gxhat.sum_axis(Axis(0)) / n;
        let mean_gx = (&gxhat * &cache.xhat).sum_axis(Axis(0)) / n;
        let grad_in = (gxhat - &mean_g - &cache.xhat * &mean_gx) * &cache.inv_std;
        (grad_in, grad_weight, grad_bias)
    }
}
