//! Layer stacks built from the variational layers, with a classification or
//! per-output Bernoulli head.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VndError};
use crate::layers::{
    ConvCache, ConvGeometry, DenseCache, EvalMode, GroupMap, LayerKl, NormAccumulator, OrderingUnit, VariationalConv,
    VariationalDense,
};
use crate::ordering::{make_width_plan, DownhillDraw, DownhillParams, WidthPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub groups: usize,
    pub n_base: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default)]
        norm: bool,
        #[serde(default)]
        grouping: Option<Grouping>,
    },
    Conv {
        channels: usize,
        kernel: usize,
        #[serde(default = "default_one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default)]
        norm: bool,
        #[serde(default)]
        grouping: Option<Grouping>,
    },
    Relu,
    Flatten,
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputShape {
    Features {
        dim: usize,
    },
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Categorical likelihood over the final layer's outputs.
    Softmax,
    /// Independent Bernoulli per output (toy segmentation).
    Sigmoid,
}

/// Architecture plus initialisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub head: Head,
    /// Initial `log(alpha)` of the first parametric layer.
    pub first_log_alpha: f64,
    /// Initial `log(alpha)` of the remaining layers.
    pub log_alpha: f64,
    /// Initial conditional-keep logit of every ordering unit.
    pub init_logit: f64,
    /// Conditional keep probability of the Bernoulli-chain prior.
    pub prior_keep: f64,
    pub tau: f64,
}

impl ModelSpec {
    /// `d - h - h - ... - classes` ReLU network; every hidden layer is masked.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize, grouping: Option<Grouping>, norm: bool) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::Dense {
                units: h,
                bias: true,
                norm,
                grouping,
            });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense {
            units: classes,
            bias: true,
            norm: false,
            grouping: None,
        });
        Self {
            input: InputShape::Features { dim: input },
            layers,
            head: Head::Softmax,
            first_log_alpha: -8.0,
            log_alpha: -1.0,
            init_logit: 3.0,
            prior_keep: 0.95,
            tau: 1.0,
        }
    }

    /// Output width, checking that consecutive shapes fit.
    pub fn validate(&self) -> Result<usize> {
        let mut shape = self.input;
        for (i, spec) in self.layers.iter().enumerate() {
            let err = |msg: String| VndError::ShapeMismatch(format!("layer {i}: {msg}"));
            shape = match (spec, shape) {
                (LayerSpec::Dense { units, grouping, .. }, InputShape::Features { .. }) => {
                    if *units == 0 {
                        return Err(err("dense layer with zero units".into()));
                    }
                    if let Some(g) = grouping {
                        GroupMap::new(*units, g.groups, g.n_base).map_err(|e| err(e.to_string()))?;
                    }
                    InputShape::Features { dim: *units }
                }
                (
                    LayerSpec::Conv {
                        channels,
                        kernel,
                        stride,
                        padding,
                        grouping,
                        ..
                    },
                    InputShape::Image {
                        channels: c,
                        height,
                        width,
                    },
                ) => {
                    let geom = ConvGeometry {
                        in_channels: c,
                        out_channels: *channels,
                        kernel: (*kernel, *kernel),
                        stride: *stride,
                        padding: *padding,
                    };
                    let (h, w) = geom.output_hw(height, width).map_err(|e| err(e.to_string()))?;
                    if *channels == 0 {
                        return Err(err("conv layer with zero channels".into()));
                    }
                    if let Some(g) = grouping {
                        GroupMap::new(*channels, g.groups, g.n_base).map_err(|e| err(e.to_string()))?;
                    }
                    InputShape::Image {
                        channels: *channels,
                        height: h,
                        width: w,
                    }
                }
                (LayerSpec::Relu, s) => s,
                (
                    LayerSpec::Flatten,
                    InputShape::Image {
                        channels,
                        height,
                        width,
                    },
                ) => InputShape::Features {
                    dim: channels * height * width,
                },
                (LayerSpec::Flatten, InputShape::Features { .. }) => {
                    return Err(err("flatten applied to flat features".into()))
                }
                (LayerSpec::Dense { .. }, _) => return Err(err("dense layer needs flat input".into())),
                (LayerSpec::Conv { .. }, _) => return Err(err("conv layer needs image input".into())),
            };
        }
        match shape {
            InputShape::Features { dim } => {
                if self.head == Head::Softmax && dim < 2 {
                    return Err(VndError::ShapeMismatch(
                        "softmax head needs at least two outputs".into(),
                    ));
                }
                Ok(dim)
            }
            InputShape::Image { .. } => Err(VndError::ShapeMismatch("network must end with flat outputs".into())),
        }
    }
}

/// Activations flowing between layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Flat(Array2<f64>),
    Image(Array4<f64>),
}

impl Tensor {
    pub fn rows(&self) -> usize {
        match self {
            Tensor::Flat(a) => a.nrows(),
            Tensor::Image(a) => a.dim().0,
        }
    }

    /// Rows `idx` of the batch.
    pub fn select(&self, idx: &[usize]) -> Tensor {
        match self {
            Tensor::Flat(a) => Tensor::Flat(a.select(Axis(0), idx)),
            Tensor::Image(a) => Tensor::Image(a.select(Axis(0), idx)),
        }
    }

    pub fn into_flat(self) -> Result<Array2<f64>> {
        match self {
            Tensor::Flat(a) => Ok(a),
            Tensor::Image(_) => Err(VndError::ShapeMismatch("expected flat tensor".into())),
        }
    }

    fn relu(&self) -> Tensor {
        match self {
            Tensor::Flat(a) => Tensor::Flat(a.mapv(|v| v.max(0.0))),
            Tensor::Image(a) => Tensor::Image(a.mapv(|v| v.max(0.0))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(VariationalDense),
    Conv(VariationalConv),
    Relu,
    Flatten,
}

impl Layer {
    fn dense_core(&self) -> Option<&VariationalDense> {
        match self {
            Layer::Dense(d) => Some(d),
            Layer::Conv(c) => Some(&c.core),
            _ => None,
        }
    }

    fn dense_core_mut(&mut self) -> Option<&mut VariationalDense> {
        match self {
            Layer::Dense(d) => Some(d),
            Layer::Conv(c) => Some(&mut c.core),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
enum LayerCache {
    Dense(DenseCache),
    Conv(ConvCache),
    Relu(Tensor),
    Flatten((usize, usize, usize, usize)),
}

/// Everything saved by a training forward pass.
#[derive(Debug, Clone)]
pub struct TrainPass {
    caches: Vec<LayerCache>,
    /// One draw per layer that owns an ordering unit.
    pub draws: Vec<Option<DownhillDraw>>,
    pub output: Array2<f64>,
}

/// Gradients in the order of [`Model::visit_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(model: &Model) -> Self {
        let mut tensors = Vec::new();
        model.visit_params(&mut |_, _, d| tensors.push(vec![0.0; d.len()]));
        Self { tensors }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// KL per parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelKl {
    pub layers: Vec<(usize, LayerKl)>,
}

impl ModelKl {
    pub fn total(&self) -> f64 {
        self.layers.iter().map(|(_, k)| k.total()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub layers: Vec<Layer>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut shape = spec.input;
        let mut first = true;
        for ls in &spec.layers {
            let mut la = || {
                let v = if first { spec.first_log_alpha } else { spec.log_alpha };
                first = false;
                v
            };
            let layer = match (ls, shape) {
                (
                    LayerSpec::Dense {
                        units,
                        bias,
                        norm,
                        grouping,
                    },
                    InputShape::Features { dim },
                ) => {
                    let mut d = VariationalDense::init(dim, *units, la(), *bias, rng);
                    if *norm {
                        d = d.with_norm();
                    }
                    if let Some(g) = grouping {
                        d = d.with_ordering(Self::unit(&spec, *units, g)?)?;
                    }
                    shape = InputShape::Features { dim: *units };
                    Layer::Dense(d)
                }
                (
                    LayerSpec::Conv {
                        channels,
                        kernel,
                        stride,
                        padding,
                        bias,
                        norm,
                        grouping,
                    },
                    InputShape::Image {
                        channels: c,
                        height,
                        width,
                    },
                ) => {
                    let geom = ConvGeometry {
                        in_channels: c,
                        out_channels: *channels,
                        kernel: (*kernel, *kernel),
                        stride: *stride,
                        padding: *padding,
                    };
                    let (h, w) = geom.output_hw(height, width)?;
                    let mut conv = VariationalConv::init(geom, la(), *bias, rng);
                    if *norm {
                        conv = conv.with_norm();
                    }
                    if let Some(g) = grouping {
                        conv = conv.with_ordering(Self::unit(&spec, *channels, g)?)?;
                    }
                    shape = InputShape::Image {
                        channels: *channels,
                        height: h,
                        width: w,
                    };
                    Layer::Conv(conv)
                }
                (LayerSpec::Relu, _) => Layer::Relu,
                (
                    LayerSpec::Flatten,
                    InputShape::Image {
                        channels,
                        height,
                        width,
                    },
                ) => {
                    shape = InputShape::Features {
                        dim: channels * height * width,
                    };
                    Layer::Flatten
                }
                _ => unreachable!("shapes checked by validate"),
            };
            layers.push(layer);
        }
        Ok(Self { spec, layers })
    }

    fn unit(spec: &ModelSpec, units: usize, g: &Grouping) -> Result<OrderingUnit> {
        OrderingUnit::new(
            GroupMap::new(units, g.groups, g.n_base)?,
            spec.init_logit,
            spec.prior_keep,
            spec.tau,
        )
    }

    pub fn outputs(&self) -> usize {
        self.spec.validate().expect("model built from a valid spec")
    }

    pub fn ordering_units(&self) -> impl Iterator<Item = (usize, &OrderingUnit)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.dense_core().and_then(|d| d.ordering.as_ref()).map(|u| (i, u)))
    }

    /// Mask distribution of every masked layer, in layer order.
    pub fn betas(&self) -> Vec<(usize, Vec<f64>)> {
        self.ordering_units().map(|(i, u)| (i, u.posterior.beta())).collect()
    }

    pub fn tau(&self) -> f64 {
        self.ordering_units()
            .next()
            .map_or(self.spec.tau, |(_, u)| u.posterior.tau())
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        for l in &mut self.layers {
            if let Some(u) = l.dense_core_mut().and_then(|d| d.ordering.as_mut()) {
                u.posterior.set_tau(tau)?;
            }
        }
        Ok(())
    }

    pub fn project(&mut self) {
        for l in &mut self.layers {
            if let Some(d) = l.dense_core_mut() {
                d.project();
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let ok = match (x, self.spec.input) {
            (Tensor::Flat(a), InputShape::Features { dim }) => a.ncols() == dim,
            (
                Tensor::Image(a),
                InputShape::Image {
                    channels,
                    height,
                    width,
                },
            ) => {
                let (_, c, h, w) = a.dim();
                (c, h, w) == (channels, height, width)
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(VndError::ShapeMismatch(format!(
                "input does not match {:?}",
                self.spec.input
            )))
        }
    }

    /// Draws one relaxed mask per masked layer.
    pub fn sample_masks<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<Option<DownhillDraw>>> {
        self.layers
            .iter()
            .map(|l| match l.dense_core().and_then(|d| d.ordering.as_ref()) {
                Some(u) => DownhillDraw::sample(&u.posterior, rng).map(Some),
                None => Ok(None),
            })
            .collect()
    }

    /// Training forward with one joint sample of all masks and weight noise.
    pub fn forward_train<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<TrainPass> {
        self.check_input(x)?;
        let draws = self.sample_masks(rng)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (layer, draw) in self.layers.iter().zip(&draws) {
            let mask = draw.as_ref().map(|d| d.mask_values());
            h = match (layer, h) {
                (Layer::Dense(d), Tensor::Flat(a)) => {
                    let (y, c) = d.forward_train(&a, mask, rng)?;
                    caches.push(LayerCache::Dense(c));
                    Tensor::Flat(y)
                }
                (Layer::Conv(c), Tensor::Image(a)) => {
                    let (y, cache) = c.forward_train(&a, mask, rng)?;
                    caches.push(LayerCache::Conv(cache));
                    Tensor::Image(y)
                }
                (Layer::Relu, t) => {
                    let y = t.relu();
                    caches.push(LayerCache::Relu(t));
                    y
                }
                (Layer::Flatten, Tensor::Image(a)) => {
                    caches.push(LayerCache::Flatten(a.dim()));
                    Tensor::Flat(flatten(a))
                }
                _ => return Err(VndError::ShapeMismatch("layer input kind".into())),
            };
        }
        Ok(TrainPass {
            caches,
            draws,
            output: h.into_flat()?,
        })
    }

    /// Backpropagates `grad_out` (gradient of the loss w.r.t. the final
    /// outputs) through every layer and both reparameterisations.
    pub fn backward(&self, pass: &TrainPass, grad_out: &Array2<f64>) -> Result<Grads> {
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.layers.len()];
        let mut g = Tensor::Flat(grad_out.clone());
        for (i, (layer, cache)) in self.layers.iter().zip(&pass.caches).enumerate().rev() {
            g = match (layer, cache, g) {
                (Layer::Dense(d), LayerCache::Dense(c), Tensor::Flat(go)) => {
                    let mut grads = d.backward(c, &go);
                    let input = std::mem::replace(&mut grads.input, Array2::zeros((0, 0)));
                    if let (Some(draw), Some(u), Some(gm)) = (&pass.draws[i], &d.ordering, &grads.mask) {
                        grads.logits = Some(draw.backward(&u.posterior, gm));
                    }
                    per_layer[i] = grads.into_flat();
                    Tensor::Flat(input)
                }
                (Layer::Conv(cv), LayerCache::Conv(c), Tensor::Image(go)) => {
                    let (input, mut grads) = cv.backward(c, &go)?;
                    if let (Some(draw), Some(u), Some(gm)) = (&pass.draws[i], &cv.core.ordering, &grads.mask) {
                        grads.logits = Some(draw.backward(&u.posterior, gm));
                    }
                    grads.input = Array2::zeros((0, 0));
                    per_layer[i] = grads.into_flat();
                    Tensor::Image(input)
                }
                (Layer::Relu, LayerCache::Relu(x), g) => match (x, g) {
                    (Tensor::Flat(x), Tensor::Flat(g)) => Tensor::Flat(
                        ndarray::Zip::from(&g)
                            .and(x)
                            .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 }),
                    ),
                    (Tensor::Image(x), Tensor::Image(g)) => Tensor::Image(
                        ndarray::Zip::from(&g)
                            .and(x)
                            .map_collect(|&g, &x| if x > 0.0 { g } else { 0.0 }),
                    ),
                    _ => return Err(VndError::ShapeMismatch("relu gradient kind".into())),
                },
                (Layer::Flatten, LayerCache::Flatten(dim), Tensor::Flat(g)) => Tensor::Image(
                    g.into_shape_with_order(*dim)
                        .map_err(|e| VndError::ShapeMismatch(e.to_string()))?,
                ),
                _ => return Err(VndError::ShapeMismatch("cache does not match layer".into())),
            };
        }
        Ok(Grads {
            tensors: per_layer.into_iter().flatten().collect(),
        })
    }

    /// Moves normalisation running statistics towards the batch statistics
    /// of a training pass.
    pub fn update_running_stats(&mut self, pass: &TrainPass) {
        for (layer, cache) in self.layers.iter_mut().zip(&pass.caches) {
            match (layer, cache) {
                (Layer::Dense(d), LayerCache::Dense(c)) => d.update_running(c),
                (Layer::Conv(cv), LayerCache::Conv(c)) => cv.core.update_running(&c.dense),
                _ => {}
            }
        }
    }

    pub fn kl(&self) -> Result<ModelKl> {
        let mut layers = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(d) = l.dense_core() {
                layers.push((i, d.kl()?));
            }
        }
        Ok(ModelKl { layers })
    }

    /// Adds the gradient of `scale * kl()` into `grads`.
    pub fn kl_backward(&self, scale: f64, grads: &mut Grads) -> Result<()> {
        let mut slot = 0;
        for l in &self.layers {
            let Some(d) = l.dense_core() else { continue };
            let (gla, gb, gl) = d.kl_backward(scale)?;
            // theta has no KL gradient
            slot += 1;
            add_into(&mut grads.tensors[slot], gla.as_slice().expect("standard layout"));
            slot += 1;
            if let Some(gb) = gb {
                slot += 1;
                add_into(&mut grads.tensors[slot], gb.as_slice().expect("contiguous"));
                slot += 1;
            }
            if d.norm.is_some() {
                slot += 2;
            }
            if let Some(gl) = gl {
                add_into(&mut grads.tensors[slot], &gl);
                slot += 1;
            }
        }
        Ok(())
    }

    /// Width plan covering every layer (`None` for layers without ordering).
    pub fn width_plan(&self, fraction: f64) -> Result<WidthPlan> {
        let units: Vec<Option<(usize, usize, &DownhillParams)>> = self
            .layers
            .iter()
            .map(|l| {
                l.dense_core()
                    .and_then(|d| d.ordering.as_ref())
                    .map(|u| (u.groups.groups(), u.groups.n_base(), &u.posterior))
            })
            .collect();
        make_width_plan(&units, fraction)
    }

    fn check_plan(&self, plan: Option<&WidthPlan>) -> Result<()> {
        if let Some(p) = plan {
            if p.layers.len() != self.layers.len() {
                return Err(VndError::ShapeMismatch(format!(
                    "width plan for {} layers, model has {}",
                    p.layers.len(),
                    self.layers.len()
                )));
            }
        }
        Ok(())
    }

    /// Test-time forward; `plan = None` runs every layer unmasked.
    pub fn forward_eval<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        plan: Option<&WidthPlan>,
        mode: EvalMode,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        self.check_input(x)?;
        self.check_plan(plan)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let width = plan.and_then(|p| p.layers[i].as_ref());
            h = match (layer, h) {
                (Layer::Dense(d), Tensor::Flat(a)) => Tensor::Flat(d.forward_eval(&a, width, mode, rng)?),
                (Layer::Conv(c), Tensor::Image(a)) => Tensor::Image(c.forward_eval(&a, width, mode, rng)?),
                (Layer::Relu, t) => t.relu(),
                (Layer::Flatten, Tensor::Image(a)) => Tensor::Flat(flatten(a)),
                _ => return Err(VndError::ShapeMismatch("layer input kind".into())),
            };
        }
        h.into_flat()
    }

    pub fn has_norm(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.dense_core().is_some_and(|d| d.norm.is_some()))
    }

    /// Recomputes normalisation statistics at a width by pooling batch
    /// statistics over `batches` in mean mode. Parameters are untouched.
    pub fn recollect_norm(&mut self, batches: &[Tensor], plan: Option<&WidthPlan>) -> Result<()> {
        self.check_plan(plan)?;
        if !self.has_norm() || batches.is_empty() {
            return Ok(());
        }
        let mut accs: Vec<Option<NormAccumulator>> = self
            .layers
            .iter()
            .map(|l| {
                l.dense_core()
                    .and_then(|d| d.norm.as_ref())
                    .map(|n| NormAccumulator::new(n.units()))
            })
            .collect();
        for x in batches {
            self.check_input(x)?;
            let mut h = x.clone();
            for (i, layer) in self.layers.iter().enumerate() {
                let width = plan.and_then(|p| p.layers[i].as_ref());
                let acc = accs[i].as_mut();
                h = match (layer, h) {
                    (Layer::Dense(d), Tensor::Flat(a)) => Tensor::Flat(d.forward_collect(&a, width, acc)?),
                    (Layer::Conv(c), Tensor::Image(a)) => Tensor::Image(c.forward_collect(&a, width, acc)?),
                    (Layer::Relu, t) => t.relu(),
                    (Layer::Flatten, Tensor::Image(a)) => Tensor::Flat(flatten(a)),
                    _ => return Err(VndError::ShapeMismatch("layer input kind".into())),
                };
            }
        }
        for (layer, acc) in self.layers.iter_mut().zip(&accs) {
            if let (Some(d), Some(acc)) = (layer.dense_core_mut(), acc) {
                d.finish_collect(acc);
            }
        }
        Ok(())
    }

    /// Visits trainable tensors as `(name, shape, data)` in a fixed order.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(d) = l.dense_core() {
                d.visit_params(&format!("layers.{i}."), f);
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Some(d) = l.dense_core_mut() {
                d.visit_params_mut(&format!("layers.{i}."), f);
            }
        }
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(String, &[usize], &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            if let Some(d) = l.dense_core() {
                d.visit_buffers(&format!("layers.{i}."), f);
            }
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(String, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            if let Some(d) = l.dense_core_mut() {
                d.visit_buffers_mut(&format!("layers.{i}."), f);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, d| n += d.len());
        n
    }

    pub fn param_norm(&self) -> f64 {
        let mut s = 0.0;
        self.visit_params(&mut |_, _, d| s += d.iter().map(|v| v * v).sum::<f64>());
        s.sqrt()
    }

    /// L2 norm of each parametric layer's trainable parameters.
    pub fn layer_param_norms(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        self.visit_params(&mut |name, _, d| out.push((name, d.iter().map(|v| v * v).sum::<f64>().sqrt())));
        out
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn flatten(a: Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = a.dim();
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, c * h * w))
        .expect("contiguous")
}

/// Labels for the likelihood head.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Binary(Array2<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Binary(b) => b.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Binary(b) => Targets::Binary(b.select(Axis(0), idx)),
        }
    }
}

impl Head {
    /// Summed negative log-likelihood and its gradient w.r.t. the logits.
    pub fn nll(&self, logits: &Array2<f64>, targets: &Targets) -> Result<(f64, Array2<f64>)> {
        if targets.len() != logits.nrows() {
            return Err(VndError::ShapeMismatch(format!(
                "{} targets for {} outputs",
                targets.len(),
                logits.nrows()
            )));
        }
        match (self, targets) {
            (Head::Softmax, Targets::Classes(y)) => {
                let mut grad = Array2::zeros(logits.dim());
                let mut total = 0.0;
                for (r, (row, &label)) in logits.rows().into_iter().zip(y).enumerate() {
                    if label >= row.len() {
                        return Err(VndError::InvalidParameter(format!("label {label} out of range")));
                    }
                    let mut p = row.to_vec();
                    let lse = crate::math::softmax_in_place(&mut p);
                    total += lse - row[label];
                    for (c, pc) in p.iter().enumerate() {
                        grad[[r, c]] = pc - f64::from(u8::from(c == label));
                    }
                }
                Ok((total, grad))
            }
            (Head::Sigmoid, Targets::Binary(t)) => {
                if t.dim() != logits.dim() {
                    return Err(VndError::ShapeMismatch("binary targets shape".into()));
                }
                let mut total = 0.0;
                let grad = ndarray::Zip::from(logits).and(t).map_collect(|&l, &y| {
                    total += crate::math::softplus(l) - y * l;
                    crate::math::sigmoid(l) - y
                });
                Ok((total, grad))
            }
            _ => Err(VndError::InvalidParameter("targets do not match the head".into())),
        }
    }

    /// Output probabilities: softmax rows or per-output sigmoids.
    pub fn probs(&self, logits: &Array2<f64>) -> Array2<f64> {
        match self {
            Head::Softmax => {
                let mut out = logits.clone();
                for mut row in out.rows_mut() {
                    let mut v = row.to_vec();
                    crate::math::softmax_in_place(&mut v);
                    row.assign(&Array1::from(v));
                }
                out
            }
            Head::Sigmoid => logits.mapv(crate::math::sigmoid),
        }
    }
}
