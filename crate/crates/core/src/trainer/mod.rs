//! SGVB training: minibatch ELBO, momentum SGD, temperature annealing and
//! checkpoints.

mod checkpoint;

pub use checkpoint::{Checkpoint, MetaValue, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VndError};
use crate::exec::{stream_rng, VndRng};
use crate::model::{Grads, Head, Model, ModelSpec, Targets, Tensor, TrainPass};

/// Stream of the training seed used for shuffling and noise.
pub const TRAIN_STREAM: u64 = 0;
/// Stream of the training seed used for parameter initialisation.
pub const INIT_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Scale of the KL term.
    pub kappa: f64,
    pub lr: f64,
    /// Multiplies the learning rate every `lr_decay_every` epochs (0 disables).
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Fraction of all steps over which tau is annealed.
    pub tau_anneal_fraction: f64,
    /// Keep tau at `tau_start` for the whole run.
    pub freeze_tau: bool,
    pub seed: u64,
    /// Joint posterior samples per minibatch.
    pub posterior_samples: usize,
    /// Global gradient-norm clip (applied to the per-example gradient).
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kappa: 1e-5,
            lr: 0.1,
            lr_decay: 0.3,
            lr_decay_every: 40,
            momentum: 0.9,
            epochs: 200,
            batch_size: 100,
            tau_start: 1.0,
            tau_end: 0.03,
            tau_anneal_fraction: 0.6,
            freeze_tau: false,
            seed: 0,
            posterior_samples: 1,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, for a dataset of `n` examples.
    pub fn problems(&self, n: usize) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            out.push(format!("train.kappa must be >= 0, got {}", self.kappa));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(format!("train.lr must be > 0, got {}", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            out.push(format!("train.lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("train.momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.tau_end > 0.0 && self.tau_end <= self.tau_start && self.tau_start.is_finite()) {
            out.push(format!(
                "train.tau_end must satisfy 0 < tau_end <= tau_start, got {} and {}",
                self.tau_end, self.tau_start
            ));
        }
        if !(0.0..=1.0).contains(&self.tau_anneal_fraction) {
            out.push(format!(
                "train.tau_anneal_fraction must be in [0, 1], got {}",
                self.tau_anneal_fraction
            ));
        }
        if self.batch_size == 0 {
            out.push("train.batch_size must be >= 1".into());
        } else if n > 0 && self.batch_size > n {
            out.push(format!(
                "train.batch_size {} exceeds the {n} training examples",
                self.batch_size
            ));
        }
        if self.posterior_samples == 0 {
            out.push("train.posterior_samples must be >= 1".into());
        }
        if !(self.clip_norm > 0.0) {
            out.push(format!("train.clip_norm must be > 0, got {}", self.clip_norm));
        }
        out
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let p = self.problems(n);
        if p.is_empty() {
            Ok(())
        } else {
            Err(VndError::Config(p.join("; ")))
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }

    pub fn tau_schedule(&self, n: usize) -> TauSchedule {
        if self.freeze_tau {
            return TauSchedule {
                start: self.tau_start,
                end: self.tau_start,
                span: 0,
            };
        }
        let total = (self.epochs * self.steps_per_epoch(n)) as f64;
        TauSchedule {
            start: self.tau_start,
            end: self.tau_end,
            span: (self.tau_anneal_fraction * total).round() as u64,
        }
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        match epoch.checked_div(self.lr_decay_every) {
            Some(k) => self.lr * self.lr_decay.powi(k as i32),
            None => self.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
    /// Steps over which tau moves from `start` to `end`.
    pub span: u64,
}

/// Exponential interpolation from `start` to `end` over `span` steps, then
/// constant.
pub fn anneal_tau(step: u64, schedule: &TauSchedule) -> f64 {
    if step >= schedule.span {
        return schedule.end;
    }
    if step == 0 {
        return schedule.start;
    }
    let t = step as f64 / schedule.span as f64;
    (schedule.start.ln() + t * (schedule.end.ln() - schedule.start.ln()))
        .exp()
        .clamp(schedule.end, schedule.start)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    /// `-(N/M) sum_i log p(y_i | x_i, W, z)`.
    pub neg_log_lik: f64,
    pub kl_total: f64,
    /// `neg_log_lik + kappa * kl_total`.
    pub objective: f64,
}

/// Objective of one minibatch under one joint sample of all noises.
pub fn elbo_minibatch<R: Rng + ?Sized>(
    model: &Model,
    x: &Tensor,
    y: &Targets,
    n_total: usize,
    kappa: f64,
    rng: &mut R,
) -> Result<ElboTerms> {
    Ok(elbo_gradient(model, x, y, n_total, kappa, 1, rng)?.terms)
}

/// Result of [`elbo_gradient`].
#[derive(Debug, Clone)]
pub struct ElboStep {
    pub terms: ElboTerms,
    pub grads: Grads,
    /// Correct training predictions, averaged over the samples.
    pub correct: f64,
    /// Last forward pass, kept for normalisation statistics.
    pub pass: TrainPass,
}

/// ELBO terms and the gradient of the objective, averaged over `samples`
/// joint draws.
pub fn elbo_gradient<R: Rng + ?Sized>(
    model: &Model,
    x: &Tensor,
    y: &Targets,
    n_total: usize,
    kappa: f64,
    samples: usize,
    rng: &mut R,
) -> Result<ElboStep> {
    let m = x.rows();
    if m == 0 || y.len() != m {
        return Err(VndError::ShapeMismatch(format!(
            "batch of {m} inputs and {} targets",
            y.len()
        )));
    }
    let samples = samples.max(1);
    let scale = n_total as f64 / m as f64;
    let mut grads = Grads::zeros_like(model);
    let mut nll = 0.0;
    let mut correct = 0.0;
    let mut last = None;
    for _ in 0..samples {
        let pass = model.forward_train(x, rng)?;
        let (v, mut g) = model.spec.head.nll(&pass.output, y)?;
        g *= scale / samples as f64;
        nll += scale * v / samples as f64;
        correct += count_correct(model.spec.head, &pass.output, y) / samples as f64;
        grads.add_assign(&model.backward(&pass, &g)?);
        last = Some(pass);
    }
    let kl = model.kl()?;
    let kl_total = kl.total();
    model.kl_backward(kappa, &mut grads)?;
    let terms = ElboTerms {
        neg_log_lik: nll,
        kl_total,
        objective: nll + kappa * kl_total,
    };
    if !terms.objective.is_finite() {
        let layers: Vec<String> = kl
            .layers
            .iter()
            .map(|(i, k)| format!("layer {i}: kl {:.4e}", k.total()))
            .collect();
        let norms: Vec<String> = model
            .layer_param_norms()
            .into_iter()
            .filter(|(_, n)| !n.is_finite() || *n > 1e6)
            .map(|(name, n)| format!("{name} norm {n:.4e}"))
            .collect();
        return Err(VndError::Numerical(format!(
            "non-finite objective (nll {nll}, kl {kl_total}); {}; offending parameters: [{}]",
            layers.join(", "),
            norms.join(", ")
        )));
    }
    Ok(ElboStep {
        terms,
        grads,
        correct,
        pass: last.expect("at least one sample"),
    })
}

fn count_correct(head: Head, logits: &Array2<f64>, y: &Targets) -> f64 {
    match (head, y) {
        (Head::Softmax, Targets::Classes(labels)) => logits
            .rows()
            .into_iter()
            .zip(labels)
            .filter(|(row, &l)| argmax(row.iter().copied()) == l)
            .count() as f64,
        (Head::Sigmoid, Targets::Binary(t)) => {
            let hits = ndarray::Zip::from(logits)
                .and(t)
                .fold(0usize, |acc, &l, &y| acc + usize::from((l > 0.0) == (y > 0.5)));
            hits as f64 / t.ncols().max(1) as f64
        }
        _ => 0.0,
    }
}

pub(crate) fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in xs.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub objective: f64,
    pub kl: f64,
    pub acc: f64,
    pub tau: f64,
}

pub const HISTORY_HEADER: &str = "epoch,objective,kl,acc,tau";

/// History as CSV; `echo` lines are written first, each prefixed by `# `.
pub fn history_csv(history: &[HistoryRow], echo: &str) -> String {
    let mut out = crate::metrics::echo_header(echo);
    out.push_str(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.objective, r.kl, r.acc, r.tau));
    }
    out
}

/// Stateful training loop. The update order is strictly sequential, so runs
/// are bitwise reproducible for a given seed.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub history: Vec<HistoryRow>,
    velocity: Grads,
    step: u64,
    epoch: usize,
    n_train: usize,
    rng: VndRng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, n_train: usize) -> Result<Self> {
        if n_train == 0 {
            return Err(VndError::InvalidParameter("empty training set".into()));
        }
        config.validate(n_train)?;
        Ok(Self {
            velocity: Grads::zeros_like(&model),
            rng: stream_rng(config.seed, TRAIN_STREAM),
            model,
            config,
            history: Vec::new(),
            step: 0,
            epoch: 0,
            n_train,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn check_data(&self, x: &Tensor, y: &Targets) -> Result<()> {
        if x.rows() != self.n_train || y.len() != self.n_train {
            return Err(VndError::ShapeMismatch(format!(
                "trainer set up for {} examples, got {} inputs and {} targets",
                self.n_train,
                x.rows(),
                y.len()
            )));
        }
        Ok(())
    }

    /// One pass over the shuffled training set.
    pub fn run_epoch(&mut self, x: &Tensor, y: &Targets) -> Result<HistoryRow> {
        self.check_data(x, y)?;
        let n = self.n_train;
        let schedule = self.config.tau_schedule(n);
        let lr = self.config.lr_at_epoch(self.epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut objective = 0.0;
        let mut correct = 0.0;
        let mut batches = 0;
        let mut tau = self.model.tau();
        for idx in order.chunks(self.config.batch_size) {
            tau = anneal_tau(self.step, &schedule);
            self.model.set_tau(tau)?;
            let (xb, yb) = (x.select(idx), y.select(idx));
            let ElboStep {
                terms,
                mut grads,
                correct: c,
                pass,
            } = elbo_gradient(
                &self.model,
                &xb,
                &yb,
                n,
                self.config.kappa,
                self.config.posterior_samples,
                &mut self.rng,
            )?;
            self.model.update_running_stats(&pass);
            grads.scale(1.0 / n as f64);
            let norm = grads.norm();
            if !norm.is_finite() {
                return Err(VndError::Numerical(format!(
                    "non-finite gradient at step {}",
                    self.step
                )));
            }
            if norm > self.config.clip_norm {
                grads.scale(self.config.clip_norm / norm);
            }
            let mu = self.config.momentum;
            for (v, g) in self.velocity.tensors.iter_mut().zip(&grads.tensors) {
                v.iter_mut().zip(g).for_each(|(v, g)| *v = mu * *v + g);
            }
            let velocity = &self.velocity.tensors;
            let mut slot = 0;
            self.model.visit_params_mut(&mut |_, p| {
                p.iter_mut().zip(&velocity[slot]).for_each(|(p, v)| *p -= lr * v);
                slot += 1;
            });
            self.model.project();
            objective += terms.objective;
            correct += c;
            batches += 1;
            self.step += 1;
        }
        self.epoch += 1;
        let row = HistoryRow {
            epoch: self.epoch,
            objective: objective / batches as f64,
            kl: self.model.kl()?.total(),
            acc: correct / n as f64,
            tau,
        };
        self.history.push(row);
        Ok(row)
    }

    /// Trains until `config.epochs` epochs have run in total.
    pub fn fit(&mut self, x: &Tensor, y: &Targets) -> Result<()> {
        while self.epoch < self.config.epochs {
            self.run_epoch(x, y)?;
        }
        Ok(())
    }

    pub fn history_csv(&self, echo: &str) -> String {
        history_csv(&self.history, echo)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::default();
        let spec = serde_json::to_string(&self.model.spec).expect("spec serialises");
        let config = serde_json::to_string(&self.config).expect("config serialises");
        c.meta.insert("model_spec".into(), MetaValue::Str(spec));
        c.meta.insert("train_config".into(), MetaValue::Str(config));
        c.meta.insert("step".into(), MetaValue::U64(self.step));
        c.meta.insert("epoch".into(), MetaValue::U64(self.epoch as u64));
        c.meta.insert("n_train".into(), MetaValue::U64(self.n_train as u64));
        c.meta.insert("tau".into(), MetaValue::F64(self.model.tau()));
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        c.meta.insert("rng.seed".into(), MetaValue::Str(seed));
        c.meta
            .insert("rng.stream".into(), MetaValue::U64(self.rng.get_stream()));
        c.meta.insert(
            "rng.word_pos".into(),
            MetaValue::Str(self.rng.get_word_pos().to_string()),
        );
        self.model
            .visit_params(&mut |name, shape, data| c.push_tensor(format!("param:{name}"), shape, data));
        self.model
            .visit_buffers(&mut |name, shape, data| c.push_tensor(format!("buffer:{name}"), shape, data));
        let mut slot = 0;
        let velocity = &self.velocity.tensors;
        let mut vel = Vec::new();
        self.model.visit_params(&mut |name, shape, _| {
            vel.push((format!("velocity:{name}"), shape.to_vec(), velocity[slot].clone()));
            slot += 1;
        });
        for (name, shape, data) in vel {
            c.push_tensor(name, &shape, &data);
        }
        let hist: Vec<f64> = self
            .history
            .iter()
            .flat_map(|r| [r.epoch as f64, r.objective, r.kl, r.acc, r.tau])
            .collect();
        c.push_tensor("history", &[self.history.len(), 5], &hist);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let spec: ModelSpec =
            serde_json::from_str(c.str("model_spec")?).map_err(|e| VndError::Format(format!("model spec: {e}")))?;
        let config: TrainConfig =
            serde_json::from_str(c.str("train_config")?).map_err(|e| VndError::Format(format!("train config: {e}")))?;
        let mut model = Model::new(spec, &mut stream_rng(0, 0))?;
        restore_model(&mut model, c)?;
        model.set_tau(c.f64("tau")?)?;
        let mut velocity = Grads::zeros_like(&model);
        let mut names = Vec::new();
        model.visit_params(&mut |name, _, _| names.push(name));
        for (slot, name) in names.iter().enumerate() {
            let t = c.tensor(&format!("velocity:{name}"))?;
            if t.data.len() != velocity.tensors[slot].len() {
                return Err(VndError::Format(format!("velocity `{name}` has the wrong length")));
            }
            velocity.tensors[slot].copy_from_slice(&t.data);
        }
        let seed_hex = c.str("rng.seed")?;
        let mut seed = [0u8; 32];
        if seed_hex.len() != 64 {
            return Err(VndError::Format("rng seed must be 64 hex digits".into()));
        }
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|_| VndError::Format("rng seed is not hex".into()))?;
        }
        let mut rng = VndRng::from_seed(seed);
        rng.set_stream(c.u64("rng.stream")?);
        rng.set_word_pos(
            c.str("rng.word_pos")?
                .parse::<u128>()
                .map_err(|_| VndError::Format("rng word position".into()))?,
        );
        let hist = c.tensor("history")?;
        if hist.shape.len() != 2 || hist.shape[1] != 5 {
            return Err(VndError::Format("history tensor must be E x 5".into()));
        }
        let history = hist
            .data
            .chunks_exact(5)
            .map(|r| HistoryRow {
                epoch: r[0] as usize,
                objective: r[1],
                kl: r[2],
                acc: r[3],
                tau: r[4],
            })
            .collect();
        Ok(Self {
            model,
            config,
            history,
            velocity,
            step: c.u64("step")?,
            epoch: c.u64("epoch")? as usize,
            n_train: c.u64("n_train")? as usize,
            rng,
        })
    }
}

/// Copies `param:` and `buffer:` tensors of a checkpoint into `model`.
pub fn restore_model(model: &mut Model, c: &Checkpoint) -> Result<()> {
    let mut err = None;
    model.visit_params_mut(&mut |name, d| {
        if err.is_some() {
            return;
        }
        match c.tensor(&format!("param:{name}")) {
            Ok(t) if t.data.len() == d.len() => d.copy_from_slice(&t.data),
            Ok(_) => err = Some(VndError::Format(format!("parameter `{name}` has the wrong length"))),
            Err(e) => err = Some(e),
        }
    });
    model.visit_buffers_mut(&mut |name, d| {
        if err.is_some() {
            return;
        }
        match c.tensor(&format!("buffer:{name}")) {
            Ok(t) if t.data.len() == d.len() => d.copy_from_slice(&t.data),
            Ok(_) => err = Some(VndError::Format(format!("buffer `{name}` has the wrong length"))),
            Err(e) => err = Some(e),
        }
    });
    err.map_or(Ok(()), Err)
}

/// Model rebuilt from a checkpoint (spec echo plus parameters).
pub fn model_from_checkpoint(c: &Checkpoint) -> Result<Model> {
    Ok(Trainer::from_checkpoint(c)?.model)
}

/// Trains a fresh copy of `model` for `config.epochs` epochs.
pub fn train(model: Model, x: &Tensor, y: &Targets, config: &TrainConfig) -> Result<(Model, Vec<HistoryRow>)> {
    let mut t = Trainer::new(model, config.clone(), x.rows())?;
    t.fit(x, y)?;
    Ok((t.model, t.history))
}
