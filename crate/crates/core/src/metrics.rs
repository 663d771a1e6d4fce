//! Test-time evaluation: width-truncated prediction, calibration, OOD
//! detection and segmentation-diversity metrics.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Result, VndError};
use crate::exec::{map_indexed, stream_rng, Parallelism};
use crate::layers::EvalMode;
use crate::model::{Head, Model, Tensor};
use crate::ordering::WidthPlan;
use crate::trainer::argmax;

/// Averaged class probabilities over posterior samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveOutput {
    pub probs: Array2<f64>,
    /// Per-sample probabilities, in sample order.
    pub samples: Vec<Array2<f64>>,
}

/// Averages head probabilities over `samples` forward passes. Sample `s`
/// draws from stream `s` of `seed`.
pub fn predict(
    model: &Model,
    x: &Tensor,
    plan: Option<&WidthPlan>,
    samples: usize,
    mode: EvalMode,
    seed: u64,
    par: Parallelism,
) -> Result<PredictiveOutput> {
    if samples == 0 {
        return Err(VndError::InvalidParameter("need at least one posterior sample".into()));
    }
    let outs = map_indexed(samples, par, |s| {
        let logits = model.forward_eval(x, plan, mode, &mut stream_rng(seed, s as u64))?;
        Ok(model.spec.head.probs(&logits))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut probs = Array2::zeros(outs[0].dim());
    for p in &outs {
        probs += p;
    }
    probs /= samples as f64;
    if model.spec.head == Head::Softmax {
        // Renormalise away accumulated rounding so rows are exact simplices.
        for mut row in probs.rows_mut() {
            let s: f64 = row.sum();
            row /= s;
        }
    }
    Ok(PredictiveOutput { probs, samples: outs })
}

/// Compensated summation.
fn neumaier(xs: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_probs(probs: &Array2<f64>, labels: &[usize]) -> Result<()> {
    if probs.nrows() == 0 {
        return Err(VndError::InvalidParameter("no predictions".into()));
    }
    if probs.nrows() != labels.len() {
        return Err(VndError::ShapeMismatch(format!(
            "{} predictions for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l >= probs.ncols()) {
        return Err(VndError::InvalidParameter("label outside the class range".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub correct: usize,
    pub confidence_sum: f64,
}

impl ReliabilityBin {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }

    pub fn centre(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }
}

/// Max-probability confidences binned into `n_bins` equal-width bins; bin
/// `b` holds confidences in `[b/n, (b+1)/n)` and the last bin includes 1.
pub fn reliability(probs: &Array2<f64>, labels: &[usize], n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    check_probs(probs, labels)?;
    if n_bins == 0 {
        return Err(VndError::InvalidParameter("need at least one bin".into()));
    }
    let mut members: Vec<Vec<(f64, bool)>> = vec![Vec::new(); n_bins];
    for (row, &l) in probs.rows().into_iter().zip(labels) {
        let pred = argmax(row.iter().copied());
        let conf = row[pred];
        let b = ((conf * n_bins as f64).floor() as usize).min(n_bins - 1);
        members[b].push((conf, pred == l));
    }
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(b, m)| ReliabilityBin {
            lower: b as f64 / n_bins as f64,
            upper: (b + 1) as f64 / n_bins as f64,
            count: m.len(),
            correct: m.iter().filter(|(_, c)| *c).count(),
            confidence_sum: neumaier(m.iter().map(|(c, _)| *c)),
        })
        .collect())
}

/// `sum_b (|b| / n) |acc_b - conf_b|`.
pub fn ece(probs: &Array2<f64>, labels: &[usize], n_bins: usize) -> Result<f64> {
    let bins = reliability(probs, labels, n_bins)?;
    let n = labels.len() as f64;
    // |b| * |acc_b - conf_b| = |correct_b - sum of confidences|
    Ok(bins
        .iter()
        .map(|b| (b.correct as f64 - b.confidence_sum).abs())
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OodScore {
    /// `1 - max_c p_c`.
    #[default]
    MaxProb,
    /// Predictive entropy in nats.
    Entropy,
}

impl OodScore {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max_prob" => Ok(OodScore::MaxProb),
            "entropy" => Ok(OodScore::Entropy),
            _ => Err(VndError::Config(format!("unknown OOD score `{s}` (max_prob|entropy)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OodScore::MaxProb => "max_prob",
            OodScore::Entropy => "entropy",
        }
    }
}

/// Per-example OOD score; higher means more likely out of distribution.
pub fn ood_scores(probs: &Array2<f64>, kind: OodScore) -> Vec<f64> {
    probs
        .rows()
        .into_iter()
        .map(|row| match kind {
            OodScore::MaxProb => 1.0 - row.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            OodScore::Entropy => -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>(),
        })
        .collect()
}

fn check_scores(pos: &[f64], neg: &[f64]) -> Result<()> {
    if pos.is_empty() || neg.is_empty() {
        return Err(VndError::InvalidParameter(
            "both classes need at least one score".into(),
        ));
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(VndError::InvalidParameter("NaN score".into()));
    }
    Ok(())
}

/// Area under the ROC curve with `pos` as the positive class, via the rank
/// statistic with averaged ranks for ties.
pub fn auroc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Area under the precision-recall curve (`pos` positive) by step
/// integration: `sum_k (R_k - R_{k-1}) P_k` over distinct thresholds.
pub fn aupr(pos: &[f64], neg: &[f64]) -> Result<f64> {
    check_scores(pos, neg)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let np = pos.len() as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut prev_recall = 0.0;
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        let recall = tp / np;
        area += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// Intersection over union; two empty masks have IoU 1.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(VndError::ShapeMismatch(format!(
            "masks of {} and {} pixels",
            a.len(),
            b.len()
        )));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

fn mean_distance_within(set: &[Vec<bool>]) -> Result<f64> {
    let n = set.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += 1.0 - iou(&set[i], &set[j])?;
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Generalised energy distance with `d = 1 - IoU`:
/// `sqrt(max(0, 2 E d(a, b) - E d(a, a') - E d(b, b')))`. Within-set terms
/// average over unordered distinct pairs.
pub fn ged(a: &[Vec<bool>], b: &[Vec<bool>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(VndError::InvalidParameter("GED needs nonempty sets".into()));
    }
    let len = a[0].len();
    if a.iter().chain(b).any(|m| m.len() != len) {
        return Err(VndError::ShapeMismatch("masks differ in shape".into()));
    }
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += 1.0 - iou(x, y)?;
        }
    }
    cross /= (a.len() * b.len()) as f64;
    let v = 2.0 * cross - mean_distance_within(a)? - mean_distance_within(b)?;
    Ok(v.max(0.0).sqrt())
}

/// Batches of at most `batch` rows, at most `max_batches` of them, in order.
pub fn recollect_batches(x: &Tensor, batch: usize, max_batches: usize) -> Vec<Tensor> {
    let n = x.rows();
    let idx: Vec<usize> = (0..n).collect();
    idx.chunks(batch.max(1))
        .take(max_batches)
        .map(|c| x.select(c))
        .collect()
}

/// Copy of `model` whose normalisation statistics are recomputed at the
/// plan's width from `batches`.
pub fn bn_recollect(model: &Model, batches: &[Tensor], plan: Option<&WidthPlan>) -> Result<Model> {
    let mut out = model.clone();
    out.recollect_norm(batches, plan)?;
    Ok(out)
}

pub fn accuracy(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    check_probs(probs, labels)?;
    let hits = probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(r, &l)| argmax(r.iter().copied()) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean negative log-probability of the labels.
pub fn mean_nll(probs: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    check_probs(probs, labels)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs[[i, l]].max(f64::MIN_POSITIVE).ln())
        .sum::<f64>()
        / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepConfig {
    pub widths: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Posterior samples per prediction.
    pub samples: usize,
    pub mode: EvalModeName,
    pub ood_score: OodScore,
    pub ece_bins: usize,
    pub recollect_batch: usize,
    pub recollect_batches: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            widths: vec![0.25, 0.5, 0.75, 1.0],
            seeds: vec![0, 1, 2],
            samples: 6,
            mode: EvalModeName::Sample,
            ood_score: OodScore::MaxProb,
            ece_bins: 15,
            recollect_batch: 512,
            recollect_batches: 2,
        }
    }
}

/// Serialisable mirror of [`EvalMode`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModeName {
    Mean,
    Sample,
}

impl EvalModeName {
    pub fn mode(self) -> EvalMode {
        match self {
            EvalModeName::Mean => EvalMode::Mean,
            EvalModeName::Sample => EvalMode::Sample,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(EvalModeName::Mean),
            "sample" => Ok(EvalModeName::Sample),
            _ => Err(VndError::Config(format!("unknown eval mode `{s}` (mean|sample)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub width: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub ece: f64,
    pub aupr: f64,
    pub auroc: f64,
    pub nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WidthSummary {
    pub width: f64,
    pub mean: MetricSet,
    pub std: MetricSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MetricSet {
    pub accuracy: f64,
    pub ece: f64,
    pub aupr: f64,
    pub auroc: f64,
    pub nll: f64,
}

/// Evaluation data for a sweep.
#[derive(Debug, Clone, Copy)]
pub struct SweepData<'a> {
    /// Inputs used for normalisation-statistics recollection.
    pub recollect: &'a Tensor,
    pub test: &'a Tensor,
    pub test_labels: &'a [usize],
    pub ood: Option<&'a Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WidthSweepReport {
    pub rows: Vec<SweepRow>,
    pub config: SweepConfig,
    /// Per-width reliability bins of the first seed.
    #[serde(skip)]
    pub reliability: Vec<(f64, Vec<ReliabilityBin>)>,
}

pub const SWEEP_HEADER: &str = "width,seed,accuracy,ece,aupr,auroc,nll";
pub const RELIABILITY_HEADER: &str = "confidence_bin,accuracy,count";

/// Echo lines, each written as `# line`.
pub fn echo_header(echo: &str) -> String {
    echo.lines()
        .map(|l| {
            if l.is_empty() {
                "#\n".to_string()
            } else {
                format!("# {l}\n")
            }
        })
        .collect()
}

impl WidthSweepReport {
    pub fn to_csv(&self, echo: &str) -> String {
        let mut out = echo_header(echo);
        out.push_str(SWEEP_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.width, r.seed, r.accuracy, r.ece, r.aupr, r.auroc, r.nll
            ));
        }
        out
    }

    pub fn reliability_csv(&self, width: f64, echo: &str) -> Option<String> {
        let bins = &self.reliability.iter().find(|(w, _)| *w == width)?.1;
        let mut out = echo_header(echo);
        out.push_str(&format!("# width = {width}\n"));
        out.push_str(RELIABILITY_HEADER);
        out.push('\n');
        for b in bins {
            out.push_str(&format!("{},{},{}\n", b.centre(), b.accuracy(), b.count));
        }
        Some(out)
    }

    pub fn summary(&self) -> Vec<WidthSummary> {
        self.config
            .widths
            .iter()
            .map(|&w| {
                let rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.width == w).collect();
                let stat = |f: &dyn Fn(&SweepRow) -> f64| {
                    let n = rows.len() as f64;
                    let mean = rows.iter().map(|r| f(r)).sum::<f64>() / n;
                    let var = if rows.len() > 1 {
                        rows.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / (n - 1.0)
                    } else {
                        0.0
                    };
                    (mean, var.sqrt())
                };
                let (a, sa) = stat(&|r| r.accuracy);
                let (e, se) = stat(&|r| r.ece);
                let (p, sp) = stat(&|r| r.aupr);
                let (o, so) = stat(&|r| r.auroc);
                let (l, sl) = stat(&|r| r.nll);
                WidthSummary {
                    width: w,
                    mean: MetricSet {
                        accuracy: a,
                        ece: e,
                        aupr: p,
                        auroc: o,
                        nll: l,
                    },
                    std: MetricSet {
                        accuracy: sa,
                        ece: se,
                        aupr: sp,
                        auroc: so,
                        nll: sl,
                    },
                }
            })
            .collect()
    }

    /// JSON with per-width means and standard deviations plus `echo`.
    pub fn summary_json(&self, echo: &serde_json::Value) -> String {
        let v = serde_json::json!({
            "widths": self.summary(),
            "config": self.config,
            "ood_score": self.config.ood_score.name(),
            "echo": echo,
        });
        serde_json::to_string_pretty(&v).expect("serialisable")
    }
}

/// One evaluation at a fixed width: recollect statistics, predict, score.
pub fn evaluate_width(
    model: &Model,
    data: &SweepData<'_>,
    width: f64,
    seed: u64,
    config: &SweepConfig,
) -> Result<(SweepRow, Vec<ReliabilityBin>)> {
    let plan = model.width_plan(width)?;
    let batches = recollect_batches(data.recollect, config.recollect_batch, config.recollect_batches);
    let model = bn_recollect(model, &batches, Some(&plan))?;
    let mode = config.mode.mode();
    let id = predict(
        &model,
        data.test,
        Some(&plan),
        config.samples,
        mode,
        seed,
        Parallelism::Sequential,
    )?;
    let labels = data.test_labels;
    let (aupr_v, auroc_v) = match data.ood {
        Some(ood) => {
            let out = predict(
                &model,
                ood,
                Some(&plan),
                config.samples,
                mode,
                seed,
                Parallelism::Sequential,
            )?;
            let pos = ood_scores(&out.probs, config.ood_score);
            let neg = ood_scores(&id.probs, config.ood_score);
            (aupr(&pos, &neg)?, auroc(&pos, &neg)?)
        }
        None => (f64::NAN, f64::NAN),
    };
    Ok((
        SweepRow {
            width,
            seed,
            accuracy: accuracy(&id.probs, labels)?,
            ece: ece(&id.probs, labels, config.ece_bins)?,
            aupr: aupr_v,
            auroc: auroc_v,
            nll: mean_nll(&id.probs, labels)?,
        },
        reliability(&id.probs, labels, config.ece_bins)?,
    ))
}

/// Evaluates every `(width, seed)` pair; rows are ordered by width, then seed.
pub fn width_sweep(
    model: &Model,
    data: &SweepData<'_>,
    config: &SweepConfig,
    par: Parallelism,
) -> Result<WidthSweepReport> {
    if config.widths.is_empty() || config.seeds.is_empty() {
        return Err(VndError::InvalidParameter("sweep needs widths and seeds".into()));
    }
    if config.widths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(VndError::InvalidParameter("widths must be strictly increasing".into()));
    }
    if model.spec.head != Head::Softmax {
        return Err(VndError::InvalidParameter("width sweep needs a softmax head".into()));
    }
    let pairs: Vec<(f64, u64)> = config
        .widths
        .iter()
        .flat_map(|&w| config.seeds.iter().map(move |&s| (w, s)))
        .collect();
    let results = map_indexed(pairs.len(), par, |i| {
        evaluate_width(model, data, pairs[i].0, pairs[i].1, config)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let first_seed = config.seeds[0];
    let reliability = results
        .iter()
        .filter(|(r, _)| r.seed == first_seed)
        .map(|(r, b)| (r.width, b.clone()))
        .collect();
    Ok(WidthSweepReport {
        rows: results.into_iter().map(|(r, _)| r).collect(),
        config: config.clone(),
        reliability,
    })
}
