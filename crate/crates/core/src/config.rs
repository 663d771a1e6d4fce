//! Experiment configuration: flat INI sections with `key = value` lines.
//!
//! Keys before the first section header belong to the top level (`seed`,
//! `out_dir`). `#` and `;` start comment lines. Unknown keys are rejected and
//! every problem is reported at once.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{
    checkerboard_ood, gaussian_blobs, idx_dataset, import_csv, read_idx, two_moons, DatasetHandle, Split,
};
use crate::error::{Result, VndError};
use crate::metrics::{EvalModeName, OodScore, SweepConfig};
use crate::model::{Grouping, Head, InputShape, LayerSpec, ModelSpec};
use crate::trainer::TrainConfig;

/// Raw sections; the top level is the empty section name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Ini {
    pub sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Ini {
    pub fn parse(text: &str) -> Result<Self> {
        let mut ini = Ini::default();
        let mut section = String::new();
        ini.sections.entry(section.clone()).or_default();
        let mut errors = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                match name.strip_suffix(']') {
                    Some(n) if !n.trim().is_empty() => {
                        section = n.trim().to_string();
                        ini.sections.entry(section.clone()).or_default();
                    }
                    _ => errors.push(format!("line {}: malformed section header `{line}`", no + 1)),
                }
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {}: expected `key = value`, got `{line}`", no + 1));
                continue;
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                errors.push(format!("line {}: empty key", no + 1));
                continue;
            }
            let entries = ini.sections.entry(section.clone()).or_default();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                errors.push(format!(
                    "line {}: duplicate key `{}`",
                    no + 1,
                    qualified(&section, &key)
                ));
            }
        }
        if errors.is_empty() {
            Ok(ini)
        } else {
            Err(VndError::Config(errors.join("\n")))
        }
    }

    /// Applies a `section.key=value` (or top-level `key=value`) override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| VndError::Config(format!("override `{assignment}` is not `section.key=value`")))?;
        let (section, key) = match path.trim().split_once('.') {
            Some((s, k)) => (s.trim(), k.trim()),
            None => ("", path.trim()),
        };
        if key.is_empty() {
            return Err(VndError::Config(format!("override `{assignment}` has an empty key")));
        }
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(top) = self.sections.get("") {
            for (k, v) in top {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        for (name, entries) in &self.sections {
            if name.is_empty() {
                continue;
            }
            out.push_str(&format!("\n[{name}]\n"));
            for (k, v) in entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

/// Typed reads that remember which keys were used and collect errors.
struct Fields<'a> {
    ini: &'a Ini,
    used: BTreeMap<(String, String), ()>,
    errors: Vec<String>,
}

impl<'a> Fields<'a> {
    fn new(ini: &'a Ini) -> Self {
        Self {
            ini,
            used: BTreeMap::new(),
            errors: Vec::new(),
        }
    }

    fn raw(&mut self, section: &str, key: &str) -> Option<&'a str> {
        self.used.insert((section.to_string(), key.to_string()), ());
        self.ini.get(section, key)
    }

    fn parse<T: FromStr>(&mut self, section: &str, key: &str, text: &str) -> Option<T>
    where
        T::Err: Display,
    {
        match text.parse::<T>() {
            Ok(v) => Some(v),
            Err(e) => {
                self.errors
                    .push(format!("{}: cannot parse `{text}`: {e}", qualified(section, key)));
                None
            }
        }
    }

    fn or<T: FromStr>(&mut self, section: &str, key: &str, default: T) -> T
    where
        T::Err: Display,
    {
        match self.raw(section, key) {
            Some(text) => self.parse(section, key, text).unwrap_or(default),
            None => default,
        }
    }

    fn required<T: FromStr>(&mut self, section: &str, key: &str) -> Option<T>
    where
        T::Err: Display,
    {
        match self.raw(section, key) {
            Some(text) => self.parse(section, key, text),
            None => {
                self.errors
                    .push(format!("missing required key `{}`", qualified(section, key)));
                None
            }
        }
    }

    fn optional<T: FromStr>(&mut self, section: &str, key: &str) -> Option<T>
    where
        T::Err: Display,
    {
        let text = self.raw(section, key)?;
        self.parse(section, key, text)
    }

    fn list<T: FromStr>(&mut self, section: &str, key: &str, default: Vec<T>) -> Vec<T>
    where
        T::Err: Display,
    {
        let Some(text) = self.raw(section, key) else {
            return default;
        };
        if text.trim().is_empty() {
            return Vec::new();
        }
        let mut out = Vec::new();
        for item in text.split(',') {
            match self.parse(section, key, item.trim()) {
                Some(v) => out.push(v),
                None => return default,
            }
        }
        out
    }

    fn unknown_keys(&mut self) {
        for (section, entries) in &self.ini.sections {
            for key in entries.keys() {
                if !self.used.contains_key(&(section.clone(), key.clone())) {
                    self.errors.push(format!("unknown key `{}`", qualified(section, key)));
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Mlp,
    Conv,
}

impl FromStr for Arch {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "conv" => Ok(Arch::Conv),
            _ => Err("expected mlp or conv".into()),
        }
    }
}

impl Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Mlp => "mlp",
            Arch::Conv => "conv",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub arch: Arch,
    /// Dense hidden widths (after the conv stack for `conv`).
    pub hidden: Vec<usize>,
    /// Conv channel counts (3x3, stride 1, padding 1) for `conv`.
    pub channels: Vec<usize>,
    pub groups: usize,
    pub n_base: usize,
    pub norm: bool,
    pub first_log_alpha: f64,
    pub log_alpha: f64,
    pub init_logit: f64,
    pub prior_keep: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: Arch::Mlp,
            hidden: vec![64, 64],
            channels: Vec::new(),
            groups: 8,
            n_base: 2,
            norm: false,
            first_log_alpha: -8.0,
            log_alpha: -1.0,
            init_logit: 3.0,
            prior_keep: 0.95,
        }
    }
}

impl ModelSection {
    /// Builds the architecture for data of the given per-example shape.
    pub fn spec(&self, input: InputShape, classes: usize, tau: f64) -> Result<ModelSpec> {
        let grouping = Some(Grouping {
            groups: self.groups,
            n_base: self.n_base,
        });
        let mut layers = Vec::new();
        if self.arch == Arch::Conv {
            if !matches!(input, InputShape::Image { .. }) {
                return Err(VndError::Config("model.arch = conv needs image data".into()));
            }
            for &c in &self.channels {
                layers.push(LayerSpec::Conv {
                    channels: c,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                    bias: true,
                    norm: self.norm,
                    grouping,
                });
                layers.push(LayerSpec::Relu);
            }
        }
        if matches!(input, InputShape::Image { .. }) {
            layers.push(LayerSpec::Flatten);
        }
        for &h in &self.hidden {
            layers.push(LayerSpec::Dense {
                units: h,
                bias: true,
                norm: self.norm,
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
        let spec = ModelSpec {
            input,
            layers,
            head: Head::Softmax,
            first_log_alpha: self.first_log_alpha,
            log_alpha: self.log_alpha,
            init_logit: self.init_logit,
            prior_keep: self.prior_keep,
            tau,
        };
        spec.validate().map_err(|e| VndError::Config(format!("model: {e}")))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    File,
    Csv,
    Idx,
}

impl FromStr for DataSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "file" => Ok(DataSource::File),
            "csv" => Ok(DataSource::Csv),
            "idx" => Ok(DataSource::Idx),
            _ => Err("expected synthetic, file, csv or idx".into()),
        }
    }
}

impl Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataSource::Synthetic => "synthetic",
            DataSource::File => "file",
            DataSource::Csv => "csv",
            DataSource::Idx => "idx",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    TwoMoons,
    GaussianBlobs,
}

impl FromStr for SyntheticKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "two_moons" => Ok(SyntheticKind::TwoMoons),
            "gaussian_blobs" => Ok(SyntheticKind::GaussianBlobs),
            _ => Err("expected two_moons or gaussian_blobs".into()),
        }
    }
}

impl Display for SyntheticKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SyntheticKind::TwoMoons => "two_moons",
            SyntheticKind::GaussianBlobs => "gaussian_blobs",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSection {
    pub source: DataSource,
    pub kind: SyntheticKind,
    pub n: usize,
    pub n_test: usize,
    pub noise: f64,
    pub classes: usize,
    /// Checkerboard OOD points added to synthetic data (0 disables).
    pub n_ood: usize,
    /// Dataset file (`file`, `csv`) or IDX images (`idx`).
    pub path: Option<PathBuf>,
    /// IDX labels.
    pub labels: Option<PathBuf>,
    /// Extra dataset whose examples are all treated as OOD.
    pub ood_path: Option<PathBuf>,
    /// Keep only the first `take` examples (`idx`).
    pub take: Option<usize>,
    /// Fraction of `idx` examples moved to the test split (taken from the end).
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            kind: SyntheticKind::TwoMoons,
            n: 1000,
            n_test: 1000,
            noise: 0.1,
            classes: 3,
            n_ood: 500,
            path: None,
            labels: None,
            ood_path: None,
            take: None,
            test_fraction: 0.2,
        }
    }
}

impl DataSection {
    /// Loads or generates the dataset with train/test/ood splits.
    pub fn load(&self, seed: u64) -> Result<DatasetHandle> {
        let mut parts = match self.source {
            DataSource::Synthetic => {
                let gen = |n: usize, stream: u64, split: Split| match self.kind {
                    SyntheticKind::TwoMoons => two_moons(n, self.noise, seed, stream, split),
                    SyntheticKind::GaussianBlobs => gaussian_blobs(n, self.classes, self.noise, seed, stream, split),
                };
                let mut parts = vec![gen(self.n, 0, Split::Train)?];
                if self.n_test > 0 {
                    parts.push(gen(self.n_test, 1, Split::Test)?);
                }
                if self.n_ood > 0 {
                    parts.push(checkerboard_ood(self.n_ood, self.noise, seed, 2)?);
                }
                parts
            }
            DataSource::File => vec![DatasetHandle::load(self.require_path()?)?],
            DataSource::Csv => {
                let p = self.require_path()?;
                vec![import_csv(&std::fs::read_to_string(p)?, &p.display().to_string())?]
            }
            DataSource::Idx => {
                let images = read_idx(self.require_path()?, self.take)?;
                let labels_path = self
                    .labels
                    .as_deref()
                    .ok_or_else(|| VndError::Config("data.labels is required for idx data".into()))?;
                let labels = read_idx(labels_path, self.take)?;
                let mut d = idx_dataset(
                    &images,
                    &labels,
                    Split::Train,
                    &self.require_path()?.display().to_string(),
                )?;
                let n_test = (self.test_fraction * d.len() as f64).round() as usize;
                let n = d.len();
                d.splits[n - n_test.min(n)..].iter_mut().for_each(|s| *s = Split::Test);
                vec![d]
            }
        };
        if let Some(p) = &self.ood_path {
            let mut ood = DatasetHandle::load(p)?;
            ood.splits.iter_mut().for_each(|s| *s = Split::Ood);
            parts.push(ood);
        }
        DatasetHandle::concat(&parts)
    }

    fn require_path(&self) -> Result<&Path> {
        self.path
            .as_deref()
            .ok_or_else(|| VndError::Config(format!("data.path is required for {} data", self.source)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSection {
    pub widths: Vec<f64>,
    pub samples: usize,
    pub seeds: Vec<u64>,
    pub mode: EvalModeName,
    pub ood_score: OodScore,
    pub ece_bins: usize,
    pub recollect_batch: usize,
    pub recollect_batches: usize,
    /// Emit per-width reliability CSVs.
    pub reliability: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let s = SweepConfig::default();
        Self {
            widths: s.widths,
            samples: s.samples,
            seeds: s.seeds,
            mode: s.mode,
            ood_score: s.ood_score,
            ece_bins: s.ece_bins,
            recollect_batch: s.recollect_batch,
            recollect_batches: s.recollect_batches,
            reliability: true,
        }
    }
}

impl EvalSection {
    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            widths: self.widths.clone(),
            seeds: self.seeds.clone(),
            samples: self.samples,
            mode: self.mode,
            ood_score: self.ood_score,
            ece_bins: self.ece_bins,
            recollect_batch: self.recollect_batch,
            recollect_batches: self.recollect_batches,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub data: DataSection,
}

fn fmt_list<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Parses config text and applies `section.key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut ini = Ini::parse(text)?;
        for o in overrides {
            ini.set(o)?;
        }
        Self::from_ini(&ini)
    }

    pub fn from_ini(ini: &Ini) -> Result<Self> {
        let mut f = Fields::new(ini);
        let seed: Option<u64> = f.required("", "seed");
        let out_dir: PathBuf = f.or("", "out_dir", PathBuf::from("vnd-out"));

        let m = ModelSection::default();
        let model = ModelSection {
            arch: f.or("model", "arch", m.arch),
            hidden: f.list("model", "hidden", m.hidden),
            channels: f.list("model", "channels", m.channels),
            groups: f.or("model", "groups", m.groups),
            n_base: f.or("model", "n_base", m.n_base),
            norm: f.or("model", "norm", m.norm),
            first_log_alpha: f.or("model", "first_log_alpha", m.first_log_alpha),
            log_alpha: f.or("model", "log_alpha", m.log_alpha),
            init_logit: f.or("model", "init_logit", m.init_logit),
            prior_keep: f.or("model", "prior_keep", m.prior_keep),
        };

        let t = TrainConfig::default();
        let train = TrainConfig {
            kappa: f.or("train", "kappa", t.kappa),
            lr: f.or("train", "lr", t.lr),
            lr_decay: f.or("train", "lr_decay", t.lr_decay),
            lr_decay_every: f.or("train", "lr_decay_every", t.lr_decay_every),
            momentum: f.or("train", "momentum", t.momentum),
            epochs: f.or("train", "epochs", t.epochs),
            batch_size: f.or("train", "batch_size", t.batch_size),
            tau_start: f.or("train", "tau_start", t.tau_start),
            tau_end: f.or("train", "tau_end", t.tau_end),
            tau_anneal_fraction: f.or("train", "tau_anneal_fraction", t.tau_anneal_fraction),
            freeze_tau: f.or("train", "freeze_tau", t.freeze_tau),
            seed: seed.unwrap_or(0),
            posterior_samples: f.or("train", "posterior_samples", t.posterior_samples),
            clip_norm: f.or("train", "clip_norm", t.clip_norm),
        };

        let e = EvalSection::default();
        let mode = match f.raw("eval", "mode") {
            Some(s) => EvalModeName::parse(s)
                .map_err(|err| f.errors.push(format!("eval.mode: {err}")))
                .ok(),
            None => None,
        };
        let ood_score = match f.raw("eval", "ood_score") {
            Some(s) => OodScore::parse(s)
                .map_err(|err| f.errors.push(format!("eval.ood_score: {err}")))
                .ok(),
            None => None,
        };
        let eval = EvalSection {
            widths: f.list("eval", "widths", e.widths),
            samples: f.or("eval", "samples", e.samples),
            seeds: f.list("eval", "seeds", e.seeds),
            mode: mode.unwrap_or(e.mode),
            ood_score: ood_score.unwrap_or(e.ood_score),
            ece_bins: f.or("eval", "ece_bins", e.ece_bins),
            recollect_batch: f.or("eval", "recollect_batch", e.recollect_batch),
            recollect_batches: f.or("eval", "recollect_batches", e.recollect_batches),
            reliability: f.or("eval", "reliability", e.reliability),
        };

        let d = DataSection::default();
        let data = DataSection {
            source: f.or("data", "source", d.source),
            kind: f.or("data", "kind", d.kind),
            n: f.or("data", "n", d.n),
            n_test: f.or("data", "n_test", d.n_test),
            noise: f.or("data", "noise", d.noise),
            classes: f.or("data", "classes", d.classes),
            n_ood: f.or("data", "n_ood", d.n_ood),
            path: f.optional("data", "path"),
            labels: f.optional("data", "labels"),
            ood_path: f.optional("data", "ood_path"),
            take: f.optional("data", "take"),
            test_fraction: f.or("data", "test_fraction", d.test_fraction),
        };
        f.unknown_keys();
        let mut errors = std::mem::take(&mut f.errors);

        let cfg = seed.map(|seed| ExperimentConfig {
            seed,
            out_dir,
            model,
            train,
            eval,
            data,
        });
        if let Some(c) = &cfg {
            errors.extend(c.problems());
        }
        match cfg {
            Some(c) if errors.is_empty() => Ok(c),
            _ => Err(VndError::Config(errors.join("\n"))),
        }
    }

    /// Semantic checks beyond parsing.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n_train = match self.data.source {
            DataSource::Synthetic => self.data.n,
            _ => 0,
        };
        out.extend(self.train.problems(n_train));
        let m = &self.model;
        if m.hidden.contains(&0) || m.channels.contains(&0) {
            out.push("model.hidden and model.channels must be positive".into());
        }
        if m.arch == Arch::Conv && m.channels.is_empty() {
            out.push("model.arch = conv needs model.channels".into());
        }
        if m.groups < 2 || m.n_base == 0 || m.n_base >= m.groups {
            out.push(format!(
                "model.groups must be >= 2 and model.n_base in 1..groups, got {} and {}",
                m.groups, m.n_base
            ));
        }
        for &h in m.hidden.iter().chain(&m.channels) {
            if h < m.groups {
                out.push(format!("a layer of width {h} cannot hold {} groups", m.groups));
            }
        }
        if !(m.prior_keep > 0.0 && m.prior_keep <= 1.0) {
            out.push(format!("model.prior_keep must be in (0, 1], got {}", m.prior_keep));
        }
        let e = &self.eval;
        if e.widths.is_empty() || e.widths.iter().any(|w| !(*w > 0.0 && *w <= 1.0)) {
            out.push("eval.widths must be nonempty and in (0, 1]".into());
        }
        if e.widths.windows(2).any(|w| w[0] >= w[1]) {
            out.push("eval.widths must be strictly increasing".into());
        }
        if e.samples == 0 {
            out.push("eval.samples must be >= 1".into());
        }
        if e.seeds.is_empty() {
            out.push("eval.seeds must be nonempty".into());
        }
        if e.ece_bins == 0 || e.recollect_batch == 0 {
            out.push("eval.ece_bins and eval.recollect_batch must be >= 1".into());
        }
        let d = &self.data;
        if !(d.noise >= 0.0) {
            out.push(format!("data.noise must be >= 0, got {}", d.noise));
        }
        if d.source == DataSource::Synthetic && d.n == 0 {
            out.push("data.n must be >= 1".into());
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            out.push(format!("data.test_fraction must be in [0, 1), got {}", d.test_fraction));
        }
        if d.source != DataSource::Synthetic && d.path.is_none() {
            out.push(format!("data.path is required for {} data", d.source));
        }
        if d.source == DataSource::Idx && d.labels.is_none() {
            out.push("data.labels is required for idx data".into());
        }
        for (key, p) in [
            ("data.path", &d.path),
            ("data.labels", &d.labels),
            ("data.ood_path", &d.ood_path),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    out.push(format!("{key}: file `{}` does not exist", p.display()));
                }
            }
        }
        out
    }

    pub fn to_ini(&self) -> Ini {
        let mut ini = Ini::default();
        let mut put = |s: &str, k: &str, v: String| {
            ini.sections.entry(s.to_string()).or_default().insert(k.to_string(), v);
        };
        put("", "seed", self.seed.to_string());
        put("", "out_dir", self.out_dir.display().to_string());
        let m = &self.model;
        put("model", "arch", m.arch.to_string());
        put("model", "hidden", fmt_list(&m.hidden));
        put("model", "channels", fmt_list(&m.channels));
        put("model", "groups", m.groups.to_string());
        put("model", "n_base", m.n_base.to_string());
        put("model", "norm", m.norm.to_string());
        put("model", "first_log_alpha", m.first_log_alpha.to_string());
        put("model", "log_alpha", m.log_alpha.to_string());
        put("model", "init_logit", m.init_logit.to_string());
        put("model", "prior_keep", m.prior_keep.to_string());
        let t = &self.train;
        put("train", "kappa", t.kappa.to_string());
        put("train", "lr", t.lr.to_string());
        put("train", "lr_decay", t.lr_decay.to_string());
        put("train", "lr_decay_every", t.lr_decay_every.to_string());
        put("train", "momentum", t.momentum.to_string());
        put("train", "epochs", t.epochs.to_string());
        put("train", "batch_size", t.batch_size.to_string());
        put("train", "tau_start", t.tau_start.to_string());
        put("train", "tau_end", t.tau_end.to_string());
        put("train", "tau_anneal_fraction", t.tau_anneal_fraction.to_string());
        put("train", "freeze_tau", t.freeze_tau.to_string());
        put("train", "posterior_samples", t.posterior_samples.to_string());
        put("train", "clip_norm", t.clip_norm.to_string());
        let e = &self.eval;
        put("eval", "widths", fmt_list(&e.widths));
        put("eval", "samples", e.samples.to_string());
        put("eval", "seeds", fmt_list(&e.seeds));
        put(
            "eval",
            "mode",
            match e.mode {
                EvalModeName::Mean => "mean",
                EvalModeName::Sample => "sample",
            }
            .into(),
        );
        put("eval", "ood_score", e.ood_score.name().into());
        put("eval", "ece_bins", e.ece_bins.to_string());
        put("eval", "recollect_batch", e.recollect_batch.to_string());
        put("eval", "recollect_batches", e.recollect_batches.to_string());
        put("eval", "reliability", e.reliability.to_string());
        let d = &self.data;
        put("data", "source", d.source.to_string());
        put("data", "kind", d.kind.to_string());
        put("data", "n", d.n.to_string());
        put("data", "n_test", d.n_test.to_string());
        put("data", "noise", d.noise.to_string());
        put("data", "classes", d.classes.to_string());
        put("data", "n_ood", d.n_ood.to_string());
        if let Some(p) = &d.path {
            put("data", "path", p.display().to_string());
        }
        if let Some(p) = &d.labels {
            put("data", "labels", p.display().to_string());
        }
        if let Some(p) = &d.ood_path {
            put("data", "ood_path", p.display().to_string());
        }
        if let Some(t) = d.take {
            put("data", "take", t.to_string());
        }
        put("data", "test_fraction", d.test_fraction.to_string());
        ini
    }

    /// Canonical text of the resolved configuration.
    pub fn render(&self) -> String {
        self.to_ini().render()
    }

    /// JSON echo of the resolved configuration.
    pub fn echo_json(&self) -> serde_json::Value {
        let ini = self.to_ini();
        serde_json::to_value(&ini.sections).expect("string map")
    }
}
