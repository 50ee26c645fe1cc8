//! Experiment driver: JSON configuration, staged pipeline and manifest.
//!
//! A run trains a baseline, probes its curvature, attacks it, fine-tunes it
//! with the curvature penalty, repeats the probes and attacks, and exports
//! comparison tables, plane grids and bound curves. Every stochastic piece
//! draws its seed from the master seed through [`rng::derive_seed`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{self, evaluate_attack, masking_check, outcomes_to_csv, AttackSpec, SampleOutcome};
use crate::cure::{self, CureConfig, TrainingHistory};
use crate::curvature::{self, Estimator};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{self, PlaneSpec};
use crate::model::{arch, build_network, Activation, LayerSpec, Network};
use crate::objective::LabeledLoss;
use crate::rng::{derive_seed, sample_seed};
use crate::theory;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    TwoMoons {
        n_train: usize,
        n_eval: usize,
        noise: f64,
    },
    Gaussians {
        n_train: usize,
        n_eval: usize,
        classes: usize,
        spread: f64,
    },
    Spirals {
        n_train: usize,
        n_eval: usize,
        turns: f64,
        noise: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        eval_images: PathBuf,
        eval_labels: PathBuf,
        #[serde(default)]
        limit_train: Option<usize>,
        #[serde(default)]
        limit_eval: Option<usize>,
    },
}

impl DatasetSpec {
    /// Train and evaluation splits drawn from independent streams.
    pub fn load(&self, master: u64) -> Result<(Dataset, Dataset)> {
        let (st, se) = (derive_seed(master, "data-train"), derive_seed(master, "data-eval"));
        let (mut train, mut eval) = match self {
            DatasetSpec::TwoMoons { n_train, n_eval, noise } => (
                data::gen_two_moons(*n_train, *noise, st)?,
                data::gen_two_moons(*n_eval, *noise, se)?,
            ),
            DatasetSpec::Gaussians {
                n_train,
                n_eval,
                classes,
                spread,
            } => (
                data::gen_gaussians(*n_train, *classes, *spread, st)?,
                data::gen_gaussians(*n_eval, *classes, *spread, se)?,
            ),
            DatasetSpec::Spirals {
                n_train,
                n_eval,
                turns,
                noise,
            } => (
                data::gen_spirals(*n_train, *turns, *noise, st)?,
                data::gen_spirals(*n_eval, *turns, *noise, se)?,
            ),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                eval_images,
                eval_labels,
                limit_train,
                limit_eval,
            } => {
                let mut tr = data::load_idx(train_images, train_labels)?;
                let mut ev = data::load_idx(eval_images, eval_labels)?;
                let classes = tr.num_classes.max(ev.num_classes);
                tr.num_classes = classes;
                ev.num_classes = classes;
                if let Some(n) = limit_train {
                    tr = tr.subset(&(0..(*n).min(tr.len())).collect::<Vec<_>>(), "train");
                }
                if let Some(n) = limit_eval {
                    ev = ev.subset(&(0..(*n).min(ev.len())).collect::<Vec<_>>(), "eval");
                }
                (tr, ev)
            }
        };
        train.split = "train".into();
        eval.split = "eval".into();
        Ok((train, eval))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkSpec {
    Mlp2d {
        activation: Activation,
    },
    MlpImg {
        activation: Activation,
    },
    ConvnetImg {
        channels: usize,
        height: usize,
        width: usize,
        activation: Activation,
    },
    Layers {
        layers: Vec<LayerSpec>,
    },
}

impl NetworkSpec {
    /// Swaps the hidden activation of a named architecture; explicit layer
    /// lists are left alone and report `false`.
    pub fn set_activation(&mut self, a: Activation) -> bool {
        match self {
            NetworkSpec::Mlp2d { activation }
            | NetworkSpec::MlpImg { activation }
            | NetworkSpec::ConvnetImg { activation, .. } => {
                *activation = a;
                true
            }
            NetworkSpec::Layers { .. } => false,
        }
    }

    pub fn layers(&self, input_dim: usize, classes: usize) -> Vec<LayerSpec> {
        match self {
            NetworkSpec::Mlp2d { activation } => {
                let mut l = arch::mlp_2d(*activation);
                if classes != 2 {
                    l.pop();
                    l.push(LayerSpec::affine(32, classes));
                }
                l
            }
            NetworkSpec::MlpImg { activation } => arch::mlp_img(input_dim, classes, *activation),
            NetworkSpec::ConvnetImg {
                channels,
                height,
                width,
                activation,
            } => arch::convnet_img(*channels, *height, *width, classes, *activation),
            NetworkSpec::Layers { layers } => layers.clone(),
        }
    }
}

/// Plain training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr_start: 1e-2,
            lr_end: 1e-3,
            batch_size: 32,
        }
    }
}

/// Penalty fine-tuning settings; `h_max = None` rescales `1.5/255` to the
/// data range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CureSpec {
    pub gamma: f64,
    #[serde(default)]
    pub gamma_schedule: Vec<f64>,
    #[serde(default)]
    pub h_max: Option<f64>,
    pub h_ramp_epochs: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub mixed_step: Option<f64>,
    pub probe_points: usize,
    pub frob_samples: usize,
}

impl Default for CureSpec {
    fn default() -> Self {
        Self {
            gamma: 4.0,
            gamma_schedule: Vec::new(),
            h_max: None,
            h_ramp_epochs: 5,
            epochs: 30,
            lr_start: 1e-3,
            lr_end: 1e-4,
            batch_size: 32,
            mixed_step: None,
            probe_points: 50,
            frob_samples: 10,
        }
    }
}

impl CureSpec {
    pub fn to_config(&self, data_width: f64, seed: u64) -> CureConfig {
        let base = match self.h_max {
            Some(h) => CureConfig {
                h_units: "h_max given in input units".into(),
                ..CureConfig::new(h, self.epochs, seed)
            },
            None => CureConfig::for_range(data_width, self.epochs, seed),
        };
        CureConfig {
            gamma: self.gamma,
            gamma_schedule: self.gamma_schedule.clone(),
            h_ramp_epochs: self.h_ramp_epochs,
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            batch_size: self.batch_size,
            mixed_step: self.mixed_step,
            probe_points: self.probe_points,
            frob_samples: self.frob_samples,
            ..base
        }
    }
}

/// Fine-tuning on DeepFool-perturbed inputs at the attack budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialSpec {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
}

impl Default for AdversarialSpec {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr_start: 1e-3,
            lr_end: 1e-4,
            batch_size: 32,
        }
    }
}

/// ℓ∞ budget: pixel units on box-bounded data, or a fraction of the
/// bounding-box diagonal on synthetic data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpsSpec {
    Absolute(f64),
    DiagonalFraction(f64),
}

impl EpsSpec {
    pub fn resolve(&self, data: &Dataset) -> f64 {
        match *self {
            EpsSpec::Absolute(e) => e,
            EpsSpec::DiagonalFraction(f) => f * data.diagonal(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    pub epsilon: EpsSpec,
    /// Leading evaluation samples that are attacked.
    pub eval_points: usize,
    pub pgd_steps: Vec<usize>,
    /// PGD steps for the per-epoch robustness probe during fine-tuning.
    pub monitor_pgd_steps: usize,
    /// Multipliers of `epsilon` for the accuracy-versus-budget sweep.
    pub eps_grid: Vec<f64>,
    pub masking_points: usize,
    pub masking_pgd_steps: usize,
    pub spsa_iterations: usize,
    pub spsa_batch: usize,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            epsilon: EpsSpec::DiagonalFraction(0.05),
            eval_points: 200,
            pgd_steps: vec![7, 20],
            monitor_pgd_steps: 20,
            eps_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0],
            masking_points: 200,
            masking_pgd_steps: 100,
            spsa_iterations: 100,
            spsa_batch: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub points: usize,
    /// `None` uses the fine-tuning `h_max`.
    #[serde(default)]
    pub h: Option<f64>,
    pub estimator: Estimator,
    pub frob_samples: usize,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            points: 20,
            h: None,
            estimator: Estimator::Full,
            frob_samples: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometrySettings {
    pub samples: usize,
    /// Half-width of each plane in units of `epsilon`.
    pub half_extent_eps: f64,
    pub resolution: usize,
}

impl Default for GeometrySettings {
    fn default() -> Self {
        Self {
            samples: 2,
            half_extent_eps: 10.0,
            resolution: 201,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheorySettings {
    pub models: usize,
    pub gnorm: f64,
    pub c: f64,
    pub gtu: f64,
    pub nu_min: f64,
    pub nu_max: f64,
    pub nu_points: usize,
}

impl Default for TheorySettings {
    fn default() -> Self {
        Self {
            models: 1000,
            gnorm: 1.0,
            c: 1.0,
            gtu: 0.5,
            nu_min: 1e-3,
            nu_max: 10.0,
            nu_points: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Train,
    Probe,
    Attack,
    Cure,
    Adversarial,
    Export,
    Theory,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Probe => "probe",
            Stage::Attack => "attack",
            Stage::Cure => "cure",
            Stage::Adversarial => "adversarial",
            Stage::Export => "export",
            Stage::Theory => "theory",
        }
    }
}

fn default_stages() -> Vec<Stage> {
    use Stage::*;
    vec![
        Train,
        Probe,
        Attack,
        Cure,
        Probe,
        Attack,
        Adversarial,
        Attack,
        Export,
        Theory,
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub network: NetworkSpec,
    /// Starts the run from a saved network (tagged `loaded`) instead of
    /// requiring a `train` stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub cure: CureSpec,
    #[serde(default)]
    pub adversarial: AdversarialSpec,
    #[serde(default)]
    pub attacks: AttackSettings,
    #[serde(default)]
    pub probe: ProbeSettings,
    #[serde(default)]
    pub geometry: GeometrySettings,
    #[serde(default)]
    pub theory: TheorySettings,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
}

impl ExperimentConfig {
    /// Two-moons with the 2 → 32 → 32 → 2 network.
    pub fn two_moons(name: &str, master_seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            name: name.to_string(),
            master_seed,
            output_dir: output_dir.into(),
            dataset: DatasetSpec::TwoMoons {
                n_train: 1000,
                n_eval: 200,
                noise: 0.25,
            },
            network: NetworkSpec::Mlp2d {
                activation: Activation::Relu,
            },
            checkpoint: None,
            train: TrainSpec {
                epochs: 1000,
                ..TrainSpec::default()
            },
            cure: CureSpec {
                h_max: Some(0.4),
                lr_start: 1e-2,
                lr_end: 1e-3,
                ..CureSpec::default()
            },
            adversarial: AdversarialSpec::default(),
            attacks: AttackSettings::default(),
            probe: ProbeSettings::default(),
            geometry: GeometrySettings::default(),
            theory: TheorySettings::default(),
            stages: default_stages(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("no stages declared".into()));
        }
        let needs_model = |s: &Stage| {
            matches!(
                s,
                Stage::Probe | Stage::Attack | Stage::Cure | Stage::Adversarial | Stage::Export
            )
        };
        if let Some(first) = self.stages.iter().position(needs_model) {
            if self.checkpoint.is_none() && !self.stages[..first].contains(&Stage::Train) {
                return Err(Error::Config(format!(
                    "stage `{}` needs a model but neither a checkpoint nor a `train` stage precedes it",
                    self.stages[first].as_str()
                )));
            }
        }
        match self.attacks.epsilon {
            EpsSpec::Absolute(e) | EpsSpec::DiagonalFraction(e) if !(e >= 0.0) => {
                return Err(Error::Config(format!("epsilon must be ≥ 0, got {e}")));
            }
            _ => {}
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("train epochs and batch size must be ≥ 1".into()));
        }
        if !(self.train.lr_end > 0.0 && self.train.lr_start >= self.train.lr_end) {
            return Err(Error::Config("need train lr_start ≥ lr_end > 0".into()));
        }
        Ok(())
    }

    /// Seeds handed to each stochastic component.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        [
            "data-train",
            "data-eval",
            "init",
            "train",
            "cure",
            "adversarial",
            "probe",
            "attack",
            "geometry",
            "theory",
        ]
        .into_iter()
        .map(|t| (t.to_string(), derive_seed(self.master_seed, t)))
        .collect()
    }
}

/// Plain cross-entropy training through the fine-tuning loop with γ = 0.
pub fn train_baseline(layers: &[LayerSpec], dataset: &Dataset, spec: &TrainSpec, seed: u64) -> Result<Network> {
    let (net, _) = train_baseline_with_history(layers, dataset, spec, seed)?;
    Ok(net)
}

pub fn train_baseline_with_history(
    layers: &[LayerSpec],
    dataset: &Dataset,
    spec: &TrainSpec,
    seed: u64,
) -> Result<(Network, TrainingHistory)> {
    let net = build_network(layers, derive_seed(seed, "init"))?;
    let cfg = baseline_config(spec, seed);
    cure::train_loop(net, dataset, &cfg, None)
}

/// The γ = 0 configuration used for plain training.
pub fn baseline_config(spec: &TrainSpec, seed: u64) -> CureConfig {
    CureConfig {
        gamma: 0.0,
        lr_start: spec.lr_start,
        lr_end: spec.lr_end,
        batch_size: spec.batch_size,
        h_ramp_epochs: 0,
        ..CureConfig::new(1.0, spec.epochs, derive_seed(seed, "train"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub model: Option<String>,
    pub status: String,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub epsilon: Option<f64>,
    pub stages: Vec<StageRecord>,
    pub files: Vec<FileRecord>,
    /// Scalar results keyed by `<model>.<metric>`.
    pub summary: BTreeMap<String, f64>,
    pub failed: bool,
}

struct RunState {
    train: Dataset,
    eval: Dataset,
    eps: f64,
    models: Vec<(String, Network)>,
    accuracies: BTreeMap<String, BTreeMap<String, f64>>,
    summary: BTreeMap<String, f64>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

struct Writer<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl Writer<'_> {
    fn text(&mut self, name: &str, content: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), content)?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn bytes(&mut self, name: &str, content: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), content)?;
        self.written.push(name.to_string());
        Ok(())
    }
}

/// Executes the configured stages in order and writes every table, the
/// config echo and `manifest.json` into `output_dir`. A failing stage halts
/// the run; outputs written so far stay on disk and the manifest records
/// the failure.
pub fn run_experiment(config: &ExperimentConfig) -> Result<PathBuf> {
    config.validate()?;
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)?)?;

    let (train, eval) = config.dataset.load(config.master_seed)?;
    let eps = config.attacks.epsilon.resolve(&train);
    let mut state = RunState {
        train,
        eval,
        eps,
        models: Vec::new(),
        accuracies: BTreeMap::new(),
        summary: BTreeMap::new(),
    };
    state.summary.insert("epsilon".into(), eps);
    if let Some(path) = &config.checkpoint {
        let net = Network::load_checkpoint(path)?;
        if net.input_dim() != state.train.dim() {
            return Err(Error::Config(format!(
                "checkpoint expects {} inputs, dataset has {}",
                net.input_dim(),
                state.train.dim()
            )));
        }
        state.models.push(("loaded".into(), net));
    }
    let mut manifest = Manifest {
        name: config.name.clone(),
        master_seed: config.master_seed,
        seeds: config.seeds(),
        epsilon: Some(eps),
        stages: Vec::new(),
        files: Vec::new(),
        summary: BTreeMap::new(),
        failed: false,
    };
    let mut files = vec!["config.json".to_string()];
    let mut failure = None;
    for &stage in &config.stages {
        let start = Instant::now();
        let mut w = Writer {
            dir: &dir,
            written: Vec::new(),
        };
        let model = state.models.last().map(|(t, _)| t.clone());
        let res = run_stage(stage, config, &mut state, &mut w);
        let status = if res.is_ok() { "ok" } else { "failed" };
        log::info!("stage {} {} in {:.2?}", stage.as_str(), status, start.elapsed());
        manifest.stages.push(StageRecord {
            stage: stage.as_str().into(),
            model: match stage {
                Stage::Train | Stage::Cure | Stage::Adversarial => state.models.last().map(|(t, _)| t.clone()),
                Stage::Theory => None,
                _ => model,
            },
            status: status.into(),
            wall_time_s: start.elapsed().as_secs_f64(),
            outputs: w.written.clone(),
            error: res.as_ref().err().map(|e| e.to_string()),
        });
        files.extend(w.written);
        if let Err(e) = res {
            failure = Some(Error::Stage {
                stage: stage.as_str().into(),
                source: Box::new(e),
            });
            break;
        }
    }
    manifest.failed = failure.is_some();
    manifest.summary = state.summary.clone();
    files.sort();
    files.dedup();
    for f in &files {
        let bytes = std::fs::read(dir.join(f))?;
        manifest.files.push(FileRecord {
            path: f.clone(),
            sha256: sha256_hex(&bytes),
        });
    }
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(dir),
    }
}

fn current(state: &RunState) -> Result<(String, Network)> {
    state
        .models
        .last()
        .cloned()
        .ok_or_else(|| Error::Config("no model trained yet".into()))
}

/// The model fine-tuning starts from: the trained or loaded network.
fn original(state: &RunState) -> Result<Network> {
    state
        .models
        .first()
        .map(|(_, n)| n.clone())
        .ok_or_else(|| Error::Config("no model trained yet".into()))
}

fn eval_subset(state: &RunState, n: usize) -> Dataset {
    let idx: Vec<usize> = (0..n.min(state.eval.len())).collect();
    state.eval.subset(&idx, "eval")
}

fn attack_specs(config: &ExperimentConfig, eps: f64) -> Vec<AttackSpec> {
    let seed = derive_seed(config.master_seed, "attack");
    let mut specs = vec![AttackSpec::fgsm(eps), AttackSpec::deepfool_linf(eps)];
    for &k in &config.attacks.pgd_steps {
        specs.push(AttackSpec::pgd(eps, k, sample_seed(seed, k)));
    }
    specs
}

fn run_stage(stage: Stage, config: &ExperimentConfig, state: &mut RunState, w: &mut Writer<'_>) -> Result<()> {
    match stage {
        Stage::Train => {
            let layers = config.network.layers(state.train.dim(), state.train.num_classes);
            let (mut net, hist) =
                train_baseline_with_history(&layers, &state.train, &config.train, config.master_seed)?;
            net.meta.seed = config.master_seed;
            w.bytes("baseline.ckpt", &crate::model::checkpoint::encode(&net))?;
            w.text("baseline_history.csv", &hist.to_csv())?;
            let acc = attack::clean_accuracy(&net, &state.train)?;
            state.summary.insert("baseline.train_accuracy".into(), acc);
            state.models.push(("baseline".into(), net));
        }
        Stage::Probe => {
            let (tag, net) = current(state)?;
            let net = &net;
            let h = config
                .probe
                .h
                .unwrap_or_else(|| config.cure.to_config(state.train.extent(), 0).h_max);
            let seed = derive_seed(config.master_seed, "probe");
            let profile =
                curvature::average_profile(net, &state.eval, config.probe.points, h, seed, config.probe.estimator)?;
            let idx = curvature::sample_indices(state.eval.len(), config.probe.points, seed);
            let mut csv = String::from("sample_id,frobenius,alignment\n");
            let mut frob_sum = 0.0;
            for &i in &idx {
                let loss = LabeledLoss::new(net, state.eval.labels[i]);
                let x = &state.eval.inputs[i];
                let frob = curvature::frobenius_estimate(&loss, x, h, config.probe.frob_samples, sample_seed(seed, i))?;
                let align = curvature::alignment(&loss, x, h).unwrap_or(f64::NAN);
                frob_sum += frob;
                let _ = writeln!(csv, "{i},{frob:e},{align:e}");
            }
            w.text(&format!("{tag}_profile.csv"), &profile.to_csv())?;
            w.text(&format!("{tag}_curvature_points.csv"), &csv)?;
            state
                .summary
                .insert(format!("{tag}.frobenius"), frob_sum / idx.len().max(1) as f64);
            state
                .summary
                .insert(format!("{tag}.max_abs_eigenvalue"), profile.max_abs());
        }
        Stage::Attack => {
            let (tag, net) = current(state)?;
            let net = &net;
            let subset = eval_subset(state, config.attacks.eval_points);
            let mut rows: Vec<SampleOutcome> = Vec::new();
            let mut accs = BTreeMap::new();
            for spec in attack_specs(config, state.eps) {
                let out = evaluate_attack(net, &subset, &spec)?;
                let acc = out.iter().filter(|o| !o.success).count() as f64 / out.len().max(1) as f64;
                accs.insert(spec.label(), acc);
                state.summary.insert(format!("{tag}.{}", spec.label()), acc);
                rows.extend(out);
            }
            let clean = attack::clean_accuracy(net, &subset)?;
            state.summary.insert(format!("{tag}.clean"), clean);
            w.text(&format!("{tag}_attacks.csv"), &outcomes_to_csv(&rows))?;
            let steps = *config.attacks.pgd_steps.last().unwrap_or(&20);
            let seed = derive_seed(config.master_seed, "attack");
            let mut sweep = format!("# epsilon_unit={}\neps,fgsm,pgd-{steps}\n", state.eps);
            for &m in &config.attacks.eps_grid {
                let e = m * state.eps;
                let f = attack::adversarial_accuracy(net, &subset, &AttackSpec::fgsm(e))?;
                let p =
                    attack::adversarial_accuracy(net, &subset, &AttackSpec::pgd(e, steps, sample_seed(seed, steps)))?;
                let _ = writeln!(sweep, "{e:e},{f},{p}");
            }
            w.text(&format!("{tag}_robustness_vs_eps.csv"), &sweep)?;
            state.accuracies.insert(tag, accs);
        }
        Stage::Cure => {
            let net = original(state)?;
            let net = &net;
            let seed = derive_seed(config.master_seed, "cure");
            let cfg = config.cure.to_config(state.train.extent(), seed);
            let monitor_seed = derive_seed(config.master_seed, "attack");
            let monitor = AttackSpec::pgd(
                state.eps,
                config.attacks.monitor_pgd_steps,
                sample_seed(monitor_seed, config.attacks.monitor_pgd_steps),
            );
            let subset = eval_subset(state, config.attacks.eval_points);
            w.text("cure_config.json", &serde_json::to_string_pretty(&cfg)?)?;
            let (tuned, hist) = match cure::finetune_cure(net.clone(), &state.train, &subset, &cfg, &monitor) {
                Ok(r) => r,
                Err(Error::Diverged { epoch, loss, history }) => {
                    w.text("cure_history.csv", &history.to_csv())?;
                    return Err(Error::Diverged { epoch, loss, history });
                }
                Err(e) => return Err(e),
            };
            w.text("cure_history.csv", &hist.to_csv())?;
            w.bytes("cure.ckpt", &crate::model::checkpoint::encode(&tuned))?;
            if let (Some(first), Some(last)) = (hist.initial, hist.last_probe()) {
                state
                    .summary
                    .insert("cure.history.initial_frobenius".into(), first.frobenius);
                state
                    .summary
                    .insert("cure.history.final_frobenius".into(), last.frobenius);
                state
                    .summary
                    .insert("cure.history.initial_adv_accuracy".into(), first.adv_accuracy);
                state
                    .summary
                    .insert("cure.history.final_adv_accuracy".into(), last.adv_accuracy);
            }
            state.models.push(("cure".into(), tuned));
        }
        Stage::Adversarial => {
            let net = original(state)?;
            let a = &config.adversarial;
            let cfg = CureConfig {
                gamma: 0.0,
                lr_start: a.lr_start,
                lr_end: a.lr_end,
                batch_size: a.batch_size,
                h_ramp_epochs: 0,
                probe_points: config.cure.probe_points,
                frob_samples: config.cure.frob_samples,
                ..config
                    .cure
                    .to_config(state.train.extent(), derive_seed(config.master_seed, "adversarial"))
            };
            let cfg = CureConfig {
                epochs: a.epochs,
                ..cfg
            };
            let monitor_seed = derive_seed(config.master_seed, "attack");
            let monitor = AttackSpec::pgd(
                state.eps,
                config.attacks.monitor_pgd_steps,
                sample_seed(monitor_seed, config.attacks.monitor_pgd_steps),
            );
            let subset = eval_subset(state, config.attacks.eval_points);
            let perturb = AttackSpec::deepfool_linf(state.eps);
            let (tuned, hist) = cure::finetune_adversarial(net, &state.train, &subset, &cfg, &perturb, &monitor)?;
            w.text("adversarial_history.csv", &hist.to_csv())?;
            w.bytes("adversarial.ckpt", &crate::model::checkpoint::encode(&tuned))?;
            state.models.push(("adversarial".into(), tuned));
        }
        Stage::Export => export(config, state, w)?,
        Stage::Theory => {
            let t = &config.theory;
            let nus = theory::log_grid(t.nu_min, t.nu_max, t.nu_points);
            let rows = theory::bound_curve(t.gnorm, t.c, t.gtu, &nus)?;
            w.text("bound_curve.csv", &theory::bound_curve_csv(t.gnorm, t.c, t.gtu, &rows))?;
            let sweep = theory::sandwich_sweep(
                t.models,
                derive_seed(config.master_seed, "theory"),
                &theory::ModelRanges::default(),
                false,
            )?;
            w.text("sandwich.csv", &sweep.to_csv())?;
            state
                .summary
                .insert("theory.violations".into(), sweep.counterexamples.len() as f64);
            if !sweep.counterexamples.is_empty() {
                w.text("counterexamples.json", &sweep.counterexamples_json()?)?;
            }
        }
    }
    Ok(())
}

fn export(config: &ExperimentConfig, state: &mut RunState, w: &mut Writer<'_>) -> Result<()> {
    let cols: Vec<String> = attack_specs(config, state.eps).iter().map(|s| s.label()).collect();
    let mut gap = format!("# epsilon={}\nmodel,{}\n", state.eps, cols.join(","));
    for (tag, _) in &state.models {
        if let Some(accs) = state.accuracies.get(tag) {
            let cells: Vec<String> = cols
                .iter()
                .map(|c| accs.get(c).map_or(String::new(), |v| v.to_string()))
                .collect();
            let _ = writeln!(gap, "{tag},{}", cells.join(","));
        }
    }
    w.text("attack_gap.csv", &gap)?;

    let (tag, net) = match state.models.iter().find(|(t, _)| t == "cure") {
        Some(m) => m.clone(),
        None => current(state)?,
    };
    let net = &net;
    let subset = eval_subset(state, config.attacks.masking_points);
    let seed = derive_seed(config.master_seed, "attack");
    let pgd = AttackSpec::pgd(state.eps, config.attacks.masking_pgd_steps, sample_seed(seed, 1));
    let spsa = AttackSpec {
        steps: config.attacks.spsa_iterations,
        spsa_batch: config.attacks.spsa_batch,
        ..AttackSpec::spsa(state.eps, state.train.extent(), sample_seed(seed, 2))
    };
    let report = masking_check(net, &subset, &pgd, &spsa)?;
    w.text(&format!("{tag}_spsa_vs_pgd.csv"), &report.to_csv())?;
    state.summary.insert(format!("{tag}.spsa_pgd_pearson"), report.pearson);
    state.summary.insert(format!("{tag}.spsa_only"), report.spsa_only);

    let g = &config.geometry;
    let geo_seed = derive_seed(config.master_seed, "geometry");
    let half = g.half_extent_eps * if state.eps > 0.0 { state.eps } else { 1.0 };
    let models = state.models.clone();
    for (tag, net) in &models {
        let mut done = 0;
        for i in 0..state.eval.len() {
            if done == g.samples {
                break;
            }
            let (x, y) = (&state.eval.inputs[i], state.eval.labels[i]);
            if net.predict(x)? != y {
                continue;
            }
            let Ok(normal) = geometry::normal_direction(net, x) else {
                continue;
            };
            let vseed = sample_seed(geo_seed, i);
            let v = geometry::random_orthogonal_direction(&normal.direction, vseed)?;
            let plane = PlaneSpec::square(x.clone(), normal.direction, v, half, g.resolution)?;
            for grid in [
                geometry::boundary_cross_section(net, &plane, y)?,
                geometry::loss_surface(net, &plane, y)?,
            ] {
                let stem = format!("{tag}_{i}_{}", grid.kind.as_str());
                w.text(&format!("{stem}.csv"), &grid.to_csv())?;
                w.text(
                    &format!("{stem}.json"),
                    &serde_json::to_string_pretty(&grid.sidecar(tag, i, Some(vseed)))?,
                )?;
            }
            done += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ExperimentConfig::two_moons("t", 3, "/tmp/x");
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn stage_order_is_checked() {
        let mut cfg = ExperimentConfig::two_moons("t", 3, "/tmp/x");
        cfg.stages = vec![Stage::Attack, Stage::Train];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.stages = vec![Stage::Theory];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn seeds_are_distinct() {
        let cfg = ExperimentConfig::two_moons("t", 3, "/tmp/x");
        let seeds = cfg.seeds();
        let mut v: Vec<u64> = seeds.values().copied().collect();
        v.sort();
        v.dedup();
        assert_eq!(v.len(), seeds.len());
    }
}
