//! Subcommand implementations. Each returns its results so that callers can
//! use them without re-reading the files it writes.

use std::path::{Path, PathBuf};

use lipgate::datagen::{self, DatasetSpec, Family, Split, Task};
use lipgate::metrics::{self, EvalRecord, GateDecision, GateThreshold, Label, ReferralCurve, RocCurve};
use lipgate::models::{self, ArchKind, EpochStats, Mode, ReconModel, Tensor};
use lipgate::uncertainty::{self, UncertaintyMap};
use lipgate::{seed, Image};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::format::{self, Dataset, LabeledSample};
use crate::records;

const MODEL_STREAM: u64 = 0x4d4f_4445;
const EVAL_STREAM: u64 = 0x4556_414c;
const HIGH_NOISE_STREAM: u64 = 0x4849_4748;

pub const TRAIN_FILE: &str = "train.lipd";
pub const ID_TEST_FILE: &str = "id_test.lipd";
pub const OOD_TEST_FILE: &str = "ood_test.lipd";

/// Builds one split. Training inputs carry the task's training noise; AUTOMAP
/// test inputs are noise-free, image-domain test inputs carry the low
/// pairwise noise level.
pub fn generate(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    cfg.validate()?;
    let task = cfg.task()?;
    let d = &cfg.data;
    let (family, count, label) = match split {
        Split::Train => (Family::IdEllipse, d.train_count, Label::Id),
        Split::IdTest => (Family::IdEllipse, d.id_test_count, Label::Id),
        Split::OodTest => (Family::OodBlock, d.ood_test_count, Label::Ood),
    };
    let noise_fraction = match (split, task) {
        (Split::Train, _) => cfg.train_noise()?,
        (_, Task::Automap) => 0.0,
        _ => cfg.uncertainty.pairwise_lo,
    };
    let mut ct = cfg.ct_protocol();
    ct.noise_frac = noise_fraction;
    let spec = DatasetSpec {
        task,
        family,
        count,
        n: d.n,
        base_seed: split.base_seed(d.base_seed),
        augment: d.augment && split == Split::Train,
        noise_fraction,
        ct,
    };
    let samples = datagen::build_dataset(&spec)?
        .into_iter()
        .map(|pair| LabeledSample { label, pair })
        .collect();
    Ok(Dataset { task, n: d.n, samples })
}

/// Writes the train, ID-test and OOD-test containers into `out_dir`.
pub fn cmd_datagen(cfg: &RunConfig, out_dir: &Path) -> Result<Vec<(PathBuf, usize)>> {
    let mut written = Vec::new();
    for (split, name) in [(Split::Train, TRAIN_FILE), (Split::IdTest, ID_TEST_FILE), (Split::OodTest, OOD_TEST_FILE)] {
        let ds = generate(cfg, split)?;
        let path = out_dir.join(name);
        format::save_dataset(&path, &ds)?;
        written.push((path, ds.samples.len()));
    }
    Ok(written)
}

pub fn model_seed(cfg: &RunConfig, member: u64) -> u64 {
    seed::derive(seed::derive(cfg.seed, MODEL_STREAM), member)
}

fn check_task(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    if ds.task != cfg.task()? || ds.n != cfg.data.n {
        return Err(CliError::Config(format!(
            "dataset is {} at n = {}, config expects {} at n = {}",
            ds.task.name(),
            ds.n,
            cfg.task,
            cfg.data.n
        )));
    }
    Ok(())
}

/// Trains member `member` of architecture `kind` on `data`.
pub fn train_model(
    cfg: &RunConfig,
    kind: ArchKind,
    member: u64,
    epochs: usize,
    data: &Dataset,
    on_epoch: impl FnMut(&EpochStats),
) -> Result<(ReconModel, Vec<EpochStats>)> {
    check_task(cfg, data)?;
    let spec = cfg.arch_spec_for(kind)?;
    let mut tcfg = cfg.train_config()?;
    tcfg.epochs = epochs;
    tcfg.seed = seed::derive(tcfg.seed, member);
    let model = ReconModel::init(spec, model_seed(cfg, member))?;
    let pairs: Vec<(&[f64], &[f64])> = data
        .samples
        .iter()
        .map(|s| (s.pair.input.values.as_slice(), s.pair.target.pixels()))
        .collect();
    Ok(models::train_with(model, &pairs, &tcfg, on_epoch)?)
}

pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    kind: ArchKind,
    member: u64,
    checkpoint: &Path,
    loss_csv: &Path,
) -> Result<(ReconModel, Vec<EpochStats>)> {
    let ds = format::load_dataset(data)?;
    let (model, history) = train_model(cfg, kind, member, cfg.train.epochs, &ds, |_| {})?;
    format::save_checkpoint(checkpoint, &model)?;
    records::write_loss(loss_csv, &history)?;
    Ok((model, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Single,
    Mc,
    Ensemble,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "single" => Some(Method::Single),
            "mc" => Some(Method::Mc),
            "ensemble" => Some(Method::Ensemble),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Single => "single",
            Method::Mc => "mc",
            Method::Ensemble => "ensemble",
        }
    }
}

/// Noise seed base shared by every scoring protocol; sample `i` adds `i`.
pub fn eval_seed(cfg: &RunConfig) -> u64 {
    seed::derive(cfg.seed, EVAL_STREAM)
}

/// Second, independent noisy encoding used by the pairwise score.
pub fn high_noise_input(cfg: &RunConfig, sample: &LabeledSample) -> Result<Vec<f64>> {
    let p = &sample.pair;
    let mut ct = cfg.ct_protocol();
    ct.noise_frac = cfg.uncertainty.pairwise_hi;
    let noise_seed = seed::derive(p.meta.noise_seed, HIGH_NOISE_STREAM);
    Ok(datagen::encode_input(p.meta.task, &p.source, cfg.uncertainty.pairwise_hi, noise_seed, &ct)?.values)
}

/// Scores every sample of `ds`. `models` holds one model for the single and
/// MC protocols and the ensemble members otherwise.
pub fn evaluate(cfg: &RunConfig, models: &[ReconModel], ds: &Dataset, method: Method) -> Result<Vec<EvalRecord>> {
    cfg.validate()?;
    check_task(cfg, ds)?;
    let first = models.first().ok_or_else(|| CliError::Config("no checkpoint given".into()))?;
    for m in models {
        if m.spec().n != ds.n || m.spec().is_automap() != (ds.task == Task::Automap) {
            return Err(CliError::Config(format!(
                "{} checkpoint at n = {} cannot score a {} dataset at n = {}",
                m.spec().kind.name(),
                m.spec().n,
                ds.task.name(),
                ds.n
            )));
        }
    }
    let u = &cfg.uncertainty;
    let base = eval_seed(cfg);
    let xs: Vec<&[f64]> = ds.samples.iter().map(|s| s.pair.input.values.as_slice()).collect();
    let n_samples = xs.len();
    // (reconstruction used for MAE, lipschitz, variance) per sample
    let mut scored: Vec<(Vec<f64>, f64, f64)> = Vec::with_capacity(n_samples);
    match method {
        Method::Single => {
            if models.len() != 1 {
                return Err(CliError::Config("single scoring takes one checkpoint".into()));
            }
            let recon = first.forward_batch(&xs, &vec![Mode::Deterministic; n_samples])?;
            let lips: Vec<f64> = if ds.task == Task::Automap {
                uncertainty::local_lipschitz_batch(first, &xs, u.noise_fraction, base)?
                    .into_iter()
                    .map(|(l, _)| l.value)
                    .collect()
            } else {
                let hi = ds.samples.iter().map(|s| high_noise_input(cfg, s)).collect::<Result<Vec<_>>>()?;
                let hi_refs: Vec<&[f64]> = hi.iter().map(|v| v.as_slice()).collect();
                uncertainty::lipschitz_pairwise_batch(first, &xs, &hi_refs)?
                    .into_iter()
                    .map(|l| l.value)
                    .collect()
            };
            let vars = uncertainty::perturbation_variance_batch(first, &xs, u.noise_fraction, u.k, base)?;
            for ((r, l), (v, _)) in recon.into_iter().zip(lips).zip(vars) {
                scored.push((r, l, v.value));
            }
        }
        Method::Mc => {
            if models.len() != 1 {
                return Err(CliError::Config("MC dropout scoring takes one checkpoint".into()));
            }
            for (i, x) in xs.iter().enumerate() {
                let s = uncertainty::mc_dropout_scores(first, x, u.noise_fraction, u.iterations, base.wrapping_add(i as u64))?;
                scored.push((s.mean_clean, s.lipschitz.value, s.variance.value));
            }
        }
        Method::Ensemble => {
            for s in uncertainty::ensemble_scores_batch(models, &xs, u.noise_fraction, base)? {
                scored.push((s.mean_clean, s.lipschitz.value, s.variance.value));
            }
        }
    }
    ds.samples
        .iter()
        .zip(scored)
        .enumerate()
        .map(|(i, (s, (recon, lipschitz, variance)))| {
            let rec = EvalRecord {
                sample_id: i as u64,
                label: s.label,
                mae: metrics::mae(&recon, s.pair.target.pixels())?,
                lipschitz,
                variance,
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig, checkpoints: &[PathBuf], dataset: &Path, method: Method, out: &Path) -> Result<Vec<EvalRecord>> {
    let models = checkpoints
        .iter()
        .map(|p| format::load_checkpoint(p))
        .collect::<Result<Vec<_>>>()?;
    let ds = format::load_dataset(dataset)?;
    let recs = evaluate(cfg, &models, &ds, method)?;
    records::write_records(out, &recs)?;
    Ok(recs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreColumn {
    Lipschitz,
    Variance,
}

impl ScoreColumn {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lipschitz" => Some(ScoreColumn::Lipschitz),
            "variance" => Some(ScoreColumn::Variance),
            _ => None,
        }
    }

    pub fn pick(self, r: &EvalRecord) -> f64 {
        match self {
            ScoreColumn::Lipschitz => r.lipschitz,
            ScoreColumn::Variance => r.variance,
        }
    }
}

pub fn ood_roc(id: &[EvalRecord], ood: &[EvalRecord], column: ScoreColumn) -> Result<RocCurve> {
    let a: Vec<f64> = id.iter().map(|r| column.pick(r)).collect();
    let b: Vec<f64> = ood.iter().map(|r| column.pick(r)).collect();
    Ok(metrics::roc_auc(&a, &b)?)
}

pub fn cmd_ood(id_csv: &Path, ood_csv: &Path, column: ScoreColumn, roc_out: &Path) -> Result<RocCurve> {
    let roc = ood_roc(&records::read_records(id_csv)?, &records::read_records(ood_csv)?, column)?;
    records::write_roc(roc_out, &roc)?;
    Ok(roc)
}

pub fn calibrate(records: &[EvalRecord], mae_limit: f64) -> Result<(ReferralCurve, GateThreshold)> {
    let curve = metrics::referral_curve(records, metrics::DEFAULT_REFERRAL_STEPS)?;
    let gamma = metrics::select_threshold(&curve, mae_limit)?;
    Ok((curve, gamma))
}

/// Writes the referral curve before reporting an infeasible limit.
pub fn cmd_calibrate(id_csv: &Path, mae_limit: f64, curve_out: &Path) -> Result<GateThreshold> {
    let recs = records::read_records(id_csv)?;
    let curve = metrics::referral_curve(&recs, metrics::DEFAULT_REFERRAL_STEPS)?;
    records::write_referral(curve_out, &curve)?;
    Ok(metrics::select_threshold(&curve, mae_limit)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutcome {
    pub decision: GateDecision,
    pub lipschitz: f64,
    pub reconstruction: Image,
    pub map: UncertaintyMap,
}

pub fn gate(model: &ReconModel, input: &[f64], gamma: f64, noise_fraction: f64, noise_seed: u64) -> Result<GateOutcome> {
    if !gamma.is_finite() && gamma != f64::INFINITY {
        return Err(CliError::Config(format!("gamma must be a number, got {gamma}")));
    }
    let reconstruction = model.forward(input, Mode::Deterministic)?;
    let (l, map) = uncertainty::local_lipschitz(model, input, noise_fraction, noise_seed)?;
    let threshold = GateThreshold {
        gamma,
        mae_limit: f64::NAN,
        fraction: f64::NAN,
    };
    Ok(GateOutcome {
        decision: threshold.decide(l.value),
        lipschitz: l.value,
        reconstruction,
        map,
    })
}

/// Reads the single `input` tensor of a tensor file.
pub fn read_sensor_input(path: &Path) -> Result<Vec<f64>> {
    let mut tensors = format::load_tensors(path)?;
    match tensors.iter().position(|t| t.name == "input") {
        Some(i) => Ok(tensors.swap_remove(i).data),
        None => Err(CliError::Format(format!("{} has no `input` tensor", path.display()))),
    }
}

pub fn cmd_gate(
    checkpoint: &Path,
    input: &Path,
    gamma: f64,
    noise_fraction: f64,
    noise_seed: u64,
    out: Option<&Path>,
) -> Result<GateOutcome> {
    let model = format::load_checkpoint(checkpoint)?;
    let x = read_sensor_input(input)?;
    let outcome = gate(&model, &x, gamma, noise_fraction, noise_seed)?;
    if let Some(out) = out {
        format::save_tensors(
            out,
            &[
                format::image_tensor("reconstruction", &outcome.reconstruction),
                format::image_tensor(outcome.map.method.name(), &outcome.map.pixels),
            ],
        )?;
    }
    Ok(outcome)
}

/// Copies sample `index` of a dataset into a standalone tensor file.
pub fn cmd_extract(dataset: &Path, index: usize, out: &Path) -> Result<()> {
    let ds = format::load_dataset(dataset)?;
    let s = ds
        .samples
        .get(index)
        .ok_or_else(|| CliError::Config(format!("sample {index} out of range (count {})", ds.samples.len())))?;
    let tensors: Vec<Tensor> = vec![
        format::sensor_tensor(&s.pair.input),
        format::image_tensor("target", &s.pair.target),
    ];
    format::save_tensors(out, &tensors)
}
