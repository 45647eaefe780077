//! End-to-end run: data, training, scoring, OOD curves and calibration.

use std::path::{Path, PathBuf};

use lipgate::metrics::{self, EvalRecord, GateThreshold};
use lipgate::models::{ArchKind, ReconModel};

use crate::commands::{self, Method, ScoreColumn};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::format::{self, Dataset};
use crate::records;

#[derive(Debug, Clone)]
pub struct MethodReport {
    pub method: Method,
    pub id: Vec<EvalRecord>,
    pub ood: Vec<EvalRecord>,
    pub auc_lipschitz: f64,
    pub auc_variance: f64,
    /// Spearman ρ(L_Φ, MAE) over the ID test records.
    pub spearman_id: f64,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub out_dir: PathBuf,
    pub methods: Vec<MethodReport>,
    /// Threshold from the single-model ID records at the 75th-percentile MAE.
    pub calibration: Option<GateThreshold>,
}

pub struct Splits {
    pub train: Dataset,
    pub id_test: Dataset,
    pub ood_test: Dataset,
}

/// Generates all splits, or loads them when the containers already exist.
pub fn splits(cfg: &RunConfig, out_dir: &Path) -> Result<Splits> {
    let paths = [commands::TRAIN_FILE, commands::ID_TEST_FILE, commands::OOD_TEST_FILE].map(|f| out_dir.join(f));
    if !paths.iter().all(|p| p.exists()) {
        commands::cmd_datagen(cfg, out_dir)?;
    }
    let [train, id_test, ood_test] = paths.map(|p| format::load_dataset(&p));
    Ok(Splits {
        train: train?,
        id_test: id_test?,
        ood_test: ood_test?,
    })
}

/// Linear-interpolated quantile of `values`, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn trained(
    cfg: &RunConfig,
    kind: ArchKind,
    member: u64,
    epochs: usize,
    data: &Dataset,
    out_dir: &Path,
    stem: &str,
    log: &mut impl FnMut(&str),
) -> Result<(ReconModel, PathBuf)> {
    let ckpt = out_dir.join(format!("{stem}.lipg"));
    if let Ok(m) = format::load_checkpoint(&ckpt) {
        if m.spec() == &cfg.arch_spec_for(kind)? && m.seed() == commands::model_seed(cfg, member) {
            log(&format!("reusing {}", ckpt.display()));
            return Ok((m, ckpt));
        }
    }
    let (model, history) = commands::train_model(cfg, kind, member, epochs, data, |s| {
        log(&format!("{stem} epoch {} loss {:.4}", s.epoch, s.mean_total_loss))
    })?;
    format::save_checkpoint(&ckpt, &model)?;
    records::write_loss(&out_dir.join(format!("{stem}_loss.csv")), &history)?;
    Ok((model, ckpt))
}

pub fn run(cfg: &RunConfig, methods: &[Method], mut log: impl FnMut(&str)) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out_dir = cfg.paths.out_dir.clone();
    let data = splits(cfg, &out_dir)?;
    log(&format!(
        "data: {} train, {} id, {} ood",
        data.train.samples.len(),
        data.id_test.samples.len(),
        data.ood_test.samples.len()
    ));
    let epochs = cfg.train.epochs;
    let mut reports = Vec::new();
    let mut calibration = None;
    for &method in methods {
        let (models, checkpoints): (Vec<ReconModel>, Vec<PathBuf>) = match method {
            Method::Single => {
                let kind = cfg.arch_kind()?;
                vec![trained(cfg, kind, 0, epochs, &data.train, &out_dir, "single", &mut log)?].into_iter().unzip()
            }
            Method::Mc => {
                if cfg.arch.dropout_p <= 0.0 {
                    return Err(CliError::Config("MC dropout needs arch.dropout_p > 0".into()));
                }
                vec![trained(cfg, ArchKind::AutomapDropout, 100, epochs, &data.train, &out_dir, "dropout", &mut log)?]
                    .into_iter()
                    .unzip()
            }
            Method::Ensemble => {
                let kind = cfg.arch_kind()?;
                let e = cfg.train.ensemble_epochs.unwrap_or(epochs);
                (1..=cfg.uncertainty.ensemble_size as u64)
                    .map(|m| trained(cfg, kind, m, e, &data.train, &out_dir, &format!("member{m}"), &mut log))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .unzip()
            }
        };
        let id = commands::evaluate(cfg, &models, &data.id_test, method)?;
        let ood = commands::evaluate(cfg, &models, &data.ood_test, method)?;
        let name = method.name();
        records::write_records(&out_dir.join(format!("{name}_id.csv")), &id)?;
        records::write_records(&out_dir.join(format!("{name}_ood.csv")), &ood)?;
        let roc_l = commands::ood_roc(&id, &ood, ScoreColumn::Lipschitz)?;
        let roc_v = commands::ood_roc(&id, &ood, ScoreColumn::Variance)?;
        records::write_roc(&out_dir.join(format!("{name}_roc_lipschitz.csv")), &roc_l)?;
        records::write_roc(&out_dir.join(format!("{name}_roc_variance.csv")), &roc_v)?;
        let lips: Vec<f64> = id.iter().map(|r| r.lipschitz).collect();
        let maes: Vec<f64> = id.iter().map(|r| r.mae).collect();
        let spearman_id = metrics::spearman(&lips, &maes)?;
        log(&format!(
            "{name}: spearman {spearman_id:.4}, AUC lipschitz {:.4}, AUC variance {:.4}",
            roc_l.auc, roc_v.auc
        ));
        if method == Method::Single {
            let limit = quantile(&maes, 0.75);
            let (curve, gamma) = commands::calibrate(&id, limit)?;
            records::write_referral(&out_dir.join("referral.csv"), &curve)?;
            log(&format!("gamma {:.6} at referral fraction {:.2}", gamma.gamma, gamma.fraction));
            calibration = Some(gamma);
        }
        reports.push(MethodReport {
            method,
            id,
            ood,
            auc_lipschitz: roc_l.auc,
            auc_variance: roc_v.auc,
            spearman_id,
            checkpoints,
        });
    }
    Ok(ExperimentReport {
        out_dir,
        methods: reports,
        calibration,
    })
}
