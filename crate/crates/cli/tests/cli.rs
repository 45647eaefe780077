use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lipgate::metrics::{self, EvalRecord, Label};
use lipgate::models::ReconModel;
use lipgate_cli::{format, records, RunConfig};

fn lipgate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lipgate")).args(args).output().expect("spawn lipgate")
}

fn ok(args: &[&str]) -> String {
    let out = lipgate(args);
    assert!(
        out.status.success(),
        "lipgate {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, task: &str, extra: &str) -> PathBuf {
    let text = format!(
        r#"task = "{task}"
seed = 3

[arch]
fc1_width = 24
conv_filters = 2
conv_kernel = 3
out_kernel = 3

[train]
epochs = 2
batch_size = 8
{extra}

[data]
n = 8
train_count = 24
id_test_count = 10
ood_test_count = 10

[paths]
out_dir = "{}"
"#,
        dir.display()
    );
    let path = dir.join(format!("{task}.toml"));
    fs::write(&path, text).unwrap();
    path
}

/// Generates data and trains one model; returns (config, checkpoint).
fn trained(dir: &Path, task: &str) -> (PathBuf, PathBuf) {
    let cfg = write_config(dir, task, "");
    ok(&["datagen", "--config", s(&cfg)]);
    let ckpt = dir.join("m.lipg");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&dir.join("train.lipd")),
        "--checkpoint",
        s(&ckpt),
        "--loss-csv",
        s(&dir.join("loss.csv")),
    ]);
    (cfg, ckpt)
}

fn write_records(path: &Path, scores: &[(f64, f64)], label: Label) {
    let recs: Vec<EvalRecord> = scores
        .iter()
        .enumerate()
        .map(|(i, &(lipschitz, mae))| EvalRecord {
            sample_id: i as u64,
            label,
            mae,
            lipschitz,
            variance: lipschitz / 10.0,
        })
        .collect();
    records::write_records(path, &recs).unwrap();
}

#[test]
fn datagen_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "denoise", "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["datagen", "--config", s(&cfg), "--out-dir", s(&a)]);
    ok(&["datagen", "--config", s(&cfg), "--out-dir", s(&b)]);
    for f in ["train.lipd", "id_test.lipd", "ood_test.lipd"] {
        let first = fs::read(a.join(f)).unwrap();
        assert_eq!(first, fs::read(b.join(f)).unwrap(), "{f} differs between runs");
        let ds = format::decode_dataset(&first).unwrap();
        assert_eq!(format::encode_dataset(&ds), first);
    }
}

#[test]
fn default_config_emits_full_split_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("default.toml");
    fs::write(&cfg, format!("[paths]\nout_dir = \"{}\"\n", dir.path().display())).unwrap();
    let out = ok(&["datagen", "--config", s(&cfg)]);
    let counts: Vec<&str> = out.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(counts, ["2000", "500", "500"]);
}

#[test]
fn seed_override_changes_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "automap", "");
    ok(&["datagen", "--config", s(&cfg), "--out-dir", s(&dir.path().join("a"))]);
    ok(&["datagen", "--config", s(&cfg), "--seed", "99", "--out-dir", s(&dir.path().join("b"))]);
    assert_ne!(
        fs::read(dir.path().join("a/id_test.lipd")).unwrap(),
        fs::read(dir.path().join("b/id_test.lipd")).unwrap()
    );
}

#[test]
fn zero_epoch_checkpoint_is_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), "automap", "");
    ok(&["datagen", "--config", s(&cfg_path)]);
    let text = fs::read_to_string(&cfg_path).unwrap().replace("epochs = 2", "epochs = 0");
    fs::write(&cfg_path, &text).unwrap();
    let ckpt = dir.path().join("zero.lipg");
    let loss = dir.path().join("zero.csv");
    ok(&["train", "--config", s(&cfg_path), "--data", s(&dir.path().join("train.lipd")), "--checkpoint", s(&ckpt), "--loss-csv", s(&loss)]);
    let cfg = RunConfig::from_toml(&text).unwrap();
    let init = ReconModel::init(cfg.arch_spec().unwrap(), lipgate_cli::commands::model_seed(&cfg, 0)).unwrap();
    assert_eq!(format::load_checkpoint(&ckpt).unwrap(), init);
    assert_eq!(fs::read_to_string(&loss).unwrap().lines().count(), 1);
}

#[test]
fn loss_csv_has_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), "automap");
    let text = fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("epoch,mean_total_loss,mean_data_loss"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn toy_denoise_training_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "denoise", "learning_rate = 1e-3\nl2_lambda = 1e-6\nl1_gamma = 1e-6");
    let text = fs::read_to_string(&cfg).unwrap().replace("epochs = 2", "epochs = 30");
    fs::write(&cfg, text).unwrap();
    ok(&["datagen", "--config", s(&cfg)]);
    let loss = dir.path().join("loss.csv");
    ok(&["train", "--config", s(&cfg), "--data", s(&dir.path().join("train.lipd")), "--checkpoint", s(&dir.path().join("d.lipg")), "--loss-csv", s(&loss)]);
    let totals: Vec<f64> = fs::read_to_string(&loss)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(totals.len(), 30);
    assert!(totals[29] < totals[0], "loss {} -> {}", totals[0], totals[29]);
}

#[test]
fn eval_is_deterministic_with_one_row_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = trained(dir.path(), "automap");
    let data = dir.path().join("id_test.lipd");
    let mut outputs = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let out = dir.path().join(name);
        ok(&["eval", "--config", s(&cfg), "--dataset", s(&data), "--checkpoint", s(&ckpt), "--out", s(&out)]);
        outputs.push(fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let recs = records::parse_records(&outputs[0]).unwrap();
    assert_eq!(recs.len(), 10);
    assert!(String::from_utf8_lossy(&outputs[0]).starts_with("sample_id,label,mae,lipschitz,variance\n"));
}

#[test]
fn ensemble_of_identical_members_has_zero_variance() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = trained(dir.path(), "automap");
    let out = dir.path().join("ens.csv");
    let mut args = vec!["eval", "--config", s(&cfg), "--method", "ensemble", "--dataset"];
    let data = dir.path().join("id_test.lipd");
    args.push(s(&data));
    for _ in 0..5 {
        args.extend(["--checkpoint", s(&ckpt)]);
    }
    args.extend(["--out", s(&out)]);
    ok(&args);
    let recs = records::read_records(&out).unwrap();
    assert_eq!(recs.len(), 10);
    assert!(recs.iter().all(|r| r.variance == 0.0));
}

#[test]
fn mc_eval_rejects_a_dropout_free_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = trained(dir.path(), "automap");
    let out = lipgate(&["eval", "--config", s(&cfg), "--method", "mc", "--dataset", s(&dir.path().join("id_test.lipd")), "--checkpoint", s(&ckpt), "--out", s(&dir.path().join("mc.csv"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ood_auc_examples() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (id, ood, roc) = (d.join("id.csv"), d.join("ood.csv"), d.join("roc.csv"));
    write_records(&id, &[(0.1, 0.01), (0.4, 0.02)], Label::Id);
    write_records(&ood, &[(0.35, 0.03), (0.8, 0.04)], Label::Ood);
    let auc = |a: &Path, b: &Path| ok(&["ood", "--id", s(a), "--ood", s(b), "--out", s(&roc)]);
    assert_eq!(auc(&id, &ood).trim(), "AUC 0.750000");
    assert_eq!(auc(&ood, &id).trim(), "AUC 0.250000");
    let points = fs::read_to_string(&roc).unwrap();
    assert!(points.starts_with("fpr,tpr\n"));

    write_records(&ood, &[(5.0, 0.03), (6.0, 0.04)], Label::Ood);
    assert_eq!(auc(&id, &ood).trim(), "AUC 1.000000");
    let variance = ok(&["ood", "--id", s(&id), "--ood", s(&ood), "--score", "variance", "--out", s(&roc)]);
    assert_eq!(variance.trim(), "AUC 1.000000");
}

#[test]
fn calibrate_matches_scan_and_signals_infeasible_limits() {
    let dir = tempfile::tempdir().unwrap();
    let (recs, curve) = (dir.path().join("id.csv"), dir.path().join("curve.csv"));
    let fixture: Vec<(f64, f64)> = (0..10).map(|i| (0.1 * (i + 1) as f64, 0.005 * (i + 1) as f64 + 0.001 * (i % 3) as f64)).collect();
    write_records(&recs, &fixture, Label::Id);
    let mean = fixture.iter().map(|f| f.1).sum::<f64>() / 10.0;

    let out = ok(&["calibrate", "--records", s(&recs), "--mae-limit", &mean.to_string(), "--out", s(&curve)]);
    assert!(out.contains("referral fraction 0\n"), "{out}");

    let mean_lip: Vec<f64> = fs::read_to_string(&curve)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(mean_lip.windows(2).all(|w| w[1] <= w[0]));

    let parsed = records::read_records(&recs).unwrap();
    let full = metrics::referral_curve(&parsed, metrics::DEFAULT_REFERRAL_STEPS).unwrap();
    for limit in [0.03, 0.025, 0.02, 0.012] {
        let i = full.mean_mae.iter().position(|&m| m <= limit).unwrap();
        let out = ok(&["calibrate", "--records", s(&recs), "--mae-limit", &limit.to_string(), "--out", s(&curve)]);
        assert!(out.contains(&format!("gamma {}\n", full.retained_max[i])), "{out}");
        assert!(out.contains(&format!("referral fraction {}\n", full.fractions[i])), "{out}");
    }

    let bad = lipgate(&["calibrate", "--records", s(&recs), "--mae-limit", "0.001", "--out", s(&curve)]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("0.005"), "{}", String::from_utf8_lossy(&bad.stderr));
}

#[test]
fn gate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained(dir.path(), "automap");
    let input = dir.path().join("x.lipt");
    ok(&["extract", "--dataset", s(&dir.path().join("id_test.lipd")), "--index", "3", "--out", s(&input)]);
    let gate = |gamma: &str, out: Option<&Path>| {
        let mut args = vec!["gate", "--checkpoint", s(&ckpt), "--input", s(&input), "--gamma", gamma];
        if let Some(o) = out {
            args.extend(["--out", s(o)]);
        }
        lipgate(&args)
    };

    let map = dir.path().join("map.lipt");
    let accept = gate(&f64::MAX.to_string(), Some(&map));
    assert_eq!(accept.status.code(), Some(0));
    let stdout = String::from_utf8(accept.stdout).unwrap();
    assert!(stdout.contains("ACCEPT"));
    let tensors = format::load_tensors(&map).unwrap();
    assert_eq!(tensors.len(), 2);
    assert!(tensors.iter().all(|t| t.shape == [8, 8]));

    let refer = gate("0", None);
    assert_eq!(refer.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&refer.stdout).contains("REFER"));

    // the printed score round-trips exactly, so it is the boundary case
    let l = stdout.lines().find_map(|l| l.strip_prefix("lipschitz ")).unwrap();
    assert_eq!(gate(l, None).status.code(), Some(2));

    let missing = lipgate(&["gate", "--checkpoint", s(&ckpt), "--input", s(&dir.path().join("nope.lipt")), "--gamma", "1"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn gate_rejects_a_corrupted_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained(dir.path(), "automap");
    let input = dir.path().join("x.lipt");
    ok(&["extract", "--dataset", s(&dir.path().join("id_test.lipd")), "--index", "0", "--out", s(&input)]);
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x01;
    fs::write(&ckpt, bytes).unwrap();
    let out = lipgate(&["gate", "--checkpoint", s(&ckpt), "--input", s(&input), "--gamma", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("crc"));
}

#[test]
fn gate_rejects_mismatched_input_shape() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained(dir.path(), "automap");
    let other = dir.path().join("other");
    fs::create_dir(&other).unwrap();
    let cfg = write_config(&other, "denoise", "");
    ok(&["datagen", "--config", s(&cfg)]);
    let input = dir.path().join("x.lipt");
    ok(&["extract", "--dataset", s(&other.join("id_test.lipd")), "--index", "0", "--out", s(&input)]);
    let out = lipgate(&["gate", "--checkpoint", s(&ckpt), "--input", s(&input), "--gamma", "1"]);
    assert_eq!(out.status.code(), Some(1));
}
