//! Config-driven experiment runner: method grids over latent size and PSNR,
//! checkpoints, metrics CSVs, plots and offline detection.

mod config;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{DataConfig, ExperimentConfig, ModelConfig, ModelSelection, SweepConfig, TrainSection, DATA_ENV};
pub use plot::{emit_plot_data, render_line_chart, Series};

use crate::channel::{latency_ms, ChannelConfig};
use crate::datasets::idx::sha256_hex;
use crate::datasets::{
    build_colored_environment, load_semantic_shift_set, EnvironmentSpec, LabeledExample, RawImageSet, Role, Split,
};
use crate::detection::{auroc, choose_threshold, score_dataset, write_scores_csv, DetectorState, Identity};
use crate::encoder_decoder::Checkpoint;
use crate::encoder_decoder::{InputShape, LabelOracle, Model, ModelSpec};
use crate::error::{Error, Result};
use crate::objectives::Objective;
use crate::trainer::{derive_seed, evaluate_accuracy, train};

/// Bumped whenever a CSV column changes.
pub const CSV_SCHEMA: u32 = 1;
pub const RD_HEADER: &str = "method,latent_dim,latency_ms,test_accuracy";
pub const PSNR_HEADER: &str = "method,latent_dim,train_psnr,test_psnr,test_accuracy,auroc";
pub const MANIFEST: &str = "manifest.json";
pub const FAILED: &str = "FAILED";

/// Which grid a command trains and which tables it writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every method x latent size x training PSNR; both tables.
    Full,
    /// Every latent size at the first training PSNR; `rd.csv` only.
    RateDistortion,
    /// Every training PSNR at the first latent size; `psnr.csv` only.
    Psnr,
}

impl Mode {
    fn writes_rd(self) -> bool {
        matches!(self, Mode::Full | Mode::RateDistortion)
    }

    fn writes_psnr(self) -> bool {
        matches!(self, Mode::Full | Mode::Psnr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub version: String,
    pub csv_schema: u32,
    pub config_sha256: String,
    pub seed: u64,
    pub mode: Mode,
    pub points: Vec<String>,
}

impl Manifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST);
        if !path.is_file() {
            return Err(Error::Missing {
                dir: run_dir.to_path_buf(),
                files: vec![MANIFEST.into()],
            });
        }
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// Colored environments built from the configured data root.
pub struct ExperimentData {
    pub train: Vec<Vec<LabeledExample>>,
    pub test: Vec<LabeledExample>,
    pub ood: Option<Vec<LabeledExample>>,
    pub input: InputShape,
}

fn take(n: usize, available: usize, field: &str) -> Result<usize> {
    match n {
        0 => Ok(available),
        n if n <= available => Ok(n),
        n => Err(Error::config(
            field,
            format!("asks for {n} examples, only {available} available"),
        )),
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

impl ExperimentData {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let root = cfg.data_root();
        let d = &cfg.data;
        let dir = root.join(&d.dataset);
        let train_raw = RawImageSet::load(&dir, Split::Train)?;
        let test_raw = RawImageSet::load(&dir, Split::Test)?;
        let envs = d.train_bias.len();
        let per_env = take(d.train_size, train_raw.len() / envs, "data.train_size")?;
        let perm = shuffled(train_raw.len(), derive_seed(cfg.seed, &["data", "train-split"]));
        let mut train_envs = Vec::with_capacity(envs);
        for (i, &bias) in d.train_bias.iter().enumerate() {
            let raw = train_raw.subset(&perm[i * per_env..(i + 1) * per_env]);
            let spec = EnvironmentSpec::new(bias, d.label_noise, i, Role::Train)?.with_labels(d.labels);
            let seed = derive_seed(cfg.seed, &["data", "env", &i.to_string()]);
            train_envs.push(build_colored_environment(&raw, &spec, seed)?);
        }
        let n_test = take(d.test_size, test_raw.len(), "data.test_size")?;
        let test_idx = shuffled(test_raw.len(), derive_seed(cfg.seed, &["data", "test-split"]));
        let test_spec = EnvironmentSpec::new(d.test_bias, d.label_noise, envs, Role::Test)?.with_labels(d.labels);
        let test = build_colored_environment(
            &test_raw.subset(&test_idx[..n_test]),
            &test_spec,
            derive_seed(cfg.seed, &["data", "test"]),
        )?;
        let ood = match &d.ood_dataset {
            Some(name) => {
                let raw = RawImageSet::load(&root.join(name), Split::Test)?;
                let n = take(d.ood_size, raw.len(), "data.ood_size")?;
                let idx = shuffled(raw.len(), derive_seed(cfg.seed, &["data", "ood-split"]));
                let spec = EnvironmentSpec::new(0.5, 0.0, envs + 1, Role::Test)?;
                Some(load_semantic_shift_set(
                    &raw.subset(&idx[..n]),
                    &spec,
                    derive_seed(cfg.seed, &["data", "ood"]),
                )?)
            }
            None => None,
        };
        let input = InputShape {
            channels: crate::datasets::COLOR_CHANNELS,
            height: train_raw.rows,
            width: train_raw.cols,
        };
        Ok(Self {
            train: train_envs,
            test,
            ood,
            input,
        })
    }
}

/// One (method, latent size, training PSNR) cell of the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub method: Objective,
    pub latent_dim: usize,
    pub train_psnr: f64,
}

impl SweepPoint {
    pub fn id(&self) -> String {
        format!("{}_k{}_p{}", self.method, self.latent_dim, self.train_psnr)
    }

    pub fn seed(&self, master: u64) -> u64 {
        derive_seed(
            master,
            &[
                "point",
                self.method.name(),
                &self.latent_dim.to_string(),
                &self.train_psnr.to_string(),
            ],
        )
    }
}

pub fn sweep_points(cfg: &ExperimentConfig, mode: Mode) -> Vec<SweepPoint> {
    let s = &cfg.sweep;
    let dims: &[usize] = if mode == Mode::Psnr {
        &s.latent_dims[..1]
    } else {
        &s.latent_dims
    };
    let psnrs: &[f64] = if mode == Mode::RateDistortion {
        &s.train_psnr[..1]
    } else {
        &s.train_psnr
    };
    let mut out = Vec::new();
    for &method in &cfg.methods {
        for &latent_dim in dims {
            for &train_psnr in psnrs {
                out.push(SweepPoint {
                    method,
                    latent_dim,
                    train_psnr,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdRow {
    pub method: String,
    pub latent_dim: usize,
    pub latency_ms: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsnrRow {
    pub method: String,
    pub latent_dim: usize,
    pub train_psnr: f64,
    pub test_psnr: f64,
    pub test_accuracy: f64,
    pub auroc: Option<f64>,
}

fn rd_csv(rows: &[RdRow]) -> String {
    let mut s = format!("{RD_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.method, r.latent_dim, r.latency_ms, r.test_accuracy
        ));
    }
    s
}

fn psnr_csv(rows: &[PsnrRow]) -> String {
    let mut s = format!("{PSNR_HEADER}\n");
    for r in rows {
        let auroc = r.auroc.map(|a| a.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method, r.latent_dim, r.train_psnr, r.test_psnr, r.test_accuracy, auroc
        ));
    }
    s
}

fn bad_row(file: &str, line: usize, what: &str) -> Error {
    Error::Format {
        offset: line,
        reason: format!("{file} line {line}: {what}"),
    }
}

fn split_row<'a>(file: &str, line: usize, text: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let cols: Vec<&str> = text.split(',').collect();
    if cols.len() != n {
        return Err(bad_row(
            file,
            line,
            &format!("expected {n} columns, got {}", cols.len()),
        ));
    }
    Ok(cols)
}

fn num<T: std::str::FromStr>(file: &str, line: usize, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| bad_row(file, line, &format!("cannot parse `{s}`")))
}

/// Parse `rd.csv`, checking its header.
pub fn parse_rd_csv(text: &str) -> Result<Vec<RdRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(RD_HEADER) {
        return Err(bad_row("rd.csv", 1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let line = i + 2;
            let c = split_row("rd.csv", line, l, 4)?;
            Ok(RdRow {
                method: c[0].to_string(),
                latent_dim: num("rd.csv", line, c[1])?,
                latency_ms: num("rd.csv", line, c[2])?,
                test_accuracy: num("rd.csv", line, c[3])?,
            })
        })
        .collect()
}

/// Parse `psnr.csv`, checking its header.
pub fn parse_psnr_csv(text: &str) -> Result<Vec<PsnrRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(PSNR_HEADER) {
        return Err(bad_row("psnr.csv", 1, "unexpected header"));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let line = i + 2;
            let c = split_row("psnr.csv", line, l, 6)?;
            Ok(PsnrRow {
                method: c[0].to_string(),
                latent_dim: num("psnr.csv", line, c[1])?,
                train_psnr: num("psnr.csv", line, c[2])?,
                test_psnr: num("psnr.csv", line, c[3])?,
                test_accuracy: num("psnr.csv", line, c[4])?,
                auroc: if c[5].is_empty() {
                    None
                } else {
                    Some(num("psnr.csv", line, c[5])?)
                },
            })
        })
        .collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Everything measured for one trained sweep point.
#[derive(Debug, Clone)]
pub struct PointResult {
    pub point: SweepPoint,
    pub rd: Option<RdRow>,
    pub psnr: Vec<PsnrRow>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub rd: Vec<RdRow>,
    pub psnr: Vec<PsnrRow>,
}

fn train_point(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    point: SweepPoint,
    mode: Mode,
    dir: &Path,
) -> Result<PointResult> {
    let seed = point.seed(cfg.seed);
    let spec = ModelSpec {
        arch: cfg.model.arch.clone(),
        input: data.input,
        latent_dim: point.latent_dim,
        num_classes: cfg.data.labels.num_classes(),
        p_max: cfg.model.p_max,
    };
    let model = Model::<f32>::new(spec, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &["init"])))?;
    let tc = cfg
        .train
        .to_train_config(point.method, point.train_psnr, cfg.model.p_max, seed);
    let outcome = train(&tc, &data.train, model, Some(&data.test))?;
    let model = match cfg.sweep.selection {
        ModelSelection::Final => &outcome.model,
        ModelSelection::TrainDomain => outcome.best_by_train.as_ref().unwrap_or(&outcome.model),
        ModelSelection::TestDomain => outcome.best_by_test.as_ref().unwrap_or(&outcome.model),
    };
    let priors = &outcome.priors;

    fs::create_dir_all(dir)?;
    let ck = Checkpoint::from_model(model, Some(priors), serde_json::to_value(&tc)?);
    ck.save(&dir.join("checkpoint.json"))?;
    write_atomic(&dir.join("history.jsonl"), outcome.record.to_jsonl()?.as_bytes())?;
    write_atomic(&dir.join("record.json"), &serde_json::to_vec_pretty(&outcome.record)?)?;

    let train_channel = tc.channel()?;
    let detects = point.method.class_priors() && data.ood.is_some();
    if detects {
        let id = score_dataset(
            model,
            &data.test,
            &train_channel,
            priors,
            &Identity,
            derive_seed(seed, &["calibrate"]),
        )?;
        let state = DetectorState::new(priors.clone(), choose_threshold(&id, cfg.sweep.target_tpr)?)?;
        write_atomic(&dir.join("detector.json"), &serde_json::to_vec_pretty(&state)?)?;
    }

    let rd = if mode.writes_rd() {
        let acc = evaluate_accuracy(
            model,
            &data.test,
            &train_channel,
            tc.eval_repeats,
            derive_seed(seed, &["test", &point.train_psnr.to_string()]),
        )?;
        Some(RdRow {
            method: point.method.to_string(),
            latent_dim: point.latent_dim,
            latency_ms: latency_ms(point.latent_dim)?,
            test_accuracy: acc,
        })
    } else {
        None
    };

    let mut psnr = Vec::new();
    if mode.writes_psnr() {
        for &test_psnr in &cfg.sweep.test_psnr {
            let ch = ChannelConfig::from_psnr(cfg.model.p_max, test_psnr)?;
            let tag = test_psnr.to_string();
            let acc = evaluate_accuracy(
                model,
                &data.test,
                &ch,
                tc.eval_repeats,
                derive_seed(seed, &["test", &tag]),
            )?;
            let auroc = match (&data.ood, detects) {
                (Some(ood), true) => {
                    let id = score_dataset(
                        model,
                        &data.test,
                        &ch,
                        priors,
                        &Identity,
                        derive_seed(seed, &["id", &tag]),
                    )?;
                    let od = score_dataset(model, ood, &ch, priors, &Identity, derive_seed(seed, &["ood", &tag]))?;
                    Some(auroc(&id, &od)?)
                }
                _ => None,
            };
            psnr.push(PsnrRow {
                method: point.method.to_string(),
                latent_dim: point.latent_dim,
                train_psnr: point.train_psnr,
                test_psnr,
                test_accuracy: acc,
                auroc,
            });
        }
    }
    Ok(PointResult { point, rd, psnr })
}

/// Label-oracle rows: the clean-label predictor through a noiseless link,
/// which scores `1 - label_noise` in expectation at every PSNR.
fn oracle_rows(cfg: &ExperimentConfig, data: &ExperimentData, points: &[SweepPoint]) -> Result<Vec<PsnrRow>> {
    let oracle = LabelOracle {
        num_classes: cfg.data.labels.num_classes(),
        p_max: cfg.model.p_max,
    };
    let acc = evaluate_accuracy(&oracle, &data.test, &ChannelConfig::new(cfg.model.p_max, 0.0)?, 1, 0)?;
    let mut train_psnrs: Vec<f64> = Vec::new();
    for p in points {
        if !train_psnrs.contains(&p.train_psnr) {
            train_psnrs.push(p.train_psnr);
        }
    }
    let mut rows = Vec::new();
    for &train_psnr in &train_psnrs {
        for &test_psnr in &cfg.sweep.test_psnr {
            rows.push(PsnrRow {
                method: "oracle".into(),
                latent_dim: oracle.num_classes,
                train_psnr,
                test_psnr,
                test_accuracy: acc,
                auroc: None,
            });
        }
    }
    Ok(rows)
}

/// Train every point of the grid and write the run directory.
///
/// Tables are rewritten after each point, so a failure leaves the finished
/// rows on disk next to a `FAILED` marker holding the error.
pub fn run_experiment(cfg: &ExperimentConfig, config_text: &str, out: &Path, mode: Mode) -> Result<RunSummary> {
    cfg.validate()?;
    let data = ExperimentData::load(cfg)?;
    run_with_data(cfg, config_text, out, mode, &data)
}

/// As [`run_experiment`] with preloaded data.
pub fn run_with_data(
    cfg: &ExperimentConfig,
    config_text: &str,
    out: &Path,
    mode: Mode,
    data: &ExperimentData,
) -> Result<RunSummary> {
    fs::create_dir_all(out)?;
    let failed = out.join(FAILED);
    if failed.exists() {
        fs::remove_file(&failed)?;
    }
    let points = sweep_points(cfg, mode);
    let manifest = Manifest {
        name: cfg.name.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
        csv_schema: CSV_SCHEMA,
        config_sha256: sha256_hex(config_text.as_bytes()),
        seed: cfg.seed,
        mode,
        points: points.iter().map(SweepPoint::id).collect(),
    };
    write_atomic(&out.join("config.toml"), config_text.as_bytes())?;
    write_atomic(&out.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;

    let mut summary = RunSummary {
        run_dir: out.to_path_buf(),
        rd: Vec::new(),
        psnr: Vec::new(),
    };
    let result = (|| -> Result<()> {
        let oracle = if cfg.oracle_row && mode.writes_psnr() {
            oracle_rows(cfg, data, &points)?
        } else {
            Vec::new()
        };
        for point in &points {
            log::info!("training {}", point.id());
            let r = train_point(cfg, data, *point, mode, &out.join("points").join(point.id()))?;
            summary.rd.extend(r.rd);
            summary.psnr.extend(r.psnr);
            if mode.writes_rd() {
                write_atomic(&out.join("rd.csv"), rd_csv(&summary.rd).as_bytes())?;
            }
            if mode.writes_psnr() {
                write_atomic(&out.join("psnr.csv"), psnr_csv(&summary.psnr).as_bytes())?;
            }
        }
        if mode.writes_psnr() {
            summary.psnr.extend(oracle);
            write_atomic(&out.join("psnr.csv"), psnr_csv(&summary.psnr).as_bytes())?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        fs::write(&failed, format!("{e}\n"))?;
        return Err(e);
    }
    Ok(summary)
}

/// Per-checkpoint outcome of [`detect_run`].
#[derive(Debug, Clone, PartialEq)]
pub struct DetectReport {
    pub point: String,
    pub threshold: f64,
    pub flagged_fraction: f64,
    /// Against the run's own test environment.
    pub auroc: f64,
    pub scores_csv: PathBuf,
}

/// Score the images in `ood_file` with every checkpoint of a finished run.
///
/// The threshold keeps `target_tpr` of the run's test environment; each
/// point gets `detect/<point>.csv` with `sample_id,score,verdict` rows.
pub fn detect_run(run_dir: &Path, ood_file: &Path, target_tpr: Option<f64>) -> Result<Vec<DetectReport>> {
    let manifest = Manifest::load(run_dir)?;
    let (cfg, _) = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let data = ExperimentData::load(&cfg)?;
    let raw = RawImageSet::load_images(ood_file)?;
    let spec = EnvironmentSpec::new(0.5, 0.0, cfg.data.train_bias.len() + 1, Role::Test)?;
    let ood = load_semantic_shift_set(&raw, &spec, derive_seed(cfg.seed, &["detect", "ood"]))?;
    let tpr = target_tpr.unwrap_or(cfg.sweep.target_tpr);
    let out_dir = run_dir.join("detect");
    fs::create_dir_all(&out_dir)?;
    let mut reports = Vec::new();
    for id in &manifest.points {
        let path = run_dir.join("points").join(id).join("checkpoint.json");
        if !path.is_file() {
            log::warn!("{id}: no checkpoint, skipped");
            continue;
        }
        let ck = Checkpoint::load(&path)?;
        let objective: Option<Objective> = ck
            .config
            .get("objective")
            .and_then(|v| serde_json::from_value(v.clone()).ok());
        if !objective.is_some_and(Objective::class_priors) {
            log::info!("{id}: objective does not fit class priors, skipped");
            continue;
        }
        let Some(priors) = ck.priors.clone() else {
            log::warn!("{id}: checkpoint has no priors, skipped");
            continue;
        };
        let model: Model<f32> = ck.to_model()?;
        let psnr = ck
            .config
            .get("psnr_db")
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| Error::param(format!("{id}: checkpoint config lacks psnr_db")))?;
        let channel = ChannelConfig::from_psnr(ck.spec.p_max, psnr)?;
        let seed = derive_seed(cfg.seed, &["detect", id]);
        let id_scores = score_dataset(&model, &data.test, &channel, &priors, &Identity, seed)?;
        let ood_scores = score_dataset(&model, &ood, &channel, &priors, &Identity, seed ^ 1)?;
        let threshold = choose_threshold(&id_scores, tpr)?;
        let scores_csv = out_dir.join(format!("{id}.csv"));
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &ood_scores, threshold)?;
        write_atomic(&scores_csv, &buf)?;
        let flagged = ood_scores.iter().filter(|&&s| s < threshold).count() as f64 / ood_scores.len() as f64;
        reports.push(DetectReport {
            point: id.clone(),
            threshold,
            flagged_fraction: flagged,
            auroc: auroc(&id_scores, &ood_scores)?,
            scores_csv,
        });
    }
    Ok(reports)
}
