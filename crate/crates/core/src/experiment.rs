//! Experiment configuration, the train/evaluate pipeline and artifact
//! writers used by the command-line runner.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_domain, make_ood_suite, Dataset, DomainKind, OodSuite, SyntheticDomainSpec};
use crate::efficiency::{cost_report, ArchSpec, CostReport, CostVariant};
use crate::error::{Error, Result};
use crate::metrics::{calibration_report, CalibrationReport, DetectionReport};
use crate::model::{
    load_checkpoint, predict_with_uncertainty, save_checkpoint, stage1_train, stage2_train, EpochLog, MoEClassifier,
    ModelConfig, PredictOpts, Prediction, TrainConfig,
};
use crate::numerics::rng::mix;
use crate::routers::RouterVariant;
use crate::stability::{
    fixed_temperature_layer_sweep, layerwise_stability, PerturbationSpec, StabilityReport, SweepRow,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub domain: SyntheticDomainSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub delta_near: f64,
    pub delta_far: f64,
    /// Examples per domain in the detection suite.
    pub n_ood: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            domain: SyntheticDomainSpec::default(),
            n_train: 2000,
            n_val: 200,
            n_test: 500,
            delta_near: 1.0,
            delta_far: 3.0,
            n_ood: 500,
        }
    }
}

/// Which blocks receive the variational routers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    All,
    /// The `top_k` least stable blocks at the diagnostic noise level.
    Auto {
        top_k: usize,
    },
    Explicit(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub temperatures: Vec<f64>,
    /// `None` sweeps every block.
    pub layers: Option<Vec<usize>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { temperatures: vec![1e-4, 0.5, 1.0, 2.0, 5.0], layers: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Overrides the data, training and perturbation seeds.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub perturbation: PerturbationSpec,
    pub variants: Vec<RouterVariant>,
    pub layers: LayerSelection,
    pub sweep: SweepConfig,
    pub calibration_bins: usize,
    /// Also draw the stability chart.
    pub svg: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            perturbation: PerturbationSpec::default(),
            variants: vec![RouterVariant::Map, RouterVariant::VglrMf, RouterVariant::VglrFc, RouterVariant::Vtsr],
            layers: LayerSelection::All,
            sweep: SweepConfig::default(),
            calibration_bins: crate::metrics::DEFAULT_BINS,
            svg: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Copy with every sub-seed derived from `seed`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train.seed = self.seed;
        c.data.domain.seed = self.seed;
        c.perturbation.seed = self.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.domain.validate()?;
        self.perturbation.validate()?;
        if self.model.router.variant != RouterVariant::Map {
            return Err(Error::Config("model.router.variant must be map; list routers under `variants`".into()));
        }
        if self.model.features != self.data.domain.feature_dim || self.model.classes != self.data.domain.num_classes {
            return Err(Error::Config("model and data dimensions disagree".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("variant list is empty".into()));
        }
        if self.data.n_train == 0 || self.data.n_val == 0 || self.data.n_test == 0 || self.data.n_ood == 0 {
            return Err(Error::Config("data split sizes must be >= 1".into()));
        }
        if !(0.0 <= self.data.delta_near && self.data.delta_near < self.data.delta_far) {
            return Err(Error::Config("need 0 <= delta_near < delta_far".into()));
        }
        let b = self.model.blocks;
        match &self.layers {
            LayerSelection::All => {}
            LayerSelection::Auto { top_k } if *top_k == 0 || *top_k > b => {
                return Err(Error::Config(format!("auto top_k must lie in 1..={b}")));
            }
            LayerSelection::Explicit(v) if v.is_empty() || v.iter().any(|&l| l >= b) => {
                return Err(Error::Config(format!("explicit layers must be non-empty and < {b}")));
            }
            _ => {}
        }
        if self.sweep.temperatures.is_empty() || self.sweep.temperatures.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::Config("sweep temperatures must be > 0".into()));
        }
        if self.sweep.layers.as_ref().is_some_and(|v| v.iter().any(|&l| l >= b)) {
            return Err(Error::Config("sweep layer out of range".into()));
        }
        if self.calibration_bins == 0 {
            return Err(Error::Config("calibration_bins must be >= 1".into()));
        }
        Ok(())
    }
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn build_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let d = &cfg.data;
    let id = SyntheticDomainSpec { shift: 0.0, rotation: 0.0, ..d.domain.clone() };
    let all = generate_domain(&id, d.n_train + d.n_val + d.n_test, 0, DomainKind::Id)?;
    let (train, val, test) = all.split(d.n_train, d.n_val)?;
    Ok(Splits { train, val, test })
}

pub fn build_suite(cfg: &ExperimentConfig) -> Result<OodSuite> {
    make_ood_suite(&cfg.data.domain, cfg.data.delta_near, cfg.data.delta_far, cfg.data.n_ood)
}

/// Stage 1 on a fresh MAP model.
pub fn train_base(cfg: &ExperimentConfig, splits: &Splits) -> Result<(MoEClassifier, Vec<EpochLog>)> {
    let mut model = MoEClassifier::new(cfg.model.clone(), cfg.seed)?;
    let out = stage1_train(&mut model, &splits.train, &splits.val, &cfg.train)?;
    Ok((model, out.log))
}

pub fn choose_layers(cfg: &ExperimentConfig, base: &MoEClassifier, val: &Dataset) -> Result<Vec<usize>> {
    Ok(match &cfg.layers {
        LayerSelection::All => (0..base.num_blocks()).collect(),
        LayerSelection::Explicit(v) => v.clone(),
        LayerSelection::Auto { top_k } => {
            let spec =
                PerturbationSpec { gamma_levels: vec![cfg.perturbation.diagnostic_gamma], ..cfg.perturbation.clone() };
            let ranking = layerwise_stability(base, val, &spec)?.ranking;
            ranking[..*top_k].to_vec()
        }
    })
}

/// Attaches `variant` routers at `layers` of a copy of `base` and runs stage 2.
pub fn train_variant(
    cfg: &ExperimentConfig,
    base: &MoEClassifier,
    variant: RouterVariant,
    layers: &[usize],
    splits: &Splits,
) -> Result<(MoEClassifier, Vec<EpochLog>)> {
    let mut model = base.clone();
    let router = cfg.model.router.with_variant(variant);
    model.attach_variational_routers(layers, &router, mix(cfg.seed, 0x5EED))?;
    let out = stage2_train(&mut model, &splits.train, &splits.val, &cfg.train)?;
    Ok((model, out.log))
}

/// Fixed evaluation stream, shared by every variant.
pub fn eval_seed(seed: u64) -> u64 {
    mix(seed, 0xE7A1)
}

pub fn predict(model: &MoEClassifier, data: &Dataset, seed: u64, samples: Option<usize>) -> Result<Vec<Prediction>> {
    predict_with_uncertainty(model, data, PredictOpts { seed: eval_seed(seed), samples })
}

pub fn evaluate(
    model: &MoEClassifier,
    data: &Dataset,
    seed: u64,
    samples: Option<usize>,
    bins: usize,
) -> Result<CalibrationReport> {
    let probs: Vec<Vec<f64>> = predict(model, data, seed, samples)?.into_iter().map(|p| p.probs).collect();
    calibration_report(&probs, &data.labels, bins)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodRow {
    /// `near` or `far`.
    pub pair: String,
    pub report: DetectionReport,
}

/// Every signal the model produces, scored on ID versus each shifted domain.
pub fn ood_reports(model: &MoEClassifier, suite: &OodSuite, seed: u64, samples: Option<usize>) -> Result<Vec<OodRow>> {
    let id = predict(model, &suite.id, seed, samples)?;
    let mut rows = Vec::new();
    for (pair, data) in [("near", &suite.near), ("far", &suite.far)] {
        let ood = predict(model, data, seed, samples)?;
        for (name, pick) in SIGNALS {
            let a: Option<Vec<f64>> = id.iter().map(&pick).collect();
            let b: Option<Vec<f64>> = ood.iter().map(&pick).collect();
            if let (Some(a), Some(b)) = (a, b) {
                rows.push(OodRow { pair: pair.to_string(), report: DetectionReport::new(name, a, b)? });
            }
        }
    }
    Ok(rows)
}

type Pick = fn(&Prediction) -> Option<f64>;

const SIGNALS: [(&str, Pick); 4] = [
    ("gate_entropy", |p| Some(p.signals.gate_entropy)),
    ("mc_logit_var", |p| p.signals.mc_logit_var),
    ("inf_logit_var", |p| p.signals.inf_logit_var),
    ("inf_temp", |p| p.signals.inf_temp),
];

/// Mean of the per-layer mean Jaccard values at `gamma`.
pub fn mean_jaccard_at(report: &StabilityReport, gamma: f64) -> Option<f64> {
    let v: Vec<f64> = report.cells.iter().filter(|c| c.gamma == gamma).map(|c| c.mean_jaccard).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

// ---------------------------------------------------------------------------
// Artifacts

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_sha256: String,
    pub code_version: String,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub config: ExperimentConfig,
    pub files: Vec<ManifestFile>,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

/// Tracks files written by one command. Unless [`Artifacts::finish`] runs,
/// dropping it deletes everything written so far.
pub struct Artifacts {
    dir: PathBuf,
    command: String,
    config: ExperimentConfig,
    started: u128,
    written: Vec<PathBuf>,
    done: bool,
}

impl Artifacts {
    pub fn new(command: &str, config: &ExperimentConfig) -> Result<Self> {
        fs::create_dir_all(&config.out_dir)?;
        Ok(Self {
            dir: config.out_dir.clone(),
            command: command.to_string(),
            config: config.clone(),
            started: now_ms(),
            written: Vec::new(),
            done: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn track(&mut self, path: PathBuf) {
        if !self.written.contains(&path) {
            self.written.push(path);
        }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        self.track(path.clone());
        write_atomic(&path, bytes)?;
        Ok(path)
    }

    pub fn write_csv<R: CsvRow>(&mut self, name: &str, rows: &[R]) -> Result<PathBuf> {
        self.write(name, &to_csv(rows)?)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn save_model(&mut self, name: &str, model: &MoEClassifier) -> Result<PathBuf> {
        let path = self.path(name);
        self.track(path.clone());
        save_checkpoint(&path, model)?;
        Ok(path)
    }

    /// Writes `manifest_<command>.json` and keeps every artifact.
    pub fn finish(mut self) -> Result<RunManifest> {
        let mut files = Vec::with_capacity(self.written.len());
        for p in &self.written {
            files.push(ManifestFile {
                path: p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
                sha256: sha256_hex(&fs::read(p)?),
            });
        }
        let manifest = RunManifest {
            command: self.command.clone(),
            config_sha256: sha256_hex(&serde_json::to_vec(&self.config)?),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.config.seed,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            config: self.config.clone(),
            files,
        };
        let name = format!("manifest_{}.json", self.command.replace('-', "_"));
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        write_atomic(&self.path(&name), &bytes)?;
        self.done = true;
        Ok(manifest)
    }
}

impl Drop for Artifacts {
    fn drop(&mut self) {
        if !self.done {
            for p in &self.written {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Fixed-order CSV record.
pub trait CsvRow {
    const HEADER: &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

pub fn to_csv<R: CsvRow>(rows: &[R]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let err = |e: csv::Error| Error::Csv { line: 0, msg: e.to_string() };
    w.write_record(R::HEADER).map_err(err)?;
    for r in rows {
        w.write_record(r.fields()).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Csv { line: 0, msg: e.to_string() })
}

fn num(x: f64) -> String {
    format!("{x:?}")
}

pub struct TrainLogRow<'a>(pub RouterVariant, pub &'a EpochLog);

impl CsvRow for TrainLogRow<'_> {
    const HEADER: &'static [&'static str] =
        &["variant", "stage", "epoch", "train_loss", "train_ce", "train_reg", "val_nll", "val_acc"];
    fn fields(&self) -> Vec<String> {
        let e = self.1;
        vec![
            self.0.to_string(),
            e.stage.to_string(),
            e.epoch.to_string(),
            num(e.train_loss),
            num(e.train_ce),
            num(e.train_reg),
            num(e.val_nll),
            num(e.val_acc),
        ]
    }
}

pub struct EvalRow<'a>(pub RouterVariant, pub &'a CalibrationReport);

impl CsvRow for EvalRow<'_> {
    const HEADER: &'static [&'static str] = &["variant", "accuracy", "nll", "ece", "mce"];
    fn fields(&self) -> Vec<String> {
        let r = self.1;
        vec![self.0.to_string(), num(r.accuracy), num(r.nll), num(r.ece), num(r.mce)]
    }
}

pub struct DetectRow<'a>(pub RouterVariant, pub &'a OodRow);

impl CsvRow for DetectRow<'_> {
    const HEADER: &'static [&'static str] = &["variant", "signal", "pair", "auroc", "auprc"];
    fn fields(&self) -> Vec<String> {
        let r = &self.1.report;
        vec![self.0.to_string(), r.signal.clone(), self.1.pair.clone(), num(r.auroc), num(r.auprc)]
    }
}

impl CsvRow for crate::stability::StabilityCell {
    const HEADER: &'static [&'static str] = &["layer", "gamma", "mean_jaccard", "q10", "q50", "q90"];
    fn fields(&self) -> Vec<String> {
        vec![
            self.layer.to_string(),
            num(self.gamma),
            num(self.mean_jaccard),
            num(self.q10),
            num(self.q50),
            num(self.q90),
        ]
    }
}

impl CsvRow for SweepRow {
    const HEADER: &'static [&'static str] = &["layer", "temperature", "accuracy", "ece"];
    fn fields(&self) -> Vec<String> {
        vec![self.layer.to_string(), num(self.temperature), num(self.accuracy), num(self.ece)]
    }
}

impl CsvRow for crate::efficiency::CostRow {
    const HEADER: &'static [&'static str] =
        &["variant", "params", "params_m", "param_overhead_pct", "macs", "gmacs", "gflops", "mac_overhead_pct"];
    fn fields(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map_or_else(String::new, num);
        vec![
            self.variant.to_string(),
            self.params.to_string(),
            format!("{:.1}", self.params_millions),
            format!("{:.2}", self.param_overhead_pct),
            self.macs.to_string(),
            format!("{:.4}", self.gmacs),
            self.gflops.map_or_else(String::new, |g| format!("{g:.4}")),
            opt(self.mac_overhead_pct),
        ]
    }
}

pub struct RankRow(pub usize, pub usize);

impl CsvRow for RankRow {
    const HEADER: &'static [&'static str] = &["rank", "layer"];
    fn fields(&self) -> Vec<String> {
        vec![self.0.to_string(), self.1.to_string()]
    }
}

// ---------------------------------------------------------------------------
// Commands

pub fn checkpoint_name(variant: RouterVariant) -> String {
    format!("checkpoint_{variant}.json")
}

/// Stage 1, layer selection, then stage 2 per variant.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let mut art = Artifacts::new("train", &cfg)?;
    let splits = build_splits(&cfg)?;
    let (base, base_log) = train_base(&cfg, &splits)?;
    let mut log: Vec<(RouterVariant, EpochLog)> = base_log.into_iter().map(|e| (RouterVariant::Map, e)).collect();

    let needs_layers = cfg.variants.iter().any(|&v| v != RouterVariant::Map);
    let layers = if needs_layers { choose_layers(&cfg, &base, &splits.val)? } else { Vec::new() };
    for &v in &cfg.variants {
        let model = if v == RouterVariant::Map {
            base.clone()
        } else {
            let (m, l) = train_variant(&cfg, &base, v, &layers, &splits)?;
            log.extend(l.into_iter().map(|e| (v, e)));
            m
        };
        art.save_model(&checkpoint_name(v), &model)?;
    }
    let rows: Vec<TrainLogRow> = log.iter().map(|(v, e)| TrainLogRow(*v, e)).collect();
    art.write_csv("train_log.csv", &rows)?;
    let ranks: Vec<RankRow> = layers.iter().enumerate().map(|(i, &l)| RankRow(i, l)).collect();
    art.write_csv("layers.csv", &ranks)?;
    art.finish()
}

/// Checkpoints to evaluate: explicit paths, or those `cmd_train` wrote for
/// the configured variants.
pub fn resolve_checkpoints(
    cfg: &ExperimentConfig,
    explicit: &[PathBuf],
) -> Result<Vec<(RouterVariant, MoEClassifier)>> {
    if explicit.is_empty() {
        cfg.variants
            .iter()
            .map(|&v| {
                let p = cfg.out_dir.join(checkpoint_name(v));
                load_checkpoint(&p).map(|m| (v, m)).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))
            })
            .collect()
    } else {
        explicit
            .iter()
            .map(|p| {
                let m = load_checkpoint(p).map_err(|e| Error::Checkpoint(format!("{}: {e}", p.display())))?;
                Ok((primary_variant(&m), m))
            })
            .collect()
    }
}

/// Variant of the first modified layer, or MAP.
pub fn primary_variant(model: &MoEClassifier) -> RouterVariant {
    model.variational_layers.first().map_or(RouterVariant::Map, |&l| model.blocks[l].moe.router.variant())
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoints: &[PathBuf],
    data: Option<&Dataset>,
    samples: Option<usize>,
) -> Result<RunManifest> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let models = resolve_checkpoints(&cfg, checkpoints)?;
    let test = match data {
        Some(d) => d.clone(),
        None => build_splits(&cfg)?.test,
    };
    let mut art = Artifacts::new("eval", &cfg)?;
    let mut reports = Vec::new();
    for (v, m) in &models {
        reports.push((*v, evaluate(m, &test, cfg.seed, samples, cfg.calibration_bins)?));
    }
    let rows: Vec<EvalRow> = reports.iter().map(|(v, r)| EvalRow(*v, r)).collect();
    art.write_csv("eval.csv", &rows)?;
    art.write_json("eval.json", &reports)?;
    art.finish()
}

pub fn cmd_ood(cfg: &ExperimentConfig, checkpoints: &[PathBuf], samples: Option<usize>) -> Result<RunManifest> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let models = resolve_checkpoints(&cfg, checkpoints)?;
    let suite = build_suite(&cfg)?;
    let mut art = Artifacts::new("ood", &cfg)?;
    let mut all = Vec::new();
    for (v, m) in &models {
        all.extend(ood_reports(m, &suite, cfg.seed, samples)?.into_iter().map(|r| (*v, r)));
    }
    let rows: Vec<DetectRow> = all.iter().map(|(v, r)| DetectRow(*v, r)).collect();
    art.write_csv("ood.csv", &rows)?;
    art.finish()
}

pub fn cmd_stability(cfg: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<RunManifest> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let models = resolve_checkpoints(&cfg, checkpoints)?;
    let data = build_splits(&cfg)?.test;
    let mut art = Artifacts::new("stability", &cfg)?;
    let mut curves = Vec::new();
    for (v, m) in &models {
        let report = layerwise_stability(m, &data, &cfg.perturbation)?;
        art.write_csv(&format!("stability_{v}.csv"), &report.cells)?;
        let ranks: Vec<RankRow> = report.ranking.iter().enumerate().map(|(i, &l)| RankRow(i, l)).collect();
        art.write_csv(&format!("ranking_{v}.csv"), &ranks)?;
        let mut gammas = cfg.perturbation.gamma_levels.clone();
        gammas.sort_by(f64::total_cmp);
        let pts: Vec<(f64, f64)> = gammas.iter().filter_map(|&g| mean_jaccard_at(&report, g).map(|j| (g, j))).collect();
        curves.push((v.to_string(), pts));
    }
    if cfg.svg {
        art.write("stability.svg", stability_svg(&curves).as_bytes())?;
    }
    art.finish()
}

pub fn cmd_sweep_temp(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<RunManifest> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let path = checkpoint.map_or_else(|| cfg.out_dir.join(checkpoint_name(RouterVariant::Map)), Path::to_path_buf);
    let model = load_checkpoint(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let data = build_splits(&cfg)?.test;
    let layers = cfg.sweep.layers.clone().unwrap_or_else(|| (0..model.num_blocks()).collect());
    let mut art = Artifacts::new("sweep-temp", &cfg)?;
    let rows = fixed_temperature_layer_sweep(&model, &data, &cfg.sweep.temperatures, &layers, eval_seed(cfg.seed))?;
    art.write_csv("sweep_temp.csv", &rows)?;
    art.finish()
}

pub fn cmd_efficiency(
    cfg: &ExperimentConfig,
    arch: &ArchSpec,
    variants: &[CostVariant],
    flops: bool,
) -> Result<(RunManifest, CostReport)> {
    let report = cost_report(arch, variants, flops)?;
    let mut art = Artifacts::new("efficiency", cfg)?;
    art.write_csv("efficiency.csv", &report.rows)?;
    art.write_json("efficiency.json", &report)?;
    Ok((art.finish()?, report))
}

/// Mean Jaccard against noise level, one polyline per variant, log-scaled x.
pub fn stability_svg(curves: &[(String, Vec<(f64, f64)>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let xs: Vec<f64> = curves.iter().flat_map(|(_, p)| p.iter().map(|q| q.0.log10())).collect();
    let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |g: f64| M + (g.log10() - x0) / span * (W - 2.0 * M);
    let py = |j: f64| H - M - j.clamp(0.0, 1.0) * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{t}\" text-anchor=\"middle\">noise level (log scale)</text>\n\
         <text x=\"14\" y=\"{cy}\" transform=\"rotate(-90 14 {cy})\" text-anchor=\"middle\">mean Jaccard</text>\n",
        b = H - M,
        r = W - M,
        cx = W / 2.0,
        t = H - 12.0,
        cy = H / 2.0,
    );
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let line: Vec<String> = pts.iter().map(|&(g, j)| format!("{:.1},{:.1}", px(g), py(j))).collect();
        s +=
            &format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n", line.join(" "));
        s += &format!("<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>\n", W - M - 80.0, M + 16.0 * i as f64);
    }
    s += "</svg>\n";
    s
}
