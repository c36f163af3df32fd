//! Experiment specs (TOML) and the drivers behind the command-line tool.
//!
//! Every file written here is a pure function of the spec, seed, and corpus.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::{growth_shape, GrowthFit, LayerSnapshot, LineChart, MetricsLog, Series, SnapshotHook};
use crate::model::{
    init_parameters, load_checkpoint, save_checkpoint, ModelState, PlacementStrategy, TransformerConfig,
};
use crate::scalar::Scalar;
use crate::trainer::{lr_sweep, no_hook, train, Corpus, RunRecord, SweepTable, TrainConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Steps at which per-layer diagnostics are recorded.
    #[serde(default)]
    pub steps: Vec<usize>,
    #[serde(default = "default_probe_batch")]
    pub batch_size: usize,
}

fn default_probe_batch() -> usize {
    64
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: Vec::new(),
            batch_size: default_probe_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Defaults to the spec's own strategy when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub strategies: Vec<PlacementStrategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    /// Plain-text training corpus; the bundled text when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    pub strategy: PlacementStrategy,
    pub model: TransformerConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub probes: ProbeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl ExperimentSpec {
    /// Desk-preset spec for `strategy`.
    pub fn desk(strategy: PlacementStrategy, peak_lr: f64) -> Self {
        Self {
            output_dir: PathBuf::from("runs").join(strategy.label()),
            precision: Precision::F32,
            corpus: None,
            strategy,
            model: TransformerConfig::desk(),
            train: TrainConfig::desk(peak_lr),
            probes: ProbeConfig {
                steps: vec![0, 500, 1000, 1500, 2000],
                batch_size: default_probe_batch(),
            },
            sweep: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.seq_len {
            return Err(Error::Config(format!(
                "train.seq_len {} exceeds model.seq_len {}",
                self.train.seq_len, self.model.seq_len
            )));
        }
        if let Some(s) = self.probes.steps.iter().find(|&&s| s > self.train.total_steps) {
            return Err(Error::Config(format!(
                "probe step {s} is beyond total_steps {}",
                self.train.total_steps
            )));
        }
        if self.probes.batch_size == 0 {
            return Err(Error::Config("probes.batch_size must be at least 1".into()));
        }
        if let Some(sw) = &self.sweep {
            if sw.lrs.is_empty() || sw.seeds.is_empty() {
                return Err(Error::Config("sweep needs at least one lr and one seed".into()));
            }
            for s in &sw.strategies {
                s.validate()?;
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self
    }

    pub fn corpus(&self) -> Result<Corpus> {
        match &self.corpus {
            Some(p) => Corpus::from_path(p),
            None => Ok(Corpus::bundled()),
        }
    }

    pub fn sweep_strategies(&self) -> Vec<PlacementStrategy> {
        match &self.sweep {
            Some(s) if !s.strategies.is_empty() => s.strategies.clone(),
            _ => vec![self.strategy],
        }
    }
}

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn step_chart(title: &str, y: &str, record: &RunRecord, f: impl Fn(&crate::trainer::StepRecord) -> f64) -> String {
    let pts = record.steps.iter().map(|s| (s.step as f64, f(s))).collect();
    LineChart::new(title, "step", y)
        .with_series(Series::new(record.strategy.label(), pts))
        .render()
}

fn depth_chart(title: &str, y: &str, log: &MetricsLog, metric: &str, log_y: bool) -> String {
    let mut chart = LineChart::new(title, "layer", y);
    if log_y {
        chart = chart.log_y();
    }
    for step in log.steps() {
        let pts = log
            .series(step, metric)
            .into_iter()
            .map(|(l, v)| (l as f64, v))
            .collect();
        chart = chart.with_series(Series::new(format!("step {step}"), pts));
    }
    chart.render()
}

/// Outcome of [`run_train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub snapshots: Vec<LayerSnapshot>,
    pub files: Vec<PathBuf>,
}

fn train_typed<T: Scalar>(spec: &ExperimentSpec, out: &Path, format: OutputFormat) -> Result<TrainOutcome> {
    let corpus = spec.corpus()?;
    let mut model = init_parameters::<T>(&spec.model, &spec.strategy, spec.train.seed)?;
    let probe = corpus.probe_batch(spec.probes.batch_size, spec.train.seq_len)?;
    let mut hook = SnapshotHook::new(probe, spec.probes.steps.iter().copied());
    let record = train(&mut model, &corpus, &spec.train, &mut hook)?;
    let mut files = Vec::new();
    let metrics = match format {
        OutputFormat::Csv => record.to_csv(),
        OutputFormat::Json => json(&record.steps),
    };
    files.push(write(&out.join(format!("metrics.{}", format.extension())), metrics)?);
    files.push(write(&out.join("run.json"), json(&record.sidecar_json()))?);
    let ckpt = out.join("checkpoint.nlckpt");
    save_checkpoint(&model, &ckpt)?;
    files.push(ckpt);
    files.push(write(
        &out.join("loss.svg"),
        step_chart("training loss", "loss", &record, |s| s.train_loss),
    )?);
    files.push(write(
        &out.join("grad_norm.svg"),
        step_chart("global gradient norm", "L2 norm", &record, |s| s.grad_norm),
    )?);
    if !hook.snapshots.is_empty() {
        let log = MetricsLog::from_snapshots(&hook.snapshots);
        let layers = match format {
            OutputFormat::Csv => log.to_csv(),
            OutputFormat::Json => log.to_json() + "\n",
        };
        files.push(write(&out.join(format!("layers.{}", format.extension())), layers)?);
        files.push(write(
            &out.join("depth_variance.svg"),
            depth_chart(
                "hidden-state variance by depth",
                "variance",
                &log,
                "hidden_variance",
                true,
            ),
        )?);
    }
    Ok(TrainOutcome {
        record,
        snapshots: hook.snapshots,
        files,
    })
}

/// Trains the spec's model and writes metrics, a JSON sidecar, the final
/// checkpoint, and charts into `out`.
pub fn run_train(spec: &ExperimentSpec, out: &Path, format: OutputFormat) -> Result<TrainOutcome> {
    spec.validate()?;
    match spec.precision {
        Precision::F32 => train_typed::<f32>(spec, out, format),
        Precision::F64 => train_typed::<f64>(spec, out, format),
    }
}

/// Runs the spec's sweep grid. Each cell's step metrics land in
/// `out/cells/<strategy>_lr<lr>_seed<seed>/`; the aggregate table and a
/// final-loss-vs-lr chart per strategy go in `out`.
pub fn run_sweep(spec: &ExperimentSpec, out: &Path, format: OutputFormat) -> Result<SweepTable> {
    spec.validate()?;
    let sweep = spec
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("spec has no [sweep] section".into()))?;
    let corpus = spec.corpus()?;
    let strategies = spec.sweep_strategies();
    let table = match spec.precision {
        Precision::F32 => lr_sweep::<f32>(
            &spec.model,
            &strategies,
            &sweep.lrs,
            &spec.train,
            &sweep.seeds,
            &corpus,
            None,
        )?,
        Precision::F64 => lr_sweep::<f64>(
            &spec.model,
            &strategies,
            &sweep.lrs,
            &spec.train,
            &sweep.seeds,
            &corpus,
            None,
        )?,
    };
    for c in &table.cells {
        let Some(r) = &c.record else { continue };
        let dir = out
            .join("cells")
            .join(format!("{}_lr{}_seed{}", c.strategy.label(), c.lr, c.seed));
        let metrics = match format {
            OutputFormat::Csv => r.to_csv(),
            OutputFormat::Json => json(&r.steps),
        };
        write(&dir.join(format!("metrics.{}", format.extension())), metrics)?;
        write(&dir.join("run.json"), json(&r.sidecar_json()))?;
    }
    match format {
        OutputFormat::Csv => {
            write(&out.join("sweep.csv"), table.to_csv())?;
            write(&out.join("sweep_summary.csv"), table.summary_csv())?;
        }
        OutputFormat::Json => {
            write(&out.join("sweep.json"), json(&table))?;
        }
    }
    for s in &strategies {
        let pts: Vec<(f64, f64)> = table
            .lrs()
            .into_iter()
            .filter_map(|lr| table.median_loss(s, lr).map(|l| (lr.log10(), l)))
            .collect();
        let mut title = format!("final loss vs learning rate: {}", s.label());
        if let Some((lr, loss)) = table.best_lr(s) {
            title.push_str(&format!(" (best lr {lr}, loss {loss:.4})"));
        }
        let chart =
            LineChart::new(&title, "log10(peak lr)", "median final loss").with_series(Series::new(s.label(), pts));
        write(&out.join(format!("sweep_{}.svg", s.label())), chart.render())?;
    }
    Ok(table)
}

/// Diagnostics of one checkpoint on a probe batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub strategy: PlacementStrategy,
    pub model: TransformerConfig,
    pub probe_sequences: usize,
    pub layers: Vec<LayerSnapshot>,
    /// Absent for models shallower than four layers.
    pub variance_growth: Option<GrowthFit>,
    pub magnitude_growth: Option<GrowthFit>,
    /// Why any part of the analysis was skipped.
    pub notices: Vec<String>,
}

pub fn analyze_model<T: Scalar>(model: &ModelState<T>, corpus: &Corpus, probe_sequences: usize) -> Result<Analysis> {
    let probe = corpus.probe_batch(probe_sequences, model.config.seq_len)?;
    let layers = crate::instrument::snapshot(model, &probe, 0)?;
    let mut notices = Vec::new();
    if !model.strategy.kind.has_output_norm() {
        notices.push(format!(
            "gamma trace skipped: {} has no output normalization",
            model.strategy.kind
        ));
    }
    let var: Vec<f64> = layers.iter().map(|s| s.hidden_variance).collect();
    let mag: Vec<f64> = layers.iter().map(|s| s.hidden_abs_mean).collect();
    let (variance_growth, magnitude_growth) = match (growth_shape(&var), growth_shape(&mag)) {
        (Ok(v), Ok(m)) => (Some(v), Some(m)),
        (Err(e), _) | (_, Err(e)) => {
            notices.push(format!("growth shape skipped: {e}"));
            (None, None)
        }
    };
    Ok(Analysis {
        strategy: model.strategy,
        model: model.config,
        probe_sequences,
        variance_growth,
        magnitude_growth,
        layers,
        notices,
    })
}

/// Loads a checkpoint and writes per-layer diagnostics and charts into `out`.
pub fn run_analyze(
    checkpoint: &Path,
    corpus: &Corpus,
    probe_sequences: usize,
    out: &Path,
    format: OutputFormat,
) -> Result<Analysis> {
    let model = load_checkpoint::<f64>(checkpoint)?;
    let analysis = analyze_model(&model, corpus, probe_sequences)?;
    let log = MetricsLog::from_snapshots(&analysis.layers);
    let layers = match format {
        OutputFormat::Csv => log.to_csv(),
        OutputFormat::Json => log.to_json() + "\n",
    };
    write(&out.join(format!("layers.{}", format.extension())), layers)?;
    write(&out.join("analysis.json"), json(&analysis))?;
    let charts = [
        (
            "depth_variance.svg",
            "hidden-state variance by depth",
            "variance",
            "hidden_variance",
            true,
        ),
        (
            "depth_magnitude.svg",
            "mean |hidden state| by depth",
            "mean |x|",
            "hidden_abs_mean",
            true,
        ),
        (
            "depth_angular.svg",
            "angular distance by depth",
            "angular distance",
            "angular_distance",
            false,
        ),
        (
            "depth_grad_norm.svg",
            "gradient norm by depth",
            "L2 norm",
            "grad_norm",
            true,
        ),
    ];
    for (file, title, y, metric, log_y) in charts {
        write(&out.join(file), depth_chart(title, y, &log, metric, log_y))?;
    }
    if model.strategy.kind.has_output_norm() {
        write(
            &out.join("depth_gamma.svg"),
            depth_chart("output-norm gamma by depth", "mean gamma", &log, "gamma_mean", false),
        )?;
    }
    Ok(analysis)
}

/// Initial checkpoint for `spec`, as `cmd_analyze` would see at step 0.
pub fn init_checkpoint(spec: &ExperimentSpec, path: &Path) -> Result<()> {
    let model = init_parameters::<f64>(&spec.model, &spec.strategy, spec.train.seed)?;
    save_checkpoint(&model, path)
}

/// Runs training without writing anything; convenience for callers that
/// only need the record.
pub fn train_record<T: Scalar>(spec: &ExperimentSpec) -> Result<(ModelState<T>, RunRecord)> {
    spec.validate()?;
    let corpus = spec.corpus()?;
    let mut model = init_parameters::<T>(&spec.model, &spec.strategy, spec.train.seed)?;
    let record = train(&mut model, &corpus, &spec.train, &mut no_hook::<T>)?;
    Ok((model, record))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"
output_dir = "runs/smoke"

[strategy]
kind = "peri_ln"
embedding_ln = true
final_ln = true
output_ln_frozen = false
norm_kind = "rms_norm"

[model]
n_layers = 2
n_heads = 2
d_model = 16
d_head = 8
d_ff = 64
vocab_size = 257
seq_len = 16
mlp = "swi_glu"
tie_embeddings = false
position = "rope"

[train]
peak_lr = 0.003
total_steps = 5
batch_size = 2
seq_len = 16

[probes]
steps = [0, 5]
batch_size = 4
"#;

    #[test]
    fn parses_documented_example() {
        let s = ExperimentSpec::parse(SMOKE).unwrap();
        assert_eq!(s.train.weight_decay, 0.033);
        assert_eq!(s.precision, Precision::F32);
        assert_eq!(ExperimentSpec::parse(&s.to_toml()).unwrap(), s);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let bad = SMOKE.replace("total_steps = 5", "total_steps = 5\nlearning_rate = 1");
        let err = ExperimentSpec::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn zero_steps_fail_validation() {
        let bad = SMOKE
            .replace("total_steps = 5", "total_steps = 0")
            .replace("steps = [0, 5]", "steps = [0]");
        assert!(matches!(ExperimentSpec::parse(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn probe_steps_must_be_in_range() {
        let bad = SMOKE.replace("steps = [0, 5]", "steps = [0, 6]");
        assert!(ExperimentSpec::parse(&bad).is_err());
    }

    #[test]
    fn train_writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec::parse(SMOKE).unwrap();
        let out = run_train(&spec, dir.path(), OutputFormat::Csv).unwrap();
        for f in [
            "metrics.csv",
            "run.json",
            "checkpoint.nlckpt",
            "loss.svg",
            "grad_norm.svg",
            "layers.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(out.record.steps.len(), 5);
        assert_eq!(out.snapshots.len(), 4);
        let a = run_analyze(
            &dir.path().join("checkpoint.nlckpt"),
            &Corpus::bundled(),
            4,
            &dir.path().join("a"),
            OutputFormat::Json,
        )
        .unwrap();
        assert_eq!(a.layers.len(), 2);
    }
}
