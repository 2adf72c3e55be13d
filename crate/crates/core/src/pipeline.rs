//! Run configuration and the four stages (scenario, restore, landscape,
//! report) operating on a run directory.
//!
//! Each stage writes a new `<stage>-<NNN>` directory under the run
//! directory and seals it with a manifest of file digests. Later stages
//! read the latest sealed directory of the stages they depend on and
//! refuse to proceed if a digest no longer matches.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{loss_correlation, loss_gap_table, recovery_trace, LossGapTable, RecoveryTrace};
use crate::curvature::HarvestConfig;
use crate::data::{partition_to_jsonl, read_partition, DataPartition, Part};
use crate::error::{Error, Result};
use crate::influence::{restore, IterationRecord, RestorationConfig, RestorationReport};
use crate::landscape::{
    basin_sweep, cross_section, dataset_probe, default_unsafe_threshold, eval_grid_threads, eval_set, gen_directions,
    mixed_probe, struct_diff, trajectory_compare, Axis, GridSpec, LandscapeGrid, TrajectoryConfig,
};
use crate::math::{cosine, ParamVec, RngState};
use crate::model::{init_model, CheckpointPair, MicroModel, Objective};
use crate::persist::{read_file, real, require_stage, sha256_hex, Checkpoint, StageDir, StageWriter, Table};
use crate::scenario::{build_scenario, ScenarioConfig};

pub const CONFIG_SCHEMA: &str = "curvrestore.run-config";
pub const REPORT_SCHEMA: &str = "curvrestore.report";
pub const CONFIG_FILE: &str = "config.toml";
pub const OUTPUT_ENV: &str = "CURVRESTORE_OUT";

pub const STAGE_SCENARIO: &str = "scenario";
pub const STAGE_RESTORE: &str = "restore";
pub const STAGE_LANDSCAPE: &str = "landscape";
pub const STAGE_REPORT: &str = "report";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BasinConfig {
    pub range: f64,
    pub directions: usize,
    pub magnitudes: usize,
    /// Forget loss below which a perturbed model counts as unsafe. Unset
    /// means the midpoint of base and tuned forget-eval loss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

impl Default for BasinConfig {
    fn default() -> Self {
        Self {
            range: 0.5,
            directions: 16,
            magnitudes: 11,
            threshold: None,
        }
    }
}

/// Data behind the gradient that scales landscape directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    /// Half forget-eval, half retain-test; one direction pair per checkpoint.
    #[default]
    Mixed,
    /// The evaluated dataset itself; one direction pair per grid.
    PerDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the restoration, basin and trajectory streams. The corpus and
    /// model carry their own seeds.
    pub seed: u64,
    /// Root for run directories. Excluded from the config hash.
    pub output_dir: PathBuf,
    /// Size of the half-forget, half-retain probe for landscape directions.
    pub probe_samples: usize,
    pub probe: ProbeKind,
    pub scenario: ScenarioConfig,
    pub harvest: HarvestConfig,
    pub restoration: RestorationConfig,
    pub grid: GridSpec,
    pub basin: BasinConfig,
    pub trajectory: TrajectoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("runs"),
            probe_samples: 32,
            probe: ProbeKind::Mixed,
            scenario: ScenarioConfig::default(),
            harvest: HarvestConfig::default(),
            restoration: RestorationConfig {
                lambda: 0.01,
                ..RestorationConfig::default()
            },
            grid: GridSpec::default(),
            basin: BasinConfig::default(),
            trajectory: TrajectoryConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.model.validate()?;
        self.scenario.corpus.layout()?;
        self.harvest.validate()?;
        self.restoration.validate()?;
        self.grid.validate()?;
        if self.probe_samples < 2 {
            return Err(Error::InvalidSpec("probe-samples must be at least 2".into()));
        }
        if self.basin.directions == 0 || self.basin.magnitudes == 0 || !(self.basin.range >= 0.0) {
            return Err(Error::InvalidSpec("basin needs directions, magnitudes and a range ≥ 0".into()));
        }
        if self.trajectory.step_budget == 0 || self.trajectory.lrs.is_empty() {
            return Err(Error::InvalidSpec("trajectory needs a step budget and learning rates".into()));
        }
        Ok(())
    }

    /// sha256 over the canonical JSON form, without `output_dir`.
    pub fn config_hash(&self) -> String {
        sha256_hex(serde_json::to_string(&self.snapshot()).expect("config serializes").as_bytes())
    }

    /// Copy with `output_dir` cleared, as persisted in run directories.
    pub fn snapshot(&self) -> RunConfig {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c
    }

    pub fn to_toml(&self) -> String {
        let body = toml::to_string(self).expect("config serializes to TOML");
        format!(
            "# schema {CONFIG_SCHEMA} v1\n# config_hash {}\n{body}",
            self.config_hash()
        )
    }

    pub fn from_toml(path: &Path, text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::from_toml(path, &read_file(path)?)
    }

    /// `<output_dir>/run-<first 12 hex digits of the config hash>`
    pub fn default_run_dir(&self) -> PathBuf {
        self.output_dir.join(format!("run-{}", &self.config_hash()[..12]))
    }
}

fn stage_config(stage: &StageDir) -> Result<RunConfig> {
    RunConfig::load(&stage.file(CONFIG_FILE))
}

fn missing(run_dir: &Path, stages: &[&str]) -> Error {
    Error::MissingArtifact {
        path: run_dir.to_path_buf(),
        hint: stages.iter().map(|s| format!("curvrestore {s}")).collect::<Vec<_>>().join("`, then `"),
    }
}

/// Latest verified stage, or a missing-artifact error naming `needs`
/// (the stages to run, in order).
fn need_stage(run_dir: &Path, stage: &str, needs: &[&str]) -> Result<StageDir> {
    match require_stage(run_dir, stage) {
        Err(Error::MissingArtifact { path, .. }) if path.ends_with(format!("{stage}-*")) => Err(missing(run_dir, needs)),
        other => other,
    }
}

fn metric_table(schema: &str, rows: &[(&str, f64)]) -> Table {
    let mut t = Table::new(schema, &["metric", "value"]);
    for (k, v) in rows {
        t.push(vec![k.to_string(), real(*v)]);
    }
    t
}

#[derive(Debug, Clone)]
pub struct ScenarioOutput {
    pub stage: StageDir,
    pub summary: Table,
}

/// Builds the corpus and both checkpoints and persists them with a config
/// snapshot.
pub fn cmd_scenario(cfg: &RunConfig, run_dir: &Path) -> Result<ScenarioOutput> {
    cfg.validate()?;
    let sc = build_scenario(&cfg.scenario)?;
    let hash = cfg.config_hash();
    let mut w = StageWriter::create(run_dir, STAGE_SCENARIO, &hash)?;
    w.put(CONFIG_FILE, &cfg.snapshot().to_toml())?;

    let mut params = BTreeMap::new();
    params.insert("base".to_string(), sc.ckpt.base.clone());
    params.insert("tuned".to_string(), sc.ckpt.tuned.clone());
    let ckpt = Checkpoint {
        spec: sc.ckpt.spec.clone(),
        params,
    };
    w.put("checkpoint.ckpt", &ckpt.to_text(&hash))?;
    w.put("partition.jsonl", &partition_to_jsonl(&sc.parts, &hash))?;

    let mut train = Table::new("curvrestore.train-log", &["epoch", "loss"]);
    train.push(vec!["0".into(), real(sc.train_log.initial_loss)]);
    for (k, l) in sc.train_log.epoch_losses.iter().enumerate() {
        train.push(vec![(k + 1).to_string(), real(*l)]);
    }
    w.put_table("train-log.tsv", &train)?;

    let m = &sc.model;
    let fe = sc.parts.whole(Part::ForgetEval)?;
    let rt = sc.parts.whole(Part::RetainTest)?;
    let summary = metric_table(
        "curvrestore.scenario-summary",
        &[
            ("adapter_params", sc.ckpt.spec.adapter_params() as f64),
            ("train_loss_initial", sc.train_log.initial_loss),
            ("train_loss_final", sc.train_log.final_loss()),
            ("forget_eval_base", m.loss(&sc.ckpt.base, &fe)?),
            ("forget_eval_tuned", m.loss(&sc.ckpt.tuned, &fe)?),
            ("retain_test_base", m.loss(&sc.ckpt.base, &rt)?),
            ("retain_test_tuned", m.loss(&sc.ckpt.tuned, &rt)?),
        ],
    );
    w.put_table("summary.tsv", &summary)?;
    Ok(ScenarioOutput {
        stage: w.finish(run_dir)?,
        summary,
    })
}

struct Loaded {
    cfg: RunConfig,
    model: MicroModel,
    pair: CheckpointPair,
    parts: DataPartition,
    stage: StageDir,
}

fn load_scenario(run_dir: &Path) -> Result<Loaded> {
    let stage = need_stage(run_dir, STAGE_SCENARIO, &[STAGE_SCENARIO])?;
    let cfg = stage_config(&stage)?;
    let ckpt = Checkpoint::read(&stage.file("checkpoint.ckpt"))?;
    let parts = read_partition(&stage.file("partition.jsonl"))?;
    let (model, _) = init_model(&ckpt.spec)?;
    let get = |label: &str| {
        ckpt.get(label).cloned().ok_or_else(|| Error::MissingArtifact {
            path: stage.file("checkpoint.ckpt"),
            hint: format!("{STAGE_SCENARIO} (no `{label}` parameters)"),
        })
    };
    let pair = CheckpointPair::new(ckpt.spec.clone(), get("base")?, get("tuned")?)?;
    Ok(Loaded {
        cfg,
        model,
        pair,
        parts,
        stage,
    })
}

/// Command-line adjustments to the restoration settings of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RestoreOverrides {
    pub iterations: Option<usize>,
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub eta_grid: Option<Vec<f64>>,
}

impl RestoreOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let r = &mut cfg.restoration;
        if let Some(v) = self.iterations {
            r.iterations = v;
        }
        if let Some(v) = self.lambda {
            r.lambda = v;
        }
        if let Some(v) = self.epsilon {
            r.epsilon = v;
        }
        if let Some(v) = &self.eta_grid {
            r.eta_grid = Some(v.clone());
        }
    }
}

#[derive(Debug, Clone)]
pub struct RestoreOutput {
    pub stage: StageDir,
    pub report: RestorationReport,
    pub summary: Table,
}

/// Runs the restoration loop from the tuned checkpoint. Fails with
/// `constraint-blocked-all-iterations` if the retain budget blocked every iteration.
pub fn cmd_restore(run_dir: &Path, overrides: &RestoreOverrides) -> Result<RestoreOutput> {
    let Loaded {
        mut cfg,
        model,
        pair,
        parts,
        stage,
    } = load_scenario(run_dir)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    let (restored, report) = restore(
        &model,
        &pair,
        &parts,
        &cfg.restoration,
        &cfg.harvest,
        RngState::new(cfg.seed, 1),
    )?;

    let hash = cfg.config_hash();
    let mut w = StageWriter::create(run_dir, STAGE_RESTORE, &hash)?;
    w.inputs_from(&stage);
    w.put(CONFIG_FILE, &cfg.snapshot().to_toml())?;
    let mut params = BTreeMap::new();
    for (k, p) in report.checkpoints.iter().enumerate() {
        params.insert(format!("iter-{}", k + 1), p.clone());
    }
    params.insert("restored".to_string(), restored);
    let ckpt = Checkpoint {
        spec: pair.spec.clone(),
        params,
    };
    w.put("restored.ckpt", &ckpt.to_text(&hash))?;
    w.put("report.jsonl", &report.to_jsonl(&hash))?;
    for (k, log) in report.harvests.iter().enumerate() {
        w.put(&format!("harvest-{}.jsonl", k + 1), &log.to_jsonl(&hash))?;
    }
    let mut summary = Table::new(
        "curvrestore.restore-summary",
        &[
            "iteration",
            "lambda",
            "eta",
            "forget_before",
            "forget_after",
            "retain_before",
            "retain_after",
            "pairs",
            "status",
        ],
    )
    .with_meta("retain_baseline", real(report.retain_baseline))
    .with_meta("epsilon", real(report.epsilon));
    for r in &report.records {
        summary.push(vec![
            (r.iteration + 1).to_string(),
            real(r.lambda),
            r.eta.map(real).unwrap_or_else(|| "-".into()),
            real(r.forget_before),
            real(r.forget_after),
            real(r.retain_before),
            real(r.retain_after),
            r.pairs.to_string(),
            serde_json::to_value(r.status).expect("status serializes").as_str().unwrap_or("").to_string(),
        ]);
    }
    w.put_table("summary.tsv", &summary)?;
    Ok(RestoreOutput {
        stage: w.finish(run_dir)?,
        report,
        summary,
    })
}

fn load_restored(run_dir: &Path) -> Result<(StageDir, Checkpoint, RunConfig)> {
    let stage = need_stage(run_dir, STAGE_RESTORE, &[STAGE_RESTORE])?;
    let ckpt = Checkpoint::read(&stage.file("restored.ckpt"))?;
    let cfg = stage_config(&stage)?;
    Ok((stage, ckpt, cfg))
}

/// The dataset a landscape grid is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandscapeData {
    Forget,
    Retain,
}

impl LandscapeData {
    pub fn part(self) -> Part {
        match self {
            LandscapeData::Forget => Part::ForgetEval,
            LandscapeData::Retain => Part::RetainTest,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            LandscapeData::Forget => "forget",
            LandscapeData::Retain => "retain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointLabel {
    Base,
    Tuned,
    Restored,
}

impl CheckpointLabel {
    pub fn tag(self) -> &'static str {
        match self {
            CheckpointLabel::Base => "base",
            CheckpointLabel::Tuned => "tuned",
            CheckpointLabel::Restored => "restored",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructDiffRow {
    pub dataset: String,
    pub a: String,
    pub b: String,
    pub struct_diff: f64,
}

#[derive(Debug, Clone)]
pub struct LandscapeOutput {
    pub stage: StageDir,
    pub grids: Vec<(String, String, LandscapeGrid)>,
    pub struct_diffs: Vec<StructDiffRow>,
}

pub fn grid_table(grid: &LandscapeGrid, direction_cosine: f64) -> Table {
    let mut t = Table::new("curvrestore.landscape-grid", &["i", "j", "lambda1", "lambda2", "loss"])
        .with_meta("alpha", real(grid.spec.alpha))
        .with_meta("n", grid.spec.n)
        .with_meta("origin_loss", real(grid.origin_loss))
        .with_meta("direction_cosine", real(direction_cosine))
        .with_meta("warnings", grid.warnings.len());
    for (i, &l1) in grid.lambdas.iter().enumerate() {
        for (j, &l2) in grid.lambdas.iter().enumerate() {
            t.push(vec![i.to_string(), j.to_string(), real(l1), real(l2), real(grid.losses.get(i, j))]);
        }
    }
    t
}

/// Grids for each requested checkpoint and dataset, both cross-sections of
/// each grid, and StructDiff for every checkpoint pair on each dataset.
pub fn cmd_landscape(
    run_dir: &Path,
    checkpoints: &[CheckpointLabel],
    datasets: &[LandscapeData],
    threads: usize,
) -> Result<LandscapeOutput> {
    if checkpoints.is_empty() || datasets.is_empty() {
        return Err(Error::InvalidSpec("landscape needs at least one checkpoint and dataset".into()));
    }
    let Loaded {
        mut cfg,
        model,
        pair,
        parts,
        stage,
    } = load_scenario(run_dir)?;
    let mut upstream = vec![stage];
    let mut restored = None;
    if checkpoints.contains(&CheckpointLabel::Restored) {
        let (rstage, ckpt, rcfg) = match load_restored(run_dir) {
            Err(Error::MissingArtifact { .. }) => return Err(missing(run_dir, &[STAGE_RESTORE])),
            other => other?,
        };
        restored = Some(ckpt.get("restored").cloned().ok_or_else(|| Error::MissingArtifact {
            path: rstage.file("restored.ckpt"),
            hint: STAGE_RESTORE.into(),
        })?);
        cfg = rcfg;
        upstream.push(rstage);
    }
    let params_of = |label: CheckpointLabel| -> &ParamVec {
        match label {
            CheckpointLabel::Base => &pair.base,
            CheckpointLabel::Tuned => &pair.tuned,
            CheckpointLabel::Restored => restored.as_ref().expect("restored loaded"),
        }
    };

    let hash = cfg.config_hash();
    let mut w = StageWriter::create(run_dir, STAGE_LANDSCAPE, &hash)?;
    for s in &upstream {
        w.inputs_from(s);
    }
    let mixed = mixed_probe(&parts, cfg.probe_samples)?;
    let mut labels: Vec<CheckpointLabel> = Vec::new();
    for c in checkpoints {
        if !labels.contains(c) {
            labels.push(*c);
        }
    }
    let mut sets: Vec<LandscapeData> = Vec::new();
    for d in datasets {
        if !sets.contains(d) {
            sets.push(*d);
        }
    }
    let mut grids = Vec::new();
    for &label in &labels {
        let params = params_of(label);
        let shared = match cfg.probe {
            ProbeKind::Mixed => Some(gen_directions(&model, params, &mixed, cfg.grid.dir_seeds)?),
            ProbeKind::PerDataset => None,
        };
        for &data in &sets {
            let (d1, d2) = match &shared {
                Some(d) => d.clone(),
                None => {
                    let probe = dataset_probe(&parts, data.part(), cfg.probe_samples)?;
                    gen_directions(&model, params, &probe, cfg.grid.dir_seeds)?
                }
            };
            let cos = cosine(&d1, &d2)?;
            let eval = eval_set(&parts, data.part(), &cfg.grid)?;
            let grid = eval_grid_threads(&model, params, &d1, &d2, &cfg.grid, &eval, threads)?;
            let stem = format!("{}-{}", label.tag(), data.tag());
            w.put_table(&format!("grid-{stem}.tsv"), &grid_table(&grid, cos))?;
            for axis in [Axis::D1, Axis::D2] {
                let sec = cross_section(&grid, axis);
                let name = match axis {
                    Axis::D1 => "d1",
                    Axis::D2 => "d2",
                };
                let mut t = Table::new("curvrestore.cross-section", &["k", "lambda", "loss"])
                    .with_meta("axis", name)
                    .with_meta("fixed_index", sec.fixed_index)
                    .with_meta("fixed_lambda", real(sec.fixed_lambda));
                for (k, (l, v)) in sec.points.iter().enumerate() {
                    t.push(vec![k.to_string(), real(*l), real(*v)]);
                }
                w.put_table(&format!("section-{stem}-{name}.tsv"), &t)?;
            }
            grids.push((label.tag().to_string(), data.tag().to_string(), grid));
        }
    }

    let mut struct_diffs = Vec::new();
    for &data in &sets {
        for (x, &a) in checkpoints.iter().enumerate() {
            for &b in &checkpoints[x + 1..] {
                let find = |l: CheckpointLabel| {
                    &grids
                        .iter()
                        .find(|g| g.0 == l.tag() && g.1 == data.tag())
                        .expect("grid computed")
                        .2
                };
                struct_diffs.push(StructDiffRow {
                    dataset: data.tag().into(),
                    a: a.tag().into(),
                    b: b.tag().into(),
                    struct_diff: struct_diff(find(a), find(b))?,
                });
            }
        }
    }
    let mut t = Table::new("curvrestore.struct-diff", &["dataset", "a", "b", "struct_diff"]);
    for r in &struct_diffs {
        t.push(vec![r.dataset.clone(), r.a.clone(), r.b.clone(), real(r.struct_diff)]);
    }
    w.put_table("structdiff.tsv", &t)?;
    Ok(LandscapeOutput {
        stage: w.finish(run_dir)?,
        grids,
        struct_diffs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestorationSummary {
    pub iterations: usize,
    pub applied: usize,
    pub epsilon: f64,
    pub forget_tuned: f64,
    pub forget_restored: f64,
    /// `(restored − tuned) / tuned` on forget-eval.
    pub forget_relative_change: f64,
    pub retain_test_tuned: f64,
    pub retain_test_restored: f64,
    pub retain_test_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub a: String,
    pub b: String,
    pub dataset: String,
    pub r: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinRow {
    pub checkpoint: String,
    pub threshold: f64,
    pub score: f64,
    pub magnitudes: Vec<f64>,
    pub margin_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub lr: f64,
    pub method: String,
    pub steps: usize,
    pub accepted_steps: usize,
    pub decreasing_steps: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub schema: String,
    pub version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub restoration: RestorationSummary,
    pub correlations: Vec<CorrelationRow>,
    pub loss_gap: LossGapTable,
    pub recovery: RecoveryTrace,
    pub basin: Vec<BasinRow>,
    pub trajectory: Vec<TrajectoryRow>,
}

impl ReportSummary {
    pub fn correlation(&self, a: &str, b: &str, dataset: &str) -> Option<f64> {
        self.correlations
            .iter()
            .find(|c| c.a == a && c.b == b && c.dataset == dataset)
            .map(|c| c.r)
    }

    pub fn basin_score(&self, checkpoint: &str) -> Option<f64> {
        self.basin.iter().find(|b| b.checkpoint == checkpoint).map(|b| b.score)
    }

    pub fn trajectory(&self, lr: f64, method: &str) -> Option<&TrajectoryRow> {
        self.trajectory.iter().find(|t| t.lr == lr && t.method == method)
    }

    /// Plain-text rendering of every section.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let r = &self.restoration;
        let _ = writeln!(s, "config {}", self.config_hash);
        let _ = writeln!(s, "\n[restoration]");
        let _ = writeln!(s, "iterations applied  {} of {}", r.applied, r.iterations);
        let _ = writeln!(
            s,
            "forget-eval loss    {:.4} -> {:.4}  ({:+.1}%)",
            r.forget_tuned,
            r.forget_restored,
            100.0 * r.forget_relative_change
        );
        let _ = writeln!(
            s,
            "retain-test loss    {:.4} -> {:.4}  ({:+.4}, budget {})",
            r.retain_test_tuned, r.retain_test_restored, r.retain_test_change, r.epsilon
        );
        let _ = writeln!(s, "\n[correlation]");
        for c in &self.correlations {
            let _ = writeln!(s, "{:<8} vs {:<8} {:<12} r = {:.4}  (n = {})", c.a, c.b, c.dataset, c.r, c.n);
        }
        let _ = writeln!(s, "\n[loss gap]");
        let _ = writeln!(s, "{:<10}{}", "", self.loss_gap.datasets.join("  "));
        for (k, row) in self.loss_gap.checkpoints.iter().zip(&self.loss_gap.values) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(s, "{k:<10}{}", cells.join("  "));
        }
        let _ = writeln!(s, "\n[recovery]");
        let _ = writeln!(s, "{:<10}{}", "", self.recovery.datasets.join("  "));
        let fmt = |row: &[f64]| row.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join("  ");
        let _ = writeln!(s, "{:<10}{}", "start", fmt(&self.recovery.initial));
        for (k, row) in self.recovery.per_iteration.iter().enumerate() {
            let _ = writeln!(s, "{:<10}{}", format!("iter {}", k + 1), fmt(row));
        }
        let _ = writeln!(s, "\n[basin]");
        for b in &self.basin {
            let _ = writeln!(s, "{:<10} score {:>6.2}  (threshold {:.4})", b.checkpoint, b.score, b.threshold);
        }
        let _ = writeln!(s, "\n[trajectory]");
        for t in &self.trajectory {
            let _ = writeln!(
                s,
                "lr {:<5} {:<12} objective {:.4} -> {:.4}  decreasing {}  accepted {}/{}",
                t.lr, t.method, t.initial_objective, t.final_objective, t.decreasing_steps, t.accepted_steps, t.steps
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub stage: StageDir,
    /// True when an earlier report with identical inputs was reused.
    pub cached: bool,
    pub summary: ReportSummary,
}

/// Consolidated analysis of a restored run. Reuses the latest report when
/// its recorded input digests match the current upstream files.
pub fn cmd_report(run_dir: &Path) -> Result<ReportOutput> {
    let mut absent = Vec::new();
    for s in [STAGE_SCENARIO, STAGE_RESTORE] {
        if crate::persist::latest_stage(run_dir, s)?.is_none() {
            absent.push(s);
        }
    }
    if !absent.is_empty() {
        return Err(missing(run_dir, &absent));
    }
    let Loaded {
        model,
        pair,
        parts,
        stage,
        ..
    } = load_scenario(run_dir)?;
    let (rstage, rckpt, cfg) = load_restored(run_dir)?;
    let hash = cfg.config_hash();

    let mut inputs = BTreeMap::new();
    for s in [&stage, &rstage] {
        for (name, digest) in &s.manifest.files {
            inputs.insert(s.key(name), digest.clone());
        }
    }
    if let Some(prev) = crate::persist::latest_stage(run_dir, STAGE_REPORT)? {
        if prev.manifest.inputs == inputs && prev.manifest.config_hash == hash {
            prev.verify()?;
            let path = prev.file("summary.json");
            let summary: ReportSummary =
                serde_json::from_str(&read_file(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
            return Ok(ReportOutput {
                stage: prev,
                cached: true,
                summary,
            });
        }
    }

    let report_text = read_file(&rstage.file("report.jsonl"))?;
    let (retain_baseline, epsilon, records) = RestorationReport::records_from_jsonl(&report_text)
        .map_err(|e| Error::format(rstage.file("report.jsonl"), e))?;
    let restored = rckpt
        .get("restored")
        .cloned()
        .ok_or_else(|| Error::format(rstage.file("restored.ckpt"), "no `restored` parameters"))?;
    let iterates = (1..=records.len())
        .map(|k| {
            rckpt
                .get(&format!("iter-{k}"))
                .cloned()
                .ok_or_else(|| Error::format(rstage.file("restored.ckpt"), format!("no `iter-{k}` parameters")))
        })
        .collect::<Result<Vec<_>>>()?;
    let summary = analyse(&model, &pair, &restored, &parts, &cfg, retain_baseline, epsilon, records, iterates, &hash)?;

    let mut w = StageWriter::create(run_dir, STAGE_REPORT, &hash)?;
    for (k, v) in inputs {
        w.input(k, v);
    }
    w.put(CONFIG_FILE, &cfg.snapshot().to_toml())?;
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    w.put("summary.json", &json)?;
    w.put("summary.txt", &summary.render())?;
    for (name, table) in summary_tables(&summary) {
        w.put_table(name, &table)?;
    }
    Ok(ReportOutput {
        stage: w.finish(run_dir)?,
        cached: false,
        summary,
    })
}

#[allow(clippy::too_many_arguments)]
fn analyse(
    model: &MicroModel,
    pair: &CheckpointPair,
    restored: &ParamVec,
    parts: &DataPartition,
    cfg: &RunConfig,
    retain_baseline: f64,
    epsilon: f64,
    records: Vec<IterationRecord>,
    iterates: Vec<ParamVec>,
    hash: &str,
) -> Result<ReportSummary> {
    let fe = parts.whole(Part::ForgetEval)?;
    let rt = parts.whole(Part::RetainTest)?;
    let (f_tuned, f_rest) = (model.loss(&pair.tuned, &fe)?, model.loss(restored, &fe)?);
    let (r_tuned, r_rest) = (model.loss(&pair.tuned, &rt)?, model.loss(restored, &rt)?);
    let restoration = RestorationSummary {
        iterations: records.len(),
        applied: records
            .iter()
            .filter(|r| r.status == crate::influence::IterationStatus::Applied)
            .count(),
        epsilon,
        forget_tuned: f_tuned,
        forget_restored: f_rest,
        forget_relative_change: (f_rest - f_tuned) / f_tuned,
        retain_test_tuned: r_tuned,
        retain_test_restored: r_rest,
        retain_test_change: r_rest - r_tuned,
    };

    let datasets = vec![
        ("forget-eval".to_string(), parts.batches(Part::ForgetEval)),
        ("retain-test".to_string(), parts.batches(Part::RetainTest)),
    ];
    let ckpts = [
        ("base", &pair.base),
        ("tuned", &pair.tuned),
        ("restored", restored),
    ];
    let mut correlations = Vec::new();
    for (b_name, b) in &ckpts[1..] {
        for (tag, data) in &datasets {
            let c = loss_correlation(model, &pair.base, b, data, tag)?;
            correlations.push(CorrelationRow {
                a: "base".into(),
                b: b_name.to_string(),
                dataset: tag.clone(),
                r: c.r,
                n: c.n,
            });
        }
    }
    let loss_gap = loss_gap_table(
        model,
        &ckpts.iter().map(|(n, p)| (n.to_string(), (*p).clone())).collect::<Vec<_>>(),
        &datasets,
    )?;
    let trace_input = RestorationReport {
        retain_baseline,
        epsilon,
        records,
        start: pair.tuned.clone(),
        checkpoints: iterates,
        harvests: Vec::new(),
    };
    let recovery = recovery_trace(model, &trace_input, &pair.base, &datasets)?;

    let threshold = cfg
        .basin
        .threshold
        .unwrap_or_else(|| default_unsafe_threshold(model.loss(&pair.base, &fe).unwrap_or(f64::NAN), f_tuned));
    let forget_batches = parts.batches(Part::ForgetEval);
    let mut basin = Vec::new();
    for (name, p) in &ckpts {
        let r = basin_sweep(
            model,
            p,
            &forget_batches,
            threshold,
            cfg.basin.range,
            cfg.basin.directions,
            cfg.basin.magnitudes,
            RngState::new(cfg.seed, 2),
        )?;
        basin.push(BasinRow {
            checkpoint: name.to_string(),
            threshold,
            score: r.score,
            magnitudes: r.magnitudes,
            margin_curve: r.margin_curve,
        });
    }

    let traj = trajectory_compare(model, pair, parts, &cfg.trajectory, &cfg.harvest, RngState::new(cfg.seed, 3))?;
    let mut trajectory = Vec::new();
    for run in &traj.runs {
        for (method, t) in [("first-order", &run.first_order), ("curvature", &run.curvature)] {
            trajectory.push(TrajectoryRow {
                lr: run.lr,
                method: method.into(),
                steps: t.accepted.len(),
                accepted_steps: t.accepted.iter().filter(|a| **a).count(),
                decreasing_steps: t.decreasing_steps(),
                initial_objective: t.objective[0],
                final_objective: t.final_objective(),
            });
        }
    }
    Ok(ReportSummary {
        schema: REPORT_SCHEMA.into(),
        version: 1,
        config_hash: hash.to_string(),
        config: cfg.snapshot(),
        restoration,
        correlations,
        loss_gap,
        recovery,
        basin,
        trajectory,
    })
}

fn summary_tables(s: &ReportSummary) -> Vec<(&'static str, Table)> {
    let mut corr = Table::new("curvrestore.correlation", &["a", "b", "dataset", "r", "n"]);
    for c in &s.correlations {
        corr.push(vec![c.a.clone(), c.b.clone(), c.dataset.clone(), real(c.r), c.n.to_string()]);
    }
    let mut cols = vec!["checkpoint"];
    cols.extend(s.loss_gap.datasets.iter().map(String::as_str));
    let mut gap = Table::new("curvrestore.loss-gap", &cols);
    for (k, row) in s.loss_gap.checkpoints.iter().zip(&s.loss_gap.values) {
        let mut r = vec![k.clone()];
        r.extend(row.iter().map(|v| real(*v)));
        gap.push(r);
    }
    let mut cols = vec!["iteration"];
    cols.extend(s.recovery.datasets.iter().map(String::as_str));
    let mut rec = Table::new("curvrestore.recovery", &cols);
    let mut start = vec!["0".to_string()];
    start.extend(s.recovery.initial.iter().map(|v| real(*v)));
    rec.push(start);
    for (k, row) in s.recovery.per_iteration.iter().enumerate() {
        let mut r = vec![(k + 1).to_string()];
        r.extend(row.iter().map(|v| real(*v)));
        rec.push(r);
    }
    let mut basin = Table::new("curvrestore.basin", &["checkpoint", "magnitude", "unsafe_fraction"]);
    for b in &s.basin {
        for (m, u) in b.magnitudes.iter().zip(&b.margin_curve) {
            basin.push(vec![b.checkpoint.clone(), real(*m), real(*u)]);
        }
    }
    let mut traj = Table::new(
        "curvrestore.trajectory",
        &["lr", "method", "steps", "accepted", "decreasing", "initial_objective", "final_objective"],
    );
    for t in &s.trajectory {
        traj.push(vec![
            real(t.lr),
            t.method.clone(),
            t.steps.to_string(),
            t.accepted_steps.to_string(),
            t.decreasing_steps.to_string(),
            real(t.initial_objective),
            real(t.final_objective),
        ]);
    }
    vec![
        ("correlation.tsv", corr),
        ("loss-gap.tsv", gap),
        ("recovery.tsv", rec),
        ("basin.tsv", basin),
        ("trajectory.tsv", traj),
    ]
}
