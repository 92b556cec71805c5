//! Experiment drivers: single pretraining and fine-tuning runs, the masking
//! and label-fraction sweeps, the component ablation and representation
//! export.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::cohort::PreparedCohort;
use super::config::RunConfig;
use super::synth::Cohort;
use crate::downstream::{
    evaluate, finetune, FinetuneOutcome, LabeledStay, Task, TaskKind, TaskMetrics,
};
use crate::embedding::{AblationFlags, Component, VocabSizes};
use crate::error::{Error, Result};
use crate::event_data::{Dataset, StayRecord, VariableBounds, Vocabulary};
use crate::model::{ModelConfig, PulseModel};
use crate::pretrain::{pretrain, MaskPlanner, MaskingConfig, PrecisionCounts, PretrainOutcome};
use crate::sequence::TruncationMode;

/// Raw stays plus what is needed to prepare them.
#[derive(Clone, Debug)]
pub struct CohortSource {
    pub stays: Vec<StayRecord>,
    pub vocab: Vocabulary,
    pub bounds: BTreeMap<String, VariableBounds>,
}

impl From<Dataset> for CohortSource {
    fn from(d: Dataset) -> Self {
        Self {
            stays: d.stays,
            vocab: d.vocab,
            bounds: d.manifest.bounds,
        }
    }
}

impl From<Cohort> for CohortSource {
    fn from(c: Cohort) -> Self {
        Self {
            stays: c.stays,
            vocab: c.vocab,
            bounds: c.bounds,
        }
    }
}

impl CohortSource {
    pub fn prepare(&self, cfg: &RunConfig) -> Result<PreparedCohort> {
        PreparedCohort::build(&self.stays, &self.vocab, self.bounds.clone(), cfg)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Sample standard deviation; `None` below two values.
pub fn sample_sd(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v)?;
    Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

pub fn model_config(cfg: &RunConfig, vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        vocab: VocabSizes::of(vocab),
        embedding: cfg.embedding,
        encoder: cfg.encoder,
        seed: cfg.model_seed(),
    }
}

/// Task groups of the result tables.
pub const GROUPS: [&str; 4] = ["binary", "multiclass", "multilabel", "all"];

/// Mean AUROC and AUPRC over the tasks of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMetrics {
    pub group: &'static str,
    pub n_tasks: usize,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
}

pub fn group_metrics(metrics: &[TaskMetrics]) -> Vec<GroupMetrics> {
    GROUPS
        .iter()
        .map(|&group| {
            let members: Vec<&TaskMetrics> = metrics
                .iter()
                .filter(|m| group == "all" || m.kind.as_str() == group)
                .collect();
            let auroc: Vec<f64> = members.iter().filter_map(|m| m.auroc).collect();
            let auprc: Vec<f64> = members.iter().filter_map(|m| m.auprc).collect();
            GroupMetrics {
                group,
                n_tasks: members.len(),
                auroc: mean(&auroc),
                auprc: mean(&auprc),
            }
        })
        .collect()
}

fn group<'a>(groups: &'a [GroupMetrics], name: &str) -> &'a GroupMetrics {
    groups
        .iter()
        .find(|g| g.group == name)
        .expect("all groups present")
}

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub model: PulseModel,
    pub outcome: PretrainOutcome,
}

/// Pretrains a fresh model on the training split.
pub fn run_pretrain(cfg: &RunConfig, cohort: &PreparedCohort) -> Result<PretrainRun> {
    let cfg = cfg.seeded();
    let mut model = PulseModel::new(model_config(&cfg, &cohort.vocab))?;
    let planner = MaskPlanner::new(cfg.masking.clone(), &cohort.vocab)?;
    let outcome = pretrain(&mut model, &cohort.train_stays(), &planner, &cfg.pretrain)?;
    Ok(PretrainRun { model, outcome })
}

#[derive(Clone, Debug)]
pub struct FinetuneRun {
    pub model: PulseModel,
    pub outcome: FinetuneOutcome,
    /// Metrics on the test split.
    pub test: Vec<TaskMetrics>,
}

/// Fine-tunes on the training split (label fraction from the config),
/// selects on validation and reports test metrics. With a backbone the
/// model takes its vocabulary sizes, encoder shape and weights; the
/// embedding ablation flags always come from `cfg`.
pub fn run_finetune(
    cfg: &RunConfig,
    cohort: &PreparedCohort,
    backbone: Option<&PulseModel>,
) -> Result<FinetuneRun> {
    let cfg = cfg.seeded();
    let mut model = match backbone {
        Some(b) => {
            let mut m = PulseModel::new(ModelConfig {
                embedding: cfg.embedding,
                seed: cfg.model_seed(),
                ..b.config.clone()
            })?;
            m.load_backbone(&b.to_checkpoint()?)?;
            m
        }
        None => PulseModel::new(model_config(&cfg, &cohort.vocab))?,
    };
    let tasks = cfg.tasks.tasks();
    let outcome = finetune(
        &mut model,
        &cohort.train,
        &cohort.val,
        &tasks,
        &cfg.finetune,
    )?;
    let test = evaluate(
        &model,
        &cohort.test,
        &tasks,
        model.config.embedding.ablation,
    )?;
    Ok(FinetuneRun {
        model,
        outcome,
        test,
    })
}

/// One row of the masking sweep.
#[derive(Clone, Debug)]
pub struct MaskingRow {
    pub label: String,
    /// The configuration masks nothing, so there is no precision to report.
    pub no_masks: bool,
    pub best_epoch: usize,
    /// Training precision at the selected epoch.
    pub precision: PrecisionCounts,
    pub val_mep: Option<f64>,
    pub val_vp: Option<f64>,
    pub groups: Vec<GroupMetrics>,
}

/// Pretrains once per masking configuration, fine-tunes each backbone and
/// reports test metrics by task group.
pub fn run_masking_sweep(cfg: &RunConfig, cohort: &PreparedCohort) -> Result<Vec<MaskingRow>> {
    let mut rows = Vec::new();
    for label in &cfg.sweep.masking {
        let parsed = MaskingConfig::from_label(label)?;
        let mut c = cfg.clone();
        c.masking = MaskingConfig {
            vp_variables: cfg.masking.vp_variables.clone(),
            ..parsed
        };
        let no_masks = c.masking.mep_disabled() && c.masking.vp_ratio == 0.0;
        log::info!("masking sweep: {label}");
        let pre = run_pretrain(&c, cohort)?;
        let best = &pre.outcome.history[pre.outcome.best_epoch];
        let ft = run_finetune(&c, cohort, Some(&pre.model))?;
        rows.push(MaskingRow {
            label: label.clone(),
            no_masks,
            best_epoch: pre.outcome.best_epoch,
            precision: best.train.precision,
            val_mep: best.val.filter(|v| v.n_mep > 0).map(|v| v.mep()),
            val_vp: best.val.filter(|v| v.n_vp > 0).map(|v| v.vp()),
            groups: group_metrics(&ft.test),
        });
    }
    Ok(rows)
}

pub const MASKING_CSV_HEADER: &str = "masking,no_masks,best_epoch,mep_precision,precision_medication,precision_chart,\
precision_procedure,val_mep,val_vp,binary_auroc,binary_auprc,multiclass_auroc,multiclass_auprc,multilabel_auroc,\
multilabel_auprc,all_auroc,all_auprc";

pub fn write_masking_csv(rows: &[MaskingRow], mut out: impl Write) -> Result<()> {
    use crate::event_data::SourceType;
    writeln!(out, "{MASKING_CSV_HEADER}")?;
    for r in rows {
        let p = &r.precision;
        let mut cells = vec![
            r.label.clone(),
            u8::from(r.no_masks).to_string(),
            r.best_epoch.to_string(),
            fmt_opt(p.overall()),
            fmt_opt(p.per_type(SourceType::Input)),
            fmt_opt(p.per_type(SourceType::Chart)),
            fmt_opt(p.per_type(SourceType::Procedure)),
            fmt_opt(r.val_mep),
            fmt_opt(r.val_vp),
        ];
        for name in GROUPS {
            let g = group(&r.groups, name);
            cells.push(fmt_opt(g.auroc));
            cells.push(fmt_opt(g.auprc));
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

/// Grid point of the ratio sweep besides the label fraction and seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowKey {
    pub observation_hours: f64,
    pub truncation: TruncationMode,
}

fn truncation_name(t: TruncationMode) -> &'static str {
    match t {
        TruncationMode::First => "first",
        TruncationMode::Last => "last",
        TruncationMode::WholeOnly => "whole_only",
    }
}

#[derive(Clone, Debug)]
pub struct RatioRun {
    pub key: WindowKey,
    pub rho: f64,
    pub seed: u64,
    pub groups: Vec<GroupMetrics>,
    pub test: Vec<TaskMetrics>,
}

/// Mean and sample sd over seeds of one group metric.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanSd {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        Self {
            mean: mean(values),
            sd: sample_sd(values),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RatioRow {
    pub key: WindowKey,
    pub rho: f64,
    pub n_seeds: usize,
    /// `(auroc, auprc)` summaries in [`GROUPS`] order.
    pub groups: Vec<(MeanSd, MeanSd)>,
    /// Whether the mean AUROC over all tasks did not drop (by more than
    /// 0.02) from the previous label fraction. A diagnostic only.
    pub monotone: Option<bool>,
}

pub fn summarize_ratio_runs(runs: &[RatioRun]) -> Vec<RatioRow> {
    let mut rows: Vec<RatioRow> = Vec::new();
    for run in runs {
        if rows.iter().any(|r| r.key == run.key && r.rho == run.rho) {
            continue;
        }
        let same: Vec<&RatioRun> = runs
            .iter()
            .filter(|r| r.key == run.key && r.rho == run.rho)
            .collect();
        let groups = GROUPS
            .iter()
            .map(|&name| {
                let pick = |f: fn(&GroupMetrics) -> Option<f64>| -> Vec<f64> {
                    same.iter()
                        .filter_map(|r| f(group(&r.groups, name)))
                        .collect()
                };
                (
                    MeanSd::of(&pick(|g| g.auroc)),
                    MeanSd::of(&pick(|g| g.auprc)),
                )
            })
            .collect::<Vec<_>>();
        let all = groups[GROUPS.len() - 1].0.mean;
        let monotone = rows
            .iter()
            .rev()
            .find(|r| r.key == run.key)
            .and_then(|prev| Some(all? >= prev.groups[GROUPS.len() - 1].0.mean? - 0.02));
        if monotone == Some(false) {
            log::warn!("mean AUROC dropped at label fraction {}", run.rho);
        }
        rows.push(RatioRow {
            key: run.key,
            rho: run.rho,
            n_seeds: same.len(),
            groups,
            monotone,
        });
    }
    rows
}

/// Fine-tunes at every label fraction, for every seed and window setting.
/// Pretrained backbones are trained once per seed and window setting.
pub fn run_ratio_sweep(cfg: &RunConfig, source: &CohortSource) -> Result<Vec<RatioRun>> {
    let sweep = &cfg.sweep;
    let hours = if sweep.observation_hours.is_empty() {
        vec![cfg.window.observation_hours]
    } else {
        sweep.observation_hours.clone()
    };
    let modes = if sweep.truncation_modes.is_empty() {
        vec![cfg.window.truncation_mode]
    } else {
        sweep.truncation_modes.clone()
    };
    let seeds = if sweep.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        sweep.seeds.clone()
    };
    let rhos = if sweep.label_fractions.is_empty() {
        vec![cfg.finetune.label_fraction]
    } else {
        sweep.label_fractions.clone()
    };
    let mut runs = Vec::new();
    for &h in &hours {
        for &mode in &modes {
            let key = WindowKey {
                observation_hours: h,
                truncation: mode,
            };
            for &seed in &seeds {
                let mut c = cfg.clone();
                c.seed = seed;
                c.window.observation_hours = h;
                c.window.truncation_mode = mode;
                let cohort = source.prepare(&c)?;
                let backbone = if sweep.pretrained {
                    Some(run_pretrain(&c, &cohort)?.model)
                } else {
                    None
                };
                for &rho in &rhos {
                    c.finetune.label_fraction = rho;
                    log::info!("ratio sweep: {h} h, {mode:?}, seed {seed}, rho {rho}");
                    let ft = run_finetune(&c, &cohort, backbone.as_ref())?;
                    runs.push(RatioRun {
                        key,
                        rho,
                        seed,
                        groups: group_metrics(&ft.test),
                        test: ft.test,
                    });
                }
            }
        }
    }
    Ok(runs)
}

pub fn ratio_csv_header() -> String {
    let mut cols = vec![
        "observation_hours".to_string(),
        "truncation".into(),
        "rho".into(),
        "n_seeds".into(),
    ];
    for g in GROUPS {
        for m in ["auroc", "auprc"] {
            cols.push(format!("{g}_{m}_mean"));
            cols.push(format!("{g}_{m}_sd"));
        }
    }
    cols.push("monotone".into());
    cols.join(",")
}

pub fn write_ratio_csv(rows: &[RatioRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "{}", ratio_csv_header())?;
    for r in rows {
        let mut cells = vec![
            r.key.observation_hours.to_string(),
            truncation_name(r.key.truncation).into(),
            r.rho.to_string(),
            r.n_seeds.to_string(),
        ];
        for (auroc, auprc) in &r.groups {
            for s in [auroc, auprc] {
                cells.push(fmt_opt(s.mean));
                cells.push(fmt_opt(s.sd));
            }
        }
        cells.push(
            r.monotone
                .map(|m| u8::from(m).to_string())
                .unwrap_or_default(),
        );
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

pub const RATIO_RUNS_CSV_HEADER: &str = "observation_hours,truncation,rho,seed,group,auroc,auprc";

/// Per-seed rows behind the ratio summary.
pub fn write_ratio_runs_csv(runs: &[RatioRun], mut out: impl Write) -> Result<()> {
    writeln!(out, "{RATIO_RUNS_CSV_HEADER}")?;
    for r in runs {
        for g in &r.groups {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.key.observation_hours,
                truncation_name(r.key.truncation),
                r.rho,
                r.seed,
                g.group,
                fmt_opt(g.auroc),
                fmt_opt(g.auprc)
            )?;
        }
    }
    Ok(())
}

/// Test metrics of one model trained with `flags` removed.
pub fn run_ablation_variant(
    cfg: &RunConfig,
    cohort: &PreparedCohort,
    flags: AblationFlags,
) -> Result<Vec<TaskMetrics>> {
    let mut c = cfg.clone();
    c.embedding.ablation = flags;
    let backbone = if c.sweep.ablation_pretrain {
        Some(run_pretrain(&c, cohort)?.model)
    } else {
        None
    };
    Ok(run_finetune(&c, cohort, backbone.as_ref())?.test)
}

/// Base metrics and one variant per removed component.
#[derive(Clone, Debug)]
pub struct AblationTable {
    pub base: Vec<GroupMetrics>,
    pub base_tasks: Vec<TaskMetrics>,
    pub variants: Vec<(Component, Vec<GroupMetrics>, Vec<TaskMetrics>)>,
}

impl AblationTable {
    /// `(ΔAUROC, ΔAUPRC)` of `component` against the base in one group.
    pub fn delta(&self, component: Component, group_name: &str) -> (Option<f64>, Option<f64>) {
        let Some((_, groups, _)) = self.variants.iter().find(|v| v.0 == component) else {
            return (None, None);
        };
        let (b, v) = (group(&self.base, group_name), group(groups, group_name));
        let d = |x: Option<f64>, y: Option<f64>| Some(y? - x?);
        (d(b.auroc, v.auroc), d(b.auprc, v.auprc))
    }

    /// ΔAUROC of one task.
    pub fn task_delta(&self, component: Component, task: Task) -> Option<f64> {
        let (_, _, tasks) = self.variants.iter().find(|v| v.0 == component)?;
        let b = self.base_tasks.iter().find(|m| m.task == task)?.auroc?;
        let v = tasks.iter().find(|m| m.task == task)?.auroc?;
        Some(v - b)
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec![
            "group".to_string(),
            "n_tasks".into(),
            "base_auroc".into(),
            "base_auprc".into(),
        ];
        for (c, _, _) in &self.variants {
            let l = c.label().to_ascii_lowercase();
            cols.push(format!("{l}_delta_auroc"));
            cols.push(format!("{l}_delta_auprc"));
        }
        cols.join(",")
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", self.csv_header())?;
        for name in GROUPS {
            let b = group(&self.base, name);
            let mut cells = vec![
                name.to_string(),
                b.n_tasks.to_string(),
                fmt_opt(b.auroc),
                fmt_opt(b.auprc),
            ];
            for (c, _, _) in &self.variants {
                let (da, dp) = self.delta(*c, name);
                cells.push(fmt_opt(da));
                cells.push(fmt_opt(dp));
            }
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Trains the base model and one model per component in
/// `cfg.sweep.ablations`, all with the same seed.
pub fn run_ablation(cfg: &RunConfig, cohort: &PreparedCohort) -> Result<AblationTable> {
    let base_flags = cfg.embedding.ablation;
    log::info!("ablation: base");
    let base_tasks = run_ablation_variant(cfg, cohort, base_flags)?;
    let mut variants = Vec::new();
    for &c in &cfg.sweep.ablations {
        if base_flags.get(c) {
            return Err(Error::Config(format!(
                "component {} is already off in the base run",
                c.label()
            )));
        }
        let mut flags = base_flags;
        flags.set(c, true);
        log::info!("ablation: without {}", c.label());
        let tasks = run_ablation_variant(cfg, cohort, flags)?;
        variants.push((c, group_metrics(&tasks), tasks));
    }
    Ok(AblationTable {
        base: group_metrics(&base_tasks),
        base_tasks,
        variants,
    })
}

/// Label columns of the representation export.
pub fn label_columns() -> Vec<String> {
    let mut cols = Vec::new();
    for t in Task::ALL {
        if t.kind() == TaskKind::Multilabel {
            cols.extend((0..t.n_outputs()).map(|k| format!("{}_{k}", t.name())));
        } else {
            cols.push(t.name().to_string());
        }
    }
    cols
}

/// One row per stay: id, pooled representation, every label (empty when
/// unavailable).
pub fn export_representations(
    model: &PulseModel,
    stays: &[&LabeledStay],
    mut out: impl Write,
) -> Result<()> {
    let d = model.d_model();
    let mut header: Vec<String> = vec!["stay_id".into()];
    header.extend((0..d).map(|k| format!("z{k}")));
    header.extend(label_columns());
    writeln!(out, "{}", header.join(","))?;
    for s in stays {
        let z = model.represent(&s.stay)?;
        let mut cells = vec![s.stay.stay_id.clone()];
        cells.extend(z.iter().map(|v| v.to_string()));
        for t in Task::ALL {
            cells.extend(s.labels.cells(t).into_iter().map(fmt_opt));
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.json";

/// Saves a model with the vocabulary it was trained on.
pub fn save_model(dir: &Path, model: &PulseModel, vocab: &Vocabulary) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    model.save(dir.join(MODEL_FILE))?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    Ok(())
}

/// Loads a checkpoint and the vocabulary stored beside it.
pub fn load_model(path: &Path) -> Result<(PulseModel, Option<Vocabulary>)> {
    let model = PulseModel::load(path)?;
    let vocab_path = path.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE);
    let vocab = if vocab_path.exists() {
        Some(Vocabulary::load(&vocab_path)?)
    } else {
        None
    };
    Ok((model, vocab))
}
