//! Downstream tasks: label derivation, task heads, the multi-task loss,
//! fine-tuning, evaluation and ranking metrics.

mod finetune;
mod labels;
mod metrics;


use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Init, ParamGroup, ParamId, ParamStore, Var};

pub use finetune::{
    evaluate, finetune, mean_auroc, multitask_loss, predict, sample_task_loss, subsample,
    task_weights, write_metrics_csv, zero_shot_eval, FinetuneConfig, FinetuneEpoch,
    FinetuneOutcome, LabeledStay, MultitaskLoss, Predictions, TaskMetrics, TaskWeights,
    ZeroShotReport, METRICS_CSV_HEADER,
};
pub use labels::{
    derive_labels, derive_shock_label, derive_sofa_label, derive_window_labels, Direction, Label,
    LabelConfig, LabelSet, SofaRule, SofaRules, SofaSystem, DEFAULT_SOFA_RULES,
};
pub use metrics::{aggregate, auprc, auroc, micro_flatten, Aggregate, ClassScores};

pub const PHENOTYPE_LABELS: usize = 25;
pub const SOFA_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Binary,
    Multiclass,
    Multilabel,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Binary => "binary",
            TaskKind::Multiclass => "multiclass",
            TaskKind::Multilabel => "multilabel",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Task {
    Mortality30d,
    MortalityHospital,
    MortalityIcu,
    Mortality48h,
    Los3d,
    Los7d,
    Readmission30d,
    Transfusion12h,
    Vasopressor12h,
    Ventilation12h,
    Shock8h,
    SofaCns,
    SofaCardiovascular,
    SofaRespiratory,
    SofaCoagulation,
    SofaLiver,
    SofaRenal,
    Phenotype,
}

impl Task {
    pub const ALL: [Task; 18] = [
        Task::Mortality30d,
        Task::MortalityHospital,
        Task::MortalityIcu,
        Task::Mortality48h,
        Task::Los3d,
        Task::Los7d,
        Task::Readmission30d,
        Task::Transfusion12h,
        Task::Vasopressor12h,
        Task::Ventilation12h,
        Task::Shock8h,
        Task::SofaCns,
        Task::SofaCardiovascular,
        Task::SofaRespiratory,
        Task::SofaCoagulation,
        Task::SofaLiver,
        Task::SofaRenal,
        Task::Phenotype,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Mortality30d => "mortality_30d",
            Task::MortalityHospital => "mortality_hospital",
            Task::MortalityIcu => "mortality_icu",
            Task::Mortality48h => "mortality_48h",
            Task::Los3d => "los_3d",
            Task::Los7d => "los_7d",
            Task::Readmission30d => "readmission_30d",
            Task::Transfusion12h => "transfusion_12h",
            Task::Vasopressor12h => "vasopressor_12h",
            Task::Ventilation12h => "ventilation_12h",
            Task::Shock8h => "shock_8h",
            Task::SofaCns => "sofa_cns",
            Task::SofaCardiovascular => "sofa_cardiovascular",
            Task::SofaRespiratory => "sofa_respiratory",
            Task::SofaCoagulation => "sofa_coagulation",
            Task::SofaLiver => "sofa_liver",
            Task::SofaRenal => "sofa_renal",
            Task::Phenotype => "phenotype",
        }
    }

    pub fn kind(self) -> TaskKind {
        match self {
            Task::Phenotype => TaskKind::Multilabel,
            t if t.sofa_system().is_some() => TaskKind::Multiclass,
            _ => TaskKind::Binary,
        }
    }

    pub fn n_outputs(self) -> usize {
        match self.kind() {
            TaskKind::Binary => 1,
            TaskKind::Multiclass => SOFA_CLASSES,
            TaskKind::Multilabel => PHENOTYPE_LABELS,
        }
    }

    pub fn sofa_system(self) -> Option<SofaSystem> {
        Some(match self {
            Task::SofaCns => SofaSystem::Cns,
            Task::SofaCardiovascular => SofaSystem::Cardiovascular,
            Task::SofaRespiratory => SofaSystem::Respiratory,
            Task::SofaCoagulation => SofaSystem::Coagulation,
            Task::SofaLiver => SofaSystem::Liver,
            Task::SofaRenal => SofaSystem::Renal,
            _ => return None,
        })
    }

    pub fn spec(self, active: bool) -> TaskSpec {
        TaskSpec {
            name: self.name().to_string(),
            kind: self.kind(),
            n_classes: self.n_outputs(),
            active,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

impl TryFrom<String> for Task {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Task> for String {
    fn from(t: Task) -> Self {
        t.name().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub n_classes: usize,
    pub active: bool,
}

/// Task coverage of a cohort.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    /// All 18 tasks.
    #[default]
    Full,
    Hirid,
    Eicu,
    P12,
}

impl Coverage {
    pub fn is_active(self, task: Task) -> bool {
        use Task::*;
        match self {
            Coverage::Full => true,
            Coverage::Hirid => {
                matches!(
                    task,
                    MortalityIcu
                        | Los3d
                        | Los7d
                        | Transfusion12h
                        | Vasopressor12h
                        | Ventilation12h
                        | Shock8h
                ) || task.sofa_system().is_some()
            }
            Coverage::Eicu => {
                matches!(
                    task,
                    MortalityIcu
                        | Mortality48h
                        | Los3d
                        | Los7d
                        | Transfusion12h
                        | Vasopressor12h
                        | Ventilation12h
                        | Shock8h
                        | Phenotype
                ) || task.sofa_system().is_some()
            }
            Coverage::P12 => matches!(task, MortalityHospital | Los3d | Los7d | Ventilation12h),
        }
    }

    pub fn specs(self) -> Vec<TaskSpec> {
        Task::ALL
            .iter()
            .map(|&t| t.spec(self.is_active(t)))
            .collect()
    }

    pub fn active_tasks(self) -> Vec<Task> {
        Task::ALL
            .into_iter()
            .filter(|&t| self.is_active(t))
            .collect()
    }
}

/// Task activation: a coverage preset, optionally narrowed to a list.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSelection {
    pub coverage: Coverage,
    pub only: Option<Vec<Task>>,
}

impl TaskSelection {
    pub fn tasks(&self) -> Vec<Task> {
        self.coverage
            .active_tasks()
            .into_iter()
            .filter(|t| self.only.as_ref().is_none_or(|o| o.contains(t)))
            .collect()
    }
}

/// Dropout plus a linear map from the pooled representation, per task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHeads {
    pub dropout: f64,
    heads: Vec<(Task, ParamId, ParamId)>,
}

impl TaskHeads {
    /// Registers `head.<task>.{w,b}`; parameters already in the store are
    /// reused.
    pub fn new(
        store: &mut ParamStore,
        tasks: &[Task],
        d_model: usize,
        dropout: f64,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!(
                "head dropout {dropout} outside [0, 1)"
            )));
        }
        let mut heads = Vec::new();
        for &t in tasks {
            if heads.iter().any(|(h, _, _)| *h == t) {
                continue;
            }
            let c = t.n_outputs();
            let mut get = |suffix: &str, shape: &[usize], init: Init| -> Result<ParamId> {
                let name = format!("head.{}.{suffix}", t.name());
                match store.id(&name) {
                    Some(id) if store.get(id).shape() == shape => Ok(id),
                    Some(_) => Err(Error::Config(format!(
                        "parameter {name} exists with another shape"
                    ))),
                    None => Ok(store.add(name, shape, init, ParamGroup::Head, rng)),
                }
            };
            let w = get("w", &[d_model, c], Init::TruncatedNormal(init_std))?;
            let b = get("b", &[1, c], Init::Zeros)?;
            heads.push((t, w, b));
        }
        Ok(Self { dropout, heads })
    }

    pub fn tasks(&self) -> Vec<Task> {
        self.heads.iter().map(|h| h.0).collect()
    }

    pub fn contains(&self, task: Task) -> bool {
        self.heads.iter().any(|h| h.0 == task)
    }

    pub fn params(&self, task: Task) -> Option<(ParamId, ParamId)> {
        self.heads.iter().find(|h| h.0 == task).map(|h| (h.1, h.2))
    }

    /// `[1 × C]` logits for one task.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pooled: Var,
        task: Task,
    ) -> Result<Var> {
        let (w, b) = self
            .params(task)
            .ok_or_else(|| Error::Config(format!("no head for task {task}")))?;
        let x = g.dropout(pooled, self.dropout)?;
        let w = g.param(store, w);
        let b = g.param(store, b);
        let y = g.matmul(x, w)?;
        Ok(g.add_bias(y, b)?)
    }
}
