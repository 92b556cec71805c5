//! Expansion of the sweep axes into one fully specified run per grid cell.

use std::path::{Path, PathBuf};

use super::config::RunConfig;
use crate::embedding::{AblationFlags, Component};
use crate::error::Result;
use crate::pretrain::MaskingConfig;
use crate::sequence::TruncationMode;

/// One run of the grid: its directory name and complete configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub id: String,
    pub config: RunConfig,
}

impl GridCell {
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(&self.id)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub base: RunConfig,
    pub out_dir: PathBuf,
}

fn axis<T: Clone>(values: &[T], fallback: T) -> Vec<T> {
    if values.is_empty() {
        vec![fallback]
    } else {
        values.to_vec()
    }
}

fn truncation_tag(t: TruncationMode) -> &'static str {
    match t {
        TruncationMode::First => "first",
        TruncationMode::Last => "last",
        TruncationMode::WholeOnly => "whole",
    }
}

impl ExperimentPlan {
    pub fn new(base: RunConfig, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            base,
            out_dir: out_dir.into(),
        }
    }

    /// The full cross product of the sweep axes. Empty axes contribute the
    /// base value; the ablation axis always includes the unablated run.
    pub fn cells(&self) -> Result<Vec<GridCell>> {
        let b = &self.base;
        let s = &b.sweep;
        let masking = axis(&s.masking, b.masking.label());
        let rhos = axis(&s.label_fractions, b.finetune.label_fraction);
        let filters = axis(&s.core_variables, b.data.core_variables);
        let modes = axis(&s.truncation_modes, b.window.truncation_mode);
        let hours = axis(&s.observation_hours, b.window.observation_hours);
        let mut ablations: Vec<Option<Component>> = vec![None];
        ablations.extend(s.ablations.iter().copied().map(Some));
        let seeds = axis(&s.seeds, b.seed);

        let mut cells = Vec::new();
        for m in &masking {
            let parsed = MaskingConfig::from_label(m)?;
            for &rho in &rhos {
                for &core in &filters {
                    for &mode in &modes {
                        for &h in &hours {
                            for &abl in &ablations {
                                for &seed in &seeds {
                                    let mut c = b.clone();
                                    c.masking = MaskingConfig {
                                        vp_variables: b.masking.vp_variables.clone(),
                                        ..parsed.clone()
                                    };
                                    c.finetune.label_fraction = rho;
                                    c.data.core_variables = core;
                                    c.window.truncation_mode = mode;
                                    c.window.observation_hours = h;
                                    if let Some(comp) = abl {
                                        c.embedding.ablation = AblationFlags::only(comp);
                                    }
                                    c.seed = seed;
                                    c.validate()?;
                                    let id = format!(
                                        "mask{}_rho{rho}_{}_{}_{h}h_{}_seed{seed}",
                                        m.replace('/', "-"),
                                        if core { "core" } else { "all" },
                                        truncation_tag(mode),
                                        abl.map_or("base".to_string(), |c| format!(
                                            "no-{}",
                                            c.label().to_ascii_lowercase()
                                        )),
                                    );
                                    cells.push(GridCell { id, config: c });
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}
