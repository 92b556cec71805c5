//! Expand the sweep axes of a configuration into its grid of runs.

use pulse_icu::embedding::Component;
use pulse_icu::harness::{ExperimentPlan, RunConfig};
use pulse_icu::sequence::TruncationMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::default();
    cfg.sweep.masking = vec!["30/30/30/05".into(), "00/00/00/00".into()];
    cfg.sweep.label_fractions = vec![0.1, 1.0];
    cfg.sweep.truncation_modes = vec![TruncationMode::First, TruncationMode::Last];
    cfg.sweep.observation_hours = vec![12.0, 24.0];
    cfg.sweep.ablations = vec![Component::Value];
    cfg.sweep.seeds = vec![0, 1];
    let plan = ExperimentPlan::new(cfg, "runs/grid");
    let cells = plan.cells()?;
    for c in &cells {
        println!("{}", c.dir(&plan.out_dir).display());
    }
    println!("{} runs", cells.len());
    Ok(())
}
