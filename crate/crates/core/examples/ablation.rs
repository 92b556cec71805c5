//! Remove each embedding component in turn and report the change in test
//! AUROC and AUPRC against the full model.

use pulse_icu::downstream::Task;
use pulse_icu::embedding::Component;
use pulse_icu::harness::{generate_cohort, run_ablation, CohortSource, RunConfig, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::default();
    cfg.finetune.epochs = 20;
    cfg.tasks.only = Some(vec![Task::MortalityIcu, Task::Shock8h, Task::SofaRenal]);
    cfg.sweep.ablations = Component::ABLATABLE.to_vec();
    let cohort = CohortSource::from(generate_cohort(&SynthSpec::default())?).prepare(&cfg)?;

    let table = run_ablation(&cfg, &cohort)?;
    table.write_csv(std::io::stdout())?;
    for c in Component::ABLATABLE {
        println!(
            "{:<12} sofa_renal ΔAUROC {:+.3}",
            c.label(),
            table.task_delta(c, Task::SofaRenal).unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
