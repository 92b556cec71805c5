//! Pretrain once per masking configuration, then fine-tune each backbone.

use pulse_icu::downstream::Task;
use pulse_icu::harness::{
    generate_cohort, run_masking_sweep, write_masking_csv, CohortSource, RunConfig, SynthSpec,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec {
        n_stays: 96,
        ..SynthSpec::default()
    };
    let mut cfg = RunConfig::default();
    cfg.pretrain.epochs = 4;
    cfg.finetune.epochs = 4;
    cfg.tasks.only = Some(vec![Task::Shock8h, Task::SofaRenal, Task::Phenotype]);
    cfg.sweep.masking = vec![
        "00/00/00/00".into(),
        "15/15/15/05".into(),
        "30/30/30/05".into(),
    ];
    let cohort = CohortSource::from(generate_cohort(&spec)?).prepare(&cfg)?;

    let rows = run_masking_sweep(&cfg, &cohort)?;
    write_masking_csv(&rows, std::io::stdout())?;
    Ok(())
}
