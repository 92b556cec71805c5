//! Multi-task fine-tuning of all eighteen tasks from random initialization,
//! printing the test metrics table.

use pulse_icu::downstream::write_metrics_csv;
use pulse_icu::harness::{
    generate_cohort, group_metrics, run_finetune, CohortSource, RunConfig, SynthSpec,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec {
        n_stays: 128,
        ..SynthSpec::default()
    };
    let mut cfg = RunConfig::default();
    cfg.finetune.epochs = 10;
    let cohort = CohortSource::from(generate_cohort(&spec)?).prepare(&cfg)?;

    let run = run_finetune(&cfg, &cohort, None)?;
    println!("best validation epoch {:?}", run.outcome.best_epoch);
    write_metrics_csv(
        &run.test,
        cfg.finetune.label_fraction,
        cfg.seed,
        std::io::stdout(),
    )?;
    for g in group_metrics(&run.test) {
        println!(
            "{:<10} tasks {:>2}  AUROC {:?}  AUPRC {:?}",
            g.group, g.n_tasks, g.auroc, g.auprc
        );
    }
    Ok(())
}
