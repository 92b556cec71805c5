//! Fine-tune with a small share of labels, from a pretrained backbone and
//! from random initialization, over several seeds.

use pulse_icu::downstream::Task;
use pulse_icu::harness::{
    generate_cohort, run_ratio_sweep, summarize_ratio_runs, write_ratio_csv, CohortSource,
    RunConfig, SynthSpec,
};

fn env<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let source = CohortSource::from(generate_cohort(&SynthSpec::default())?);
    let mut cfg = RunConfig::default();
    cfg.pretrain.epochs = env("PRETRAIN_EPOCHS", cfg.pretrain.epochs);
    cfg.finetune.epochs = env("FINETUNE_EPOCHS", cfg.finetune.epochs);
    cfg.tasks.only = Some(vec![Task::MortalityIcu, Task::Shock8h, Task::SofaRenal]);
    cfg.sweep.label_fractions = vec![env("RHO", 0.1)];

    for pretrained in [true, false] {
        cfg.sweep.pretrained = pretrained;
        let runs = run_ratio_sweep(&cfg, &source)?;
        for r in &runs {
            let per_task: Vec<String> = r
                .test
                .iter()
                .map(|m| format!("{} {:.3}", m.task.name(), m.auroc.unwrap_or(f64::NAN)))
                .collect();
            println!(
                "pretrained={pretrained} seed={} {}",
                r.seed,
                per_task.join(", ")
            );
        }
        println!("pretrained={pretrained}");
        write_ratio_csv(&summarize_ratio_runs(&runs), std::io::stdout())?;
    }
    Ok(())
}
