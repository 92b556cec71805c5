//! Pretrain and fine-tune on a planted-signal synthetic cohort and report
//! masked-event precision and held-out AUROC of the planted tasks.

use std::time::Instant;

use pulse_icu::downstream::Task;
use pulse_icu::harness::{
    generate_cohort, run_finetune, run_pretrain, CohortSource, RunConfig, SynthSpec,
};

fn env<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let spec = SynthSpec {
        n_stays: env("N_STAYS", 256),
        ..SynthSpec::default()
    };
    let mut cfg = RunConfig::default();
    cfg.pretrain.epochs = env("PRETRAIN_EPOCHS", 200);
    cfg.pretrain.lr = env("PRETRAIN_LR", cfg.pretrain.lr);
    cfg.pretrain.target_precision = Some(0.9);
    cfg.finetune.epochs = env("FINETUNE_EPOCHS", cfg.finetune.epochs);
    cfg.finetune.lr_backbone = env("LR_BACKBONE", cfg.finetune.lr_backbone);
    cfg.finetune.lr_heads = env("LR_HEADS", cfg.finetune.lr_heads);
    cfg.tasks.only = Some(vec![Task::MortalityIcu, Task::Shock8h, Task::SofaRenal]);

    let source = CohortSource::from(generate_cohort(&spec)?);
    let cohort = source.prepare(&cfg)?;
    let mean_len = cohort
        .train
        .iter()
        .map(|s| s.stay.events.len())
        .sum::<usize>() as f64
        / cohort.train.len() as f64;
    println!(
        "cohort: {} train, {} val, {} test, {} excluded, {mean_len:.1} events per stay",
        cohort.train.len(),
        cohort.val.len(),
        cohort.test.len(),
        cohort.excluded
    );

    let t = Instant::now();
    let pre = run_pretrain(&cfg, &cohort)?;
    let best = pre
        .outcome
        .history
        .iter()
        .filter_map(|e| e.train.precision.overall())
        .fold(0.0, f64::max);
    println!(
        "pretrain: {} epochs, best training precision {best:.3}, {:.1}s",
        pre.outcome.history.len(),
        t.elapsed().as_secs_f64()
    );

    let t = Instant::now();
    let ft = run_finetune(&cfg, &cohort, Some(&pre.model))?;
    for m in &ft.test {
        println!("{}: test AUROC {:?} (n {})", m.task.name(), m.auroc, m.n);
    }
    println!("finetune: {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
