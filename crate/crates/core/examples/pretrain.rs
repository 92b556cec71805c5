//! Masked event and value pretraining on a small synthetic cohort, with the
//! checkpoint written beside its vocabulary.

use pulse_icu::harness::{
    generate_cohort, load_model, run_pretrain, save_model, CohortSource, RunConfig, SynthSpec,
    MODEL_FILE,
};
use pulse_icu::pretrain::write_pretrain_csv;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec {
        n_stays: 96,
        ..SynthSpec::default()
    };
    let mut cfg = RunConfig::default();
    cfg.pretrain.epochs = 8;
    let cohort = CohortSource::from(generate_cohort(&spec)?).prepare(&cfg)?;

    let run = run_pretrain(&cfg, &cohort)?;
    for e in &run.outcome.history {
        println!(
            "epoch {:>2}  lr {:.2e}  mep {:.3}  precision {:.3}",
            e.epoch,
            e.lr,
            e.train.mep(),
            e.train.precision.overall().unwrap_or(f64::NAN)
        );
    }
    println!("best epoch {}", run.outcome.best_epoch);

    let dir = std::env::temp_dir().join("pulse_icu_pretrain");
    save_model(&dir, &run.model, &cohort.vocab)?;
    write_pretrain_csv(
        &run.outcome,
        std::fs::File::create(dir.join("pretrain.csv"))?,
    )?;
    let (back, vocab) = load_model(&dir.join(MODEL_FILE))?;
    assert!(back.store.bit_identical(&run.model.store) && vocab.is_some());
    println!("checkpoint in {}", dir.display());
    Ok(())
}
