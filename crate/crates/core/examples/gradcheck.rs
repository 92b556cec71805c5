//! Finite-difference check of the full fine-tuning loss against the tape
//! gradients of every model parameter.

use pulse_icu::downstream::{sample_task_loss, task_weights, Task};
use pulse_icu::embedding::AblationFlags;
use pulse_icu::encoder::EncoderConfig;
use pulse_icu::harness::{generate_cohort, model_config, CohortSource, RunConfig, SynthSpec};
use pulse_icu::numerics::gradcheck::{check_param_gradients, Tolerance};
use pulse_icu::numerics::NumericsError;
use pulse_icu::PulseModel;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::default();
    cfg.encoder = EncoderConfig {
        n_layers: 1,
        d_model: 8,
        d_ff: 16,
        ..EncoderConfig::desk()
    };
    let spec = SynthSpec {
        n_stays: 8,
        ..SynthSpec::default()
    };
    let cohort = CohortSource::from(generate_cohort(&spec)?).prepare(&cfg)?;
    let mut model = PulseModel::new(model_config(&cfg, &cohort.vocab))?;
    model.add_task_heads(&Task::ALL, 0.1, 1)?;
    let sample = &cohort.train[0];
    let weights = task_weights([&sample.labels], &Task::ALL);

    let report = check_param_gradients(
        &model.store,
        |g, store| {
            let mut m = model.clone();
            m.store = store.clone();
            sample_task_loss(g, &m, sample, &Task::ALL, &weights, AblationFlags::none())
                .map_err(|e| NumericsError::InvalidArgument(e.to_string()))?
                .ok_or_else(|| NumericsError::InvalidArgument("no labels".into()))
        },
        3e-6,
        Tolerance::default(),
        Some(11),
        Some((2, 0)),
    )?;
    println!(
        "{} parameter tensors, {} elements checked, max relative error {:.2e}, passed {}",
        model.store.len(),
        report.checked,
        report.max_rel_err,
        report.passed()
    );
    Ok(())
}
