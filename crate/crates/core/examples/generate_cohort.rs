//! Generate a planted-signal cohort, write it to disk and read it back.
//!
//! `cargo run --example generate_cohort -- [out_dir]`

use std::path::PathBuf;

use pulse_icu::event_data::{load_dataset, ParseOptions, SourceType};
use pulse_icu::harness::{generate_cohort, write_cohort, SynthSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out: PathBuf = std::env::args().nth(1).map_or_else(
        || std::env::temp_dir().join("pulse_icu_cohort"),
        PathBuf::from,
    );
    let spec = SynthSpec {
        n_stays: 64,
        ..SynthSpec::default()
    };
    let cohort = generate_cohort(&spec)?;
    write_cohort(&out, &spec, &cohort)?;

    let back = load_dataset(&out, ParseOptions::default())?;
    assert_eq!(back.stays, cohort.stays);

    let events: usize = back.stays.iter().map(|s| s.events.len()).sum();
    println!(
        "{} stays, {events} events, {} event tokens in {}",
        back.stays.len(),
        back.vocab.event.len(),
        out.display()
    );
    for st in SourceType::ALL {
        let n = back
            .stays
            .iter()
            .flat_map(|s| &s.events)
            .filter(|e| e.source_type == st)
            .count();
        println!("  {st:?}: {:.1}%", 100.0 * n as f64 / events as f64);
    }
    let share = |f: fn(&pulse_icu::harness::Latent) -> bool| {
        cohort.latents.iter().filter(|l| f(l)).count() as f64 / cohort.latents.len() as f64
    };
    println!(
        "planted shock {:.2}, severe {:.2}",
        share(|l| l.shock),
        share(|l| l.severe)
    );
    let first = &back.stays[0];
    println!(
        "first stay {}: {} events, last at {:.1} h",
        first.stay_id,
        first.events.len(),
        first.events.last().map_or(0.0, |e| e.offset_hours())
    );
    Ok(())
}
