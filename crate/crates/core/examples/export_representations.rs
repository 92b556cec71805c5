//! Pooled stay representations with labels, and a nearest-centroid check of
//! how well they separate planted shock.

use pulse_icu::downstream::{Label, Task};
use pulse_icu::harness::{
    export_representations, generate_cohort, run_pretrain, CohortSource, RunConfig, SynthSpec,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SynthSpec {
        n_stays: 96,
        ..SynthSpec::default()
    };
    let mut cfg = RunConfig::default();
    cfg.pretrain.epochs = 10;
    let cohort = CohortSource::from(generate_cohort(&spec)?).prepare(&cfg)?;
    let model = run_pretrain(&cfg, &cohort)?.model;

    let path = std::env::temp_dir().join("pulse_icu_representations.csv");
    export_representations(&model, &cohort.all(), std::fs::File::create(&path)?)?;
    println!("wrote {}", path.display());

    let mut sums = [vec![0.0; model.d_model()], vec![0.0; model.d_model()]];
    let mut counts = [0usize; 2];
    let mut points = Vec::new();
    for s in cohort.all() {
        let Some(Label::Binary(y)) = s.labels.get(Task::Shock8h) else {
            continue;
        };
        let z = model.represent(&s.stay)?;
        let k = usize::from(*y);
        counts[k] += 1;
        sums[k].iter_mut().zip(&z).for_each(|(a, b)| *a += b);
        points.push((k, z));
    }
    let centroids: Vec<Vec<f64>> = sums
        .iter()
        .zip(counts)
        .map(|(s, n)| s.iter().map(|v| v / n.max(1) as f64).collect())
        .collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let correct = points
        .iter()
        .filter(|(k, z)| usize::from(dist(z, &centroids[1]) < dist(z, &centroids[0])) == *k)
        .count();
    println!(
        "shock: {} / {} stays assigned to their own centroid",
        correct,
        points.len()
    );
    Ok(())
}
