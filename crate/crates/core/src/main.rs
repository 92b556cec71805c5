use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pulse_icu::downstream::{evaluate, write_metrics_csv, Task};
use pulse_icu::event_data::{load_dataset, Dataset, ParseOptions};
use pulse_icu::harness::{
    export_representations, generate_cohort, hash_dataset, load_model, resolve_output,
    run_ablation, run_finetune, run_masking_sweep, run_pretrain, run_ratio_sweep, save_model,
    summarize_ratio_runs, write_cohort, write_masking_csv, write_ratio_csv, write_ratio_runs_csv,
    CohortSource, PreparedCohort, RunConfig, RunManifest, SynthSpec, MODEL_FILE,
};
use pulse_icu::pretrain::write_pretrain_csv;
use pulse_icu::PulseModel;

#[derive(Parser)]
#[command(
    name = "pulse-icu",
    version,
    about = "Clinical event sequence pretraining and multi-task fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted labels.
    GenData {
        /// Generator spec (TOML); defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_stays: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Masked event and value pretraining.
    Pretrain(RunArgs),
    /// Multi-task fine-tuning, optionally from a pretrained checkpoint.
    Finetune(RunArgs),
    /// Evaluate a fine-tuned checkpoint on the test split.
    Eval(RunArgs),
    /// One pretraining and fine-tuning run per masking configuration.
    SweepMasking(RunArgs),
    /// Fine-tuning over label fractions and seeds.
    SweepRatio(RunArgs),
    /// Retrain with each embedding component removed.
    Ablate(RunArgs),
    /// Write pooled representations and labels of every stay.
    ExportRepr(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory (or its manifest.toml).
    #[arg(long)]
    data: PathBuf,
    /// Run configuration (TOML); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory; relative paths resolve under PULSE_ICU_OUTPUT_ROOT.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

struct Run {
    cfg: RunConfig,
    dataset: Dataset,
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(command: &str, args: &RunArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        let dataset = load_dataset(&args.data, ParseOptions::default())
            .with_context(|| format!("loading dataset {}", args.data.display()))?;
        let out = resolve_output(
            args.out
                .as_deref()
                .unwrap_or(Path::new(&format!("runs/{command}"))),
        );
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let mut manifest = RunManifest::new(command, cfg.seed, &cfg.to_toml())?;
        manifest.data = Some(args.data.clone());
        manifest.data_hash = Some(hash_dataset(&args.data)?);
        manifest.checkpoint = args.checkpoint.clone();
        Ok(Self {
            cfg,
            dataset,
            out,
            manifest,
        })
    }

    fn source(&self) -> CohortSource {
        CohortSource::from(self.dataset.clone())
    }

    fn cohort(&self) -> Result<PreparedCohort> {
        Ok(self.source().prepare(&self.cfg)?)
    }

    /// Cohort encoded with the checkpoint's vocabulary when one is stored.
    fn cohort_for(
        &self,
        vocab: Option<&pulse_icu::event_data::Vocabulary>,
    ) -> Result<PreparedCohort> {
        let vocab = vocab.unwrap_or(&self.dataset.vocab);
        Ok(PreparedCohort::build(
            &self.dataset.stays,
            vocab,
            self.dataset.manifest.bounds.clone(),
            &self.cfg,
        )?)
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.manifest.outputs.push(name.to_string());
        let path = self.out.join(name);
        Ok(BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        ))
    }

    fn save(
        &mut self,
        model: &PulseModel,
        vocab: &pulse_icu::event_data::Vocabulary,
    ) -> Result<()> {
        save_model(&self.out, model, vocab)?;
        self.manifest.outputs.push(MODEL_FILE.into());
        Ok(())
    }

    fn finish(self) -> Result<()> {
        self.manifest.write(&self.out)?;
        println!("wrote {}", self.out.display());
        Ok(())
    }
}

fn require_checkpoint(args: &RunArgs) -> Result<&Path> {
    match &args.checkpoint {
        Some(p) => Ok(p),
        None => bail!("--checkpoint is required"),
    }
}

fn gen_data(
    spec: Option<&Path>,
    out: &Path,
    n_stays: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let mut spec = match spec {
        Some(p) => SynthSpec::from_toml(
            &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => SynthSpec::default(),
    };
    if let Some(n) = n_stays {
        spec.n_stays = n;
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let out = resolve_output(out);
    let cohort = generate_cohort(&spec)?;
    write_cohort(&out, &spec, &cohort)?;
    let text = spec.to_toml();
    let mut manifest = RunManifest::new("gen-data", spec.seed, &text)?;
    manifest.data_hash = Some(hash_dataset(&out)?);
    manifest.outputs = vec![
        "manifest.toml".into(),
        "vocab.json".into(),
        "stays/".into(),
        "spec.toml".into(),
    ];
    manifest.write(&out)?;
    println!("wrote {} stays to {}", cohort.stays.len(), out.display());
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            spec,
            out,
            n_stays,
            seed,
        } => gen_data(spec.as_deref(), &out, n_stays, seed),
        Command::Pretrain(args) => {
            let mut run = Run::start("pretrain", &args)?;
            let cohort = run.cohort()?;
            let pre = run_pretrain(&run.cfg, &cohort)?;
            write_pretrain_csv(&pre.outcome, run.create("pretrain.csv")?)?;
            run.save(&pre.model, &cohort.vocab)?;
            run.finish()
        }
        Command::Finetune(args) => {
            let mut run = Run::start("finetune", &args)?;
            let (backbone, vocab) = match &args.checkpoint {
                Some(p) => {
                    let (m, v) = load_model(p)?;
                    (Some(m), v)
                }
                None => (None, None),
            };
            let cohort = run.cohort_for(vocab.as_ref())?;
            let ft = run_finetune(&run.cfg, &cohort, backbone.as_ref())?;
            let (rho, seed) = (run.cfg.finetune.label_fraction, run.cfg.seed);
            write_metrics_csv(&ft.test, rho, seed, run.create("metrics.csv")?)?;
            run.save(&ft.model, &cohort.vocab)?;
            run.finish()
        }
        Command::Eval(args) => {
            let mut run = Run::start("eval", &args)?;
            let (model, vocab) = load_model(require_checkpoint(&args)?)?;
            let Some(heads) = &model.task_heads else {
                bail!("checkpoint has no task heads; fine-tune it first");
            };
            let wanted = run.cfg.tasks.tasks();
            let tasks: Vec<Task> = heads
                .tasks()
                .into_iter()
                .filter(|t| wanted.contains(t))
                .collect();
            let cohort = run.cohort_for(vocab.as_ref())?;
            let metrics = evaluate(
                &model,
                &cohort.test,
                &tasks,
                model.config.embedding.ablation,
            )?;
            let (rho, seed) = (run.cfg.finetune.label_fraction, run.cfg.seed);
            write_metrics_csv(&metrics, rho, seed, run.create("metrics.csv")?)?;
            run.finish()
        }
        Command::SweepMasking(args) => {
            let mut run = Run::start("sweep-masking", &args)?;
            let cohort = run.cohort()?;
            let rows = run_masking_sweep(&run.cfg, &cohort)?;
            write_masking_csv(&rows, run.create("masking.csv")?)?;
            run.finish()
        }
        Command::SweepRatio(args) => {
            let mut run = Run::start("sweep-ratio", &args)?;
            let runs = run_ratio_sweep(&run.cfg, &run.source())?;
            write_ratio_csv(&summarize_ratio_runs(&runs), run.create("ratio.csv")?)?;
            write_ratio_runs_csv(&runs, run.create("ratio_runs.csv")?)?;
            run.finish()
        }
        Command::Ablate(args) => {
            let mut run = Run::start("ablate", &args)?;
            let cohort = run.cohort()?;
            let table = run_ablation(&run.cfg, &cohort)?;
            table.write_csv(run.create("ablation.csv")?)?;
            run.finish()
        }
        Command::ExportRepr(args) => {
            let mut run = Run::start("export-repr", &args)?;
            let (model, vocab) = load_model(require_checkpoint(&args)?)?;
            let cohort = run.cohort_for(vocab.as_ref())?;
            export_representations(&model, &cohort.all(), run.create("representations.csv")?)?;
            run.finish()
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
