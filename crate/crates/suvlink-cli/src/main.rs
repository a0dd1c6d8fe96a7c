//! `suvlink`: report-to-lesion weak-labeling pipeline driver.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration/input errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use suvlink::matcher::Connectivity;
use suvlink::metrics::{render_report, BootstrapConfig};
use suvlink::phantom::{generate_corpus, CorpusConfig, InjectMix};
use suvlink::pipeline::{self, PipelineConfig};
use suvlink::volume::SliceConvention;
use suvlink::SuvlinkError;

#[derive(Parser)]
#[command(name = "suvlink", version, about = "PET/CT report-to-lesion labeling pipeline")]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Args, Clone)]
struct CommonArgs {
    /// Pipeline configuration file (TOML or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages (0 = library default).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Minimum SUVmax cutoff for retained findings.
    #[arg(long, global = true)]
    min_suv: Option<f64>,
    /// SUV tolerance for component matching.
    #[arg(long, global = true)]
    suv_tol: Option<f64>,
    /// Component connectivity: 6, 18, or 26.
    #[arg(long, global = true)]
    connectivity: Option<u8>,
    /// Mapping of report slice numbers onto the axial axis.
    #[arg(long, global = true, value_enum)]
    slice_convention: Option<CliConvention>,
    /// Skip the rule short-circuit and always query the ensemble.
    #[arg(long, global = true)]
    always_ensemble: bool,
}

#[derive(clap::ValueEnum, Clone, Copy)]
enum CliConvention {
    InferiorFirst,
    SuperiorFirst,
}

#[derive(Subcommand)]
enum Command {
    /// Split reports into candidate sentences and apply the lexical filters.
    Parse,
    /// Extract SUVmax/slice values (rule first, LLM ensemble on ambiguity).
    Extract,
    /// Match each extracted value pair to a connected component.
    Match,
    /// Refine matched components into final masks by iterative thresholding.
    Refine,
    /// Assemble the dataset manifest, splits, and funnel report.
    Build,
    /// Re-run the patient-level split on an existing manifest.
    Split,
    /// Run parse through build in one go.
    RunAll,
    /// Print the stage funnel from the last run.
    Funnel,
    /// Score a built dataset against a truth manifest.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Bootstrap iterations for the confidence intervals.
        #[arg(long, default_value_t = 10_000)]
        iterations: usize,
    },
    /// Generate a synthetic corpus with known ground truth.
    Phantom {
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Inject the standard negative-sentence mix (10% each).
        #[arg(long)]
        inject: bool,
    },
}

fn load_config(common: &CommonArgs) -> Result<PipelineConfig, SuvlinkError> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(v) = common.min_suv {
        cfg.min_suv = v;
    }
    if let Some(v) = common.suv_tol {
        cfg.suv_tol = v;
    }
    if let Some(c) = common.connectivity {
        cfg.connectivity = Connectivity::from_u8(c).ok_or_else(|| {
            SuvlinkError::ConfigInvalid(format!("connectivity must be 6, 18 or 26, got {c}"))
        })?;
    }
    if let Some(c) = common.slice_convention {
        cfg.slice_convention = match c {
            CliConvention::InferiorFirst => SliceConvention::InferiorFirst,
            CliConvention::SuperiorFirst => SliceConvention::SuperiorFirst,
        };
    }
    if common.always_ensemble {
        cfg.always_ensemble = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_states(
    cfg: &PipelineConfig,
    stage_file: &str,
) -> Result<Vec<pipeline::CandidateState>, SuvlinkError> {
    let path = cfg.out_dir.join(stage_file);
    let text = std::fs::read_to_string(&path)
        .map_err(|_| SuvlinkError::InputMissing(path.clone()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn run(cli: Cli) -> Result<(), SuvlinkError> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Parse => {
            let states = pipeline::run_parse(&cfg)?;
            println!("parsed {} candidate sentences", states.len());
        }
        Command::Extract => {
            let states = pipeline::run_extract(&cfg, read_states(&cfg, "parse.jsonl")?)?;
            let resolved = states.iter().filter(|s| s.values.is_some()).count();
            println!("extracted values for {resolved} sentences");
        }
        Command::Match => {
            let states = pipeline::run_match(&cfg, read_states(&cfg, "extract.jsonl")?)?;
            let matched = states.iter().filter(|s| s.component_id.is_some()).count();
            println!("matched {matched} sentences to components");
        }
        Command::Refine => {
            let states = pipeline::run_refine(&cfg, read_states(&cfg, "match.jsonl")?)?;
            let refined = states.iter().filter(|s| s.label.is_some()).count();
            println!("refined {refined} lesion masks");
        }
        Command::Build => {
            let samples = pipeline::run_build(&cfg, read_states(&cfg, "refine.jsonl")?)?;
            println!("built {} samples", samples.len());
        }
        Command::Split => {
            let mut samples =
                suvlink::dataset::read_manifest(cfg.out_dir.join("manifest.jsonl"))?;
            suvlink::dataset::split_patients(&mut samples, cfg.split_fractions, cfg.seed)?;
            suvlink::dataset::write_manifest(&samples, cfg.out_dir.join("manifest.jsonl"))?;
            println!("re-split {} samples", samples.len());
        }
        Command::RunAll => {
            let (samples, funnel) = pipeline::run_all(&cfg)?;
            println!("{}", funnel.render());
            println!("built {} samples", samples.len());
        }
        Command::Funnel => {
            let funnel = pipeline::load_funnel(&cfg)?;
            print!("{}", funnel.render());
        }
        Command::Evaluate {
            pred,
            truth,
            iterations,
        } => {
            let report = pipeline::evaluate(
                &cfg,
                &pred,
                &truth,
                &BootstrapConfig {
                    iterations,
                    seed: cfg.seed,
                    ..BootstrapConfig::default()
                },
            )?;
            print!("{}", render_report(&report));
        }
        Command::Phantom { n, out, inject } => {
            let corpus = CorpusConfig {
                n_exams: n,
                seed: cfg.seed,
                convention: cfg.slice_convention,
                inject: if inject {
                    InjectMix::acceptance()
                } else {
                    InjectMix::none()
                },
                ..CorpusConfig::default()
            };
            let summary = generate_corpus(&corpus, &out)?;
            println!(
                "generated {} exams with {} planted lesions at {}",
                summary.n_exams,
                summary.truth.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (SuvlinkError::ConfigInvalid(_) | SuvlinkError::InputMissing(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
