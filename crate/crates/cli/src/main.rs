use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use backcalc::durations::{duration_ensemble, DurationEnsemble};
use backcalc::error::{Error, Result};
use backcalc::io::{
    build_ensemble, chess_infection_to_death, isaric_result, plot_pcr_table, read_pcr_table, run_pipeline, write_duration_draws,
    write_pcr_table, DurationSource, PcrTable, RunConfig,
};
use backcalc::pcr::{fit_pcr_incidence, reference_incidence, simulate_pcr, PcrModel, DEFAULT_PCR_K};
use backcalc::stream_rng;
use clap::{Args, Parser, Subcommand};
use log::error;

#[derive(Parser)]
#[command(name = "backcalc", version, about = "Reconstruct fatal infection incidence from daily deaths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the incidence model and write bands, peak-day distribution and plots.
    Fit(RunArgs),
    /// Fit, then report the reproduction number and its sensitivity.
    R(RunArgs),
    /// Run one model check.
    Check {
        #[command(subcommand)]
        check: CheckCommand,
    },
    /// PCR surveillance incidence.
    Pcr {
        #[command(subcommand)]
        pcr: PcrCommand,
    },
    /// Infection-to-death distributions.
    Durations {
        #[command(subcommand)]
        durations: DurationsCommand,
    },
}

#[derive(Subcommand)]
enum CheckCommand {
    /// Refit with the time axis stretched around the first anchor.
    Dilate(RunArgs),
    /// Simulate deaths forward from the median incidence.
    Sanity(RunArgs),
    /// Compare with naive back-imputation of infections.
    Imputation(RunArgs),
    /// Refit with deaths scaled for a falling fatality rate.
    Ifr(RunArgs),
}

#[derive(Subcommand)]
enum PcrCommand {
    /// Simulate daily positives from a known incidence curve.
    Simulate {
        #[arg(long, default_value_t = 100)]
        days: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        tested: u64,
        #[arg(long, short, default_value = "pcr.csv")]
        output: PathBuf,
    },
    /// Fit incidence to a table of daily positives.
    Fit {
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_PCR_K)]
        k: usize,
        #[arg(long, default_value_t = 0.1)]
        clearance: f64,
        #[arg(long, default_value_t = 1.0)]
        sensitivity: f64,
        #[arg(long, short, default_value = "pcr-fit")]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum DurationsCommand {
    /// Build an ensemble of infection-to-death distributions.
    Build {
        #[arg(long, default_value = "meta")]
        source: String,
        #[arg(long, default_value_t = 100)]
        ensemble: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, short, default_value = "durations.csv")]
        output: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// `key = value` configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Deaths CSV, `sample` or `extreme`.
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// name=YYYY-MM-DD, repeatable.
    #[arg(long)]
    anchor: Vec<String>,
    /// meta, chess, isaric or file:PATH.
    #[arg(long)]
    durations: Option<String>,
    #[arg(long)]
    ensemble: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Any other configuration key, as key=value. Repeatable.
    #[arg(long = "set")]
    set: Vec<String>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Input(format!("--set expects key=value, got '{kv}'")))?;
            c.set(k, v)?;
        }
        let flags = [
            ("input", self.input.clone()),
            ("model", self.model.clone()),
            ("durations", self.durations.clone()),
            ("ensemble", self.ensemble.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("output", self.output.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                c.set(k, &v)?;
            }
        }
        for a in &self.anchor {
            c.set("anchor", a)?;
        }
        Ok(c)
    }
}

fn run(args: &RunArgs, tweak: impl FnOnce(&mut RunConfig)) -> Result<()> {
    let mut c = args.config()?;
    tweak(&mut c);
    let art = run_pipeline(&c)?;
    print!("{}", art.report);
    println!("wrote {} files to {}", art.files.len(), art.dir.display());
    Ok(())
}

fn only(c: &mut RunConfig) {
    c.sanity = false;
    c.dilate = false;
    c.ifr_adjust = false;
    c.imputation_demo = false;
}

fn pcr_simulate(days: usize, seed: u64, tested: u64, output: PathBuf) -> Result<()> {
    let model = PcrModel::new(0.1, 1.0, tested, days, DEFAULT_PCR_K.min(days))?;
    let truth = reference_incidence(days);
    let counts = simulate_pcr(&truth, &model, &mut stream_rng(seed, 0))?;
    write_pcr_table(&output, &PcrTable::new(Some(&truth), counts, tested))?;
    println!("wrote {days} days of simulated positives to {}", output.display());
    Ok(())
}

fn pcr_fit(input: PathBuf, k: usize, clearance: f64, sensitivity: f64, output: PathBuf) -> Result<()> {
    let table = read_pcr_table(&input)?;
    let model = PcrModel::new(clearance, sensitivity, table.tested, table.positives.len(), k)?;
    let fit = fit_pcr_incidence(&table.positives, &model)?;
    fs::create_dir_all(&output)?;
    let csv = output.join("pcr_fit.csv");
    let truth_known = table.truth.iter().all(|v| v.is_finite());
    let out = PcrTable::new(truth_known.then_some(&table.truth[..]), table.positives.clone(), table.tested).with_fit(&fit);
    write_pcr_table(&csv, &out)?;
    plot_pcr_table(&csv, &output.join("pcr_fit.svg"))?;
    println!("lambda {:?}, {} days fitted, wrote {}", fit.state.lambda, table.positives.len(), output.display());
    Ok(())
}

fn durations_build(source: &str, ensemble: usize, seed: u64, output: PathBuf) -> Result<()> {
    let src: DurationSource = source.parse()?;
    let ens: DurationEnsemble = match src {
        DurationSource::Meta => duration_ensemble(ensemble, seed)?,
        DurationSource::Chess => {
            let (fit, dist) = chess_infection_to_death(seed)?;
            println!(
                "hospital mixture: community share {:.3} (maximum likelihood {:.3}), onset-to-death mean {:.2}, sd {:.2}",
                fit.constrained.community,
                fit.mle.community,
                fit.constrained.lognormal.mean(),
                fit.constrained.lognormal.sd()
            );
            DurationEnsemble::single(dist)
        }
        DurationSource::Isaric => {
            let r = isaric_result(seed)?;
            println!("onset-to-death mean {:.2}, sd {:.2}", r.onset_to_death_mean, r.onset_to_death_sd);
            DurationEnsemble::single(r.infection_to_death)
        }
        DurationSource::File(_) => {
            let c = RunConfig { durations: src, ensemble, seed, ..RunConfig::default() };
            build_ensemble(&c)?
        }
    };
    let m = ens.mean_dist;
    println!("infection-to-death: mean {:.2}, sd {:.2} ({} draws)", m.mean(), m.sd(), ens.len());
    write_duration_draws(&output, &ens)?;
    println!("wrote {}", output.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => run(&a, |_| {}),
        Command::R(a) => run(&a, only),
        Command::Check { check } => match check {
            CheckCommand::Dilate(a) => run(&a, |c| {
                only(c);
                c.dilate = true;
            }),
            CheckCommand::Sanity(a) => run(&a, |c| {
                only(c);
                c.sanity = true;
            }),
            CheckCommand::Imputation(a) => run(&a, |c| {
                only(c);
                c.imputation_demo = true;
            }),
            CheckCommand::Ifr(a) => run(&a, |c| {
                only(c);
                c.ifr_adjust = true;
            }),
        },
        Command::Pcr { pcr } => match pcr {
            PcrCommand::Simulate { days, seed, tested, output } => pcr_simulate(days, seed, tested, output),
            PcrCommand::Fit { input, k, clearance, sensitivity, output } => pcr_fit(input, k, clearance, sensitivity, output),
        },
        Command::Durations { durations } => match durations {
            DurationsCommand::Build { source, ensemble, seed, output } => durations_build(&source, ensemble, seed, output),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
