use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

use cbloss::covering::{simulate_covering, CoveringConfig};
use cbloss::effnum::{effective_number, prototypes_from_beta, EffNumParams};
use cbloss::harness::{
    self, read_results_csv, run_sweep, write_report, write_sweep_outputs, BetaSetting, DataFile,
    SweepFile, TrainFile,
};
use cbloss::longtail::read_counts_csv;
use cbloss::losses::LossFamily;
use cbloss::trainer::{default_tail_k, train, LossConfig, RunStatus, TrainConfig};
use cbloss::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cbloss",
    version,
    about = "Class-balanced losses on long-tailed data"
)]
struct Cli {
    /// RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print effective numbers and inverse weights as CSV.
    Effnum(EffnumArgs),
    /// Monte Carlo estimate of the covered volume.
    SimulateCovering(CoveringArgs),
    /// Generate or subsample a long-tailed dataset.
    GenData(GenDataArgs),
    /// Train a single model.
    Train(TrainArgs),
    /// Run a hyperparameter grid.
    Sweep(SweepArgs),
    /// Summarize a results.csv.
    Report(ReportArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("hyper").required(true).args(["beta", "n_proto"])))]
struct EffnumArgs {
    /// Comma-separated betas.
    #[arg(long, value_delimiter = ',')]
    beta: Vec<f64>,
    /// Comma-separated prototype counts N; beta = (N - 1) / N.
    #[arg(long, value_delimiter = ',')]
    n_proto: Vec<f64>,
    /// Comma-separated sample counts.
    #[arg(
        long,
        value_delimiter = ',',
        required_unless_present = "n_max",
        conflicts_with = "n_max"
    )]
    n: Vec<u64>,
    /// Emit every n in 1..=N_MAX.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n_max: Option<u64>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("hyper").required(true).args(["beta", "n_proto"])))]
struct CoveringArgs {
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    n_proto: Option<f64>,
    /// Samples drawn per trial.
    #[arg(long)]
    n: u64,
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    trials: u64,
    /// Exit 0 only if the estimate lies within 4 standard errors of E_n.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    base_count: Option<u64>,
    #[arg(long)]
    imbalance: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    test_per_class: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    family: Option<LossFamily>,
    /// A number in [0, 1) or "none".
    #[arg(long)]
    beta: Option<BetaSetting>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    imbalance: Option<f64>,
    /// Tail size for metrics.csv; defaults to ceil(C / 3).
    #[arg(long)]
    tail_k: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<LossFamily>>,
    #[arg(long, value_delimiter = ',')]
    betas: Option<Vec<BetaSetting>>,
    #[arg(long, value_delimiter = ',')]
    gammas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    imbalances: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Path to results.csv.
    results: PathBuf,
    /// Class counts CSV (class_index,count) for per-class curves.
    #[arg(long)]
    profile: Option<PathBuf>,
}

fn read_config(path: Option<&Path>) -> Result<Option<String>> {
    path.map(std::fs::read_to_string)
        .transpose()
        .map_err(Error::from)
}

fn out_dir(cli_out: Option<&PathBuf>) -> Result<PathBuf> {
    let dir = cli_out.cloned().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn effnum_cmd(args: &EffnumArgs, out: Option<&PathBuf>) -> Result<ExitCode> {
    let betas: Vec<f64> = if args.beta.is_empty() {
        args.n_proto
            .iter()
            .map(|&n| EffNumParams::from_prototypes(n).map(|p| p.beta()))
            .collect::<Result<_>>()?
    } else {
        args.beta
            .iter()
            .map(|&b| EffNumParams::new(b).map(|p| p.beta()))
            .collect::<Result<_>>()?
    };
    let ns: Vec<u64> = match args.n_max {
        Some(m) => (1..=m).collect(),
        None => args.n.clone(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["beta", "n", "effective_number", "weight"])?;
    for &b in &betas {
        for &n in &ns {
            let e = effective_number(b, n)?;
            w.write_record([
                b.to_string(),
                n.to_string(),
                e.to_string(),
                (1.0 / e).to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("effnum.csv"), bytes)?;
        }
        None => std::io::stdout().write_all(&bytes)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn covering_cmd(args: &CoveringArgs, seed: u64) -> Result<ExitCode> {
    let n_proto = match (args.n_proto, args.beta) {
        (Some(n), _) => n,
        (None, Some(b)) => prototypes_from_beta(b)?,
        (None, None) => unreachable!("clap requires one of --beta/--n-proto"),
    };
    let config = CoveringConfig::new(n_proto, args.n, args.trials, seed);
    let result = simulate_covering(&config)?;
    let beta = EffNumParams::from_prototypes(n_proto)?.beta();
    let expected = effective_number(beta, args.n)?;
    let z = result.z_score(expected);
    println!("n_prototypes,beta,n,trials,mean_volume,std_error,expected,z");
    println!(
        "{n_proto},{beta},{},{},{},{},{expected},{z}",
        args.n, args.trials, result.mean_volume, result.std_error
    );
    if args.check {
        let pass = z.abs() <= 4.0;
        eprintln!("check: {}", if pass { "pass" } else { "fail" });
        return Ok(if pass {
            ExitCode::SUCCESS
        } else {
            ExitCode::FAILURE
        });
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_data_cmd(args: &GenDataArgs, cli: &Cli) -> Result<ExitCode> {
    let mut file = match read_config(cli.config.as_deref())? {
        Some(text) => DataFile::parse(&text)?,
        None => DataFile::default(),
    };
    let d = &mut file.data;
    d.n_classes = args.n_classes.or(d.n_classes);
    d.base_count = args.base_count.or(d.base_count);
    d.imbalance = args.imbalance.or(d.imbalance);
    d.dim = args.dim.or(d.dim);
    d.test_per_class = args.test_per_class.or(d.test_per_class);
    let seed = cli.seed.or(file.seed).unwrap_or(0);
    let source = file.data.source()?;
    let prepared = source.prepare(file.data.imbalance.unwrap_or(100.0), seed)?;
    let dir = out_dir(cli.out.as_ref())?;
    prepared.train.write_csv(&dir.join("train.csv"))?;
    prepared.test.write_csv(&dir.join("test.csv"))?;
    prepared.profile.write_csv(&dir.join("profile.csv"))?;
    eprintln!(
        "{}: {} train / {} test samples in {}",
        prepared.dataset_id,
        prepared.train.len(),
        prepared.test.len(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(args: &TrainArgs, cli: &Cli) -> Result<ExitCode> {
    let mut file = match read_config(cli.config.as_deref())? {
        Some(text) => TrainFile::parse(&text)?,
        None => TrainFile::default(),
    };
    file.train.epochs = args.epochs.or(file.train.epochs);
    let mut config = file.train.apply(TrainConfig::default())?;
    let family = args
        .family
        .or(file.loss.family)
        .unwrap_or(LossFamily::Softmax);
    let gamma = match family {
        LossFamily::Focal => args.gamma.or(file.loss.gamma).unwrap_or(2.0),
        _ => 0.0,
    };
    let beta = args.beta.or(file.loss.beta).unwrap_or(BetaSetting::None);
    config.loss = LossConfig {
        family,
        gamma,
        beta: beta.as_option(),
    };
    config.seed = cli.seed.or(file.loss.seed).unwrap_or(0);
    config.validate()?;

    let imbalance = args.imbalance.or(file.data.imbalance).unwrap_or(100.0);
    let data = file.data.source()?.prepare(imbalance, config.seed)?;
    let record = train(&data.train, &data.test, &config)?;
    let dir = out_dir(cli.out.as_ref())?;
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(&record)?)?;
    let k = args
        .tail_k
        .unwrap_or_else(|| default_tail_k(data.train.n_classes()));
    harness::write_metrics_csv(&record, k, &dir.join("metrics.csv"))?;
    match (&record.status, &record.final_eval) {
        (RunStatus::Completed, Some(eval)) => {
            eprintln!(
                "{}: overall error {:.4}, tail-{k} error {:.4}",
                data.dataset_id,
                eval.overall_error,
                eval.tail_error(&record.train_counts, k)
            );
            Ok(ExitCode::SUCCESS)
        }
        (status, _) => {
            eprintln!("run did not complete: {status:?}");
            Ok(ExitCode::FAILURE)
        }
    }
}

fn sweep_cmd(args: &SweepArgs, cli: &Cli) -> Result<ExitCode> {
    let mut file = match read_config(cli.config.as_deref())? {
        Some(text) => SweepFile::parse(&text)?,
        None => SweepFile::default(),
    };
    let g = &mut file.grid;
    g.families = args.families.clone().or(g.families.take());
    g.betas = args.betas.clone().or(g.betas.take());
    g.gammas = args.gammas.clone().or(g.gammas.take());
    g.imbalances = args.imbalances.clone().or(g.imbalances.take());
    g.seeds = args
        .seeds
        .clone()
        .or(g.seeds.take())
        .or(cli.seed.map(|s| vec![s]));
    file.train.epochs = args.epochs.or(file.train.epochs);

    let grid = file.grid();
    let mut opts = file.options();
    opts.jobs = args.jobs;
    let base = file.train_config()?;
    let source = file.data.source()?;
    let rows = run_sweep(&source, &grid, &base, &opts)?;
    let dir = out_dir(cli.out.as_ref())?;
    let failed = write_sweep_outputs(&rows, &dir, &mut std::io::stderr())?;
    eprintln!(
        "{} runs, {failed} failed; results in {}",
        rows.len(),
        dir.display()
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn report_cmd(args: &ReportArgs, cli: &Cli) -> Result<ExitCode> {
    let rows = read_results_csv(&args.results)?;
    let profile = args.profile.as_deref().map(read_counts_csv).transpose()?;
    let dir = out_dir(cli.out.as_ref())?;
    write_report(&rows, profile.as_ref(), &dir)?;
    eprintln!("{} rows summarized into {}", rows.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let no_config = |name: &str| -> Result<()> {
        match cli.config {
            Some(_) => Err(Error::Config(format!("{name} does not take --config"))),
            None => Ok(()),
        }
    };
    match &cli.command {
        Command::Effnum(a) => {
            no_config("effnum")?;
            effnum_cmd(a, cli.out.as_ref())
        }
        Command::SimulateCovering(a) => {
            no_config("simulate-covering")?;
            covering_cmd(a, cli.seed.unwrap_or(0))
        }
        Command::GenData(a) => gen_data_cmd(a, cli),
        Command::Train(a) => train_cmd(a, cli),
        Command::Sweep(a) => sweep_cmd(a, cli),
        Command::Report(a) => {
            no_config("report")?;
            report_cmd(a, cli)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
