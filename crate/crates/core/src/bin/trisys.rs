use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use trisys::error::Error;
use trisys::identification_analyzer::{region_sweep, region_sweep_csv, SupportBox};
use trisys::mc_harness::{deconv_tables, emit, run, DeconvRunConfig, McConfig, TableFormat};

#[derive(Parser)]
#[command(name = "trisys", version, about = "Simulation and estimation for triangular binary systems")]
struct Cli {
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo table for one design.
    Mc {
        #[arg(long)]
        config: PathBuf,
        /// Sample sizes up to 400, at most 100 replications, pair subsampling on.
        #[arg(long)]
        quick: bool,
        /// Directory for the table and its metadata; stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Identification region over an (alpha, gamma) lattice, as CSV.
    RegionSweep {
        /// `lo:hi:points`
        #[arg(long, allow_hyphen_values = true)]
        alpha_range: String,
        /// `lo:hi:points`
        #[arg(long, allow_hyphen_values = true)]
        gamma_range: String,
        /// Support of (X1, X) as `a,b,c,d`; `inf` is allowed for X.
        #[arg(long, allow_hyphen_values = true, default_value = "0,1,-inf,inf")]
        r#box: String,
    },
    /// End-to-end measurement-based estimation on one simulated sample.
    Deconv {
        #[arg(long)]
        config: PathBuf,
        /// Directory for density and characteristic-function tables.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Input(_) => Failure::Config(e.to_string()),
            _ => Failure::Run(e.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))
}

fn write(dir: &Path, name: &str, text: &str) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("cannot create {}: {e}", dir.display())))?;
    let p = dir.join(name);
    std::fs::write(&p, text).map_err(|e| Failure::Config(format!("cannot write {}: {e}", p.display())))
}

fn parse_range(s: &str) -> Result<Vec<f64>, Failure> {
    let bad = || Failure::Config(format!("range '{s}' must be lo:hi:points"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let k: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if k == 0 || !lo.is_finite() || !hi.is_finite() || hi < lo || (k == 1 && hi != lo) {
        return Err(bad());
    }
    Ok((0..k).map(|i| if k == 1 { lo } else { lo + (hi - lo) * i as f64 / (k - 1) as f64 }).collect())
}

fn parse_box(s: &str) -> Result<SupportBox, Failure> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::Config(format!("box '{s}' must be four numbers a,b,c,d")))?;
    if v.len() != 4 {
        return Err(Failure::Config(format!("box '{s}' must be four numbers a,b,c,d")));
    }
    Ok(SupportBox::new([v[0], v[1]], [v[2], v[3]])?)
}

fn mc(config: &Path, quick: bool, out: Option<&Path>, format: Format) -> Result<bool, Failure> {
    let mut cfg = McConfig::from_json(&read(config)?)?;
    cfg.quick |= quick;
    let table = run(&cfg)?;
    let (fmt, ext) = match format {
        Format::Csv => (TableFormat::Csv, "csv"),
        Format::Markdown => (TableFormat::Markdown, "md"),
    };
    let text = emit(&table.rows, fmt)?;
    match out.map(Path::to_path_buf).or_else(|| cfg.out_dir.as_ref().map(PathBuf::from)) {
        Some(dir) => {
            write(&dir, &format!("{}.{ext}", table.design), &text)?;
            write(&dir, &format!("{}.meta.json", table.design), &table.metadata_json())?;
        }
        None => print!("{text}"),
    }
    for r in table.rows.iter().filter(|r| r.failures > 0) {
        eprintln!(
            "{} {} n={}: {} of {} replications failed ({})",
            r.design,
            r.estimator.label(),
            r.n,
            r.failures,
            table.replications,
            r.first_error.as_deref().unwrap_or("")
        );
    }
    Ok(table.total_failures() == 0)
}

fn deconv(config: &Path, out: Option<&Path>) -> Result<bool, Failure> {
    let cfg = DeconvRunConfig::from_json(&read(config)?)?;
    let (summary, rep) = cfg.run()?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    println!("{json}");
    if let Some(dir) = out {
        write(dir, "summary.json", &json)?;
        for (name, text) in deconv_tables(&rep) {
            write(dir, name, &text)?;
        }
    }
    if !summary.round_trips_pass {
        eprintln!("convolution round-trip check failed");
    }
    Ok(summary.round_trips_pass)
}

fn dispatch(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::Mc { config, quick, out, format } => mc(&config, quick, out.as_deref(), format),
        Command::RegionSweep { alpha_range, gamma_range, r#box } => {
            let rows = region_sweep(&parse_range(&alpha_range)?, &parse_range(&gamma_range)?, &parse_box(&r#box)?);
            print!("{}", region_sweep_csv(&rows));
            Ok(true)
        }
        Command::Deconv { config, out } => deconv(&config, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        pool = pool.num_threads(t);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
