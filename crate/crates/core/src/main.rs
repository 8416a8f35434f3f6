//! Command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use pdarts::cell::{AlphaTable, CellType};
use pdarts::config::RunConfig;
use pdarts::error::{Error, Result};
use pdarts::eval::{build_eval_net, train_eval};
use pdarts::genotype::{connection_levels, derive_genotype, refine_skips, Genotype};
use pdarts::gradcheck::{gradient_suite, SUITE_TOLERANCE};
use pdarts::search::run_progressive_search;
use pdarts::tensor::Scalar;

#[derive(Parser)]
#[command(name = "pdarts", version, about = "Progressive differentiable architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum CellArg {
    Normal,
    Reduce,
}

impl From<CellArg> for CellType {
    fn from(c: CellArg) -> Self {
        match c {
            CellArg::Normal => CellType::Normal,
            CellArg::Reduce => CellType::Reduce,
        }
    }
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run configuration; built-in desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sets one config key, e.g. `stages.1.dropout=0.3`. Repeatable.
    #[arg(long = "stage-override", value_name = "K=V")]
    overrides: Vec<String>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: Precision,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides)?,
            None => RunConfig::from_toml(&RunConfig::default().to_toml(), &self.overrides)?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the staged search and write the genotype, metrics and checkpoints.
    Search(RunArgs),
    /// Derive the discrete genotype from an alpha snapshot.
    Derive {
        #[arg(long)]
        alphas: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Derive with at most M skip-connects in one cell type.
    Refine {
        #[arg(long)]
        alphas: PathBuf,
        #[arg(long, default_value_t = 2)]
        max_skips: usize,
        #[arg(long, value_enum, default_value = "normal")]
        cell: CellArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Connection levels, skip counts and evaluation-network size of a genotype.
    Stats {
        #[arg(long)]
        genotype: PathBuf,
        /// Supplies the evaluation network shape for the parameter count.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the evaluation network of a genotype from scratch.
    Eval {
        #[arg(long)]
        genotype: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Finite-difference check of every differentiable component.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Search(_) => "search",
            Command::Derive { .. } => "derive",
            Command::Refine { .. } => "refine",
            Command::Stats { .. } => "stats",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config {
            field: "out_dir".into(),
            reason: "no output directory; pass --out or set out_dir".into(),
        })?;
    ensure_dir(&dir)?;
    Ok(dir)
}

fn search<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let (train, _) = cfg.data.load()?;
    let outcome = run_progressive_search::<T>(&cfg.search, &train, cfg.seed, Some(&dir))?;
    for w in &outcome.warnings {
        eprintln!("{}", json!({ "warning": w }));
    }
    print!("{}", outcome.genotype.to_json());
    Ok(())
}

fn eval<T: Scalar>(genotype: &Path, cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let g = Genotype::load(genotype)?;
    let (train, test) = cfg.data.load()?;
    let net = build_eval_net(&g, &cfg.eval, train.classes, train.size, train.channels)?;
    write(&dir.join("config.toml"), &cfg.to_toml())?;
    let outcome = train_eval::<T>(&net, &cfg.eval, &train, &test, cfg.seed, Some(&dir))?;
    println!("{}", json!({ "final_test_accuracy": outcome.final_accuracy }));
    Ok(())
}

fn emit(text: &str, out: Option<&Path>, file: &str) -> Result<()> {
    if let Some(dir) = out {
        ensure_dir(dir)?;
        write(&dir.join(file), text)?;
    }
    print!("{text}");
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Search(args) => {
            let cfg = args.load()?;
            match args.precision {
                Precision::F32 => search::<f32>(&cfg),
                Precision::F64 => search::<f64>(&cfg),
            }
        }
        Command::Derive { alphas, out } => {
            let g = derive_genotype(&AlphaTable::load(&alphas)?)?;
            emit(&g.to_json(), out.as_deref(), "genotype.json")
        }
        Command::Refine {
            alphas,
            max_skips,
            cell,
            out,
        } => {
            let r = refine_skips(&AlphaTable::load(&alphas)?, max_skips, cell.into())?;
            for (edge, op) in &r.suppressed {
                eprintln!("{}", json!({ "suppressed": { "edge": edge, "op": op.name() } }));
            }
            emit(&r.genotype.to_json(), out.as_deref(), "genotype.json")
        }
        Command::Stats { genotype, config, out } => {
            let g = Genotype::load(&genotype)?;
            let cfg = match config {
                Some(p) => RunConfig::load(&p, &[])?,
                None => RunConfig::default(),
            };
            let (classes, size, channels) = cfg.data.image_shape();
            let params = build_eval_net(&g, &cfg.eval, classes, size, channels)?
                .registry()
                .param_count();
            let levels = connection_levels(&g);
            let summary = json!({
                "connection_levels": {
                    "normal": levels.normal,
                    "reduce": levels.reduce,
                },
                "skip_connects": {
                    "normal": g.skip_count(CellType::Normal),
                    "reduce": g.skip_count(CellType::Reduce),
                },
                "eval_parameters": params,
            });
            if let Some(dir) = out.as_deref() {
                ensure_dir(dir)?;
                write(&dir.join("levels.csv"), &levels.to_csv())?;
            }
            let text = serde_json::to_string_pretty(&summary).expect("serializable") + "\n";
            emit(&text, out.as_deref(), "stats.json")
        }
        Command::Eval { genotype, run } => {
            let cfg = run.load()?;
            match run.precision {
                Precision::F32 => eval::<f32>(&genotype, &cfg),
                Precision::F64 => eval::<f64>(&genotype, &cfg),
            }
        }
        Command::Gradcheck { seeds } => {
            if seeds == 0 {
                return Err(Error::InvalidArgument("--seeds must be positive".into()));
            }
            let reports = gradient_suite(seeds)?;
            let mut failed = 0;
            for r in &reports {
                println!(
                    "{} {} max_rel_error={:.3e} seeds={}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_error,
                    r.seeds
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Error::Internal(format!(
                    "{failed} of {} checks exceed tolerance {SUITE_TOLERANCE:e}",
                    reports.len()
                )));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": { "kind": e.kind(), "message": e.to_string() } }));
            if matches!(e, Error::Config { .. } | Error::Parse { .. }) {
                let mut cmd = Cli::command();
                cmd.build();
                if let Some(sub) = cmd.find_subcommand_mut(name) {
                    eprintln!("{}", sub.render_usage());
                }
            }
            ExitCode::FAILURE
        }
    }
}
