use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ordif::em::fit;
use ordif::io::{
    read_json, read_responses, render_report, write_aggregate_csv, write_compare_csv, write_json, write_metrics_csv,
    write_path_csv, write_responses, ResultDocument, RunConfig, TruthSidecar,
};
use ordif::model::{QuadratureGrid, ResponseMatrix};
use ordif::selection::{bic, compare_k, confirmatory_refit_from, default_lambda_grid, degrees_of_freedom, run_path};
use ordif::simulation::{derive_seed, generate, replicate, ReplicationSettings, SimulationConfig};

#[derive(Parser)]
#[command(name = "ordif", version, about = "Latent-class DIF detection for ordinal items")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; flags override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    span: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// One penalized fit followed by the confirmatory refit
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of non-reference classes
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long)]
        lambda: f64,
    },
    /// Tuning-parameter path with BIC selection
    Path {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Comma-separated values or "default"
        #[arg(long)]
        lambda_grid: Option<String>,
    },
    /// Selected models for several numbers of non-reference classes, compared by BIC
    CompareK {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated candidates, e.g. 0,1,2
        #[arg(long)]
        k: Option<String>,
        #[arg(long)]
        lambda_grid: Option<String>,
    },
    /// Generate one data set with its ground truth
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        design: Design,
    },
    /// Replication study for one condition
    Replicate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        design: Design,
        #[arg(long)]
        reps: Option<usize>,
        #[arg(long)]
        lambda_grid: Option<String>,
    },
    /// Item tables of a saved result
    Report {
        /// Result JSON written by fit or path
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct Design {
    /// Respondents
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Items
    #[arg(long, default_value_t = 15)]
    items: usize,
    /// Non-reference classes (1 or 2)
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Focal proportion in the two-class design
    #[arg(long, default_value_t = 0.3)]
    pi: f64,
}

impl Design {
    fn config(&self, seed: u64) -> Result<SimulationConfig> {
        let mut c = match self.k {
            1 => SimulationConfig::two_class(self.n, self.items, self.pi),
            2 => SimulationConfig::three_class(self.n, self.items),
            k => bail!("simulation designs exist for k = 1 or 2, got {k}"),
        };
        c.seed = seed;
        Ok(c)
    }
}

struct Resolved {
    cfg: RunConfig,
    grid: QuadratureGrid,
    out: PathBuf,
}

fn resolve(common: &Common, data: Option<&PathBuf>) -> Result<Resolved> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(d) = data {
        cfg.data_path = d.display().to_string();
    }
    if let Some(n) = common.nodes {
        cfg.quadrature.nodes = n;
    }
    if let Some(s) = common.span {
        cfg.quadrature.span = s;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.display().to_string();
    }
    cfg.em.seed = cfg.seed;
    if cfg.quadrature.nodes < 11 {
        bail!("quadrature needs at least 11 nodes");
    }
    cfg.em.validate()?;
    let grid = cfg.quadrature.grid()?;
    let out = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(Resolved { cfg, grid, out })
}

fn load_data(cfg: &RunConfig) -> Result<ResponseMatrix> {
    if cfg.data_path.is_empty() {
        bail!("no data given (--data or data_path in --config)");
    }
    Ok(read_responses(Path::new(&cfg.data_path), cfg.categories.as_deref())?)
}

fn lambdas(flag: Option<&str>, cfg: &RunConfig) -> Result<Vec<f64>> {
    match flag {
        None => Ok(cfg.lambda_grid.values()?),
        Some("default") => Ok(default_lambda_grid()),
        Some(s) => s
            .split(',')
            .map(|x| x.trim().parse::<f64>().with_context(|| format!("bad lambda '{x}'")))
            .collect(),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit {
            common,
            data,
            k,
            lambda,
        } => {
            let r = resolve(&common, data.as_ref())?;
            let d = load_data(&r.cfg)?;
            let f = fit(&d, k, lambda, &r.grid, &r.cfg.em)?;
            let refit = confirmatory_refit_from(&d, &f.params, &f.active_set, &r.grid, &r.cfg.em)?;
            let df = degrees_of_freedom(&refit.active_set, &d, k);
            let b = bic(refit.objective.loglik, d.n_respondents(), df);
            write_json(&r.out.join("result.json"), &ResultDocument::new(&d, &f, &refit, df, b))?;
            println!("loglik {:.4} df {df} bic {b:.4} active {}", refit.objective.loglik, refit.active_set.len());
        }
        Command::Path {
            common,
            data,
            k,
            lambda_grid,
        } => {
            let r = resolve(&common, data.as_ref())?;
            let d = load_data(&r.cfg)?;
            let grid_l = lambdas(lambda_grid.as_deref(), &r.cfg)?;
            let path = run_path(&d, k, &grid_l, &r.grid, &r.cfg.em)?;
            write_path_csv(fs::File::create(r.out.join("path.csv"))?, &path)?;
            write_json(&r.out.join("result.json"), &ResultDocument::from_path(&d, &path))?;
            let s = path.selected();
            println!("selected lambda {} df {} bic {:.4}", s.lambda, s.df, s.bic);
        }
        Command::CompareK {
            common,
            data,
            k,
            lambda_grid,
        } => {
            let r = resolve(&common, data.as_ref())?;
            let d = load_data(&r.cfg)?;
            let ks: Vec<usize> = match k {
                Some(s) => s
                    .split(',')
                    .map(|x| x.trim().parse::<usize>().with_context(|| format!("bad K '{x}'")))
                    .collect::<Result<_>>()?,
                None => r.cfg.k_candidates.clone(),
            };
            let grid_l = lambdas(lambda_grid.as_deref(), &r.cfg)?;
            let (comps, best) = compare_k(&d, &ks, &grid_l, &r.grid, &r.cfg.em)?;
            write_compare_csv(fs::File::create(r.out.join("compare_k.csv"))?, &comps, best)?;
            for c in &comps {
                let name = format!("result_k{}.json", c.k_extra);
                write_json(&r.out.join(name), &ResultDocument::from_path(&d, &c.path))?;
            }
            println!("selected {} classes (bic {:.4})", comps[best].k_extra + 1, comps[best].bic());
        }
        Command::Simulate { common, design } => {
            let r = resolve(&common, None)?;
            let sc = design.config(r.cfg.seed)?;
            let ds = generate(&sc, derive_seed(sc.seed, 0))?;
            write_responses(&r.out.join("responses.csv"), &ds.responses)?;
            write_json(&r.out.join("truth.json"), &TruthSidecar::from(&ds))?;
            println!("wrote {} x {} responses", ds.responses.n_respondents(), ds.responses.n_items());
        }
        Command::Replicate {
            common,
            design,
            reps,
            lambda_grid,
        } => {
            let r = resolve(&common, None)?;
            let mut sc = design.config(r.cfg.seed)?;
            if let Some(n) = reps {
                sc.n_reps = n;
            }
            let settings = ReplicationSettings {
                lambdas: lambdas(lambda_grid.as_deref(), &r.cfg)?,
                grid: r.grid.clone(),
                em: r.cfg.em.clone(),
            };
            let summary = replicate(&sc, &settings)?;
            write_metrics_csv(fs::File::create(r.out.join("metrics.csv"))?, std::slice::from_ref(&summary))?;
            write_aggregate_csv(fs::File::create(r.out.join("aggregate.csv"))?, std::slice::from_ref(&summary))?;
            for rec in summary.records.iter().filter(|r| r.error.is_some()) {
                eprintln!("replication {} failed: {}", rec.rep, rec.error.as_deref().unwrap_or(""));
            }
            println!("{}: {} replications, {} failed", summary.condition, summary.n_reps, summary.n_failed);
        }
        Command::Report { result, out } => {
            let doc: ResultDocument = read_json(&result)?;
            let text = render_report(&doc.params, &doc.item_names);
            match out {
                Some(p) => fs::write(&p, text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("ORDIF_THREADS") {
        let n: usize = v.parse().with_context(|| format!("ORDIF_THREADS must be a positive integer, got '{v}'"))?;
        if n == 0 {
            bail!("ORDIF_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
