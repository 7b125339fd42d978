use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use qroute::harness::{emit_csv, emit_dot, run_algorithm, run_experiment, Algorithm, ExperimentConfig};
use qroute::netgraph::{self, Demand, GenParams, Generator, Network};
use qroute::rate::{self, FlowGraph, RateError};
use qroute::router::{PlanDocument, DEFAULT_PATHS_PER_WIDTH};

type Result<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "qroute", version, about = "Entanglement routing with n-fusion switches")]
struct Cli {
    /// Random seed (generation, Monte Carlo, sweep base seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the result here instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Output format.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Dot,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random network with demands.
    Generate {
        /// Generator parameters as TOML; flags below override single fields.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        generator: Option<Generator>,
        #[arg(long)]
        switches: Option<usize>,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        demands: Option<usize>,
        #[arg(long)]
        degree: Option<f64>,
        #[arg(long)]
        capacity: Option<u32>,
        #[arg(long)]
        swap_prob: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Route the demands of a network and report the plan.
    Route {
        #[arg(long)]
        network: PathBuf,
        /// Demand list; defaults to the demands stored with the network.
        #[arg(long)]
        demands: Option<PathBuf>,
        #[arg(long, default_value = "nfusion")]
        algo: Algorithm,
        #[arg(long, default_value_t = DEFAULT_PATHS_PER_WIDTH)]
        paths_per_width: usize,
    },
    /// Check analytic plan rates against exhaustive enumeration and Monte Carlo.
    Validate {
        #[arg(long)]
        network: PathBuf,
        #[arg(long)]
        demands: Option<PathBuf>,
        /// Plan written by `route`; when absent the network is routed first.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long, default_value = "nfusion")]
        algo: Algorithm,
        #[arg(long, default_value_t = DEFAULT_PATHS_PER_WIDTH)]
        paths_per_width: usize,
        /// Largest element count enumerated exhaustively.
        #[arg(long, default_value_t = rate::DEFAULT_ENUMERATION_BOUND)]
        bound: usize,
        /// Monte Carlo trials per demand; 0 skips sampling.
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        /// Largest accepted |analytic - exhaustive|.
        #[arg(long, default_value_t = 1e-12)]
        tolerance: f64,
    },
    /// Run a parameter sweep from an experiment config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| format!("{}: {e}", p.display()).into()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(network: &Path, demands: Option<&Path>) -> Result<(Network, Vec<Demand>)> {
    let (net, stored) = netgraph::load_document(&read(network)?)?;
    let demands = match demands {
        Some(p) => netgraph::load_demands(&read(p)?, &net)?,
        None => stored,
    };
    Ok((net, demands))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::Generate {
            params,
            generator,
            switches,
            users,
            demands,
            degree,
            capacity,
            swap_prob,
            alpha,
        } => {
            let mut p: GenParams = match params {
                Some(f) => toml::from_str(&read(&f)?)?,
                None => GenParams::default(),
            };
            macro_rules! set {
                ($($flag:ident => $field:ident),*) => {
                    $(if let Some(v) = $flag { p.$field = v; })*
                };
            }
            set!(generator => generator, switches => n_switches, users => n_users,
                 demands => n_demands, degree => avg_degree, capacity => capacity,
                 swap_prob => swap_prob, alpha => alpha);
            if let Some(s) = cli.seed {
                p.seed = s;
            }
            let (net, demands) = netgraph::generate(&p)?;
            let text = match cli.format.unwrap_or(Format::Text) {
                Format::Text => netgraph::save_network_with_demands(&net, &demands),
                Format::Dot => netgraph::topology_dot(&net),
                Format::Csv => return Err("generate writes text or dot".into()),
            };
            emit(out, &text)?;
        }
        Command::Route {
            network,
            demands,
            algo,
            paths_per_width,
        } => {
            let (net, demands) = load(&network, demands.as_deref())?;
            let (plan, _) = run_algorithm(&net, &demands, algo, paths_per_width, true)?;
            let rates = plan.rates(&net)?;
            let total = rates.iter().fold(0.0, |a, r| a + r);
            let text = match cli.format.unwrap_or(Format::Text) {
                Format::Text => plan.to_text(&net)?,
                Format::Dot => emit_dot(&plan, &net),
                Format::Csv => {
                    let mut s = String::from("demand,source,dest,rate\n");
                    for (d, r) in demands.iter().zip(&rates) {
                        s += &format!("{},{},{},{r:.12}\n", d.id, d.source, d.dest);
                    }
                    s
                }
            };
            emit(out, &text)?;
            if out.is_some() {
                println!("total rate {total:.12} ({algo}, {} demands)", demands.len());
                for (d, r) in demands.iter().zip(&rates) {
                    println!("  demand {} {} -> {}: {r:.12}", d.id, d.source, d.dest);
                }
            }
        }
        Command::Validate {
            network,
            demands,
            plan,
            algo,
            paths_per_width,
            bound,
            trials,
            tolerance,
        } => {
            let (net, demands) = load(&network, demands.as_deref())?;
            let flows = match plan {
                Some(p) => PlanDocument::parse(&read(&p)?)?.flow_graphs(&net)?,
                None => run_algorithm(&net, &demands, algo, paths_per_width, true)?
                    .0
                    .fused_flow_graphs()
                    .ok_or("classic plans have no n-fusion oracle; use another --algo")?,
            };
            let report = validate(&net, &flows, bound, trials, cli.seed.unwrap_or(1))?;
            let text = match cli.format.unwrap_or(Format::Text) {
                Format::Csv => report.csv(),
                Format::Text => report.text(),
                Format::Dot => return Err("validate writes text or csv".into()),
            };
            emit(out, &text)?;
            if report.max_exhaustive_gap > tolerance || report.max_z > 5.0 {
                eprintln!(
                    "validation failed: max gap {:.3e} (tolerance {tolerance:.1e}), max z {:.2}",
                    report.max_exhaustive_gap, report.max_z
                );
                return Ok(ExitCode::from(2));
            }
        }
        Command::Sweep { config } => {
            let mut cfg = ExperimentConfig::parse(&read(&config)?)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if matches!(cli.format, Some(Format::Dot | Format::Text)) {
                return Err("sweep writes csv".into());
            }
            let rows = run_experiment(&cfg)?;
            let target = out.map(Path::to_path_buf).or(cfg.output.clone());
            emit(target.as_deref(), &emit_csv(&rows))?;
            if let Some(t) = target {
                eprintln!("wrote {} rows to {}", rows.len(), t.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

struct Check {
    demand: usize,
    analytic: f64,
    exhaustive: Option<f64>,
    mc: Option<rate::McEstimate>,
}

struct Report {
    checks: Vec<Check>,
    max_exhaustive_gap: f64,
    max_z: f64,
}

fn validate(net: &Network, flows: &[FlowGraph], bound: usize, trials: u64, seed: u64) -> Result<Report> {
    let mut checks = Vec::new();
    let (mut gap, mut max_z) = (0.0_f64, 0.0_f64);
    for (i, fg) in flows.iter().enumerate() {
        let analytic = rate::flow_graph_rate(net, fg)?;
        let exhaustive = match rate::exhaustive_rate(net, fg, bound) {
            Ok(x) => Some(x),
            Err(RateError::TooManyElements { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        if let Some(x) = exhaustive {
            gap = gap.max((analytic - x).abs());
        }
        let mc = if trials > 0 {
            let mc = rate::monte_carlo_rate(net, fg, trials, seed.wrapping_add(i as u64))?;
            let diff = (mc.estimate - analytic).abs();
            if diff > 0.0 {
                max_z = max_z.max(if mc.std_error > 0.0 { diff / mc.std_error } else { f64::INFINITY });
            }
            Some(mc)
        } else {
            None
        };
        checks.push(Check {
            demand: fg.demand(),
            analytic,
            exhaustive,
            mc,
        });
    }
    Ok(Report {
        checks,
        max_exhaustive_gap: gap,
        max_z,
    })
}

impl Report {
    fn text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s += &format!("demand {}: analytic {:.12}", c.demand, c.analytic);
            match c.exhaustive {
                Some(x) => s += &format!(", exhaustive {x:.12} (gap {:.3e})", (c.analytic - x).abs()),
                None => s += ", exhaustive skipped (too many elements)",
            }
            if let Some(m) = c.mc {
                s += &format!(", monte carlo {:.6} ± {:.6}", m.estimate, m.std_error);
            }
            s.push('\n');
        }
        let enumerated = self.checks.iter().filter(|c| c.exhaustive.is_some()).count();
        s += &format!(
            "max |analytic - exhaustive| = {:.3e} over {enumerated} of {} demands\n",
            self.max_exhaustive_gap,
            self.checks.len()
        );
        s += &format!("max monte carlo deviation = {:.2} standard errors\n", self.max_z);
        s
    }

    fn csv(&self) -> String {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.12}"));
        let mut s = String::from("demand,analytic,exhaustive,mc_rate,mc_stderr\n");
        for c in &self.checks {
            s += &format!(
                "{},{:.12},{},{},{}\n",
                c.demand,
                c.analytic,
                opt(c.exhaustive),
                opt(c.mc.map(|m| m.estimate)),
                opt(c.mc.map(|m| m.std_error))
            );
        }
        s
    }
}
