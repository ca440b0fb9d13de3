use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};
use spde_lab::config::{split_override, RunConfig};
use spde_lab::report;
use spde_lab::run::{self, Subcommand, EXIT_CONFIG, EXIT_RUNTIME, OUTPUT_ENV};

/// Galerkin stochastic Navier–Stokes experiments.
///
/// Any config field can be overridden with `--section.key=value`, for
/// example `--noise.alpha=1.4` or `--experiment.samples=500`.
#[derive(Parser, Debug)]
#[command(name = "spde-lab", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML config file; missing fields take their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output root (overrides $SPDE_LAB_OUTPUT and output.dir)
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads, 0 for all cores
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[arg(long, global = true)]
    cutoff: Option<u32>,
    #[arg(long, global = true)]
    dt: Option<f64>,
    /// initial state: zero, shear, random or a field file
    #[arg(long, global = true)]
    initial: Option<String>,
}

#[derive(Args, Debug, Default)]
struct ObservableArgs {
    /// observable name, e.g. norm-sq, energy-bounded, cos-q0
    #[arg(long)]
    phi: Option<String>,
    #[arg(long)]
    t: Option<f64>,
    /// damping constant K of the Feynman–Kac weight
    #[arg(long)]
    k: Option<f64>,
}

#[derive(ClapSubcommand, Debug)]
enum Command {
    /// Integrate one trajectory and store it
    Simulate {
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Monte Carlo estimate of P_t phi(x) and the damped semigroup
    Estimate {
        #[command(flatten)]
        obs: ObservableArgs,
        /// also report K in {1, 10, 100}
        #[arg(long)]
        k_sweep: bool,
    },
    /// BEL gradient estimate, optionally against finite differences
    Gradient {
        #[command(flatten)]
        obs: ObservableArgs,
        /// direction: random, basis:<n> or a field file
        #[arg(long)]
        direction: Option<String>,
        #[arg(long)]
        fd_epsilon: Option<f64>,
    },
    /// Variation of constants identity check
    VocCheck {
        #[command(flatten)]
        obs: ObservableArgs,
        #[arg(long)]
        inner: Option<usize>,
    },
    /// Run one estimate of the verification suite
    Verify {
        /// one of pathwise-energy, variation-bound, gradient-scaling,
        /// time-modulus, lipschitz, z-regularity, moment-bounds,
        /// chapman-kolmogorov, bel-fd, noise-assumptions
        #[arg(long)]
        estimate: Option<String>,
        #[command(flatten)]
        obs: ObservableArgs,
    },
    /// Long-run averages and the empirical invariant measure
    Ergodic {
        #[arg(long)]
        t_long: Option<f64>,
        #[arg(long)]
        burn_in: Option<f64>,
        #[arg(long)]
        stride: Option<f64>,
        #[arg(long)]
        chains: Option<usize>,
    },
    /// Build the steering control and verify reachability
    Control {
        /// target: zero, shear, random or a field file
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        horizon: Option<f64>,
        /// replicas for the uncontrolled hit frequency, 0 to skip
        #[arg(long)]
        reach_samples: Option<usize>,
    },
    /// Summarize the run manifests under a directory
    Report {
        /// directory holding run directories (default: the output root)
        dir: Option<PathBuf>,
    },
}

#[derive(Default)]
struct Overrides(Vec<(String, String)>);

impl Overrides {
    fn num<T: ToString>(&mut self, key: &str, v: Option<T>) {
        if let Some(v) = v {
            self.0.push((key.into(), v.to_string()));
        }
    }

    fn text(&mut self, key: &str, v: Option<&String>) {
        if let Some(v) = v {
            self.0.push((key.into(), toml::Value::String(v.clone()).to_string()));
        }
    }

    /// Field specs: keywords stay, paths gain a `file:` prefix.
    fn field(&mut self, key: &str, v: Option<&String>) {
        let spec = v.map(|s| match s.as_str() {
            "zero" | "shear" | "random" => s.clone(),
            s if s.starts_with("file:") || s.starts_with("basis:") => s.to_string(),
            s => format!("file:{s}"),
        });
        self.text(key, spec.as_ref());
    }

    fn observable(&mut self, o: &ObservableArgs) {
        self.text("experiment.phi", o.phi.as_ref());
        self.num("experiment.t", o.t);
        self.num("experiment.k_damp", o.k);
    }
}

fn main() -> ExitCode {
    let mut free = Vec::new();
    let mut argv = Vec::new();
    for a in std::env::args() {
        match split_override(&a) {
            Some((k, v)) => free.push((k.to_string(), v.to_string())),
            None => argv.push(a),
        }
    }
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    ExitCode::from(execute(cli, free) as u8)
}

fn execute(cli: Cli, free: Vec<(String, String)>) -> i32 {
    let c = &cli.common;
    let mut o = Overrides::default();
    o.num("sde.seed", c.seed);
    o.num("output.workers", c.workers);
    o.num("experiment.samples", c.samples);
    o.num("space.cutoff", c.cutoff);
    o.num("sde.dt", c.dt);
    o.field("sde.initial", c.initial.as_ref());
    let sub = match &cli.command {
        Command::Simulate { horizon } => {
            o.num("sde.horizon", *horizon);
            Subcommand::Simulate
        }
        Command::Estimate { obs, k_sweep } => {
            o.observable(obs);
            if *k_sweep {
                o.num("experiment.k_sweep", Some(true));
            }
            Subcommand::Estimate
        }
        Command::Gradient { obs, direction, fd_epsilon } => {
            o.observable(obs);
            o.field("experiment.direction", direction.as_ref());
            o.num("experiment.fd_epsilon", *fd_epsilon);
            Subcommand::Gradient
        }
        Command::VocCheck { obs, inner } => {
            o.observable(obs);
            o.num("experiment.inner", *inner);
            Subcommand::VocCheck
        }
        Command::Verify { estimate, obs } => {
            o.text("experiment.estimate", estimate.as_ref());
            o.observable(obs);
            Subcommand::Verify
        }
        Command::Ergodic { t_long, burn_in, stride, chains } => {
            o.num("experiment.t_long", *t_long);
            o.num("experiment.burn_in", *burn_in);
            o.num("experiment.stride", *stride);
            o.num("experiment.chains", *chains);
            Subcommand::Ergodic
        }
        Command::Control { target, epsilon, horizon, reach_samples } => {
            o.field("experiment.target", target.as_ref());
            o.num("experiment.epsilon", *epsilon);
            o.num("experiment.control_horizon", *horizon);
            o.num("experiment.reach_samples", *reach_samples);
            Subcommand::Control
        }
        Command::Report { dir } => return report_command(dir.as_deref(), c, &free),
    };
    o.0.extend(free);
    let cfg = match RunConfig::load(c.config.as_deref(), &o.0) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("spde-lab: configuration error: {e}");
            return EXIT_CONFIG;
        }
    };
    match run::run(sub, &cfg, c.output.as_deref()) {
        Ok(m) => {
            for check in &m.checks {
                println!("{} {} (margin {:.4e})", if check.pass { "PASS" } else { "FAIL" }, check.name, check.margin);
            }
            for r in &m.rows {
                match r.stderr {
                    Some(se) => println!("{} = {} ± {} (n = {})", r.quantity, r.value, se, r.n),
                    None => println!("{} = {}", r.quantity, r.value),
                }
            }
            m.exit_code
        }
        Err((e, _)) => {
            eprintln!("spde-lab: {} failed: {e}", sub.name());
            e.exit_code()
        }
    }
}

fn report_command(dir: Option<&Path>, c: &Common, free: &[(String, String)]) -> i32 {
    let root = match dir.or(c.output.as_deref()) {
        Some(d) => d.to_path_buf(),
        None => match std::env::var_os(OUTPUT_ENV) {
            Some(d) => PathBuf::from(d),
            None => match RunConfig::load(c.config.as_deref(), free) {
                Ok(cfg) => PathBuf::from(cfg.output.dir),
                Err(e) => {
                    eprintln!("spde-lab: configuration error: {e}");
                    return EXIT_CONFIG;
                }
            },
        },
    };
    let summary = match report::summarize(&root) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("spde-lab: cannot read {}: {e}", root.display());
            return EXIT_RUNTIME;
        }
    };
    print!("{}", report::table(&summary));
    if root.is_dir() {
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        if let Err(e) = std::fs::write(root.join("summary.json"), json) {
            eprintln!("spde-lab: cannot write summary: {e}");
            return EXIT_RUNTIME;
        }
    }
    0
}
