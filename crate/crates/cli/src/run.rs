//! Subcommand execution, CSV rows and the run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spde_core::analysis::{self, ErgodicOptions, EstimateReport, GradientScalingSetup, ZProbe};
use spde_core::control::{build_control, stochastic_reach_probability, verify_reachability};
use spde_core::kolmogorov::{
    check_chapman_kolmogorov, check_variation_of_constants, compare_bel_finite_difference, damped_semigroup_at,
    estimate_bel_gradient,
};
use spde_core::rng::{stream_rng, tags};
use spde_core::{io, Error, GalerkinSpace, McEstimate, NoiseOperator, Observable, SimConfig, SpectralField, WaveVector};

use crate::config::{ConfigError, RunConfig};

/// Environment variable naming the output root.
pub const OUTPUT_ENV: &str = "SPDE_LAB_OUTPUT";

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    Simulate,
    Estimate,
    Gradient,
    VocCheck,
    Verify,
    Ergodic,
    Control,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Simulate => "simulate",
            Subcommand::Estimate => "estimate",
            Subcommand::Gradient => "gradient",
            Subcommand::VocCheck => "voc-check",
            Subcommand::Verify => "verify",
            Subcommand::Ergodic => "ergodic",
            Subcommand::Control => "control",
        }
    }

    fn stochastic(self) -> bool {
        !matches!(self, Subcommand::Control)
    }
}

/// One numeric output row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub quantity: String,
    #[serde(deserialize_with = "io::nullable::f64")]
    pub value: f64,
    pub stderr: Option<f64>,
    pub n: usize,
    pub seed: Option<u64>,
    pub config_hash: String,
    pub tag: String,
}

pub const CSV_HEADER: &str = "quantity,value,stderr,n,seed,config_hash,tag";

impl Row {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.quantity,
            self.value,
            self.stderr.map(|s| s.to_string()).unwrap_or_default(),
            self.n,
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
            self.config_hash,
            self.tag
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub tag: String,
    pub pass: bool,
    #[serde(deserialize_with = "io::nullable::f64")]
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub subcommand: String,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<String>,
    pub checks: Vec<CheckSummary>,
    pub pass: bool,
    pub exit_code: i32,
    pub error: Option<String>,
    pub reports: Vec<EstimateReport>,
    pub rows: Vec<Row>,
    pub config: RunConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Core(Error::InvalidArgument(_)) => EXIT_CONFIG,
            RunError::Core(_) => EXIT_RUNTIME,
        }
    }
}

/// Collected artifacts of one run.
struct Outputs {
    dir: PathBuf,
    hash: String,
    seed: Option<u64>,
    rows: Vec<Row>,
    reports: Vec<EstimateReport>,
    checks: Vec<CheckSummary>,
    files: Vec<String>,
}

impl Outputs {
    fn row(&mut self, quantity: impl Into<String>, value: f64, stderr: Option<f64>, n: usize, tag: &str) {
        self.rows.push(Row {
            quantity: quantity.into(),
            value,
            stderr,
            n,
            seed: self.seed,
            config_hash: self.hash[..16].to_string(),
            tag: tag.to_string(),
        });
    }

    fn estimate(&mut self, quantity: impl Into<String>, e: &McEstimate, tag: &str) {
        self.row(quantity, e.value, Some(e.stderr), e.samples, tag);
    }

    fn check(&mut self, name: &str, tag: &str, pass: bool, margin: f64) {
        self.checks.push(CheckSummary {
            name: name.into(),
            tag: tag.into(),
            pass,
            margin,
        });
    }

    fn report(&mut self, rep: EstimateReport) -> Result<(), RunError> {
        for (k, v) in &rep.witness {
            self.row(format!("{}.{k}", rep.name), *v, None, rep.paths, &rep.tag);
        }
        self.check(&rep.name, &rep.tag, rep.pass, rep.margin);
        let file = format!("{}.json", rep.name);
        self.write(&file, serde_json::to_string_pretty(&rep).expect("report serializes").as_bytes())?;
        self.reports.push(rep);
        Ok(())
    }

    fn path(&mut self, file: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == file) {
            self.files.push(file.to_string());
        }
        self.dir.join(file)
    }

    fn write(&mut self, file: &str, bytes: &[u8]) -> Result<(), RunError> {
        let p = self.path(file);
        fs::write(&p, bytes).map_err(Error::from)?;
        Ok(())
    }
}

/// Output directory: `--output`, then `$SPDE_LAB_OUTPUT`, then
/// `output.dir`, with a `<subcommand>-<hash>` subdirectory.
pub fn output_dir(cfg: &RunConfig, flag: Option<&Path>, sub: &str) -> PathBuf {
    let root = flag
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    root.join(format!("{sub}-{}", cfg.short_hash()))
}

fn field_spec(spec: &str, space: &std::sync::Arc<GalerkinSpace>, seed: u64, amplitude: f64, slot: u64) -> Result<SpectralField, RunError> {
    let f = match spec {
        "zero" => SpectralField::zeros(space),
        "shear" => {
            let k = WaveVector::new(1, 0, 0)?;
            SpectralField::cosine_mode(space, k, [0.0, 1.0, 0.0], amplitude)?
        }
        "random" => {
            let mut rng = stream_rng(seed, tags::PROBES, slot);
            let f = SpectralField::random(space, &mut rng, 1.0);
            let a = f.a_norm();
            f.scaled(amplitude / a)
        }
        other => {
            let path = other.strip_prefix("file:").unwrap_or(other);
            io::load_field(Path::new(path))?.project(space)
        }
    };
    Ok(f)
}

/// Probe slots of the generated fields.
const SLOT_INITIAL: u64 = 1 << 40;
const SLOT_TARGET: u64 = (1 << 40) + 1;
const SLOT_DIRECTION: u64 = (1 << 40) + 2;

struct Context {
    cfg: RunConfig,
    sim: SimConfig,
    x0: SpectralField,
    seed: u64,
}

fn context(cfg: &RunConfig, sub: Subcommand) -> Result<Context, RunError> {
    let seed = if sub.stochastic() { cfg.require_seed()? } else { cfg.sde.seed.unwrap_or(0) };
    let space = GalerkinSpace::new(cfg.space.cutoff)?;
    let noise = NoiseOperator::new(cfg.noise.clone())?;
    let mut sim = SimConfig::new(&space, cfg.sde.dt, cfg.sde.horizon, noise, seed)?.with_guard(cfg.sde.guard)?;
    let forcing = match cfg.sde.forcing.as_str() {
        "zero" => None,
        f => {
            if let Some(a) = f.strip_prefix("shear:") {
                let amp: f64 = a
                    .parse()
                    .map_err(|_| ConfigError::Constraint(format!("sde.forcing amplitude '{a}' is not a number")))?;
                Some(field_spec("shear", &space, seed, amp, 0)?)
            } else {
                Some(field_spec(f, &space, seed, 1.0, 0)?)
            }
        }
    };
    if let Some(f) = forcing {
        sim = sim.with_forcing(f)?;
    }
    let x0 = field_spec(&cfg.sde.initial, &space, seed, cfg.sde.initial_amplitude, SLOT_INITIAL)?;
    Ok(Context {
        cfg: cfg.clone(),
        sim,
        x0,
        seed,
    })
}

fn direction(ctx: &Context) -> Result<SpectralField, RunError> {
    let space = ctx.sim.space();
    let spec = &ctx.cfg.experiment.direction;
    if let Some(n) = spec.strip_prefix("basis:") {
        let n: usize = n
            .parse()
            .map_err(|_| ConfigError::Constraint(format!("experiment.direction '{spec}' needs an index")))?;
        return Ok(SpectralField::basis_vector(space, n, 1.0)?);
    }
    field_spec(spec, space, ctx.seed, 1.0, SLOT_DIRECTION)
}

/// Runs `sub` and writes its artifacts. Returns the manifest; the exit
/// code inside it is 0 only when every gated check passed.
pub fn run(sub: Subcommand, cfg: &RunConfig, output_flag: Option<&Path>) -> Result<RunManifest, (RunError, Option<Box<RunManifest>>)> {
    let started = chrono::Utc::now().to_rfc3339();
    let dir = output_dir(cfg, output_flag, sub.name());
    if let Err(e) = fs::create_dir_all(&dir) {
        return Err((RunError::Core(Error::from(e)), None));
    }
    let mut out = Outputs {
        dir,
        hash: cfg.hash(),
        seed: cfg.sde.seed,
        rows: Vec::new(),
        reports: Vec::new(),
        checks: Vec::new(),
        files: Vec::new(),
    };
    let result = spde_core::parallel::with_workers(cfg.output.workers, || {
        let ctx = context(cfg, sub)?;
        match sub {
            Subcommand::Simulate => simulate(&ctx, &mut out),
            Subcommand::Estimate => estimate(&ctx, &mut out),
            Subcommand::Gradient => gradient(&ctx, &mut out),
            Subcommand::VocCheck => voc(&ctx, &mut out),
            Subcommand::Verify => verify(&ctx, &mut out),
            Subcommand::Ergodic => ergodic(&ctx, &mut out),
            Subcommand::Control => control(&ctx, &mut out),
        }
    });
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for r in &out.rows {
        let _ = writeln!(csv, "{}", r.csv());
    }
    let csv_written = out.write("results.csv", csv.as_bytes());
    let pass = out.checks.iter().all(|c| c.pass);
    let (exit_code, error) = match (&result, &csv_written) {
        (Err(e), _) | (Ok(()), Err(e)) => (e.exit_code(), Some(e.to_string())),
        _ if pass => (EXIT_PASS, None),
        _ => (EXIT_CHECK_FAILED, None),
    };
    out.path("manifest.json");
    let manifest = RunManifest {
        config_hash: out.hash.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        subcommand: sub.name().to_string(),
        started,
        finished: chrono::Utc::now().to_rfc3339(),
        outputs: out.files.clone(),
        checks: out.checks.clone(),
        pass: pass && error.is_none(),
        exit_code,
        error,
        reports: out.reports.clone(),
        rows: out.rows.clone(),
        config: cfg.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let manifest_written = fs::write(out.dir.join("manifest.json"), json).map_err(|e| RunError::Core(Error::from(e)));
    match (result.and(csv_written), manifest_written) {
        (Err(e), _) | (Ok(()), Err(e)) => Err((e, Some(Box::new(manifest)))),
        _ => Ok(manifest),
    }
}

fn simulate(ctx: &Context, out: &mut Outputs) -> Result<(), RunError> {
    let traj = spde_core::sde::simulate(&ctx.x0, &ctx.sim)?;
    let path = out.path("trajectory.spdt");
    io::save_trajectory(&path, &traj)?;
    let path = out.path("final_state.spdf");
    let last = traj.final_state();
    io::save_field(&path, last)?;
    let n = traj.steps();
    out.row("energy_final", last.norm().powi(2), None, 1, "state energy |X(T)|^2");
    out.row("a_norm_final", last.a_norm(), None, 1, "graph norm |AX(T)|");
    out.row("steps", n as f64, None, 1, "grid steps");
    Ok(())
}

fn observable(ctx: &Context) -> Result<Observable, RunError> {
    Ok(Observable::by_name(&ctx.cfg.experiment.phi)?)
}

fn estimate(ctx: &Context, out: &mut Outputs) -> Result<(), RunError> {
    let e = &ctx.cfg.experiment;
    let phi = observable(ctx)?;
    let mut ks = vec![0.0];
    if e.k_sweep {
        ks.extend([1.0, 10.0, 100.0]);
    } else if e.k_damp > 0.0 {
        ks.push(e.k_damp);
    }
    let est = damped_semigroup_at(&phi, &ks, &[e.t], &ctx.x0, &ctx.sim, e.samples)?;
    for (k, row) in ks.iter().zip(&est) {
        if *k == 0.0 {
            out.estimate(format!("semigroup[{},t={}]", phi.name(), e.t), &row[0], "transition semigroup");
        } else {
            out.estimate(
                format!("feynman_kac[{},t={},K={k}]", phi.name(), e.t),
                &row[0],
                "damped Feynman-Kac semigroup",
            );
        }
    }
    Ok(())
}

fn gradient(ctx: &Context, out: &mut Outputs) -> Result<(), RunError> {
    let e = &ctx.cfg.experiment;
    let phi = observable(ctx)?;
    let h = direction(ctx)?;
    if e.fd_epsilon > 0.0 {
        let g = compare_bel_finite_difference(&phi, e.k_damp, e.t, &ctx.x0, &h, e.fd_epsilon, &ctx.sim, e.samples)?;
        let tag = "BEL gradient against CRN finite difference";
        out.estimate(format!("bel_gradient[K={}]", e.k_damp), &g.bel, tag);
        out.estimate(format!("fd_gradient[eps={}]", e.fd_epsilon), &g.finite_difference, tag);
        out.estimate("bel_minus_fd", &g.difference, tag);
        out.row("relative_error", g.relative_error(), None, g.bel.samples, tag);
    } else {
        let g = estimate_bel_gradient(&phi, e.k_damp, e.t, &ctx.x0, &h, &ctx.sim, e.samples)?;
        out.estimate(format!("bel_gradient[K={}]", e.k_damp), &g, "BEL gradient of the damped semigroup");
    }
    Ok(())
}

fn voc(ctx: &Context, out: &mut Outputs) -> Result<(), RunError> {
    let e = &ctx.cfg.experiment;
    let phi = observable(ctx)?;
    let r = check_variation_of_constants(&phi, e.k_damp, e.t, &ctx.x0, &ctx.sim, e.samples, e.inner)?;
    let tag = "variation of constants identity";
    out.estimate("voc.lhs", &r.lhs, tag);
    out.estimate("voc.feynman_kac", &r.feynman_kac, tag);
    out.estimate("voc.correction", &r.correction, tag);
    out.estimate("voc.residual", &r.residual, tag);
    out.check("voc", tag, r.pass, 3.0 * r.residual.stderr - r.residual.value.abs());
    out.write("voc.json", serde_json::to_string_pretty(&r).expect("serializes").as_bytes())?;
    Ok(())
}

/// Estimate names accepted by `verify --estimate`.
pub const VERIFY_ESTIMATES: [&str; 10] = [
    "pathwise-energy",
    "variation-bound",
    "gradient-scaling",
    "time-modulus",
    "lipschitz",
    "z-regularity",
    "moment-bounds",
    "chapman-kolmogorov",
    "bel-fd",
    "noise-assumptions",
];

fn verify(ctx: &Context, out: &mut Outputs) -> Result<(), RunError> {
    let e = &ctx.cfg.experiment;
    let sim = &ctx.sim;
    let x0 = &ctx.x0;
    let n = e.samples;
    let rep = match e.estimate.as_str() {
        "pathwise-energy" => {
            let (series, censored) = analysis::energy_series(x0, sim, n)?;
            let half = analysis::check_pathwise_energy_series(&series[..series.len().div_ceil(2)], &e.c_grid)?;
            let mut rep = analysis::check_pathwise_energy_series(&series, &e.c_grid)?;
            rep.meta(0, ctx.seed, sim.space().cutoff());
            rep.censored = censored;
            rep.detail("c_half", half.witness["c"]);
            rep
        }
        "variation-bound" => {
            let h = direction(ctx)?;
            let (series, censored) = analysis::variation_series(x0, &h, e.gamma, sim, n)?;
            let mut rep = analysis::check_variation_bound_series(&series, e.gamma, ctx.cfg.noise.delta, &e.c_gamma_grid)?;
            rep.meta(0, ctx.seed, sim.space().cutoff());
            rep.censored = censored;
            rep
        }
        "gradient-scaling" => {
            let mut cfgs = Vec::new();
            for m in [1, ctx.cfg.space.cutoff] {
                if cfgs.iter().any(|c: &SimConfig| c.space().cutoff() == m) {
                    continue;
                }
                let space = GalerkinSpace::new(m)?;
                cfgs.push(SimConfig::new(&space, sim.dt(), sim.horizon(), sim.noise().clone(), ctx.seed)?.with_guard(sim.guard())?);
            }
            let setup = GradientScalingSetup {
                gamma: e.gamma,
                k_damp: e.k_damp,
                t_grid: e.t_grid.clone(),
                states: vec![x0.clone()],
                directions: if e.direction == "random" { e.directions } else { 0 },
                fixed_directions: if e.direction == "random" { Vec::new() } else { vec![direction(ctx)?] },
                samples: n,
            };
            analysis::check_gradient_scaling(&observable(ctx)?, &setup, &cfgs)?
        }
        "time-modulus" => {
            let pairs: Vec<(f64, f64)> = e.t_pairs.iter().map(|p| (p[0], p[1])).collect();
            analysis::check_time_modulus(&observable(ctx)?, x0, &pairs, e.beta, &e.c_grid, sim, n)?
        }
        "lipschitz" => {
            let h = direction(ctx)?;
            let y = x0.add(&h.scaled(0.1 / h.a_norm().max(f64::MIN_POSITIVE)));
            let pairs = vec![(x0.clone(), x0.scaled(0.5)), (x0.clone(), y)];
            analysis::check_lipschitz(&observable(ctx)?, e.t, &pairs, e.gamma, e.radius, &e.c_grid, sim, n)?
        }
        "z-regularity" => {
            let probe = ZProbe::dyadic(sim.steps(), e.z_levels)?;
            let (samples, censored) = analysis::z_regularity_samples(x0, sim, n, e.z_epsilon, &probe)?;
            let mut rep = analysis::check_z_regularity_samples(
                &samples,
                &probe,
                sim.dt(),
                e.z_epsilon,
                e.beta,
                e.z_moment,
                ctx.cfg.noise.g,
            )?;
            rep.meta(0, ctx.seed, sim.space().cutoff());
            rep.censored = censored;
            rep
        }
        "moment-bounds" => {
            let (series, censored) = analysis::moment_series(x0, sim, n, e.delta_lemma)?;
            let trace_q = sim.noise().sup_hs_norm_sq(sim.space(), std::slice::from_ref(x0));
            let mut rep = analysis::check_moment_bounds_series(&series, e.delta_lemma, trace_q, ctx.cfg.noise.g)?;
            rep.meta(0, ctx.seed, sim.space().cutoff());
            rep.censored = censored;
            rep
        }
        "chapman-kolmogorov" => {
            let m = check_chapman_kolmogorov(&observable(ctx)?, e.t1, e.t2, x0, sim, n, e.inner)?;
            let mut rep = EstimateReport::new("chapman-kolmogorov", "Markov factorization of the semigroup");
            rep.meta(n, ctx.seed, sim.space().cutoff());
            rep.witness("direct", m.direct.value)
                .witness("nested", m.nested.value)
                .witness("residual", m.residual.value)
                .detail("residual_stderr", m.residual.stderr);
            rep.finish(3.0 * m.residual.stderr - m.residual.value.abs())
        }
        "bel-fd" => {
            let h = direction(ctx)?;
            let eps = if e.fd_epsilon > 0.0 { e.fd_epsilon } else { 1e-3 };
            let g = compare_bel_finite_difference(&observable(ctx)?, e.k_damp, e.t, x0, &h, eps, sim, n)?;
            let mut rep = EstimateReport::new("bel-fd", "BEL gradient against CRN finite difference");
            rep.meta(n, ctx.seed, sim.space().cutoff());
            rep.witness("relative_error", g.relative_error())
                .detail("bel", g.bel.value)
                .detail("bel_stderr", g.bel.stderr)
                .detail("fd", g.finite_difference.value)
                .detail("fd_stderr", g.finite_difference.stderr);
            rep.finish(0.05 - g.relative_error())
        }
        "noise-assumptions" => {
            let mut states = vec![SpectralField::zeros(sim.space()), x0.clone()];
            let mut rng = stream_rng(ctx.seed, tags::PROBES, SLOT_TARGET + 1);
            states.extend((0..8).map(|_| SpectralField::random(sim.space(), &mut rng, 1.0)));
            let a = sim.noise().validate_assumptions(&states)?;
            let mut rep = EstimateReport::new("noise-assumptions", "smoothness and non-degeneracy of the noise");
            rep.meta(states.len(), ctx.seed, sim.space().cutoff());
            rep.witness("max_trace", a.max_trace)
                .witness("max_inverse", a.max_inverse)
                .witness("max_derivative", a.max_derivative)
                .detail("m1", a.m1);
            let ok = !a.exceeds_m1 && a.trace_converges;
            rep.finish(if ok { a.m1 - a.max_trace.max(a.max_derivative) } else { -1.0 })
        }
        "" => {
            return Err(ConfigError::Constraint(format!(
                "verify needs --estimate <name>, one of {}",
                VERIFY_ESTIMATES.join(", ")
            ))
            .into())
        }
        other => {
            return Err(ConfigError::Constraint(format!(
                "unknown estimate '{other}', expected one of {}",
                VERIFY_ESTIMATES.join(", ")
            ))
            .into())
        }
    };
    out.report(rep)
}

fn ergodic(ctx: &Context, out: &mut Outputs) -> Result<(), RunError> {
    let e = &ctx.cfg.experiment;
    let opts = ErgodicOptions {
        t_long: e.t_long,
        burn_in: e.burn_in,
        stride: e.stride,
        chains: e.chains,
        invariance_t: e.invariance_t,
        invariance_inner: e.invariance_inner,
        tolerance: e.tolerance,
    };
    let x0s = vec![SpectralField::zeros(ctx.sim.space()), ctx.x0.clone()];
    let panel = vec![
        Observable::bounded_energy(),
        Observable::cos_coord(0, 1.0),
        Observable::tanh_coord(1, 1.0),
    ];
    let (measure, mut rep) = analysis::ergodic_averages(&x0s, &ctx.sim, &opts, &panel)?;
    rep.detail("measure_samples", measure.len() as f64);
    let mut csv = String::from("sample,origin,time,enstrophy,a_norm\n");
    for (i, x) in measure.samples.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{i},{},{},{},{}",
            measure.origin[i],
            measure.times[i],
            x.sobolev_norm(0.5).powi(2),
            x.a_norm()
        );
    }
    out.write("empirical_measure.csv", csv.as_bytes())?;
    out.report(rep)
}

fn control(ctx: &Context, out: &mut Outputs) -> Result<(), RunError> {
    let e = &ctx.cfg.experiment;
    let sim = ctx.sim.clone().with_dt(e.control_dt)?.with_horizon(e.control_horizon)?;
    let target = field_spec(&e.target, sim.space(), ctx.seed, ctx.cfg.sde.initial_amplitude, SLOT_TARGET)?;
    let every = ((0.01 / e.control_dt).round() as usize).max(1);
    let cp = build_control(&ctx.x0, &target, e.control_horizon, &sim, every)?;
    out.write("control_path.json", serde_json::to_string(&cp).expect("serializes").as_bytes())?;
    let r = verify_reachability(&cp, &ctx.x0, &target, e.epsilon, &sim)?;
    out.write("reachability.json", serde_json::to_string_pretty(&r).expect("serializes").as_bytes())?;
    let tag = "controlled reachability of a D(A) ball";
    out.row("control.t_star", cp.t_star, None, 1, tag);
    out.row("control.radius", cp.radius, None, 1, tag);
    out.row("control.distance", r.distance, None, 1, tag);
    out.row("control.sup_a_norm", r.sup_a_norm, None, 1, tag);
    out.check("reachability", tag, r.hit && r.within_radius, e.epsilon - r.distance);
    if e.reach_samples > 0 {
        let p = stochastic_reach_probability(&cp, &ctx.x0, &target, e.reach_epsilon, &sim, e.reach_samples)?;
        let tag = "uncontrolled hit frequency";
        out.estimate(format!("reach_probability[eps={}]", e.reach_epsilon), &p.estimate, tag);
        out.row("reach_probability.lower", p.lower, None, p.trials, tag);
        out.row("reach_probability.upper", p.upper, None, p.trials, tag);
    }
    Ok(())
}
