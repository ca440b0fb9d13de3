//! Empirical witnesses for the a priori estimates of the Galerkin system
//! and for its long-time behaviour.
//!
//! Each check produces an [`EstimateReport`]. Unspecified constants are
//! swept over a grid and the smallest passing value is reported. Moment
//! inequalities only fail on a statistically significant violation, that
//! is when the sample mean exceeds the bound by more than three standard
//! errors.
//!
//! Large path batches go through compact per-path scalar series
//! ([`EnergySeries`], [`VariationSeries`], ...) instead of full
//! trajectories; every check also accepts recorded [`Trajectory`] values.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kolmogorov::{bel_rows, drive, semigroup_rows, Observable, ObservableClass, Visit};
use crate::io::nullable;
use crate::parallel::fan_out;
use crate::rng::{stream_rng, tags};
use crate::sde::{Engine, SimConfig, Trajectory};
use crate::spectral::{a_norm_sq_raw, sobolev_sq_raw, Coeff, SpectralField};
use crate::stats::{linear_fit, mean, mean_stderr};

/// Outcome of one empirical check. `pass` holds exactly when `margin ≥ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub name: String,
    /// which inequality or identity the check witnesses
    pub tag: String,
    #[serde(deserialize_with = "nullable::map")]
    pub witness: BTreeMap<String, f64>,
    #[serde(deserialize_with = "nullable::f64")]
    pub margin: f64,
    pub pass: bool,
    pub paths: usize,
    pub censored: usize,
    pub seeds: Vec<u64>,
    pub cutoffs: Vec<u32>,
    #[serde(deserialize_with = "nullable::map")]
    pub details: BTreeMap<String, f64>,
}

impl EstimateReport {
    pub fn new(name: impl Into<String>, tag: impl Into<String>) -> Self {
        EstimateReport {
            name: name.into(),
            tag: tag.into(),
            witness: BTreeMap::new(),
            margin: f64::NAN,
            pass: false,
            paths: 0,
            censored: 0,
            seeds: Vec::new(),
            cutoffs: Vec::new(),
            details: BTreeMap::new(),
        }
    }

    pub fn witness(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.witness.insert(key.into(), value);
        self
    }

    pub fn detail(&mut self, key: impl Into<String>, value: f64) -> &mut Self {
        self.details.insert(key.into(), value);
        self
    }

    pub fn meta(&mut self, paths: usize, seed: u64, cutoff: u32) -> &mut Self {
        self.paths += paths;
        if !self.seeds.contains(&seed) {
            self.seeds.push(seed);
        }
        if !self.cutoffs.contains(&cutoff) {
            self.cutoffs.push(cutoff);
        }
        self
    }

    /// Sets the margin and derives `pass`.
    pub fn finish(mut self, margin: f64) -> Self {
        self.margin = margin;
        self.pass = margin >= 0.0;
        self
    }
}

/// Smallest grid value with nonnegative margin, or the best margin seen.
fn sweep_grid(grid: &[f64], mut margin_of: impl FnMut(f64) -> f64) -> (Option<f64>, f64, Vec<(f64, f64)>) {
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut all = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut found = None;
    for c in sorted {
        let m = margin_of(c);
        all.push((c, m));
        if m >= 0.0 && found.is_none() {
            found = Some((c, m));
        }
        best = best.max(m);
    }
    match found {
        Some((c, m)) => (Some(c), m, all),
        None => (None, best, all),
    }
}

fn need_paths(n: usize) -> Result<()> {
    if n == 0 {
        return invalid("the check needs at least one path");
    }
    Ok(())
}

fn need_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|c| !(*c >= 0.0)) {
        return invalid("constant grid must be nonempty and nonnegative");
    }
    Ok(())
}

fn same_length<T>(items: &[T], len: impl Fn(&T) -> usize) -> Result<usize> {
    let l = len(&items[0]);
    if items.iter().any(|s| len(s) != l) {
        return invalid("all paths must share the same time grid");
    }
    Ok(l)
}

fn rel_change(full: f64, half: f64) -> f64 {
    if full == half {
        0.0
    } else {
        (full - half).abs() / full.abs().max(f64::MIN_POSITIVE)
    }
}

/// `|AX_n|²` and `|AZ_n|²` along one path.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergySeries {
    pub dt: f64,
    pub a_sq: Vec<f64>,
    pub az_sq: Vec<f64>,
}

impl EnergySeries {
    pub fn from_trajectory(traj: &Trajectory) -> Result<Self> {
        let Some(z) = traj.convolution.as_ref() else {
            return invalid("trajectory does not carry the stochastic convolution Z");
        };
        Ok(EnergySeries {
            dt: traj.dt,
            a_sq: traj.states.iter().map(|x| x.a_norm().powi(2)).collect(),
            az_sq: z.iter().map(|z| z.a_norm().powi(2)).collect(),
        })
    }
}

/// Simulates `n` replicas from `x0` and keeps their energy series.
pub fn energy_series(x0: &SpectralField, cfg: &SimConfig, n: usize) -> Result<(Vec<EnergySeries>, usize)> {
    let steps = cfg.steps();
    fan_out(n, |r| {
        let mut e = Engine::new(cfg, x0, &[], true);
        let mut rng = stream_rng(cfg.seed(), tags::DYNAMICS, r);
        let mut s = EnergySeries {
            dt: cfg.dt(),
            a_sq: Vec::with_capacity(steps + 1),
            az_sq: Vec::with_capacity(steps + 1),
        };
        drive(&mut e, &mut rng, steps, |v| {
            if let Visit::Point(e) = v {
                s.a_sq.push(e.a_norm_sq());
                s.az_sq.push(a_norm_sq_raw(e.space(), e.z.as_deref().expect("Z recorded")));
            }
            Ok(())
        })?;
        Ok(s)
    })
}

/// Pathwise inequality
/// `e^{-c∫₀ᵗ|AX|²} |AX(t)|² ≤ 2|Ax|² + c sup_{s≤t} |AZ(s)|²`
/// at every grid time of every path, for each `c` in `c_grid`.
pub fn check_pathwise_energy_series(series: &[EnergySeries], c_grid: &[f64]) -> Result<EstimateReport> {
    need_paths(series.len())?;
    need_grid(c_grid)?;
    same_length(series, |s| s.a_sq.len())?;
    let margin_at = |c: f64| {
        let mut worst = f64::INFINITY;
        for s in series {
            let mut integral = 0.0;
            let mut sup_z = 0.0f64;
            for (&a, &z) in s.a_sq.iter().zip(&s.az_sq) {
                sup_z = sup_z.max(z);
                let lhs = if c == 0.0 { a } else { (-c * integral).exp() * a };
                let rhs = 2.0 * s.a_sq[0] + c * sup_z;
                worst = worst.min(rhs - lhs);
                integral += a * s.dt;
            }
        }
        worst
    };
    let (c, margin, all) = sweep_grid(c_grid, margin_at);
    let mut rep = EstimateReport::new("pathwise-energy", "pathwise exponential energy bound");
    rep.paths = series.len();
    rep.witness("c", c.unwrap_or(f64::NAN));
    for (c, m) in all {
        rep.detail(format!("margin[c={c}]"), m);
    }
    Ok(rep.finish(margin))
}

pub fn check_pathwise_energy(trajs: &[Trajectory], c_grid: &[f64]) -> Result<EstimateReport> {
    need_paths(trajs.len())?;
    let series: Vec<EnergySeries> = trajs.iter().map(EnergySeries::from_trajectory).collect::<Result<_>>()?;
    let mut rep = check_pathwise_energy_series(&series, c_grid)?;
    rep.seeds = vec![trajs[0].seed];
    rep.cutoffs = vec![trajs[0].space().cutoff()];
    Ok(rep)
}

/// `|AX_n|²`, `|(-A)^γ η_n|²` and `|(-A)^{γ+1/2} η_n|²` along one path.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationSeries {
    pub dt: f64,
    pub gamma: f64,
    pub a_sq: Vec<f64>,
    pub eta_gamma: Vec<f64>,
    pub eta_gamma_half: Vec<f64>,
}

impl VariationSeries {
    pub fn from_trajectory(traj: &Trajectory, gamma: f64) -> Result<Self> {
        let Some(eta) = traj.variation.as_ref() else {
            return invalid("trajectory does not carry the first variation");
        };
        Ok(VariationSeries {
            dt: traj.dt,
            gamma,
            a_sq: traj.states.iter().map(|x| x.a_norm().powi(2)).collect(),
            eta_gamma: eta.iter().map(|e| e.sobolev_norm(gamma).powi(2)).collect(),
            eta_gamma_half: eta.iter().map(|e| e.sobolev_norm(gamma + 0.5).powi(2)).collect(),
        })
    }
}

pub fn variation_series(
    x0: &SpectralField,
    h: &SpectralField,
    gamma: f64,
    cfg: &SimConfig,
    n: usize,
) -> Result<(Vec<VariationSeries>, usize)> {
    let steps = cfg.steps();
    fan_out(n, |r| {
        let mut e = Engine::new(cfg, x0, std::slice::from_ref(h), false);
        let mut rng = stream_rng(cfg.seed(), tags::DYNAMICS, r);
        let mut s = VariationSeries {
            dt: cfg.dt(),
            gamma,
            a_sq: Vec::with_capacity(steps + 1),
            eta_gamma: Vec::with_capacity(steps + 1),
            eta_gamma_half: Vec::with_capacity(steps + 1),
        };
        drive(&mut e, &mut rng, steps, |v| {
            if let Visit::Point(e) = v {
                s.a_sq.push(e.a_norm_sq());
                s.eta_gamma.push(sobolev_sq_raw(e.space(), &e.etas[0], gamma));
                s.eta_gamma_half.push(sobolev_sq_raw(e.space(), &e.etas[0], gamma + 0.5));
            }
            Ok(())
        })?;
        Ok(s)
    })
}

/// Mean-square bound
/// `E[e^{-c∫|AX|²}|(-A)^γη(t)|² + ∫₀ᵗ e^{-c∫₀ˢ|AX|²}|(-A)^{γ+1/2}η|² ds] ≤ e^{ct}|(-A)^γh|²`
/// at every grid time, for each `c` in `c_grid`. Both sides are divided by
/// `|(-A)^γ h|²` path by path.
pub fn check_variation_bound_series(
    series: &[VariationSeries],
    gamma: f64,
    delta: f64,
    c_grid: &[f64],
) -> Result<EstimateReport> {
    need_paths(series.len())?;
    need_grid(c_grid)?;
    if !(gamma > delta - 0.5 && gamma <= 1.0) {
        return invalid(format!("gamma = {gamma} outside (delta - 1/2, 1] = ({}, 1]", delta - 0.5));
    }
    if series.iter().any(|s| s.gamma != gamma) {
        return invalid("series were recorded for a different gamma");
    }
    let len = same_length(series, |s| s.a_sq.len())?;
    let dt = series[0].dt;
    let margin_at = |c: f64| {
        let mut values = vec![vec![0.0; series.len()]; len];
        for (i, s) in series.iter().enumerate() {
            let h = s.eta_gamma[0];
            if h == 0.0 {
                continue;
            }
            let (mut integral, mut dissipated) = (0.0, 0.0);
            for n in 0..len {
                let w = (-c * integral).exp();
                values[n][i] = (w * s.eta_gamma[n] + dissipated) / h;
                dissipated += w * s.eta_gamma_half[n] * dt;
                integral += s.a_sq[n] * dt;
            }
        }
        values
            .iter()
            .enumerate()
            .map(|(n, v)| {
                let (m, se) = mean_stderr(v);
                (c * n as f64 * dt).exp() - (m - 3.0 * se)
            })
            .fold(f64::INFINITY, f64::min)
    };
    let (c, margin, all) = sweep_grid(c_grid, margin_at);
    let mut rep = EstimateReport::new("variation-bound", "weighted mean-square bound on the first variation");
    rep.paths = series.len();
    rep.witness("c_gamma", c.unwrap_or(f64::NAN)).detail("gamma", gamma);
    for (c, m) in all {
        rep.detail(format!("margin[c={c}]"), m);
    }
    Ok(rep.finish(margin))
}

pub fn check_variation_bound(
    pairs: &[Trajectory],
    gamma: f64,
    delta: f64,
    c_grid: &[f64],
) -> Result<EstimateReport> {
    need_paths(pairs.len())?;
    let series: Vec<VariationSeries> = pairs
        .iter()
        .map(|t| VariationSeries::from_trajectory(t, gamma))
        .collect::<Result<_>>()?;
    let mut rep = check_variation_bound_series(&series, gamma, delta, c_grid)?;
    rep.seeds = vec![pairs[0].seed];
    rep.cutoffs = vec![pairs[0].space().cutoff()];
    Ok(rep)
}

fn growth_index(phi: &Observable) -> Result<i32> {
    for c in phi.classes() {
        if let ObservableClass::Ck { k } = c {
            return Ok(*k as i32);
        }
    }
    if phi.sup_norm().is_some() {
        return Ok(0);
    }
    invalid(format!("observable '{}' declares neither a C_k nor a bounded class", phi.name()))
}

/// Inputs of [`check_gradient_scaling`].
#[derive(Clone, Debug)]
pub struct GradientScalingSetup {
    pub gamma: f64,
    pub k_damp: f64,
    pub t_grid: Vec<f64>,
    /// probe states, projected onto each cutoff
    pub states: Vec<SpectralField>,
    /// random probe directions per state, normalized to `|(-A)^γ h| = 1`
    pub directions: usize,
    /// explicit probe directions, projected onto each cutoff and normalized
    /// the same way
    pub fixed_directions: Vec<SpectralField>,
    /// replicas per estimate; the doubled run uses `2 * samples`
    pub samples: usize,
}

/// Normalized BEL derivatives
/// `|D S_tφ(x)·h| / (‖φ‖ (1+|Ax|)^k (1 + t^{-1/2-(r-γ)}))`
/// over probe states, directions, times and one configuration per cutoff.
/// The witness constant is the largest ratio; the check passes when that
/// constant moves by less than 10% between `samples` and `2 * samples`
/// replicas (the first half of the doubled run).
pub fn check_gradient_scaling(
    phi: &Observable,
    setup: &GradientScalingSetup,
    cfgs: &[SimConfig],
) -> Result<EstimateReport> {
    let k = growth_index(phi)?;
    let probes = setup.directions + setup.fixed_directions.len();
    if setup.samples < 2 || probes == 0 || setup.states.is_empty() || cfgs.is_empty() {
        return invalid("gradient scaling needs samples ≥ 2, probe directions, states and configurations");
    }
    let gamma = setup.gamma;
    let mut rep = EstimateReport::new("gradient-scaling", "small-time gradient bound of the damped semigroup");
    let (mut c_half, mut c_full) = (0.0f64, 0.0f64);
    for cfg in cfgs {
        let p = cfg.noise().params();
        let need = (p.delta - 0.5).max(p.r - 0.5);
        if !(gamma > need) {
            return invalid(format!("gamma = {gamma} must exceed max(delta, r) - 1/2 = {need}"));
        }
        let idx: Vec<usize> = setup
            .t_grid
            .iter()
            .map(|&t| {
                if !(t > 0.0) {
                    return invalid("time grid must be positive");
                }
                cfg.grid_steps(t)
            })
            .collect::<Result<_>>()?;
        let space = cfg.space();
        let mut prng = stream_rng(cfg.seed(), tags::PROBES, space.cutoff() as u64);
        let mut dirs: Vec<SpectralField> = (0..setup.directions)
            .map(|_| SpectralField::random(space, &mut prng, 1.0))
            .collect();
        dirs.extend(setup.fixed_directions.iter().map(|h| h.project(space)));
        for h in &mut dirs {
            let s = h.sobolev_norm(gamma);
            if !(s > 0.0) {
                return invalid("probe directions must be nonzero on every cutoff");
            }
            h.scale_mut(1.0 / s);
        }
        let n2 = 2 * setup.samples;
        for (si, x) in setup.states.iter().enumerate() {
            let xp = x.project(space);
            let (rows, censored) = bel_rows(phi, setup.k_damp, &idx, &xp, &dirs, cfg, n2)?;
            rep.meta(n2, cfg.seed(), space.cutoff());
            rep.censored += censored;
            let growth = phi.bound() * (1.0 + xp.a_norm()).powi(k);
            let half = rows.len() / 2;
            for (j, &t) in setup.t_grid.iter().enumerate() {
                let norm = growth * (1.0 + t.powf(-0.5 - (p.r - gamma)));
                let (mut worst, mut worst_se) = (0.0f64, 0.0);
                for d in 0..dirs.len() {
                    let col: Vec<f64> = rows.iter().map(|r| r[j * dirs.len() + d]).collect();
                    let (m, se) = mean_stderr(&col);
                    let full = m.abs() / norm;
                    if full >= worst {
                        worst_se = se / norm;
                    }
                    let first = mean(&col[..half]).abs() / norm;
                    c_full = c_full.max(full);
                    c_half = c_half.max(first);
                    worst = worst.max(full);
                }
                let key = format!("m={},t={t},x={si}", space.cutoff());
                rep.detail(format!("ratio[{key}]"), worst).detail(format!("ratio_stderr[{key}]"), worst_se);
            }
        }
    }
    let stability = rel_change(c_full, c_half);
    rep.witness("constant", c_full)
        .detail("constant_half", c_half)
        .detail("stability", stability)
        .detail("gamma", gamma)
        .detail("k_damp", setup.k_damp);
    Ok(rep.finish(0.1 - stability))
}

/// Default grid for constants without a stated value.
pub const DEFAULT_CONSTANT_GRID: [f64; 6] = [1.0, 2.0, 5.0, 10.0, 50.0, 100.0];

/// `|u(t₁,x) - u(t₂,x)| ≤ c ‖φ‖_E (|Ax|+1)⁶ (|t₁-t₂|^β + |A(e^{t₁A} - e^{t₂A})x|)`
/// on each time pair, with both `u` values taken from the same replicas.
#[allow(clippy::too_many_arguments)]
pub fn check_time_modulus(
    phi: &Observable,
    x: &SpectralField,
    t_pairs: &[(f64, f64)],
    beta: f64,
    c_grid: &[f64],
    cfg: &SimConfig,
    n: usize,
) -> Result<EstimateReport> {
    need_grid(c_grid)?;
    if !phi.classes().contains(&ObservableClass::EClass) {
        return invalid(format!("observable '{}' is not declared in the E class", phi.name()));
    }
    let g = cfg.noise().params().g;
    if !(beta > 0.0 && beta < (g / 2.0).min(0.5)) {
        return invalid(format!("beta = {beta} outside (0, min(g/2, 1/2)) with g = {g}"));
    }
    if n < 2 || t_pairs.is_empty() {
        return invalid("time modulus needs samples ≥ 2 and at least one pair");
    }
    let xp = x.project(cfg.space());
    let mut times: Vec<f64> = t_pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let idx: Vec<usize> = times.iter().map(|&t| cfg.grid_steps(t)).collect::<Result<_>>()?;
    if idx.iter().any(|&i| i > cfg.steps()) {
        return invalid("time pair beyond the horizon");
    }
    let (rows, censored) = semigroup_rows(phi, &[0.0], &idx, &xp, cfg, n)?;
    let scale = phi.bound() * (xp.a_norm() + 1.0).powi(6);
    let mut rep = EstimateReport::new("time-modulus", "Hölder modulus in time of the transition semigroup");
    rep.meta(n, cfg.seed(), cfg.space().cutoff());
    rep.censored = censored;
    let mut worst = 0.0f64;
    for &(t1, t2) in t_pairs {
        let i1 = times.iter().position(|&t| t == t1).expect("time listed");
        let i2 = times.iter().position(|&t| t == t2).expect("time listed");
        let diffs: Vec<f64> = rows.iter().map(|r| r[i1] - r[i2]).collect();
        let (d, se) = mean_stderr(&diffs);
        let semigroup = xp.heat(t1).sub(&xp.heat(t2)).a_norm();
        let modulus = scale * ((t1 - t2).abs().powf(beta) + semigroup);
        let ratio = if d == 0.0 { 0.0 } else { d.abs() / modulus };
        worst = worst.max(ratio);
        rep.detail(format!("ratio[{t1},{t2}]"), ratio)
            .detail(format!("du[{t1},{t2}]"), d)
            .detail(format!("stderr[{t1},{t2}]"), se);
    }
    let (c, margin, _) = sweep_grid(c_grid, |c| c - worst);
    rep.witness("c_beta", c.unwrap_or(f64::NAN)).detail("max_ratio", worst);
    Ok(rep.finish(margin))
}

/// `|u(t,x) - u(t,y)| ≤ c |(-A)^γ(x-y)|` for pairs in the D(A) ball of
/// radius `radius`, both sides driven by the same increments.
#[allow(clippy::too_many_arguments)]
pub fn check_lipschitz(
    phi: &Observable,
    t: f64,
    pairs: &[(SpectralField, SpectralField)],
    gamma: f64,
    radius: f64,
    c_grid: &[f64],
    cfg: &SimConfig,
    n: usize,
) -> Result<EstimateReport> {
    need_grid(c_grid)?;
    if n < 2 || pairs.is_empty() {
        return invalid("Lipschitz check needs samples ≥ 2 and at least one pair");
    }
    let steps = cfg.grid_steps(t)?;
    let space = cfg.space();
    let mut rep = EstimateReport::new("lipschitz", "Lipschitz bound of the semigroup on D(A) balls");
    let mut worst = 0.0f64;
    for (pi, (x, y)) in pairs.iter().enumerate() {
        let (xp, yp) = (x.project(space), y.project(space));
        if xp.a_norm() > radius || yp.a_norm() > radius {
            return invalid(format!("pair {pi} leaves the D(A) ball of radius {radius}"));
        }
        let (diffs, censored) = fan_out(n, |r| {
            let mut ex = Engine::new(cfg, &xp, &[], false);
            let mut ey = Engine::new(cfg, &yp, &[], false);
            drive(&mut ex, &mut stream_rng(cfg.seed(), tags::DYNAMICS, r), steps, |_| Ok(()))?;
            drive(&mut ey, &mut stream_rng(cfg.seed(), tags::DYNAMICS, r), steps, |_| Ok(()))?;
            Ok(phi.evaluate(&ex.x_field()) - phi.evaluate(&ey.x_field()))
        })?;
        rep.meta(n, cfg.seed(), space.cutoff());
        rep.censored += censored;
        let (d, se) = mean_stderr(&diffs);
        let dist = xp.sub(&yp).sobolev_norm(gamma);
        let ratio = if d == 0.0 { 0.0 } else { d.abs() / dist };
        worst = worst.max(ratio);
        rep.detail(format!("ratio[{pi}]"), ratio).detail(format!("stderr[{pi}]"), se);
    }
    let (c, margin, _) = sweep_grid(c_grid, |c| c - worst);
    rep.witness("c", c.unwrap_or(f64::NAN)).detail("max_ratio", worst);
    Ok(rep.finish(margin))
}

/// Grid offsets used by the Z regularity check: increments
/// `Z(p + gap) - Z(p)` for every `p` in `positions`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZProbe {
    pub gaps: Vec<usize>,
    pub positions: Vec<usize>,
}

impl ZProbe {
    /// Gaps `1, 2, …, 2^levels` steps; positions start at mid-horizon with
    /// a stride of a quarter of the largest gap.
    pub fn dyadic(steps: usize, levels: u32) -> Result<Self> {
        let max_gap = 1usize << levels;
        let start = steps / 2;
        let stride = (max_gap / 4).max(1);
        let positions: Vec<usize> = (start..).step_by(stride).take_while(|p| p + max_gap <= steps).collect();
        if positions.is_empty() {
            return invalid(format!("{steps} steps are too few for gaps up to {max_gap}"));
        }
        Ok(ZProbe {
            gaps: (0..=levels).map(|l| 1usize << l).collect(),
            positions,
        })
    }

    fn max_gap(&self) -> usize {
        self.gaps.iter().copied().max().unwrap_or(0)
    }
}

/// Squared `(-A)^{1+ε}` norms of one Z path: its supremum and the
/// increments `[gap][position]` of a [`ZProbe`].
#[derive(Clone, Debug, PartialEq)]
pub struct ZSample {
    pub sup_sq: f64,
    pub increments_sq: Vec<Vec<f64>>,
}

struct ZCollector<'a> {
    probe: &'a ZProbe,
    power: f64,
    pending: VecDeque<(usize, Vec<Coeff>)>,
    out: ZSample,
    buf: Vec<Coeff>,
}

impl<'a> ZCollector<'a> {
    fn new(probe: &'a ZProbe, epsilon: f64) -> Self {
        ZCollector {
            probe,
            power: 1.0 + epsilon,
            pending: VecDeque::new(),
            out: ZSample {
                sup_sq: 0.0,
                increments_sq: vec![Vec::with_capacity(probe.positions.len()); probe.gaps.len()],
            },
            buf: Vec::new(),
        }
    }

    fn visit(&mut self, space: &crate::spectral::GalerkinSpace, n: usize, z: &[Coeff]) {
        self.out.sup_sq = self.out.sup_sq.max(sobolev_sq_raw(space, z, self.power));
        for (p, zp) in &self.pending {
            for (gi, &gap) in self.probe.gaps.iter().enumerate() {
                if p + gap == n {
                    self.buf.clear();
                    self.buf.extend(z.iter().zip(zp).map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]]));
                    self.out.increments_sq[gi].push(sobolev_sq_raw(space, &self.buf, self.power));
                }
            }
        }
        while self.pending.front().is_some_and(|(p, _)| p + self.probe.max_gap() <= n) {
            self.pending.pop_front();
        }
        if self.probe.positions.contains(&n) {
            self.pending.push_back((n, z.to_vec()));
        }
    }
}

impl ZSample {
    pub fn from_trajectory(traj: &Trajectory, epsilon: f64, probe: &ZProbe) -> Result<Self> {
        let Some(z) = traj.convolution.as_ref() else {
            return invalid("trajectory does not carry the stochastic convolution Z");
        };
        let mut c = ZCollector::new(probe, epsilon);
        for (n, f) in z.iter().enumerate() {
            c.visit(f.space(), n, f.coeffs());
        }
        Ok(c.out)
    }
}

pub fn z_regularity_samples(
    x0: &SpectralField,
    cfg: &SimConfig,
    n: usize,
    epsilon: f64,
    probe: &ZProbe,
) -> Result<(Vec<ZSample>, usize)> {
    let steps = cfg.steps();
    if probe.positions.iter().any(|&p| p + probe.max_gap() > steps) {
        return invalid("Z probe reaches past the horizon");
    }
    fan_out(n, |r| {
        let mut e = Engine::new(cfg, x0, &[], true);
        let mut rng = stream_rng(cfg.seed(), tags::DYNAMICS, r);
        let mut c = ZCollector::new(probe, epsilon);
        drive(&mut e, &mut rng, steps, |v| {
            if let Visit::Point(e) = v {
                c.visit(e.space(), e.step_index(), e.z.as_deref().expect("Z recorded"));
            }
            Ok(())
        })?;
        Ok(c.out)
    })
}

/// Sup-moment `E sup|(-A)^{1+ε}Z|^{2m}` and the log-log slope of the
/// increment moments `E|(-A)^{1+ε}(Z(t+τ) - Z(t))|^{2m}` against `τ`.
/// Passes when the slope is at least `2βm - 0.3` and the sup-moment moves
/// by less than 10% between the first half of the samples and all of them.
pub fn check_z_regularity_samples(
    samples: &[ZSample],
    probe: &ZProbe,
    dt: f64,
    epsilon: f64,
    beta: f64,
    m: u32,
    g: f64,
) -> Result<EstimateReport> {
    need_paths(samples.len())?;
    if !(epsilon >= 0.0 && epsilon < g / 2.0) {
        return invalid(format!("epsilon = {epsilon} outside [0, g/2) with g = {g}"));
    }
    if !(beta >= 0.0 && beta < (g / 2.0 - epsilon).min(0.5)) {
        return invalid(format!("beta = {beta} outside [0, min(g/2 - epsilon, 1/2))"));
    }
    if m == 0 || probe.gaps.len() < 2 {
        return invalid("need m ≥ 1 and at least two gap sizes");
    }
    let pow = |v: f64| v.powi(m as i32);
    let mut rep = EstimateReport::new("z-regularity", "space-time regularity of the stochastic convolution");
    rep.paths = samples.len();
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for (gi, &gap) in probe.gaps.iter().enumerate() {
        let per_path: Vec<f64> = samples.iter().map(|s| mean(&s.increments_sq[gi].iter().map(|&v| pow(v)).collect::<Vec<_>>())).collect();
        let (mm, se) = mean_stderr(&per_path);
        rep.detail(format!("moment[gap={gap}]"), mm).detail(format!("stderr[gap={gap}]"), se);
        if mm > 0.0 {
            lx.push((gap as f64 * dt).ln());
            ly.push(mm.ln());
        }
    }
    let sup: Vec<f64> = samples.iter().map(|s| pow(s.sup_sq)).collect();
    let sup_full = mean(&sup);
    let sup_half = mean(&sup[..sup.len().div_ceil(2)]);
    let stability = rel_change(sup_full, sup_half);
    let target = 2.0 * beta * m as f64 - 0.3;
    let slope = if lx.len() >= 2 { linear_fit(&lx, &ly).0 } else { f64::INFINITY };
    let slope_margin = if sup_full == 0.0 { 0.0 } else { slope - target };
    rep.witness("slope", if lx.len() >= 2 { slope } else { f64::NAN })
        .witness("sup_moment", sup_full)
        .detail("sup_moment_half", sup_half)
        .detail("stability", stability)
        .detail("target_slope", target);
    Ok(rep.finish(slope_margin.min(0.1 - stability)))
}

#[allow(clippy::too_many_arguments)]
pub fn check_z_regularity(
    z_paths: &[Trajectory],
    probe: &ZProbe,
    epsilon: f64,
    beta: f64,
    m: u32,
    g: f64,
) -> Result<EstimateReport> {
    need_paths(z_paths.len())?;
    let samples: Vec<ZSample> = z_paths
        .iter()
        .map(|t| ZSample::from_trajectory(t, epsilon, probe))
        .collect::<Result<_>>()?;
    let mut rep = check_z_regularity_samples(&samples, probe, z_paths[0].dt, epsilon, beta, m, g)?;
    rep.seeds = vec![z_paths[0].seed];
    rep.cutoffs = vec![z_paths[0].space().cutoff()];
    Ok(rep)
}

/// Exponent `γ_δ` of the weighted dissipation moment.
pub fn gamma_delta(delta: f64) -> f64 {
    if delta <= 1.0 {
        2.0 / (2.0 * delta - 1.0)
    } else {
        (2.0 * delta + 1.0) / (2.0 * delta - 1.0)
    }
}

/// `|X_n|²`, `|(-A)^{1/2}X_n|²` and the weighted dissipation integrand
/// `|(-A)^{(δ+1)/2}X|² / (1 + |(-A)^{δ/2}X|²)^{γ_δ}` along one path.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentSeries {
    pub dt: f64,
    pub delta: f64,
    pub energy: Vec<f64>,
    pub enstrophy: Vec<f64>,
    pub weighted: Vec<f64>,
}

fn weighted_integrand(space: &crate::spectral::GalerkinSpace, x: &[Coeff], delta: f64) -> f64 {
    sobolev_sq_raw(space, x, (delta + 1.0) / 2.0) / (1.0 + sobolev_sq_raw(space, x, delta / 2.0)).powf(gamma_delta(delta))
}

impl MomentSeries {
    pub fn from_trajectory(traj: &Trajectory, delta: f64) -> Self {
        let space = traj.space();
        MomentSeries {
            dt: traj.dt,
            delta,
            energy: traj.states.iter().map(|x| x.norm().powi(2)).collect(),
            enstrophy: traj.states.iter().map(|x| x.sobolev_norm(0.5).powi(2)).collect(),
            weighted: traj.states.iter().map(|x| weighted_integrand(space, x.coeffs(), delta)).collect(),
        }
    }
}

pub fn moment_series(x0: &SpectralField, cfg: &SimConfig, n: usize, delta: f64) -> Result<(Vec<MomentSeries>, usize)> {
    let steps = cfg.steps();
    fan_out(n, |r| {
        let mut e = Engine::new(cfg, x0, &[], false);
        let mut rng = stream_rng(cfg.seed(), tags::DYNAMICS, r);
        let mut s = MomentSeries {
            dt: cfg.dt(),
            delta,
            energy: Vec::with_capacity(steps + 1),
            enstrophy: Vec::with_capacity(steps + 1),
            weighted: Vec::with_capacity(steps + 1),
        };
        drive(&mut e, &mut rng, steps, |v| {
            if let Visit::Point(e) = v {
                let sp = e.space();
                s.energy.push(sobolev_sq_raw(sp, &e.x, 0.0));
                s.enstrophy.push(sobolev_sq_raw(sp, &e.x, 0.5));
                s.weighted.push(weighted_integrand(sp, &e.x, delta));
            }
            Ok(())
        })?;
        Ok(s)
    })
}

/// (i) `E|X(t)|² + E∫₀ᵗ|(-A)^{1/2}X|² ≤ |x|² + t·trace_q` at every grid
/// time, with `trace_q` an upper bound of `Tr[Φ(x)Φ*(x)]` over states;
/// (ii) the weighted dissipation moment over the whole horizon, which must
/// move by less than 10% between half and all of the paths.
pub fn check_moment_bounds_series(series: &[MomentSeries], delta: f64, trace_q: f64, g: f64) -> Result<EstimateReport> {
    need_paths(series.len())?;
    if !(delta > 0.5 && delta <= 1.0 + g) {
        return invalid(format!("delta = {delta} outside (1/2, 1 + g] with g = {g}"));
    }
    if series.iter().any(|s| s.delta != delta) {
        return invalid("series were recorded for a different delta");
    }
    let len = same_length(series, |s| s.energy.len())?;
    let dt = series[0].dt;
    let x0 = series[0].energy[0];
    let mut running = vec![0.0; series.len()];
    let mut worst = f64::INFINITY;
    let mut values = vec![0.0; series.len()];
    let mut final_lhs = (0.0, 0.0);
    for n in 0..len {
        for (i, s) in series.iter().enumerate() {
            values[i] = s.energy[n] + running[i];
            running[i] += s.enstrophy[n] * dt;
        }
        let (m, se) = mean_stderr(&values);
        let rhs = (x0 + n as f64 * dt * trace_q) * (1.0 + 1e-12);
        let slack = rhs - (m - 3.0 * se);
        worst = worst.min(if rhs > 0.0 { slack / rhs } else { slack });
        final_lhs = (m, se);
    }
    let totals: Vec<f64> = series.iter().map(|s| s.weighted.iter().sum::<f64>() * dt).collect();
    let full = mean(&totals);
    let half = mean(&totals[..totals.len().div_ceil(2)]);
    let stability = rel_change(full, half);
    let mut rep = EstimateReport::new("moment-bounds", "energy moment bound and weighted dissipation moment");
    rep.paths = series.len();
    rep.witness("weighted_moment", full)
        .witness("trace_q", trace_q)
        .detail("weighted_moment_half", half)
        .detail("stability", stability)
        .detail("gamma_delta", gamma_delta(delta))
        .detail("energy_margin", worst)
        .detail("final_lhs", final_lhs.0)
        .detail("final_lhs_stderr", final_lhs.1);
    Ok(rep.finish(worst.min(0.1 - stability)))
}

pub fn check_moment_bounds(trajs: &[Trajectory], delta: f64, trace_q: f64, g: f64) -> Result<EstimateReport> {
    need_paths(trajs.len())?;
    let series: Vec<MomentSeries> = trajs.iter().map(|t| MomentSeries::from_trajectory(t, delta)).collect();
    let mut rep = check_moment_bounds_series(&series, delta, trace_q, g)?;
    rep.seeds = vec![trajs[0].seed];
    rep.cutoffs = vec![trajs[0].space().cutoff()];
    Ok(rep)
}

/// Thinned long-run samples with uniform weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalMeasure {
    pub samples: Vec<SpectralField>,
    pub weights: Vec<f64>,
    /// index of the initial condition each sample descends from
    pub origin: Vec<usize>,
    pub times: Vec<f64>,
    pub burn_in: f64,
    pub stride: f64,
}

impl EmpiricalMeasure {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn expectation(&self, f: impl Fn(&SpectralField) -> f64) -> f64 {
        self.samples.iter().zip(&self.weights).map(|(x, w)| w * f(x)).sum()
    }
}

/// Knobs of [`ergodic_averages`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErgodicOptions {
    pub t_long: f64,
    pub burn_in: f64,
    pub stride: f64,
    /// independent chains per initial condition
    pub chains: usize,
    /// lag of the invariance residual
    pub invariance_t: f64,
    /// inner paths per sample for the invariance residual
    pub invariance_inner: usize,
    /// relative tolerance of the cross-initial-condition agreement
    pub tolerance: f64,
}

impl Default for ErgodicOptions {
    fn default() -> Self {
        ErgodicOptions {
            t_long: 500.0,
            burn_in: 50.0,
            stride: 1.0,
            chains: 1,
            invariance_t: 0.5,
            invariance_inner: 1,
            tolerance: 0.05,
        }
    }
}

struct ChainOut {
    replica: u64,
    samples: Vec<SpectralField>,
    times: Vec<f64>,
    average: f64,
}

/// The three invariant-measure moment functionals at `g`.
pub fn invariant_moment_functionals(x: &SpectralField, g: f64) -> [f64; 3] {
    [
        x.sobolev_norm(0.5).powi(2),
        x.a_norm().powf(2.0 / 3.0),
        x.sobolev_norm(1.0 + g / 2.0).powf((1.0 + 2.0 * g) / (10.0 + 8.0 * g)),
    ]
}

/// Long-run averages from each initial condition in `x0s`.
///
/// The report covers (a) the invariant-measure moment functionals on the
/// pooled empirical measure and their stability between the first half of
/// each chain and all of it, (b) agreement of the time-averaged enstrophy
/// `|(-A)^{1/2}x|²` across initial conditions within `tolerance`, and
/// (c) for each observable in `panel` the invariance residual
/// `E_ν̂[P_tφ] - E_ν̂[φ]` within three combined standard errors of the two
/// averages, each from batch means along the chains.
pub fn ergodic_averages(
    x0s: &[SpectralField],
    cfg: &SimConfig,
    opts: &ErgodicOptions,
    panel: &[Observable],
) -> Result<(EmpiricalMeasure, EstimateReport)> {
    if x0s.is_empty() || opts.chains == 0 {
        return invalid("ergodic run needs initial conditions and chains");
    }
    if !(opts.stride > 0.0 && opts.burn_in >= 0.0 && opts.t_long > opts.burn_in) {
        return invalid("ergodic run needs stride > 0 and t_long > burn_in ≥ 0");
    }
    let dt = cfg.dt();
    let steps = (opts.t_long / dt).round() as usize;
    let burn = (opts.burn_in / dt).round() as usize;
    let stride = ((opts.stride / dt).round() as usize).max(1);
    let per_chain = (steps - burn) / stride + 1;
    if per_chain < 2 {
        return invalid(format!("only {per_chain} sample(s) per chain after burn-in"));
    }
    let chains = opts.chains;
    let (outs, censored) = fan_out(x0s.len() * chains, |r| {
        let x0 = &x0s[r as usize / chains];
        let mut e = Engine::new(cfg, x0, &[], false);
        let mut rng = stream_rng(cfg.seed(), tags::CHAIN, r);
        let mut out = ChainOut {
            replica: r,
            samples: Vec::with_capacity(per_chain),
            times: Vec::with_capacity(per_chain),
            average: 0.0,
        };
        let mut acc = 0.0;
        drive(&mut e, &mut rng, steps, |v| {
            if let Visit::Point(e) = v {
                let n = e.step_index();
                if n >= burn {
                    acc += sobolev_sq_raw(e.space(), &e.x, 0.5);
                    if (n - burn).is_multiple_of(stride) {
                        out.samples.push(e.x_field());
                        out.times.push(e.time());
                    }
                }
            }
            Ok(())
        })?;
        out.average = acc / (steps - burn + 1) as f64;
        Ok(out)
    })?;
    let g = cfg.noise().params().g;
    let mut rep = EstimateReport::new("ergodic", "long-run averages and invariance of the empirical measure");
    rep.meta(outs.len(), cfg.seed(), cfg.space().cutoff());
    rep.censored = censored;
    rep.detail("burn_in", opts.burn_in).detail("t_long", opts.t_long).detail("stride", opts.stride);

    // (b) cross initial condition agreement
    let mut averages = Vec::new();
    for ic in 0..x0s.len() {
        let a: Vec<f64> = outs
            .iter()
            .filter(|o| o.replica as usize / chains == ic)
            .map(|o| o.average)
            .collect();
        if a.is_empty() {
            return invalid(format!("every chain from initial condition {ic} was censored"));
        }
        let avg = mean(&a);
        rep.detail(format!("time_average[ic={ic}]"), avg);
        averages.push(avg);
    }
    let mut spread = 0.0f64;
    for i in 0..averages.len() {
        for j in i + 1..averages.len() {
            let (a, b) = (averages[i], averages[j]);
            let d = if a == b { 0.0 } else { (a - b).abs() / (0.5 * (a + b)).abs() };
            spread = spread.max(d);
        }
    }
    rep.witness("agreement", spread);

    // pooled measure
    let mut measure = EmpiricalMeasure {
        samples: Vec::new(),
        weights: Vec::new(),
        origin: Vec::new(),
        times: Vec::new(),
        burn_in: opts.burn_in,
        stride: opts.stride,
    };
    for o in &outs {
        measure.origin.extend(std::iter::repeat_n(o.replica as usize / chains, o.samples.len()));
        measure.samples.extend(o.samples.iter().cloned());
        measure.times.extend(o.times.iter().copied());
    }
    let total = measure.samples.len();
    measure.weights = vec![1.0 / total as f64; total];

    // (a) moment functionals
    let mid = 0.5 * (opts.burn_in + opts.t_long);
    let vals: Vec<[f64; 3]> = measure.samples.iter().map(|x| invariant_moment_functionals(x, g)).collect();
    let mut stability = 0.0f64;
    for (k, name) in ["enstrophy", "a_norm_2_3", "smooth_power"].iter().enumerate() {
        let all: Vec<f64> = vals.iter().map(|v| v[k]).collect();
        let first: Vec<f64> = vals
            .iter()
            .zip(&measure.times)
            .filter(|(_, &t)| t <= mid)
            .map(|(v, _)| v[k])
            .collect();
        let (full, half) = (mean(&all), mean(&first));
        if !full.is_finite() {
            stability = f64::INFINITY;
        }
        stability = stability.max(rel_change(full, half));
        rep.witness(format!("moment_{name}"), full).detail(format!("moment_{name}_half"), half);
    }
    rep.detail("moment_stability", stability);

    // (c) invariance residuals
    let lag = cfg.grid_steps(opts.invariance_t)?;
    let inner = opts.invariance_inner.max(1);
    let mut invariance_margin = f64::INFINITY;
    if !panel.is_empty() {
        let (rows, inv_censored) = fan_out(total, |j| {
            let y = &measure.samples[j as usize];
            let mut acc = vec![0.0; panel.len()];
            let mut e = Engine::new(cfg, y, &[], false);
            for i in 0..inner {
                let mut irng = stream_rng(cfg.seed(), tags::INNER, j * inner as u64 + i as u64);
                e.set_state(y.coeffs(), None, &[], 0);
                drive(&mut e, &mut irng, lag, |_| Ok(()))?;
                let xt = e.x_field();
                for (a, phi) in acc.iter_mut().zip(panel) {
                    *a += phi.evaluate(&xt);
                }
            }
            Ok(panel
                .iter()
                .zip(&acc)
                .flat_map(|(phi, a)| [a / inner as f64, phi.evaluate(y)])
                .collect::<Vec<f64>>())
        })?;
        rep.censored += inv_censored;
        let chain_len = if inv_censored == 0 { per_chain } else { 1 };
        for (k, phi) in panel.iter().enumerate() {
            let moved: Vec<f64> = rows.iter().map(|r| r[2 * k]).collect();
            let here: Vec<f64> = rows.iter().map(|r| r[2 * k + 1]).collect();
            let m = mean(&moved) - mean(&here);
            let se = batch_stderr(&moved, chain_len).hypot(batch_stderr(&here, chain_len));
            rep.detail(format!("invariance[{}]", phi.name()), m)
                .detail(format!("invariance_stderr[{}]", phi.name()), se);
            invariance_margin = invariance_margin.min(3.0 * se - m.abs());
        }
    }
    let margin = (0.1 - stability).min(opts.tolerance - spread).min(invariance_margin);
    Ok((measure, rep.finish(margin)))
}

/// Samples per batch in [`batch_stderr`].
const BATCH: usize = 10;

/// Batch-means standard error of a column made of consecutive chains of
/// `chain_len` correlated samples. Batches never straddle two chains.
fn batch_stderr(col: &[f64], chain_len: usize) -> f64 {
    let b = BATCH.min(chain_len).max(1);
    let batches: Vec<f64> = col
        .chunks(chain_len.max(1))
        .flat_map(|chain| chain.chunks_exact(b).map(mean))
        .collect();
    if batches.len() < 2 {
        return mean_stderr(col).1;
    }
    mean_stderr(&batches).1
}

/// 1-Wasserstein distance between two empirical laws on the line.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        let ua = (i + 1) as f64 / na;
        let ub = (j + 1) as f64 / nb;
        let next = ua.min(ub);
        acc += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if ua <= next {
            i += 1;
        }
        if ub <= next {
            j += 1;
        }
    }
    acc
}

/// Distances between the laws of `φ(X(t, x))` at consecutive entries of
/// `cfgs` (one per cutoff). Diagnostic only.
pub fn galerkin_consistency(
    phi: &Observable,
    x: &SpectralField,
    t: f64,
    cfgs: &[SimConfig],
    n: usize,
) -> Result<Vec<f64>> {
    let mut laws = Vec::new();
    for cfg in cfgs {
        let idx = [cfg.grid_steps(t)?];
        let (rows, _) = semigroup_rows(phi, &[0.0], &idx, &x.project(cfg.space()), cfg, n)?;
        laws.push(rows.into_iter().map(|r| r[0]).collect::<Vec<_>>());
    }
    Ok(laws.windows(2).map(|w| wasserstein_1d(&w[0], &w[1])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{NoiseOperator, NoiseParams};
    use crate::sde::{simulate, simulate_with_variation};
    use crate::spectral::{GalerkinSpace, WaveVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(cutoff: u32, horizon: f64) -> SimConfig {
        let s = GalerkinSpace::new(cutoff).unwrap();
        SimConfig::new(&s, 1e-3, horizon, NoiseOperator::new(NoiseParams::default()).unwrap(), 5).unwrap()
    }

    #[test]
    fn reports_with_non_finite_values_round_trip() {
        let mut r = EstimateReport::new("x", "y");
        r.witness("c", f64::NAN).detail("d", f64::INFINITY).detail("e", 2.5);
        let back: EstimateReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert!(back.margin.is_nan() && back.witness["c"].is_nan() && back.details["d"].is_nan());
        assert_eq!(back.details["e"], 2.5);
    }

    fn shear(c: &SimConfig, amp: f64) -> SpectralField {
        SpectralField::cosine_mode(c.space(), WaveVector::new(1, 0, 0).unwrap(), [0.0, 1.0, 0.0], amp).unwrap()
    }

    #[test]
    fn report_pass_follows_margin() {
        assert!(EstimateReport::new("a", "b").finish(0.0).pass);
        assert!(!EstimateReport::new("a", "b").finish(-1e-300).pass);
        assert!(!EstimateReport::new("a", "b").finish(f64::NAN).pass);
    }

    #[test]
    fn pathwise_energy_deterministic_decay_passes_every_c() {
        let c = cfg(1, 0.5).without_noise();
        let x = shear(&c, 0.7);
        let t = simulate(&x, &c).unwrap();
        let s = EnergySeries::from_trajectory(&t).unwrap();
        let a0 = s.a_sq[0];
        for (n, a) in s.a_sq.iter().enumerate() {
            // single shear is a steady bilinear null; semi-implicit decay
            let expect = a0 / (1.0 + c.dt()).powi(2 * n as i32);
            assert!((a - expect).abs() <= 1e-12 * a0);
        }
        assert!(s.az_sq.iter().all(|&z| z == 0.0));
        let r = check_pathwise_energy(&[t], &[0.0, 1.0, 10.0]).unwrap();
        assert!(r.pass);
        assert_eq!(r.witness["c"], 0.0);
    }

    #[test]
    fn pathwise_energy_rest_state_is_tight() {
        let c = cfg(1, 0.1).without_noise();
        let t = simulate(&SpectralField::zeros(c.space()), &c).unwrap();
        let r = check_pathwise_energy(&[t], &[1.0]).unwrap();
        assert_eq!(r.margin, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn pathwise_energy_requires_z() {
        let c = cfg(1, 0.01);
        let mut t = simulate(&SpectralField::zeros(c.space()), &c).unwrap();
        t.convolution = None;
        assert!(check_pathwise_energy(&[t], &[1.0]).is_err());
    }

    #[test]
    fn variation_bound_zero_direction_and_pure_decay() {
        let c = cfg(1, 0.2);
        let x = shear(&c, 0.5);
        let t = simulate_with_variation(&x, &SpectralField::zeros(c.space()), &c).unwrap();
        let r = check_variation_bound(&[t.clone(), t], 1.0, 0.5, &[0.0, 1.0]).unwrap();
        assert!(r.pass);
        assert_eq!(r.witness["c_gamma"], 0.0);

        let lin = cfg(1, 0.2).without_nonlinearity().with_noise(NoiseOperator::additive(1.3).unwrap());
        let h = SpectralField::random(lin.space(), &mut ChaCha8Rng::seed_from_u64(3), 1.0);
        let t = simulate_with_variation(&x, &h, &lin).unwrap();
        let r = check_variation_bound(&[t], 1.0, 0.5, &[0.0]).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(check_variation_bound(&[], 1.0, 0.5, &[0.0]).is_err());
    }

    #[test]
    fn gamma_delta_values() {
        assert_eq!(gamma_delta(1.0), 2.0);
        assert_eq!(gamma_delta(0.75), 4.0);
        assert!((gamma_delta(1.25) - 3.5 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn moment_bound_deterministic_energy_ledger() {
        let c = cfg(1, 0.5).without_noise();
        let x = SpectralField::random(c.space(), &mut ChaCha8Rng::seed_from_u64(9), 1.0);
        let t = simulate(&x, &c).unwrap();
        let r = check_moment_bounds(&[t.clone(), t], 1.0, 0.0, 0.05).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(check_moment_bounds(&[], 1.0, 0.0, 0.05).is_err());
    }

    #[test]
    fn z_probe_and_zero_paths() {
        let p = ZProbe::dyadic(100, 3).unwrap();
        assert_eq!(p.gaps, vec![1, 2, 4, 8]);
        assert_eq!(p.positions[0], 50);
        assert!(p.positions.iter().all(|q| q + 8 <= 100));
        assert!(ZProbe::dyadic(4, 3).is_err());
        let c = cfg(1, 0.1).without_noise();
        let (s, _) = z_regularity_samples(&SpectralField::zeros(c.space()), &c, 3, 0.0, &p).unwrap();
        assert!(s.iter().all(|z| z.sup_sq == 0.0));
        let r = check_z_regularity_samples(&s, &p, c.dt(), 0.0, 0.0, 1, 0.05).unwrap();
        assert_eq!(r.witness["sup_moment"], 0.0);
        assert!(r.pass);
    }

    #[test]
    fn z_samples_match_recorded_trajectory() {
        let c = cfg(1, 0.05);
        let p = ZProbe::dyadic(c.steps(), 2).unwrap();
        let x = shear(&c, 0.3);
        let t = simulate(&x, &c).unwrap();
        let a = ZSample::from_trajectory(&t, 0.01, &p).unwrap();
        let (b, _) = z_regularity_samples(&x, &c, 1, 0.01, &p).unwrap();
        assert_eq!(a.sup_sq, b[0].sup_sq);
        assert_eq!(a.increments_sq, b[0].increments_sq);
    }

    #[test]
    fn z_moments_increase_with_epsilon() {
        let c = cfg(1, 0.05);
        let p = ZProbe::dyadic(c.steps(), 2).unwrap();
        let t = simulate(&SpectralField::zeros(c.space()), &c).unwrap();
        let a = ZSample::from_trajectory(&t, 0.0, &p).unwrap();
        let b = ZSample::from_trajectory(&t, 0.02, &p).unwrap();
        assert!(b.sup_sq >= a.sup_sq);
    }

    #[test]
    fn time_modulus_equal_times_is_zero() {
        let c = cfg(1, 0.2);
        let x = shear(&c, 0.4);
        let r = check_time_modulus(
            &Observable::bounded_energy(),
            &x,
            &[(0.1, 0.1)],
            0.01,
            &DEFAULT_CONSTANT_GRID,
            &c,
            4,
        )
        .unwrap();
        assert_eq!(r.details["max_ratio"], 0.0);
        assert!(r.pass);
        assert!(check_time_modulus(&Observable::norm_sq(), &x, &[(0.1, 0.2)], 0.01, &[1.0], &c, 4).is_err());
    }

    #[test]
    fn lipschitz_identical_pair_is_zero() {
        let c = cfg(1, 0.1);
        let x = shear(&c, 0.4);
        let y = x.scaled(1.0 + 1e-3);
        let r = check_lipschitz(&Observable::bounded_energy(), 0.1, &[(x.clone(), y)], 1.0, 5.0, &[1.0, 5.0], &c, 8).unwrap();
        assert!(r.pass);
        assert!(check_lipschitz(&Observable::bounded_energy(), 0.1, &[(x.scaled(100.0), x)], 1.0, 5.0, &[1.0], &c, 8).is_err());
    }

    #[test]
    fn ergodic_deterministic_point_mass() {
        let c = cfg(1, 1.0).without_noise();
        let opts = ErgodicOptions {
            t_long: 20.0,
            burn_in: 15.0,
            stride: 1.0,
            ..ErgodicOptions::default()
        };
        let x = SpectralField::random(c.space(), &mut ChaCha8Rng::seed_from_u64(2), 1.0);
        let (m, r) = ergodic_averages(&[SpectralField::zeros(c.space()), x], &c, &opts, &[Observable::bounded_energy()]).unwrap();
        assert_eq!(m.len(), 12);
        assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(m.samples.iter().all(|s| s.a_norm() < 1e-5));
        assert!(r.witness["moment_enstrophy"] < 1e-10);
        let short = ErgodicOptions {
            t_long: 1.0,
            burn_in: 0.9,
            ..ErgodicOptions::default()
        };
        assert!(ergodic_averages(&[SpectralField::zeros(c.space())], &c, &short, &[]).is_err());
    }

    #[test]
    fn wasserstein_basics() {
        assert_eq!(wasserstein_1d(&[0.0, 1.0], &[0.0, 1.0]), 0.0);
        assert!((wasserstein_1d(&[0.0], &[2.0]) - 2.0).abs() < 1e-15);
        assert!((wasserstein_1d(&[0.0, 1.0], &[0.5]) - 0.5).abs() < 1e-15);
        assert!((wasserstein_1d(&[0.0, 1.0, 2.0], &[1.0, 2.0, 3.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_scaling_linear_in_probe_size() {
        let c = cfg(1, 0.1);
        let phi = Observable::sin_coord(0, 1.0);
        let setup = GradientScalingSetup {
            gamma: 1.0,
            k_damp: 1.0,
            t_grid: vec![0.05, 0.1],
            states: vec![shear(&c, 0.3)],
            directions: 2,
            fixed_directions: Vec::new(),
            samples: 8,
        };
        let r = check_gradient_scaling(&phi, &setup, std::slice::from_ref(&c)).unwrap();
        assert!(r.witness["constant"].is_finite());
        let bad = GradientScalingSetup { gamma: 0.5, ..setup };
        assert!(check_gradient_scaling(&phi, &bad, &[c]).is_err());
    }
}
