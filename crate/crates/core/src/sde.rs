//! Time integration of the Galerkin SDE
//! `dX = (AX + b_m(X) + P_m f) dt + Φ_m(X) dW`
//! together with its first variation `η` and the stochastic convolution `Z`.
//!
//! The scheme is linearly implicit Euler–Maruyama: the Stokes part is
//! treated implicitly (a diagonal solve), `b`, `f` and `Φ` explicitly.
//! Brownian increments are drawn per real basis coordinate with variance
//! `dt`, from the replica stream described in [`crate::rng`].

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bilinear::BilinearWorkspace;
use crate::error::{invalid, Error, Result};
use crate::noise::{FrozenNoise, NoiseOperator};
use crate::rng::{stream_rng, tags};
use crate::spectral::{
    a_norm_sq_raw, coeffs_to_coords, coords_to_coeffs, divergence_residual_raw, reality_residual_raw, Coeff,
    GalerkinSpace, SpectralField, COEFF_ZERO,
};

/// Default bound on `|AX|` beyond which a run is declared blown up.
pub const DEFAULT_GUARD: f64 = 1e6;

/// Time-stepping scheme. Only one is implemented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    SemiImplicitEuler,
}

/// Everything a path simulation needs besides the initial condition.
#[derive(Clone, Debug)]
pub struct SimConfig {
    space: Arc<GalerkinSpace>,
    workspace: BilinearWorkspace,
    dt: f64,
    horizon: f64,
    noise: NoiseOperator,
    forcing: SpectralField,
    seed: u64,
    guard: f64,
    scheme: Scheme,
    nonlinear: bool,
    stochastic: bool,
}

impl SimConfig {
    /// Zero forcing, default guard.
    pub fn new(space: &Arc<GalerkinSpace>, dt: f64, horizon: f64, noise: NoiseOperator, seed: u64) -> Result<Self> {
        let cfg = SimConfig {
            space: Arc::clone(space),
            workspace: BilinearWorkspace::new(space),
            dt,
            horizon,
            noise,
            forcing: SpectralField::zeros(space),
            seed,
            guard: DEFAULT_GUARD,
            scheme: Scheme::SemiImplicitEuler,
            nonlinear: true,
            stochastic: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_forcing(mut self, forcing: SpectralField) -> Result<Self> {
        self.forcing = forcing;
        self.validate()?;
        Ok(self)
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        self.horizon = horizon;
        self.validate()?;
        Ok(self)
    }

    pub fn with_dt(mut self, dt: f64) -> Result<Self> {
        self.dt = dt;
        self.validate()?;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_guard(mut self, guard: f64) -> Result<Self> {
        self.guard = guard;
        self.validate()?;
        Ok(self)
    }

    pub fn with_noise(mut self, noise: NoiseOperator) -> Self {
        self.noise = noise;
        self
    }

    /// Test hook: drops `b` from the drift, leaving a linear SDE.
    pub fn without_nonlinearity(mut self) -> Self {
        self.nonlinear = false;
        self
    }

    /// Drops the noise term entirely (`Φ ≡ 0`), leaving the deterministic
    /// Galerkin flow.
    pub fn without_noise(mut self) -> Self {
        self.stochastic = false;
        self
    }

    pub fn space(&self) -> &Arc<GalerkinSpace> {
        &self.space
    }
    pub fn workspace(&self) -> &BilinearWorkspace {
        &self.workspace
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn noise(&self) -> &NoiseOperator {
        &self.noise
    }
    pub fn forcing(&self) -> &SpectralField {
        &self.forcing
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn guard(&self) -> f64 {
        self.guard
    }
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }
    pub fn is_nonlinear(&self) -> bool {
        self.nonlinear
    }
    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return invalid(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return invalid(format!("horizon must be nonnegative, got {}", self.horizon));
        }
        self.grid_steps(self.horizon)?;
        if !(self.guard > 0.0) {
            return invalid(format!("blow-up guard must be positive, got {}", self.guard));
        }
        if !self.forcing.space().same(&self.space) {
            return invalid("forcing lives at a different cutoff than the simulation space");
        }
        if !self.forcing.is_valid(1e-12 * (1.0 + self.forcing.norm())) {
            return invalid("forcing must be a real divergence-free field");
        }
        Ok(())
    }

    /// Number of steps to reach `t`, which must lie on the time grid.
    pub fn grid_steps(&self, t: f64) -> Result<usize> {
        let n = (t / self.dt).round();
        if !(n >= 0.0) || (n * self.dt - t).abs() > 1e-9 * t.max(self.dt) {
            return invalid(format!("time {t} is not a multiple of dt = {}", self.dt));
        }
        Ok(n as usize)
    }

    /// Steps to the horizon.
    pub fn steps(&self) -> usize {
        self.grid_steps(self.horizon).expect("validated at construction")
    }

    /// Nearest grid step to `t` (no divisibility requirement).
    pub fn nearest_step(&self, t: f64) -> usize {
        (t / self.dt).round().max(0.0) as usize
    }
}

/// A simulated path on the time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub seed: u64,
    pub replica: u64,
    pub times: Vec<f64>,
    pub states: Vec<SpectralField>,
    /// `η` per grid point
    pub variation: Option<Vec<SpectralField>>,
    /// `Z` per grid point
    pub convolution: Option<Vec<SpectralField>>,
    /// Brownian increments, `steps × dim` row-major
    pub increments: Vec<f64>,
    /// Generator position after the last step, for resuming. `None` when the
    /// path was not driven by a generator.
    pub rng_word_pos: Option<u128>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.times.len().saturating_sub(1)
    }

    pub fn space(&self) -> &Arc<GalerkinSpace> {
        self.states[0].space()
    }

    pub fn dim(&self) -> usize {
        self.space().dim()
    }

    /// Increment applied on step `n` (from `t_n` to `t_{n+1}`).
    pub fn increment(&self, n: usize) -> &[f64] {
        let d = self.dim();
        &self.increments[n * d..(n + 1) * d]
    }

    pub fn final_state(&self) -> &SpectralField {
        self.states.last().expect("trajectory holds x0")
    }
}

/// Time-indexed forcing for [`deterministic_solve`]: the value used on the
/// step from `t_n` to `t_{n+1}`.
pub trait ForcingSchedule {
    fn forcing_at(&self, step: usize, dt: f64) -> SpectralField;
}

impl ForcingSchedule for SpectralField {
    fn forcing_at(&self, _step: usize, _dt: f64) -> SpectralField {
        self.clone()
    }
}

/// Per-step forcing values; the last one is held beyond the end.
impl ForcingSchedule for [SpectralField] {
    fn forcing_at(&self, step: usize, _dt: f64) -> SpectralField {
        self[step.min(self.len() - 1)].clone()
    }
}

impl ForcingSchedule for Vec<SpectralField> {
    fn forcing_at(&self, step: usize, dt: f64) -> SpectralField {
        self.as_slice().forcing_at(step, dt)
    }
}

/// Low-level stepper shared by the simulators and the Monte Carlo
/// estimators. It owns the current `X`, optional `Z` and any number of
/// first-variation directions.
pub(crate) struct Engine {
    space: Arc<GalerkinSpace>,
    workspace: BilinearWorkspace,
    noise: NoiseOperator,
    dt: f64,
    sqrt_dt: f64,
    guard: f64,
    nonlinear: bool,
    stochastic: bool,
    damp: Vec<f64>,
    dt_forcing: Vec<Coeff>,
    frozen: FrozenNoise,
    pub(crate) x: Vec<Coeff>,
    pub(crate) z: Option<Vec<Coeff>>,
    pub(crate) etas: Vec<Vec<Coeff>>,
    step: usize,
    qx: Vec<f64>,
    qeta: Vec<f64>,
    noise_q: Vec<f64>,
    noise_c: Vec<Coeff>,
    deriv_q: Vec<f64>,
    deriv_c: Vec<Coeff>,
    drift: Vec<Coeff>,
}

const CHECK_EVERY: usize = if cfg!(debug_assertions) { 1 } else { 100 };

impl Engine {
    pub(crate) fn new(cfg: &SimConfig, x0: &SpectralField, etas: &[SpectralField], with_z: bool) -> Self {
        let space = Arc::clone(&cfg.space);
        let x0 = x0.project(&space);
        let dim = space.dim();
        let dt = cfg.dt;
        let damp = space.eigenvalues().iter().map(|mu| 1.0 / (1.0 + dt * mu)).collect();
        let dt_forcing = cfg
            .forcing
            .coeffs()
            .iter()
            .map(|c| [c[0] * dt, c[1] * dt, c[2] * dt])
            .collect();
        let mut qx = vec![0.0; dim];
        if !cfg.noise.is_state_independent() {
            coeffs_to_coords(&space, x0.coeffs(), &mut qx);
        }
        let frozen = cfg.noise.freeze_coords(&space, &qx);
        Engine {
            workspace: cfg.workspace.clone(),
            noise: cfg.noise.clone(),
            dt,
            sqrt_dt: dt.sqrt(),
            guard: cfg.guard,
            nonlinear: cfg.nonlinear,
            stochastic: cfg.stochastic,
            damp,
            dt_forcing,
            frozen,
            x: x0.coeffs().to_vec(),
            z: with_z.then(|| vec![COEFF_ZERO; space.len()]),
            etas: etas.iter().map(|h| h.project(&space).coeffs().to_vec()).collect(),
            step: 0,
            qx,
            qeta: vec![0.0; dim],
            noise_q: vec![0.0; dim],
            noise_c: vec![COEFF_ZERO; space.len()],
            deriv_q: vec![0.0; dim],
            deriv_c: vec![COEFF_ZERO; space.len()],
            drift: vec![COEFF_ZERO; space.len()],
            space,
        }
    }

    /// Turns the noise off entirely (`Φ ≡ 0`).
    pub(crate) fn deterministic(mut self) -> Self {
        self.stochastic = false;
        self
    }

    pub(crate) fn dim(&self) -> usize {
        self.space.dim()
    }

    pub(crate) fn space(&self) -> &Arc<GalerkinSpace> {
        &self.space
    }

    pub(crate) fn step_index(&self) -> usize {
        self.step
    }

    pub(crate) fn time(&self) -> f64 {
        self.step as f64 * self.dt
    }

    pub(crate) fn sample_increment(&self, rng: &mut ChaCha8Rng, dw: &mut [f64]) {
        for w in dw.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *w = z * self.sqrt_dt;
        }
    }

    /// `Φ(X_n)` at the current state; valid until the next [`Engine::advance`].
    pub(crate) fn frozen(&self) -> &FrozenNoise {
        &self.frozen
    }

    pub(crate) fn a_norm_sq(&self) -> f64 {
        a_norm_sq_raw(&self.space, &self.x)
    }

    pub(crate) fn x_field(&self) -> SpectralField {
        SpectralField::from_raw(&self.space, self.x.clone())
    }

    pub(crate) fn z_field(&self) -> Option<SpectralField> {
        self.z.as_ref().map(|z| SpectralField::from_raw(&self.space, z.clone()))
    }

    pub(crate) fn eta_field(&self, i: usize) -> SpectralField {
        SpectralField::from_raw(&self.space, self.etas[i].clone())
    }

    /// Real coordinates of `η_i`.
    pub(crate) fn eta_coords(&self, i: usize, out: &mut [f64]) {
        coeffs_to_coords(&self.space, &self.etas[i], out);
    }

    /// Replaces the state (used by nested estimators and resume).
    pub(crate) fn set_state(&mut self, x: &[Coeff], z: Option<&[Coeff]>, etas: &[&[Coeff]], step: usize) {
        self.x.copy_from_slice(x);
        if let (Some(dst), Some(src)) = (self.z.as_mut(), z) {
            dst.copy_from_slice(src);
        }
        for (dst, src) in self.etas.iter_mut().zip(etas) {
            dst.copy_from_slice(src);
        }
        self.step = step;
        self.refresh_noise();
    }

    fn refresh_noise(&mut self) {
        if !self.noise.is_state_independent() {
            coeffs_to_coords(&self.space, &self.x, &mut self.qx);
            self.noise.refreeze(&self.space, &self.qx, &mut self.frozen);
        }
    }

    /// One step with increment `dw` (ignored when deterministic) and an
    /// optional forcing override for this step.
    pub(crate) fn advance(&mut self, dw: &[f64], forcing: Option<&[Coeff]>) -> Result<()> {
        let dt = self.dt;
        let noisy = self.stochastic;
        if noisy {
            self.frozen.apply(dw, &mut self.noise_q);
            coords_to_coeffs(&self.space, &self.noise_q, &mut self.noise_c);
        }
        let state_dependent = noisy && !self.noise.is_state_independent();
        for i in 0..self.etas.len() {
            if self.nonlinear {
                self.workspace.symmetric_into(&self.x, &self.etas[i], &mut self.drift);
            }
            if state_dependent {
                coeffs_to_coords(&self.space, &self.etas[i], &mut self.qeta);
                self.frozen.apply_derivative(&self.qeta, dw, &mut self.deriv_q);
                coords_to_coeffs(&self.space, &self.deriv_q, &mut self.deriv_c);
            }
            let eta = &mut self.etas[i];
            for k in 0..eta.len() {
                let d = self.damp[k];
                for c in 0..3 {
                    let mut v = eta[k][c];
                    if self.nonlinear {
                        v += self.drift[k][c] * dt;
                    }
                    if state_dependent {
                        v += self.deriv_c[k][c];
                    }
                    eta[k][c] = v * d;
                }
            }
        }
        if let Some(z) = self.z.as_mut() {
            for k in 0..z.len() {
                let d = self.damp[k];
                for c in 0..3 {
                    let mut v = z[k][c];
                    if noisy {
                        v += self.noise_c[k][c];
                    }
                    z[k][c] = v * d;
                }
            }
        }
        if self.nonlinear {
            self.workspace.bilinear_into(&self.x, &self.x, &mut self.drift);
        }
        for k in 0..self.x.len() {
            let d = self.damp[k];
            let f = forcing.map_or(self.dt_forcing[k], |g| [g[k][0] * dt, g[k][1] * dt, g[k][2] * dt]);
            for c in 0..3 {
                let mut v = self.x[k][c] + f[c];
                if self.nonlinear {
                    v += self.drift[k][c] * dt;
                }
                if noisy {
                    v += self.noise_c[k][c];
                }
                self.x[k][c] = v * d;
            }
        }
        self.step += 1;
        let a2 = self.a_norm_sq();
        if !(a2.sqrt() <= self.guard) {
            return Err(Error::BlowUp {
                step: self.step,
                time: self.time(),
                norm: a2.sqrt(),
                guard: self.guard,
            });
        }
        if self.step.is_multiple_of(CHECK_EVERY) {
            self.check_constraints();
        }
        self.refresh_noise();
        Ok(())
    }

    fn check_constraints(&self) {
        let scale = 1.0 + self.a_norm_sq().sqrt();
        let div = divergence_residual_raw(&self.space, &self.x);
        let real = reality_residual_raw(&self.space, &self.x);
        assert!(
            div <= 1e-9 * scale && real <= 1e-9 * scale,
            "constraint drift at step {}: divergence {div:e}, reality {real:e}",
            self.step
        );
    }
}

struct Recorder {
    record_eta: bool,
    times: Vec<f64>,
    states: Vec<SpectralField>,
    variation: Vec<SpectralField>,
    convolution: Vec<SpectralField>,
    increments: Vec<f64>,
}

impl Recorder {
    fn new(engine: &Engine, record_eta: bool, steps: usize) -> Self {
        let mut r = Recorder {
            record_eta,
            times: Vec::with_capacity(steps + 1),
            states: Vec::with_capacity(steps + 1),
            variation: Vec::new(),
            convolution: Vec::new(),
            increments: Vec::with_capacity(steps * engine.dim()),
        };
        r.push(engine);
        r
    }

    fn push(&mut self, e: &Engine) {
        self.times.push(e.time());
        self.states.push(e.x_field());
        if let Some(z) = e.z_field() {
            self.convolution.push(z);
        }
        if self.record_eta {
            self.variation.push(e.eta_field(0));
        }
    }

    fn finish(self, cfg: &SimConfig, replica: u64, rng_word_pos: Option<u128>) -> Trajectory {
        Trajectory {
            dt: cfg.dt,
            seed: cfg.seed,
            replica,
            times: self.times,
            states: self.states,
            variation: self.record_eta.then_some(self.variation),
            convolution: (!self.convolution.is_empty()).then_some(self.convolution),
            increments: self.increments,
            rng_word_pos,
        }
    }
}

fn check_space(cfg: &SimConfig, x: &SpectralField, what: &str) -> Result<()> {
    if !x.is_valid(1e-10 * (1.0 + x.norm())) {
        return invalid(format!("{what} must be a real divergence-free field"));
    }
    let _ = cfg;
    Ok(())
}

fn run_recorded(
    cfg: &SimConfig,
    mut engine: Engine,
    record_eta: bool,
    replica: u64,
    mut rng: ChaCha8Rng,
    steps: usize,
) -> Result<Trajectory> {
    let mut rec = Recorder::new(&engine, record_eta, steps);
    let mut dw = vec![0.0; engine.dim()];
    for _ in 0..steps {
        engine.sample_increment(&mut rng, &mut dw);
        engine.advance(&dw, None)?;
        rec.increments.extend_from_slice(&dw);
        rec.push(&engine);
    }
    Ok(rec.finish(cfg, replica, Some(rng.get_word_pos())))
}

/// Simulates replica 0 of `(x0, cfg)`, recording `X`, `Z` and increments.
pub fn simulate(x0: &SpectralField, cfg: &SimConfig) -> Result<Trajectory> {
    simulate_replica(x0, cfg, 0)
}

/// Simulates replica `replica` on its own stream.
pub fn simulate_replica(x0: &SpectralField, cfg: &SimConfig, replica: u64) -> Result<Trajectory> {
    check_space(cfg, x0, "initial condition")?;
    let engine = Engine::new(cfg, x0, &[], true);
    let rng = stream_rng(cfg.seed, tags::DYNAMICS, replica);
    run_recorded(cfg, engine, false, replica, rng, cfg.steps())
}

/// Simulates `X` together with `η^h`, driven by the same increments as
/// [`simulate`] for the same seed.
pub fn simulate_with_variation(x0: &SpectralField, h: &SpectralField, cfg: &SimConfig) -> Result<Trajectory> {
    simulate_with_variation_replica(x0, h, cfg, 0)
}

pub fn simulate_with_variation_replica(
    x0: &SpectralField,
    h: &SpectralField,
    cfg: &SimConfig,
    replica: u64,
) -> Result<Trajectory> {
    check_space(cfg, x0, "initial condition")?;
    check_space(cfg, h, "direction h")?;
    let engine = Engine::new(cfg, x0, std::slice::from_ref(h), true);
    let rng = stream_rng(cfg.seed, tags::DYNAMICS, replica);
    run_recorded(cfg, engine, true, replica, rng, cfg.steps())
}

/// Integrates `dX/dt = AX + b_m(X) + forcing(t)` with `Φ ≡ 0` up to
/// `horizon`. The configured forcing `f` is replaced by the schedule.
pub fn deterministic_solve(
    x0: &SpectralField,
    forcing: &(impl ForcingSchedule + ?Sized),
    horizon: f64,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    check_space(cfg, x0, "initial condition")?;
    let steps = cfg.grid_steps(horizon)?;
    let mut engine = Engine::new(cfg, x0, &[], false).deterministic();
    let mut rec = Recorder::new(&engine, false, steps);
    let dw = vec![0.0; engine.dim()];
    for n in 0..steps {
        let g = forcing.forcing_at(n, cfg.dt);
        if !g.space().same(engine.space()) {
            return invalid("forcing lives at a different cutoff than the simulation space");
        }
        engine.advance(&dw, Some(g.coeffs()))?;
        rec.push(&engine);
    }
    rec.increments = vec![0.0; steps * engine.dim()];
    Ok(rec.finish(cfg, 0, None))
}

/// Re-integrates from `x0` with the increments stored in `traj`.
pub fn replay(traj: &Trajectory, x0: &SpectralField, cfg: &SimConfig) -> Result<Trajectory> {
    check_space(cfg, x0, "initial condition")?;
    let steps = traj.steps();
    if (traj.dt - cfg.dt).abs() > 1e-15 * cfg.dt || traj.dim() != cfg.space.dim() {
        return invalid(format!(
            "trajectory grid (dt = {}, dim = {}) does not match the configuration (dt = {}, dim = {})",
            traj.dt,
            traj.dim(),
            cfg.dt,
            cfg.space.dim()
        ));
    }
    if traj.increments.len() != steps * traj.dim() {
        return invalid("trajectory does not carry a full increment record");
    }
    let mut engine = Engine::new(cfg, x0, &[], traj.convolution.is_some());
    let mut rec = Recorder::new(&engine, false, steps);
    for n in 0..steps {
        let dw = traj.increment(n);
        engine.advance(dw, None)?;
        rec.increments.extend_from_slice(dw);
        rec.push(&engine);
    }
    Ok(rec.finish(cfg, traj.replica, traj.rng_word_pos))
}

/// Continues a generator-driven trajectory up to `cfg.horizon()` on the
/// same stream. The result equals a single run to the longer horizon.
pub fn resume(traj: &Trajectory, cfg: &SimConfig) -> Result<Trajectory> {
    let Some(pos) = traj.rng_word_pos else {
        return invalid("trajectory has no generator position to resume from");
    };
    if (traj.dt - cfg.dt).abs() > 1e-15 * cfg.dt || traj.dim() != cfg.space.dim() || traj.seed != cfg.seed {
        return invalid("checkpoint does not match the configuration (dt, cutoff or seed)");
    }
    let total = cfg.steps();
    let done = traj.steps();
    if total < done {
        return invalid(format!("horizon {} lies before the checkpoint end", cfg.horizon));
    }
    let etas: Vec<SpectralField> = traj
        .variation
        .as_ref()
        .map(|v| vec![v.last().expect("nonempty").clone()])
        .unwrap_or_default();
    let mut engine = Engine::new(cfg, traj.final_state(), &etas, traj.convolution.is_some());
    let z_last = traj.convolution.as_ref().map(|z| z.last().expect("nonempty").coeffs().to_vec());
    let x_last = traj.final_state().coeffs().to_vec();
    let eta_last: Vec<&[Coeff]> = etas.iter().map(|e| e.coeffs()).collect();
    engine.set_state(&x_last, z_last.as_deref(), &eta_last, done);
    let mut rng = stream_rng(cfg.seed, tags::DYNAMICS, traj.replica);
    rng.set_word_pos(pos);
    let mut out = traj.clone();
    let mut dw = vec![0.0; engine.dim()];
    for _ in done..total {
        engine.sample_increment(&mut rng, &mut dw);
        engine.advance(&dw, None)?;
        out.increments.extend_from_slice(&dw);
        out.times.push(engine.time());
        out.states.push(engine.x_field());
        if let (Some(z), Some(f)) = (out.convolution.as_mut(), engine.z_field()) {
            z.push(f);
        }
        if let Some(v) = out.variation.as_mut() {
            v.push(engine.eta_field(0));
        }
    }
    out.rng_word_pos = Some(rng.get_word_pos());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseParams;
    use crate::spectral::WaveVector;
    use rand::SeedableRng;

    fn space(m: u32) -> Arc<GalerkinSpace> {
        GalerkinSpace::new(m).unwrap()
    }

    fn cfg(m: u32, horizon: f64) -> SimConfig {
        SimConfig::new(&space(m), 1e-3, horizon, NoiseOperator::new(NoiseParams::default()).unwrap(), 11).unwrap()
    }

    #[test]
    fn rejects_off_grid_horizon() {
        let s = space(1);
        let op = NoiseOperator::additive(1.3).unwrap();
        assert!(SimConfig::new(&s, 1e-3, 0.0015, op.clone(), 1).is_err());
        assert!(SimConfig::new(&s, 0.0, 1.0, op.clone(), 1).is_err());
        assert!(SimConfig::new(&s, 1e-3, 0.5, op, 1).unwrap().steps() == 500);
    }

    #[test]
    fn heat_decay_of_shear_mode() {
        let s = space(1);
        let c = cfg(1, 1.0);
        let k = WaveVector([1, 0, 0]);
        let x0 = SpectralField::cosine_mode(&s, k, [0.0, 1.0, 0.0], 1.0).unwrap();
        let tr = deterministic_solve(&x0, &SpectralField::zeros(&s), 1.0, &c).unwrap();
        let exact = x0.heat(1.0);
        let rel = tr.final_state().sub(&exact).norm() / exact.norm();
        assert!(rel < 1e-3, "{rel}");
    }

    #[test]
    fn same_seed_same_path() {
        let s = space(1);
        let c = cfg(1, 0.05);
        let x0 = SpectralField::random(&s, &mut ChaCha8Rng::seed_from_u64(1), 1.0);
        let a = simulate(&x0, &c).unwrap();
        let b = simulate(&x0, &c).unwrap();
        assert_eq!(a, b);
        let other = simulate(&x0, &c.clone().with_seed(12)).unwrap();
        assert_ne!(a.final_state(), other.final_state());
    }

    #[test]
    fn states_start_at_projection_and_stay_valid() {
        let big = space(2);
        let c = cfg(1, 0.05);
        let x0 = SpectralField::random(&big, &mut ChaCha8Rng::seed_from_u64(2), 1.0);
        let tr = simulate(&x0, &c).unwrap();
        assert_eq!(tr.states[0], x0.project(c.space()));
        assert!(tr.states.iter().all(|x| x.is_valid(1e-12)));
        assert!(tr.convolution.as_ref().unwrap().iter().all(|z| z.is_valid(1e-12)));
        assert_eq!(tr.increments.len(), 50 * 52);
    }

    #[test]
    fn zero_direction_gives_zero_variation() {
        let s = space(1);
        let c = cfg(1, 0.05);
        let x0 = SpectralField::random(&s, &mut ChaCha8Rng::seed_from_u64(3), 1.0);
        let tr = simulate_with_variation(&x0, &SpectralField::zeros(&s), &c).unwrap();
        assert!(tr.variation.unwrap().iter().all(|e| e.is_zero()));
        // X path is unchanged by tracking η
        assert_eq!(tr.states, simulate(&x0, &c).unwrap().states);
    }

    #[test]
    fn linear_variation_is_heat_flow() {
        let s = space(1);
        let c = SimConfig::new(&s, 1e-3, 0.2, NoiseOperator::additive(1.3).unwrap(), 5)
            .unwrap()
            .without_nonlinearity();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = SpectralField::random(&s, &mut rng, 1.0);
        let h = SpectralField::random(&s, &mut rng, 1.0);
        let tr = simulate_with_variation(&x0, &h, &c).unwrap();
        let eta = tr.variation.unwrap();
        let steps = eta.len() - 1;
        // the scheme's exact discrete heat flow
        let mut expected = h.clone();
        for _ in 0..steps {
            let mut next = expected.clone();
            for (i, z) in next.coeffs_mut().iter_mut().enumerate() {
                let d = 1.0 / (1.0 + 1e-3 * s.eigenvalues()[i]);
                for c in z.iter_mut() {
                    *c *= d;
                }
            }
            expected = next;
        }
        assert!(eta[steps].sub(&expected).norm() < 1e-14);
        assert!(eta[steps].sub(&h.heat(0.2)).norm() < 1e-3 * h.norm());
    }

    #[test]
    fn variation_matches_common_noise_difference() {
        let s = space(1);
        let c = SimConfig::new(&s, 1e-3, 0.3, NoiseOperator::new(NoiseParams { c: 0.2, ..NoiseParams::default() }).unwrap(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = SpectralField::random(&s, &mut rng, 1.0);
        let h = SpectralField::random(&s, &mut rng, 1.0);
        let tr = simulate_with_variation(&x0, &h, &c).unwrap();
        let eta = tr.variation.as_ref().unwrap().last().unwrap().clone();
        let errs: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&eps| {
                let mut xe = x0.clone();
                xe.axpy(eps, &h);
                let shifted = replay(&tr, &xe, &c).unwrap();
                shifted.final_state().sub(tr.final_state()).scaled(1.0 / eps).sub(&eta).norm()
            })
            .collect();
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
        assert!(errs[2] < 1e-3 * eta.norm(), "{errs:?}");
    }

    #[test]
    fn replay_is_exact() {
        let s = space(1);
        let c = cfg(1, 0.1);
        let x0 = SpectralField::random(&s, &mut ChaCha8Rng::seed_from_u64(6), 1.0);
        let tr = simulate(&x0, &c).unwrap();
        assert_eq!(replay(&tr, &x0, &c).unwrap().states, tr.states);
        let bad = c.clone().with_dt(5e-4).unwrap();
        assert!(replay(&tr, &x0, &bad).is_err());
    }

    #[test]
    fn zero_increments_replay_is_deterministic_solve() {
        let s = space(1);
        let f = SpectralField::random(&s, &mut ChaCha8Rng::seed_from_u64(7), 1.0);
        let c = cfg(1, 0.1).with_forcing(f.clone()).unwrap();
        let x0 = SpectralField::random(&s, &mut ChaCha8Rng::seed_from_u64(8), 1.0);
        let mut tr = simulate(&x0, &c).unwrap();
        tr.increments.iter_mut().for_each(|w| *w = 0.0);
        let a = replay(&tr, &x0, &c).unwrap();
        let b = deterministic_solve(&x0, &f, 0.1, &c).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn resume_equals_long_run() {
        let s = space(1);
        let x0 = SpectralField::random(&s, &mut ChaCha8Rng::seed_from_u64(9), 1.0);
        let short = cfg(1, 0.05);
        let long = cfg(1, 0.12);
        let first = simulate(&x0, &short).unwrap();
        let resumed = resume(&first, &long).unwrap();
        assert_eq!(resumed, simulate(&x0, &long).unwrap());
    }

    #[test]
    fn zero_noise_zero_forcing_is_dissipative() {
        let s = space(2);
        let c = cfg(2, 0.3);
        let x0 = SpectralField::random(&s, &mut ChaCha8Rng::seed_from_u64(10), 0.5).scaled(3.0);
        let tr = deterministic_solve(&x0, &SpectralField::zeros(&s), 0.3, &c).unwrap();
        for w in tr.states.windows(2) {
            assert!(w[1].norm() <= w[0].norm() * (1.0 + 1e-14));
        }
    }

    #[test]
    fn blow_up_guard_reports_step() {
        let s = space(1);
        let c = cfg(1, 0.1).with_guard(1e-3).unwrap();
        let x0 = SpectralField::random(&s, &mut ChaCha8Rng::seed_from_u64(11), 1.0);
        match simulate(&x0, &c) {
            Err(Error::BlowUp { step, guard, .. }) => {
                assert_eq!(step, 1);
                assert_eq!(guard, 1e-3);
            }
            other => panic!("expected blow-up, got {other:?}"),
        }
    }
}
