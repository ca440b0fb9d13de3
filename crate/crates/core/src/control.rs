//! Deterministic steering of the Galerkin flow between two states, and the
//! matching reachability checks.
//!
//! The control path follows the free flow from `x` up to `T*`, then moves
//! on a straight line to the target `x₀`, reaching it at `T`. The forcing
//! `ḡ` vanishes on `[0, T*]` and on the bridge is chosen so that one
//! semi-implicit step of
//! `dX = (AX + b(X) + ḡ) dt` maps `x̄(t_n)` exactly onto `x̄(t_{n+1})`:
//!
//! ```text
//! ḡ_n = (x̄_{n+1} - x̄_n)/dt - A x̄_{n+1} - b(x̄_n).
//! ```

use serde::{Deserialize, Serialize};

use crate::bilinear::{cutoff_weight, BilinearWorkspace};
use crate::error::{invalid, Error, Result};
use crate::parallel::fan_out;
use crate::rng::{stream_rng, tags};
use crate::sde::{Engine, ForcingSchedule, SimConfig};
use crate::spectral::SpectralField;
use crate::stats::{clopper_pearson, McEstimate};

use crate::kolmogorov::drive;

/// Smallest cutoff radius handed out, so a rest-state path still has a
/// positive `R`.
pub const MIN_RADIUS: f64 = 1e-6;

/// Halvings of `T/2` tried before giving up on a free-flow segment.
pub const MAX_HALVINGS: u32 = 30;

/// The steering path `x̄` with its cutoff radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    pub t_star: f64,
    pub horizon: f64,
    pub dt: f64,
    /// grid index of `T*`
    pub star_step: usize,
    pub steps: usize,
    pub start: SpectralField,
    /// `x̄(T*)`
    pub turn: SpectralField,
    pub target: SpectralField,
    /// `2 sup_t |A x̄(t)|`, floored at [`MIN_RADIUS`]
    pub radius: f64,
    /// `(t, x̄(t))` every `sample_every` steps plus `T*` and `T`
    pub samples: Vec<(f64, SpectralField)>,
}

impl ControlPath {
    /// `x̄` at grid index `step ≥ star_step` (the bridge is affine).
    pub fn bridge_at(&self, step: usize) -> SpectralField {
        let span = (self.steps - self.star_step) as f64;
        let s = ((step.clamp(self.star_step, self.steps) - self.star_step) as f64) / span;
        let mut x = self.turn.scaled(1.0 - s);
        x.axpy(s, &self.target);
        x
    }

    /// `ḡ` on step `step → step + 1`.
    pub fn forcing_at_step(&self, step: usize, workspace: &BilinearWorkspace) -> SpectralField {
        let space = self.start.space();
        if step < self.star_step || step >= self.steps {
            return SpectralField::zeros(space);
        }
        let now = self.bridge_at(step);
        let next = self.bridge_at(step + 1);
        let mut g = next.sub(&now).scaled(1.0 / self.dt);
        // -A x̄_{n+1} = |k|² x̄_{n+1}
        g.axpy(1.0, &next.fractional_power(1.0));
        let b = workspace.quadratic(&now).expect("path lives in the workspace space");
        g.axpy(-1.0, &b);
        g
    }

    /// `ḡ` as a forcing schedule for [`crate::sde::deterministic_solve`].
    pub fn forcing<'a>(&'a self, workspace: &'a BilinearWorkspace) -> ControlForcing<'a> {
        ControlForcing { path: self, workspace }
    }
}

/// Borrowed view of `ḡ` implementing [`ForcingSchedule`].
pub struct ControlForcing<'a> {
    path: &'a ControlPath,
    workspace: &'a BilinearWorkspace,
}

impl ForcingSchedule for ControlForcing<'_> {
    fn forcing_at(&self, step: usize, _dt: f64) -> SpectralField {
        self.path.forcing_at_step(step, self.workspace)
    }
}

fn free_flow(x: &SpectralField, steps: usize, cfg: &SimConfig, sample_every: usize) -> Result<Vec<(usize, SpectralField, f64)>> {
    let det = cfg.clone().without_noise();
    let mut e = Engine::new(&det, x, &[], false);
    let zero = vec![crate::spectral::COEFF_ZERO; x.space().len()];
    let dw = vec![0.0; e.dim()];
    let mut out = vec![(0, e.x_field(), e.a_norm_sq().sqrt())];
    let mut sup = out[0].2;
    for n in 1..=steps {
        e.advance(&dw, Some(&zero))?;
        sup = sup.max(e.a_norm_sq().sqrt());
        if n % sample_every == 0 || n == steps {
            out.push((n, e.x_field(), sup));
        }
    }
    Ok(out)
}

/// Builds the steering path from `x` to `x0` over `[0, horizon]`.
/// `T*` is the largest `T/2^j`, `j ≥ 1`, on which the free flow stays
/// below the guard. `sample_every` sets the spacing of stored samples.
pub fn build_control(
    x: &SpectralField,
    x0: &SpectralField,
    horizon: f64,
    cfg: &SimConfig,
    sample_every: usize,
) -> Result<ControlPath> {
    let space = cfg.space();
    if !x.space().same(space) || !x0.space().same(space) {
        return invalid("start and target must live in the simulation space");
    }
    if !(horizon > 0.0) {
        return invalid(format!("horizon must be positive, got {horizon}"));
    }
    let dt = cfg.dt();
    let steps = cfg.grid_steps(horizon)?;
    let every = sample_every.max(1);
    let mut last_err = None;
    for j in 1..=MAX_HALVINGS {
        let star_step = steps >> j;
        if star_step == 0 {
            break;
        }
        match free_flow(x, star_step, cfg, every) {
            Ok(flow) => {
                let (_, turn, sup_free) = flow.last().cloned().expect("nonempty");
                let sup = sup_free.max(turn.a_norm()).max(x0.a_norm());
                let mut samples: Vec<(f64, SpectralField)> =
                    flow.into_iter().map(|(n, f, _)| (n as f64 * dt, f)).collect();
                let mut cp = ControlPath {
                    t_star: star_step as f64 * dt,
                    horizon: steps as f64 * dt,
                    dt,
                    star_step,
                    steps,
                    start: x.clone(),
                    turn,
                    target: x0.clone(),
                    radius: (2.0 * sup).max(MIN_RADIUS),
                    samples: Vec::new(),
                };
                let next = (star_step / every + 1) * every;
                for n in (next..steps).step_by(every) {
                    samples.push((n as f64 * dt, cp.bridge_at(n)));
                }
                samples.push((cp.horizon, cp.target.clone()));
                cp.samples = samples;
                return Ok(cp);
            }
            Err(e @ Error::BlowUp { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(Error::ConstructionFailed(format!(
        "free flow from the start state breaches the guard on every dyadic T* ≤ T/2 ({})",
        last_err.map_or_else(|| "horizon shorter than two steps".to_string(), |e| e.to_string())
    )))
}

/// Result of integrating the controlled cutoff system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachabilityReport {
    pub epsilon: f64,
    /// `|A(X(T) - x₀)|`
    pub distance: f64,
    pub hit: bool,
    pub sup_a_norm: f64,
    pub radius: f64,
    /// `sup_t |AX(t)| ≤ R (1 + 1e-9)`: the cutoff never acted
    pub within_radius: bool,
    /// time of the first guard breach, if any
    pub breach_time: Option<f64>,
}

/// Integrates `dX = (AX + ϑ(|AX|/R) b(X) + ḡ) dt` from `x` with the
/// scheme of the simulator and compares `X(T)` against `x0`.
pub fn verify_reachability(
    cp: &ControlPath,
    x: &SpectralField,
    x0: &SpectralField,
    epsilon: f64,
    cfg: &SimConfig,
) -> Result<ReachabilityReport> {
    if !(epsilon > 0.0) {
        return invalid(format!("epsilon must be positive, got {epsilon}"));
    }
    if (cp.dt - cfg.dt()).abs() > 1e-15 * cfg.dt() {
        return invalid("control path was built on a different time step");
    }
    let space = cfg.space();
    let ws = cfg.workspace();
    let damp: Vec<f64> = space.eigenvalues().iter().map(|mu| 1.0 / (1.0 + cp.dt * mu)).collect();
    let mut state = x.project(space);
    let mut sup = state.a_norm();
    let mut breach = None;
    for n in 0..cp.steps {
        let g = cp.forcing_at_step(n, ws);
        let w = cutoff_weight(state.a_norm() / cp.radius);
        let b = ws.quadratic(&state)?;
        let mut next = state.clone();
        next.axpy(cp.dt * w, &b);
        next.axpy(cp.dt, &g);
        let coeffs: Vec<_> = next
            .coeffs()
            .iter()
            .zip(&damp)
            .map(|(c, d)| [c[0] * d, c[1] * d, c[2] * d])
            .collect();
        state = SpectralField::from_raw(space, coeffs);
        let a = state.a_norm();
        sup = sup.max(a);
        if !(a <= cfg.guard()) {
            breach = Some((n + 1) as f64 * cp.dt);
            break;
        }
    }
    let distance = state.sub(&x0.project(space)).a_norm();
    Ok(ReachabilityReport {
        epsilon,
        distance,
        hit: breach.is_none() && distance < epsilon,
        sup_a_norm: sup,
        radius: cp.radius,
        within_radius: sup <= cp.radius * (1.0 + 1e-9),
        breach_time: breach,
    })
}

/// Terminal distances of the controlled system from perturbed starts
/// `x + s·ξ`, `ξ` a fixed random direction with `|Aξ| = 1`, for each size
/// `s`. Diagnostic only.
pub fn perturbation_sweep(
    cp: &ControlPath,
    x: &SpectralField,
    x0: &SpectralField,
    sizes: &[f64],
    cfg: &SimConfig,
) -> Result<Vec<(f64, f64)>> {
    let space = cfg.space();
    let mut rng = stream_rng(cfg.seed(), tags::PROBES, 0);
    let xi = SpectralField::random(space, &mut rng, 1.0);
    let xi = xi.scaled(1.0 / xi.a_norm());
    sizes
        .iter()
        .map(|&s| {
            let mut start = x.project(space);
            start.axpy(s, &xi);
            let r = verify_reachability(cp, &start, x0, 1.0, cfg)?;
            Ok((s, if r.breach_time.is_some() { f64::INFINITY } else { r.distance }))
        })
        .collect()
}

/// Hit frequency of the D(A) ball `B(x₀, ε)` at the path horizon under the
/// uncontrolled dynamics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReachProbability {
    pub estimate: McEstimate,
    pub hits: usize,
    pub trials: usize,
    /// exact two-sided binomial bounds at `confidence`
    pub lower: f64,
    pub upper: f64,
    pub confidence: f64,
    /// `lower > 0`
    pub positive: bool,
}

pub fn stochastic_reach_probability(
    cp: &ControlPath,
    x: &SpectralField,
    x0: &SpectralField,
    epsilon: f64,
    cfg: &SimConfig,
    n: usize,
) -> Result<ReachProbability> {
    if !(epsilon > 0.0) {
        return invalid(format!("epsilon must be positive, got {epsilon}"));
    }
    if n < 2 {
        return invalid("need at least 2 trials");
    }
    let space = cfg.space();
    let xp = x.project(space);
    let target = x0.project(space);
    let steps = cfg.grid_steps(cp.horizon)?;
    let (hits, censored) = fan_out(n, |r| {
        let mut e = Engine::new(cfg, &xp, &[], false);
        let mut rng = stream_rng(cfg.seed(), tags::DYNAMICS, r);
        drive(&mut e, &mut rng, steps, |_| Ok(()))?;
        Ok(if e.x_field().sub(&target).a_norm() < epsilon { 1.0 } else { 0.0 })
    })?;
    let k = hits.iter().filter(|&&h| h == 1.0).count();
    let trials = hits.len();
    let confidence = 0.95;
    let (lower, upper) = clopper_pearson(k, trials, 1.0 - confidence);
    Ok(ReachProbability {
        estimate: McEstimate::from_samples(&hits, censored, cfg.seed()),
        hits: k,
        trials,
        lower,
        upper,
        confidence,
        positive: lower > 0.0,
    })
}
