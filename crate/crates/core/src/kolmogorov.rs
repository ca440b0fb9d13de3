//! Monte Carlo estimators for the Galerkin transition semigroup
//! `P_t φ(x) = E φ(X(t, x))`, the damped Feynman–Kac semigroup
//! `S_t φ(x) = E[exp(-K ∫₀ᵗ |AX|² ds) φ(X(t, x))]` and its gradient through
//! the Bismut–Elworthy–Li representation
//!
//! ```text
//! D S_t φ(x)·h = E[ e^{-K∫|AX|²} φ(X(t)) ( (1/t) ∫₀ᵗ (Φ^{-1}(X) η^h, dW)
//!                                         - 2K ∫₀ᵗ (1 - s/t)(AX, Aη^h) ds ) ].
//! ```
//!
//! The damping term enters with a minus sign: it is the derivative of the
//! weight along the shifted path `X + (1 - s/t) εη^h`.
//!
//! Time integrals are left-endpoint sums on the simulation grid. Every
//! replica runs on its own stream (see [`crate::rng`]), so estimates are
//! reproducible for a seed and do not depend on the worker count.

use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::parallel::fan_out;
use crate::rng::{stream_rng, tags};
use crate::sde::{Engine, SimConfig};
use crate::spectral::{Coeff, SpectralField};
use crate::stats::gauss_legendre;

pub use crate::stats::McEstimate;

/// Function classes an observable is declared to belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservableClass {
    /// `|φ(x)| ≤ bound (1 + |Ax|)^k`
    Ck { k: u32 },
    /// `|φ(y) - φ(x)| ≤ bound |A(y-x)| (1 + |Ax|² + |Ay|²)`
    EClass,
    /// `|φ| ≤ bound`
    Bounded,
    /// depends only on the first `level` real coordinates
    Cylindrical { level: usize },
}

type Evaluator = Arc<dyn Fn(&SpectralField) -> f64 + Send + Sync>;

/// Test function with class metadata.
#[derive(Clone)]
pub struct Observable {
    name: String,
    eval: Evaluator,
    classes: Vec<ObservableClass>,
    bound: f64,
}

impl fmt::Debug for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Observable")
            .field("name", &self.name)
            .field("classes", &self.classes)
            .field("bound", &self.bound)
            .finish()
    }
}

fn coord(x: &SpectralField, n: usize) -> f64 {
    x.real_coords().get(n).copied().unwrap_or(0.0)
}

impl Observable {
    pub fn custom(
        name: impl Into<String>,
        classes: Vec<ObservableClass>,
        bound: f64,
        eval: impl Fn(&SpectralField) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Observable {
            name: name.into(),
            eval: Arc::new(eval),
            classes,
            bound,
        }
    }

    pub fn constant(c: f64) -> Self {
        Observable::custom(
            format!("const({c})"),
            vec![ObservableClass::Bounded, ObservableClass::EClass, ObservableClass::Cylindrical { level: 0 }],
            c.abs(),
            move |_| c,
        )
    }

    /// `|x|²`
    pub fn norm_sq() -> Self {
        Observable::custom("norm-sq", vec![ObservableClass::Ck { k: 2 }], 1.0, |x| x.norm().powi(2))
    }

    /// `|(-A)^{1/2} x|²`
    pub fn enstrophy() -> Self {
        Observable::custom("enstrophy", vec![ObservableClass::Ck { k: 2 }], 1.0, |x| x.sobolev_norm(0.5).powi(2))
    }

    /// `|x|² / (1 + |x|²)`
    pub fn bounded_energy() -> Self {
        Observable::custom(
            "energy-bounded",
            vec![ObservableClass::Bounded, ObservableClass::EClass],
            1.0,
            |x| {
                let e = x.norm().powi(2);
                e / (1.0 + e)
            },
        )
    }

    /// `cos(a q_n(x))`
    pub fn cos_coord(n: usize, a: f64) -> Self {
        Observable::custom(
            format!("cos(q{n}*{a})"),
            vec![
                ObservableClass::Bounded,
                ObservableClass::EClass,
                ObservableClass::Cylindrical { level: n + 1 },
            ],
            a.abs().max(1.0),
            move |x| (a * coord(x, n)).cos(),
        )
    }

    /// `sin(a q_n(x))`
    pub fn sin_coord(n: usize, a: f64) -> Self {
        Observable::custom(
            format!("sin(q{n}*{a})"),
            vec![
                ObservableClass::Bounded,
                ObservableClass::EClass,
                ObservableClass::Cylindrical { level: n + 1 },
            ],
            a.abs().max(1.0),
            move |x| (a * coord(x, n)).sin(),
        )
    }

    /// `tanh(a q_n(x))`
    pub fn tanh_coord(n: usize, a: f64) -> Self {
        Observable::custom(
            format!("tanh(q{n}*{a})"),
            vec![
                ObservableClass::Bounded,
                ObservableClass::EClass,
                ObservableClass::Cylindrical { level: n + 1 },
            ],
            a.abs().max(1.0),
            move |x| (a * coord(x, n)).tanh(),
        )
    }

    /// `exp(-|P_N x|² / w)` on the first `level` coordinates.
    pub fn gaussian_bump(level: usize, width: f64) -> Self {
        Observable::custom(
            format!("bump(P{level},{width})"),
            vec![
                ObservableClass::Bounded,
                ObservableClass::EClass,
                ObservableClass::Cylindrical { level },
            ],
            (2.0 / width).sqrt().max(1.0),
            move |x| {
                let q = x.real_coords();
                let r2: f64 = q.iter().take(level).map(|v| v * v).sum();
                (-r2 / width).exp()
            },
        )
    }

    /// Builds one of the named observables accepted on the command line:
    /// `one`, `norm-sq`, `enstrophy`, `energy-bounded`, `cos-q<n>`,
    /// `sin-q<n>`, `tanh-q<n>`, `bump-<N>`.
    pub fn by_name(name: &str) -> Result<Self> {
        let idx = |prefix: &str| name.strip_prefix(prefix).and_then(|s| s.parse::<usize>().ok());
        Ok(match name {
            "one" => Observable::constant(1.0),
            "norm-sq" => Observable::norm_sq(),
            "enstrophy" => Observable::enstrophy(),
            "energy-bounded" => Observable::bounded_energy(),
            _ => {
                if let Some(n) = idx("cos-q") {
                    Observable::cos_coord(n, 1.0)
                } else if let Some(n) = idx("sin-q") {
                    Observable::sin_coord(n, 1.0)
                } else if let Some(n) = idx("tanh-q") {
                    Observable::tanh_coord(n, 1.0)
                } else if let Some(n) = idx("bump-") {
                    Observable::gaussian_bump(n, 1.0)
                } else {
                    return invalid(format!("unknown observable '{name}'"));
                }
            }
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn classes(&self) -> &[ObservableClass] {
        &self.classes
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// `‖φ‖₀` when the observable is declared bounded.
    pub fn sup_norm(&self) -> Option<f64> {
        self.classes.contains(&ObservableClass::Bounded).then_some(self.bound)
    }

    pub fn evaluate(&self, x: &SpectralField) -> f64 {
        (self.eval)(x)
    }

    /// Checks every declared class inequality on the samples (and on all
    /// sample pairs for the E class).
    pub fn check_classes(&self, samples: &[SpectralField]) -> bool {
        let tol = 1e-12;
        self.classes.iter().all(|c| match c {
            ObservableClass::Bounded => samples.iter().all(|x| self.evaluate(x).abs() <= self.bound + tol),
            ObservableClass::Ck { k } => samples
                .iter()
                .all(|x| self.evaluate(x).abs() <= self.bound * (1.0 + x.a_norm()).powi(*k as i32) + tol),
            ObservableClass::EClass => samples.iter().enumerate().all(|(i, x)| {
                samples[i + 1..].iter().all(|y| {
                    let lhs = (self.evaluate(y) - self.evaluate(x)).abs();
                    let rhs = self.bound * y.sub(x).a_norm() * (1.0 + x.a_norm().powi(2) + y.a_norm().powi(2));
                    lhs <= rhs + tol
                })
            }),
            ObservableClass::Cylindrical { level } => samples.iter().all(|x| {
                let mut q = x.real_coords();
                q.iter_mut().skip(*level).for_each(|v| *v = 0.0);
                let p = SpectralField::from_real_coords(x.space(), &q).expect("same dim");
                (self.evaluate(x) - self.evaluate(&p)).abs() <= tol * (1.0 + self.evaluate(x).abs())
            }),
        })
    }
}

pub(crate) enum Visit<'a> {
    /// state at grid point `n` (after `n` steps)
    Point(&'a Engine),
    /// about to take a step with this increment
    Step(&'a Engine, &'a [f64]),
}

/// Drives `engine` for `steps` steps on `rng`, reporting grid points and
/// increments to `visit`.
pub(crate) fn drive(
    engine: &mut Engine,
    rng: &mut ChaCha8Rng,
    steps: usize,
    mut visit: impl FnMut(Visit<'_>) -> Result<()>,
) -> Result<()> {
    let mut dw = vec![0.0; engine.dim()];
    visit(Visit::Point(engine))?;
    for _ in 0..steps {
        engine.sample_increment(rng, &mut dw);
        visit(Visit::Step(engine, &dw))?;
        engine.advance(&dw, None)?;
        visit(Visit::Point(engine))?;
    }
    Ok(())
}

fn check_samples(n: usize) -> Result<()> {
    if n < 2 {
        return invalid(format!("need at least 2 samples, got {n}"));
    }
    Ok(())
}

fn check_time(t: f64, cfg: &SimConfig) -> Result<usize> {
    if !(t >= 0.0) || t > cfg.horizon() * (1.0 + 1e-12) {
        return invalid(format!("t = {t} outside [0, T = {}]", cfg.horizon()));
    }
    cfg.grid_steps(t)
}

fn estimates_from_columns(columns: Vec<Vec<f64>>, censored: usize, seed: u64) -> Vec<McEstimate> {
    columns
        .iter()
        .map(|c| McEstimate::from_samples(c, censored, seed))
        .collect()
}

fn transpose(rows: Vec<Vec<f64>>, width: usize) -> Vec<Vec<f64>> {
    let mut cols = vec![Vec::with_capacity(rows.len()); width];
    for r in rows {
        for (c, v) in cols.iter_mut().zip(r) {
            c.push(v);
        }
    }
    cols
}

/// Per-replica rows of `exp(-K ∫|AX|²) φ(X(t))`, laid out `[K][t]`.
pub(crate) fn semigroup_rows(
    phi: &Observable,
    ks: &[f64],
    idx: &[usize],
    xp: &SpectralField,
    cfg: &SimConfig,
    n: usize,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let last = idx.iter().copied().max().unwrap_or(0);
    let width = ks.len() * idx.len();
    fan_out(n, |r| {
        let mut engine = Engine::new(cfg, xp, &[], false);
        let mut rng = stream_rng(cfg.seed(), tags::DYNAMICS, r);
        let mut row = vec![0.0; width];
        let mut integral = 0.0;
        drive(&mut engine, &mut rng, last, |v| {
            match v {
                Visit::Step(e, _) => integral += e.a_norm_sq() * cfg.dt(),
                Visit::Point(e) => {
                    let step = e.step_index();
                    if idx.contains(&step) {
                        let val = phi.evaluate(&e.x_field());
                        for (j, _) in idx.iter().enumerate().filter(|(_, &s)| s == step) {
                            for (ki, k) in ks.iter().enumerate() {
                                let w = if *k == 0.0 { 1.0 } else { (-k * integral).exp() };
                                row[ki * idx.len() + j] = w * val;
                            }
                        }
                    }
                }
            }
            Ok(())
        })?;
        Ok(row)
    })
}

/// Per-replica BEL integrands, laid out `[t][h]`.
pub(crate) fn bel_rows(
    phi: &Observable,
    k_damp: f64,
    idx: &[usize],
    xp: &SpectralField,
    dirs: &[SpectralField],
    cfg: &SimConfig,
    n: usize,
) -> Result<(Vec<Vec<f64>>, usize)> {
    let nd = dirs.len();
    let last = idx.iter().copied().max().unwrap_or(0);
    let dt = cfg.dt();
    let dim = cfg.space().dim();
    fan_out(n, |r| {
        let mut engine = Engine::new(cfg, xp, dirs, false);
        let mut rng = stream_rng(cfg.seed(), tags::DYNAMICS, r);
        let mut row = vec![0.0; idx.len() * nd];
        let mut potential = 0.0;
        let mut stoch = vec![0.0; nd];
        let mut lin = vec![0.0; nd];
        let mut lin_s = vec![0.0; nd];
        let mut qeta = vec![0.0; dim];
        let mut v = vec![0.0; dim];
        drive(&mut engine, &mut rng, last, |visit| {
            match visit {
                Visit::Step(e, dw) => {
                    let s = e.time();
                    for i in 0..nd {
                        e.eta_coords(i, &mut qeta);
                        e.frozen().apply_inverse(&qeta, &mut v)?;
                        stoch[i] += v.iter().zip(dw).map(|(a, b)| a * b).sum::<f64>();
                        if k_damp != 0.0 {
                            let a = crate::spectral::a_inner_raw(e.space(), &e.x, &e.etas[i]) * dt;
                            lin[i] += a;
                            lin_s[i] += s * a;
                        }
                    }
                    potential += e.a_norm_sq() * dt;
                }
                Visit::Point(e) => {
                    let step = e.step_index();
                    if let Some(j) = idx.iter().position(|&s| s == step) {
                        let t = step as f64 * dt;
                        let w = if k_damp == 0.0 { 1.0 } else { (-k_damp * potential).exp() };
                        let wphi = w * phi.evaluate(&e.x_field());
                        for i in 0..nd {
                            let i1 = stoch[i] / t;
                            let i2 = 2.0 * k_damp * (lin[i] - lin_s[i] / t);
                            let val = wphi * (i1 - i2);
                            for (jj, _) in idx.iter().enumerate().skip(j).filter(|(_, &s)| s == step) {
                                row[jj * nd + i] = val;
                            }
                        }
                    }
                }
            }
            Ok(())
        })?;
        Ok(row)
    })
}

/// `P_t φ(x)` at each of `times`, from the same `n` replicas.
pub fn estimate_semigroup_at(
    phi: &Observable,
    times: &[f64],
    x: &SpectralField,
    cfg: &SimConfig,
    n: usize,
) -> Result<Vec<McEstimate>> {
    damped_semigroup_at(phi, &[0.0], times, x, cfg, n).map(|mut v| v.remove(0))
}

/// `P_t φ(x) = E φ(X(t, P_m x))`.
pub fn estimate_semigroup(phi: &Observable, t: f64, x: &SpectralField, cfg: &SimConfig, n: usize) -> Result<McEstimate> {
    estimate_semigroup_at(phi, &[t], x, cfg, n).map(|mut v| v.remove(0))
}

/// `S_t φ(x)` with damping `K`.
pub fn estimate_feynman_kac(
    phi: &Observable,
    k_damp: f64,
    t: f64,
    x: &SpectralField,
    cfg: &SimConfig,
    n: usize,
) -> Result<McEstimate> {
    damped_semigroup_at(phi, &[k_damp], &[t], x, cfg, n).map(|v| v[0][0].clone())
}

/// `S_t φ(x)` for every `K` in `ks` on shared noise, indexed `[K][t]`.
pub fn damped_semigroup_at(
    phi: &Observable,
    ks: &[f64],
    times: &[f64],
    x: &SpectralField,
    cfg: &SimConfig,
    n: usize,
) -> Result<Vec<Vec<McEstimate>>> {
    check_samples(n)?;
    if ks.iter().any(|k| !(*k >= 0.0)) {
        return invalid("damping K must be nonnegative");
    }
    let idx: Vec<usize> = times.iter().map(|&t| check_time(t, cfg)).collect::<Result<_>>()?;
    let xp = x.project(cfg.space());
    let width = ks.len() * idx.len();
    if idx.iter().all(|&i| i == 0) {
        let v = phi.evaluate(&xp);
        return Ok(vec![vec![McEstimate::exact(v, n, cfg.seed()); idx.len()]; ks.len()]);
    }
    let (rows, censored) = semigroup_rows(phi, ks, &idx, &xp, cfg, n)?;
    let cols = estimates_from_columns(transpose(rows, width), censored, cfg.seed());
    Ok(cols.chunks(idx.len()).map(|c| c.to_vec()).collect())
}

/// BEL gradient estimates `D S_t φ(x)·h` for every time in `times` and
/// direction in `directions`, from shared paths. Indexed `[t][h]`.
pub fn bel_gradient_sweep(
    phi: &Observable,
    k_damp: f64,
    times: &[f64],
    x: &SpectralField,
    directions: &[SpectralField],
    cfg: &SimConfig,
    n: usize,
) -> Result<Vec<Vec<McEstimate>>> {
    check_samples(n)?;
    if !(k_damp >= 0.0) {
        return invalid("damping K must be nonnegative");
    }
    let idx: Vec<usize> = times
        .iter()
        .map(|&t| {
            if !(t > 0.0) {
                return invalid("the gradient estimator needs t > 0");
            }
            check_time(t, cfg)
        })
        .collect::<Result<_>>()?;
    let space = cfg.space();
    let xp = x.project(space);
    let dirs: Vec<SpectralField> = directions.iter().map(|h| h.project(space)).collect();
    let nd = dirs.len();
    let (rows, censored) = bel_rows(phi, k_damp, &idx, &xp, &dirs, cfg, n)?;
    let cols = estimates_from_columns(transpose(rows, idx.len() * nd), censored, cfg.seed());
    Ok(cols.chunks(nd.max(1)).map(|c| c.to_vec()).collect())
}

/// BEL estimate of `D S_t φ(x)·h`.
pub fn estimate_bel_gradient(
    phi: &Observable,
    k_damp: f64,
    t: f64,
    x: &SpectralField,
    h: &SpectralField,
    cfg: &SimConfig,
    n: usize,
) -> Result<McEstimate> {
    let v = bel_gradient_sweep(phi, k_damp, &[t], x, std::slice::from_ref(h), cfg, n)?;
    Ok(v[0][0].clone())
}

/// Gradient estimates by two methods on the same replicas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientComparison {
    pub bel: McEstimate,
    pub finite_difference: McEstimate,
    /// per-replica `bel - fd`
    pub difference: McEstimate,
    pub epsilon: f64,
    pub k_damp: f64,
    pub t: f64,
}

impl GradientComparison {
    pub fn relative_error(&self) -> f64 {
        (self.bel.value - self.finite_difference.value).abs() / self.finite_difference.value.abs()
    }
}

/// Common-random-number finite difference
/// `(S_tφ(x + εh) - S_tφ(x)) / ε` next to the BEL estimate, both driven
/// by the same increments.
pub fn compare_bel_finite_difference(
    phi: &Observable,
    k_damp: f64,
    t: f64,
    x: &SpectralField,
    h: &SpectralField,
    epsilon: f64,
    cfg: &SimConfig,
    n: usize,
) -> Result<GradientComparison> {
    check_samples(n)?;
    if !(epsilon > 0.0) {
        return invalid("finite-difference step must be positive");
    }
    if !(t > 0.0) {
        return invalid("the gradient estimator needs t > 0");
    }
    let steps = check_time(t, cfg)?;
    let space = cfg.space();
    let xp = x.project(space);
    let hp = h.project(space);
    let mut xe = xp.clone();
    xe.axpy(epsilon, &hp);
    let dt = cfg.dt();
    let dim = space.dim();
    let (rows, censored) = fan_out(n, |r| {
        let mut base = Engine::new(cfg, &xp, std::slice::from_ref(&hp), false);
        let mut shifted = Engine::new(cfg, &xe, &[], false);
        let mut rng = stream_rng(cfg.seed(), tags::DYNAMICS, r);
        let mut dw = vec![0.0; dim];
        let (mut qeta, mut v) = (vec![0.0; dim], vec![0.0; dim]);
        let (mut stoch, mut lin, mut lin_s, mut pot, mut pot_e) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for step in 0..steps {
            base.sample_increment(&mut rng, &mut dw);
            let s = step as f64 * dt;
            base.eta_coords(0, &mut qeta);
            base.frozen().apply_inverse(&qeta, &mut v)?;
            stoch += v.iter().zip(&dw).map(|(a, b)| a * b).sum::<f64>();
            let a = crate::spectral::a_inner_raw(space, &base.x, &base.etas[0]) * dt;
            lin += a;
            lin_s += s * a;
            pot += base.a_norm_sq() * dt;
            pot_e += shifted.a_norm_sq() * dt;
            base.advance(&dw, None)?;
            shifted.advance(&dw, None)?;
        }
        let w = (-k_damp * pot).exp();
        let we = (-k_damp * pot_e).exp();
        let f = w * phi.evaluate(&base.x_field());
        let fe = we * phi.evaluate(&shifted.x_field());
        let bel = f * (stoch / t - 2.0 * k_damp * (lin - lin_s / t));
        let fd = (fe - f) / epsilon;
        Ok([bel, fd, bel - fd])
    })?;
    let col = |i: usize| -> Vec<f64> { rows.iter().map(|r| r[i]).collect() };
    Ok(GradientComparison {
        bel: McEstimate::from_samples(&col(0), censored, cfg.seed()),
        finite_difference: McEstimate::from_samples(&col(1), censored, cfg.seed()),
        difference: McEstimate::from_samples(&col(2), censored, cfg.seed()),
        epsilon,
        k_damp,
        t,
    })
}

/// Hard cap on simulated inner path steps for nested estimators.
pub const NESTED_STEP_BUDGET: u64 = 4_000_000_000;

/// Both sides of `u(t) = S_tφ + K ∫₀ᵗ S_{t-s}(|A·|² u(s)) ds`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocReport {
    pub k_damp: f64,
    pub t: f64,
    /// `u(t, x) = P_tφ(x)`
    pub lhs: McEstimate,
    /// `S_tφ(x)`
    pub feynman_kac: McEstimate,
    /// `K ∫ S_{t-s}(|A·|² u(s)) ds`
    pub correction: McEstimate,
    /// per-replica `lhs - feynman_kac - correction`
    pub residual: McEstimate,
    /// quadrature nodes in `s` after snapping to the grid
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub outer: usize,
    pub inner: usize,
    /// `|residual| ≤ 3 stderr`
    pub pass: bool,
}

/// Number of Gauss–Legendre nodes used by nested time quadratures.
pub const QUADRATURE_NODES: usize = 8;

pub fn check_variation_of_constants(
    phi: &Observable,
    k_damp: f64,
    t: f64,
    x: &SpectralField,
    cfg: &SimConfig,
    n_outer: usize,
    n_inner: usize,
) -> Result<VocReport> {
    check_samples(n_outer)?;
    if n_inner == 0 {
        return invalid("need at least one inner sample");
    }
    if !(t > 0.0) {
        return invalid("variation of constants needs t > 0");
    }
    if !(k_damp >= 0.0) {
        return invalid("damping K must be nonnegative");
    }
    let steps = check_time(t, cfg)?;
    let dt = cfg.dt();
    let (gx, gw) = gauss_legendre(QUADRATURE_NODES);
    // node s_i -> outer grid index n_i of time t - s_i
    let mut outer_idx = Vec::new();
    let mut weights = Vec::new();
    for (z, w) in gx.iter().zip(&gw) {
        let s = 0.5 * t * (1.0 + z);
        outer_idx.push(cfg.nearest_step(t - s).min(steps));
        weights.push(0.5 * t * w);
    }
    let inner_steps: u64 = outer_idx.iter().map(|&i| (steps - i) as u64).sum();
    let work = inner_steps * (n_inner as u64) * (n_outer as u64);
    if k_damp != 0.0 && work > NESTED_STEP_BUDGET {
        return Err(Error::ResourceLimit(format!(
            "nested budget of {NESTED_STEP_BUDGET} inner steps exceeded ({work})"
        )));
    }
    let xp = x.project(cfg.space());
    let nodes: Vec<f64> = outer_idx.iter().map(|&i| (steps - i) as f64 * dt).collect();
    let (rows, censored) = fan_out(n_outer, |r| {
        let mut engine = Engine::new(cfg, &xp, &[], false);
        let mut rng = stream_rng(cfg.seed(), tags::DYNAMICS, r);
        let mut potential = 0.0;
        let mut snapshots: Vec<(usize, Vec<Coeff>, f64, f64)> = Vec::new();
        drive(&mut engine, &mut rng, steps, |v| {
            match v {
                Visit::Step(e, _) => potential += e.a_norm_sq() * dt,
                Visit::Point(e) => {
                    if k_damp != 0.0 && outer_idx.contains(&e.step_index()) {
                        snapshots.push((e.step_index(), e.x.clone(), potential, e.a_norm_sq()));
                    }
                }
            }
            Ok(())
        })?;
        let val = phi.evaluate(&engine.x_field());
        let lhs = val;
        let fk = (-k_damp * potential).exp() * val;
        let mut correction = 0.0;
        if k_damp != 0.0 {
            let mut inner = Engine::new(cfg, &xp, &[], false);
            for (node, (&oi, &w)) in outer_idx.iter().zip(&weights).enumerate() {
                let (_, y, pot, a2) = snapshots.iter().find(|s| s.0 == oi).expect("snapshot recorded");
                let mut acc = 0.0;
                for j in 0..n_inner {
                    let id = ((r * QUADRATURE_NODES as u64 + node as u64) * n_inner as u64) + j as u64;
                    let mut irng = stream_rng(cfg.seed(), tags::INNER, id);
                    inner.set_state(y, None, &[], 0);
                    drive(&mut inner, &mut irng, steps - oi, |_| Ok(()))?;
                    acc += phi.evaluate(&inner.x_field());
                }
                correction += w * k_damp * (-k_damp * pot).exp() * a2 * acc / n_inner as f64;
            }
        }
        Ok([lhs, fk, correction, lhs - fk - correction])
    })?;
    let col = |i: usize| -> Vec<f64> { rows.iter().map(|r| r[i]).collect() };
    let seed = cfg.seed();
    let residual = McEstimate::from_samples(&col(3), censored, seed);
    Ok(VocReport {
        k_damp,
        t,
        lhs: McEstimate::from_samples(&col(0), censored, seed),
        feynman_kac: McEstimate::from_samples(&col(1), censored, seed),
        correction: McEstimate::from_samples(&col(2), censored, seed),
        pass: residual.value.abs() <= 3.0 * residual.stderr,
        residual,
        nodes,
        weights,
        outer: n_outer,
        inner: n_inner,
    })
}

/// Direct and factorized estimates of `E[f₀(x) f₁(X(t₁)) f₂(X(t₁+t₂))]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovReport {
    pub observable: String,
    pub t1: f64,
    pub t2: f64,
    /// `E[f₀ f₁(X(t₁)) f₂(X(t₁+t₂))]` along single paths
    pub direct: McEstimate,
    /// `f₀(x) P_{t₁}[f₁ P_{t₂} f₂](x)` with nested inner paths
    pub nested: McEstimate,
    /// per-replica difference
    pub residual: McEstimate,
    pub pass: bool,
}

/// Weak Markov factorization check. The direct side takes `X(t₁+t₂)` on the
/// outer path; the nested side restarts `n_inner` fresh paths from
/// `X(t₁)`.
#[allow(clippy::too_many_arguments)]
pub fn check_markov_factorization(
    f0: &Observable,
    f1: &Observable,
    f2: &Observable,
    t1: f64,
    t2: f64,
    x: &SpectralField,
    cfg: &SimConfig,
    n_outer: usize,
    n_inner: usize,
) -> Result<MarkovReport> {
    check_samples(n_outer)?;
    if n_inner == 0 {
        return invalid("need at least one inner sample");
    }
    let s1 = check_time(t1, cfg)?;
    let s2 = cfg.grid_steps(t2)?;
    if (s1 + s2) as f64 * cfg.dt() > cfg.horizon() * (1.0 + 1e-12) {
        return invalid("t1 + t2 exceeds the horizon");
    }
    let xp = x.project(cfg.space());
    let c0 = f0.evaluate(&xp);
    let (rows, censored) = fan_out(n_outer, |r| {
        let mut engine = Engine::new(cfg, &xp, &[], false);
        let mut rng = stream_rng(cfg.seed(), tags::DYNAMICS, r);
        drive(&mut engine, &mut rng, s1, |_| Ok(()))?;
        let y = engine.x.clone();
        let v1 = f1.evaluate(&engine.x_field());
        drive(&mut engine, &mut rng, s2, |_| Ok(()))?;
        let direct = c0 * v1 * f2.evaluate(&engine.x_field());
        let mut inner = Engine::new(cfg, &xp, &[], false);
        let mut acc = 0.0;
        for j in 0..n_inner {
            let mut irng = stream_rng(cfg.seed(), tags::INNER, r * n_inner as u64 + j as u64);
            inner.set_state(&y, None, &[], s1);
            drive(&mut inner, &mut irng, s2, |_| Ok(()))?;
            acc += f2.evaluate(&inner.x_field());
        }
        let nested = c0 * v1 * acc / n_inner as f64;
        Ok([direct, nested, direct - nested])
    })?;
    let col = |i: usize| -> Vec<f64> { rows.iter().map(|r| r[i]).collect() };
    let seed = cfg.seed();
    let residual = McEstimate::from_samples(&col(2), censored, seed);
    Ok(MarkovReport {
        observable: format!("{}·{}·{}", f0.name(), f1.name(), f2.name()),
        t1,
        t2,
        direct: McEstimate::from_samples(&col(0), censored, seed),
        nested: McEstimate::from_samples(&col(1), censored, seed),
        pass: residual.value.abs() <= 3.0 * residual.stderr,
        residual,
    })
}

/// `P_{s+t}φ(x)` against `P_s(P_tφ)(x)`.
pub fn check_chapman_kolmogorov(
    phi: &Observable,
    s: f64,
    t: f64,
    x: &SpectralField,
    cfg: &SimConfig,
    n_outer: usize,
    n_inner: usize,
) -> Result<MarkovReport> {
    let one = Observable::constant(1.0);
    let mut rep = check_markov_factorization(&one, &one, phi, s, t, x, cfg, n_outer, n_inner)?;
    rep.observable = phi.name().to_string();
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::{NoiseOperator, NoiseParams};
    use crate::spectral::GalerkinSpace;
    use rand::SeedableRng;

    fn cfg(horizon: f64, scale: f64) -> SimConfig {
        let s = GalerkinSpace::new(1).unwrap();
        SimConfig::new(&s, 1e-3, horizon, NoiseOperator::new(NoiseParams::default().with_scale(scale)).unwrap(), 21).unwrap()
    }

    fn point(c: &SimConfig, seed: u64, amp: f64) -> SpectralField {
        SpectralField::random(c.space(), &mut ChaCha8Rng::seed_from_u64(seed), 1.0).scaled(amp)
    }

    #[test]
    fn t_zero_and_constant_are_exact() {
        let c = cfg(0.1, 1.0);
        let x = point(&c, 1, 0.5);
        let e = estimate_semigroup(&Observable::norm_sq(), 0.0, &x, &c, 10).unwrap();
        assert_eq!(e.value, x.norm().powi(2));
        assert_eq!(e.stderr, 0.0);
        let e = estimate_semigroup(&Observable::constant(1.0), 0.1, &x, &c, 10).unwrap();
        assert_eq!((e.value, e.stderr), (1.0, 0.0));
    }

    #[test]
    fn rest_state_without_noise_stays_put() {
        let s = GalerkinSpace::new(1).unwrap();
        let op = NoiseOperator::additive(1.3).unwrap();
        let c = SimConfig::new(&s, 1e-3, 0.1, op, 1).unwrap();
        // Φ ≡ 0 through a vanishing observable of the noise: use x = 0 and
        // the deterministic engine instead
        let mut e = Engine::new(&c, &SpectralField::zeros(&s), &[], false).deterministic();
        let mut rng = stream_rng(1, tags::DYNAMICS, 0);
        drive(&mut e, &mut rng, 100, |_| Ok(())).unwrap();
        assert!(e.x_field().is_zero());
    }

    #[test]
    fn damping_is_monotone_on_shared_noise() {
        let c = cfg(0.2, 0.5);
        let x = point(&c, 2, 0.5);
        let phi = Observable::bounded_energy();
        let v = damped_semigroup_at(&phi, &[0.0, 1.0, 10.0, 100.0], &[0.2], &x, &c, 50).unwrap();
        for w in v.windows(2) {
            assert!(w[1][0].value <= w[0][0].value);
        }
        let p = estimate_semigroup(&phi, 0.2, &x, &c, 50).unwrap();
        assert_eq!(p, v[0][0]);
    }

    #[test]
    fn zero_direction_gives_zero_gradient() {
        let c = cfg(0.1, 0.5);
        let x = point(&c, 3, 0.5);
        let e = estimate_bel_gradient(&Observable::sin_coord(0, 1.0), 1.0, 0.1, &x, &SpectralField::zeros(c.space()), &c, 20)
            .unwrap();
        assert_eq!((e.value, e.stderr), (0.0, 0.0));
    }

    #[test]
    fn gradient_is_exactly_linear_in_direction() {
        let c = cfg(0.1, 0.5);
        let x = point(&c, 4, 0.5);
        let h = point(&c, 5, 1.0);
        let phi = Observable::sin_coord(0, 1.0);
        let a = estimate_bel_gradient(&phi, 2.0, 0.1, &x, &h, &c, 20).unwrap();
        let b = estimate_bel_gradient(&phi, 2.0, 0.1, &x, &h.scaled(2.0), &c, 20).unwrap();
        assert_eq!(b.value, 2.0 * a.value);
    }

    #[test]
    fn constant_observable_gradient_has_mean_zero() {
        let c = cfg(0.2, 0.5);
        let x = point(&c, 6, 0.5);
        let h = point(&c, 7, 1.0);
        let e = estimate_bel_gradient(&Observable::constant(1.0), 0.0, 0.2, &x, &h, &c, 400).unwrap();
        assert!(e.z_score(0.0) < 4.0, "{e:?}");
    }

    #[test]
    fn damping_term_sign_matches_finite_difference() {
        // along h ∝ x the weight dominates and the two signs differ by ~40σ
        let c = cfg(0.5, 1.0);
        let x = point(&c, 5, 1.0);
        let x = x.scaled(2.0 / x.a_norm());
        let h = x.scaled(1.0 / x.norm());
        let g = compare_bel_finite_difference(&Observable::constant(1.0), 1.0, 0.5, &x, &h, 1e-3, &c, 1000).unwrap();
        assert!(g.finite_difference.value < -0.02, "{g:?}");
        assert!(g.difference.z_score(0.0) < 4.0, "{g:?}");
        let sweep = bel_gradient_sweep(&Observable::constant(1.0), 1.0, &[0.5], &x, &[h], &c, 1000).unwrap();
        assert_eq!(sweep[0][0], g.bel);
    }

    #[test]
    fn voc_is_trivial_at_zero_damping() {
        let c = cfg(0.1, 1.0);
        let x = point(&c, 8, 0.5);
        let r = check_variation_of_constants(&Observable::bounded_energy(), 0.0, 0.1, &x, &c, 20, 5).unwrap();
        assert_eq!(r.residual.value, 0.0);
        assert!(r.pass);
    }

    #[test]
    fn voc_budget_is_enforced() {
        let c = cfg(0.1, 1.0);
        let x = point(&c, 8, 0.5);
        let r = check_variation_of_constants(&Observable::bounded_energy(), 1.0, 0.1, &x, &c, 1 << 20, 1 << 20);
        assert!(matches!(r, Err(Error::ResourceLimit(_))));
    }

    #[test]
    fn observable_classes_hold_on_samples() {
        let c = cfg(0.1, 1.0);
        let samples: Vec<SpectralField> = (0..8).map(|i| point(&c, 30 + i, 0.3 * i as f64)).collect();
        for name in ["one", "norm-sq", "enstrophy", "energy-bounded", "cos-q0", "sin-q3", "tanh-q1", "bump-4"] {
            let o = Observable::by_name(name).unwrap();
            assert!(o.check_classes(&samples), "{name}");
        }
        assert!(Observable::by_name("nope").is_err());
    }

    #[test]
    fn estimates_do_not_depend_on_worker_count() {
        let c = cfg(0.05, 1.0);
        let x = point(&c, 9, 0.5);
        let phi = Observable::norm_sq();
        let a = crate::parallel::with_workers(1, || estimate_semigroup(&phi, 0.05, &x, &c, 30).unwrap());
        let b = crate::parallel::with_workers(3, || estimate_semigroup(&phi, 0.05, &x, &c, 30).unwrap());
        assert_eq!(a, b);
    }
}
