//! State-dependent noise covariance `Φ(x) = s·((-A)^{-α} + c κ(x))`.
//!
//! The operator acts on the real coordinates of the orthonormal eigenbasis
//! (see [`crate::spectral`]). Two perturbations `κ` are provided:
//!
//! * multiplier: `κ(x) e_n = μ_n^{-3/2} λ_n tanh((x, e_n)) e_n` with
//!   `λ_n = (n+1)^{-decay}`, diagonal in the eigenbasis;
//! * integral kernel: `(κ(x)h)(ξ) = ∫ V(ξ, ξ', x₁(ξ')) h(ξ') dξ'` with
//!   `V(ξ, ξ', r) = θ(r) Σ_{n<N} ν_n e_n(ξ) ⊗ e_n(ξ')`, `ν_n = 1/(n+1)` and
//!   `θ` a compactly supported bump of radius `ρ`. `V` is divergence-free in
//!   `ξ` because every `e_n` is. The `ξ'` integral is evaluated on a tensor
//!   grid matched to the cutoff.
//!
//! `s` is an overall amplitude (1 by default).

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spectral::{GalerkinSpace, PhysicalGrid, SpectralField};

/// Perturbation `κ` of the base covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum KappaSpec {
    Zero,
    Multiplier {
        #[serde(default = "default_lambda_decay")]
        lambda_decay: f64,
    },
    IntegralKernel {
        #[serde(default = "default_kernel_modes")]
        modes: usize,
        #[serde(default = "default_kernel_radius")]
        radius: f64,
    },
}

fn default_lambda_decay() -> f64 {
    1.0
}
fn default_kernel_modes() -> usize {
    4
}
fn default_kernel_radius() -> f64 {
    2.0
}

impl Default for KappaSpec {
    fn default() -> Self {
        KappaSpec::Multiplier {
            lambda_decay: default_lambda_decay(),
        }
    }
}

/// Declared noise parameters, validated by [`NoiseOperator::new`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    pub alpha: f64,
    pub c: f64,
    pub scale: f64,
    pub kappa: KappaSpec,
    pub m1: f64,
    pub g: f64,
    pub r: f64,
    pub delta: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            alpha: 1.3,
            c: 0.05,
            scale: 1.0,
            kappa: KappaSpec::default(),
            m1: 1000.0,
            g: 0.05,
            r: 1.3,
            delta: 0.5,
        }
    }
}

impl NoiseParams {
    /// State-independent noise `s (-A)^{-α}`.
    pub fn additive(alpha: f64) -> Self {
        NoiseParams {
            alpha,
            c: 0.0,
            kappa: KappaSpec::Zero,
            ..NoiseParams::default()
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    /// Checks the parameter windows of the smoothness/nondegeneracy
    /// assumptions. Messages name the violated window.
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.25 && self.alpha < 1.5) {
            return invalid(format!("alpha = {} outside (5/4, 3/2), see noise assumptions", self.alpha));
        }
        if !(self.r > 1.0 && self.r < 1.5) {
            return invalid(format!("r = {} outside (1, 3/2), see noise assumptions", self.r));
        }
        if !(self.g > 0.0) {
            return invalid(format!("g = {} must be positive, see noise assumptions", self.g));
        }
        if !(self.delta < 1.5) {
            return invalid(format!("delta = {} must be below 3/2, see noise assumptions", self.delta));
        }
        if !(self.m1 >= 0.0) {
            return invalid(format!("M1 = {} must be nonnegative", self.m1));
        }
        if !(self.c >= 0.0) {
            return invalid(format!("coupling c = {} must be nonnegative", self.c));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return invalid(format!("noise scale = {} must be positive", self.scale));
        }
        match &self.kappa {
            KappaSpec::Zero => {}
            KappaSpec::Multiplier { lambda_decay } => {
                if !(*lambda_decay > 0.5) {
                    return invalid(format!("lambda_decay = {lambda_decay} must exceed 1/2 for (λ_n) ∈ ℓ²"));
                }
                // diag entries μ^{-α} + c μ^{-3/2} λ_n tanh(·) stay positive when c < 1
                if self.c >= 1.0 {
                    return Err(Error::DegenerateNoise(format!(
                        "c = {} may make Φ(x) singular for the multiplier perturbation (need c < 1)",
                        self.c
                    )));
                }
            }
            KappaSpec::IntegralKernel { modes, radius } => {
                if *modes == 0 || !(*radius > 0.0) {
                    return invalid("integral kernel needs modes ≥ 1 and radius > 0");
                }
                let nu_sum: f64 = (0..*modes).map(|n| 1.0 / (n as f64 + 1.0)).sum();
                // Φ(x)v = 0 forces v ∈ span{e_n : n < modes}; there D ≥ μ_max^{-α}
                let mu_max = kernel_mu_max(*modes);
                if self.c * nu_sum >= mu_max.powf(-self.alpha) {
                    return Err(Error::DegenerateNoise(format!(
                        "c = {} too large for the integral kernel (need c·Σν_n < μ^-α = {:.4})",
                        self.c,
                        mu_max.powf(-self.alpha)
                    )));
                }
            }
        }
        Ok(())
    }
}

fn kernel_mu_max(modes: usize) -> f64 {
    // basis vectors 4j..4j+3 share the eigenvalue of the j-th positive mode;
    // the lowest shell |k|²=1 has 3 positive modes (12 basis vectors),
    // |k|²=2 has 6 (24 more).
    match modes {
        0..=12 => 1.0,
        13..=36 => 2.0,
        _ => 3.0,
    }
}

fn bump(r: f64, radius: f64) -> (f64, f64) {
    let s = r / radius;
    if s.abs() >= 1.0 {
        return (0.0, 0.0);
    }
    let one = 1.0 - s * s;
    let theta = (1.0 - 1.0 / one).exp();
    let dtheta = -theta * 2.0 * s / (one * one * radius);
    (theta, dtheta)
}

#[derive(Debug)]
struct KernelQuadrature {
    npts: usize,
    dim: usize,
    /// e_j(ξ) for every basis vector, `[(j * npts + p) * 3 + d]`.
    basis: Vec<f64>,
}

impl KernelQuadrature {
    fn new(space: &Arc<GalerkinSpace>) -> Self {
        let points = 4 * space.cutoff() as usize + 2;
        let grid = PhysicalGrid::new(space.cutoff(), points);
        let npts = grid.len();
        let dim = space.dim();
        let mut basis = vec![0.0; dim * npts * 3];
        for j in 0..dim {
            let e = SpectralField::basis_vector(space, j, 1.0).expect("index in range");
            for (p, v) in grid.evaluate(&e).into_iter().enumerate() {
                basis[(j * npts + p) * 3..(j * npts + p) * 3 + 3].copy_from_slice(&v);
            }
        }
        KernelQuadrature { npts, dim, basis }
    }

    fn e(&self, j: usize, p: usize) -> &[f64] {
        &self.basis[(j * self.npts + p) * 3..(j * self.npts + p) * 3 + 3]
    }

    /// Point values of the field with real coordinates `q`.
    fn synthesize(&self, q: &[f64]) -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; self.npts];
        for (j, &w) in q.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (p, o) in out.iter_mut().enumerate() {
                let e = self.e(j, p);
                o[0] += w * e[0];
                o[1] += w * e[1];
                o[2] += w * e[2];
            }
        }
        out
    }

    /// `⟨ρ e_n, v⟩` for a scalar weight `ρ` and point values `v`.
    fn weighted_projection(&self, n: usize, rho: &[f64], v: &[[f64; 3]]) -> f64 {
        let mut acc = 0.0;
        for p in 0..self.npts {
            let e = self.e(n, p);
            acc += rho[p] * (e[0] * v[p][0] + e[1] * v[p][1] + e[2] * v[p][2]);
        }
        acc / self.npts as f64
    }
}

type KernelCache = Arc<Mutex<HashMap<u32, Arc<KernelQuadrature>>>>;

/// Validated noise operator.
#[derive(Clone, Debug)]
pub struct NoiseOperator {
    params: NoiseParams,
    kernel_cache: KernelCache,
}

impl PartialEq for NoiseOperator {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

/// `Φ(x)` frozen at one state, in real coordinates.
#[derive(Debug, Clone)]
pub(crate) enum FrozenNoise {
    Diagonal {
        diag: Vec<f64>,
        deriv: Vec<f64>,
        base: Vec<f64>,
        weight: Vec<f64>,
    },
    Dense(Box<DenseNoise>),
}

#[derive(Debug, Clone)]
pub(crate) struct DenseNoise {
    matrix: DMatrix<f64>,
    /// θ'(x₁(ξ)) on the quadrature grid
    dtheta: Vec<f64>,
    quad: Arc<KernelQuadrature>,
    coupling: f64,
    modes: usize,
}

impl NoiseOperator {
    pub fn new(params: NoiseParams) -> Result<Self> {
        params.validate()?;
        Ok(NoiseOperator {
            params,
            kernel_cache: Arc::new(Mutex::new(HashMap::new())),
        })
    }

    /// `(-A)^{-α}` with unit amplitude.
    pub fn additive(alpha: f64) -> Result<Self> {
        NoiseOperator::new(NoiseParams::additive(alpha))
    }

    pub fn params(&self) -> &NoiseParams {
        &self.params
    }

    pub fn alpha(&self) -> f64 {
        self.params.alpha
    }

    /// True when `Φ` does not depend on the state.
    pub fn is_state_independent(&self) -> bool {
        self.params.c == 0.0 || matches!(self.params.kappa, KappaSpec::Zero)
    }

    fn base(&self, mu: f64) -> f64 {
        self.params.scale * mu.powf(-self.params.alpha)
    }

    fn multiplier_weight(&self, n: usize, mu: f64, decay: f64) -> f64 {
        self.params.scale * self.params.c * mu.powf(-1.5) * (n as f64 + 1.0).powf(-decay)
    }

    fn quadrature(&self, space: &Arc<GalerkinSpace>) -> Arc<KernelQuadrature> {
        let mut cache = self.kernel_cache.lock().expect("kernel cache poisoned");
        Arc::clone(
            cache
                .entry(space.cutoff())
                .or_insert_with(|| Arc::new(KernelQuadrature::new(space))),
        )
    }

    pub(crate) fn freeze_coords(&self, space: &Arc<GalerkinSpace>, qx: &[f64]) -> FrozenNoise {
        let dim = space.dim();
        let base: Vec<f64> = (0..dim).map(|n| self.base(space.basis_eigenvalue(n))).collect();
        match (&self.params.kappa, self.params.c == 0.0) {
            (KappaSpec::Zero, _) | (_, true) => FrozenNoise::Diagonal {
                diag: base.clone(),
                deriv: vec![0.0; dim],
                weight: vec![0.0; dim],
                base,
            },
            (KappaSpec::Multiplier { lambda_decay }, false) => {
                let weight: Vec<f64> = (0..dim)
                    .map(|n| self.multiplier_weight(n, space.basis_eigenvalue(n), *lambda_decay))
                    .collect();
                let mut frozen = FrozenNoise::Diagonal {
                    diag: base.clone(),
                    deriv: vec![0.0; dim],
                    weight,
                    base,
                };
                self.refreeze(space, qx, &mut frozen);
                frozen
            }
            (KappaSpec::IntegralKernel { modes, radius }, false) => {
                let quad = self.quadrature(space);
                let modes = (*modes).min(dim);
                let x = quad.synthesize(qx);
                let (theta, dtheta): (Vec<f64>, Vec<f64>) = x.iter().map(|v| bump(v[0], *radius)).unzip();
                let coupling = self.params.scale * self.params.c;
                let mut matrix = DMatrix::from_diagonal(&DVector::from_vec(base));
                for n in 0..modes {
                    let nu = 1.0 / (n as f64 + 1.0);
                    for j in 0..dim {
                        let mut acc = 0.0;
                        for p in 0..quad.npts {
                            let (en, ej) = (quad.e(n, p), quad.e(j, p));
                            acc += theta[p] * (en[0] * ej[0] + en[1] * ej[1] + en[2] * ej[2]);
                        }
                        matrix[(n, j)] += coupling * nu * acc / quad.npts as f64;
                    }
                }
                FrozenNoise::Dense(Box::new(DenseNoise {
                    matrix,
                    dtheta,
                    quad,
                    coupling,
                    modes,
                }))
            }
        }
    }

    /// Re-evaluates `frozen` at new coordinates, reusing its buffers when
    /// the operator is diagonal.
    pub(crate) fn refreeze(&self, space: &Arc<GalerkinSpace>, qx: &[f64], frozen: &mut FrozenNoise) {
        if self.is_state_independent() {
            return;
        }
        match frozen {
            FrozenNoise::Diagonal {
                diag,
                deriv,
                base,
                weight,
            } => {
                for n in 0..diag.len() {
                    let t = qx[n].tanh();
                    diag[n] = base[n] + weight[n] * t;
                    deriv[n] = weight[n] * (1.0 - t * t);
                }
            }
            FrozenNoise::Dense(_) => *frozen = self.freeze_coords(space, qx),
        }
    }

    pub(crate) fn freeze(&self, x: &SpectralField) -> FrozenNoise {
        let needs_coords = !self.is_state_independent();
        let q = if needs_coords { x.real_coords() } else { vec![0.0; x.space().dim()] };
        self.freeze_coords(x.space(), &q)
    }

    fn check_same(&self, a: &SpectralField, b: &SpectralField) -> Result<()> {
        if !a.space().same(b.space()) {
            return invalid(format!(
                "fields live at different cutoffs ({} vs {})",
                a.space().cutoff(),
                b.space().cutoff()
            ));
        }
        Ok(())
    }

    /// `Φ_m(x) w`.
    pub fn apply_noise(&self, x: &SpectralField, w: &SpectralField) -> Result<SpectralField> {
        self.check_same(x, w)?;
        let frozen = self.freeze(x);
        let mut out = vec![0.0; x.space().dim()];
        frozen.apply(&w.real_coords(), &mut out);
        SpectralField::from_real_coords(x.space(), &out)
    }

    /// The unique `v` with `Φ_m(x) v = h`.
    pub fn inverse_apply(&self, x: &SpectralField, h: &SpectralField) -> Result<SpectralField> {
        self.check_same(x, h)?;
        let frozen = self.freeze(x);
        let mut out = vec![0.0; x.space().dim()];
        frozen.apply_inverse(&h.real_coords(), &mut out)?;
        SpectralField::from_real_coords(x.space(), &out)
    }

    /// `(Φ'(x)·h) w`.
    pub fn noise_derivative(&self, x: &SpectralField, h: &SpectralField, w: &SpectralField) -> Result<SpectralField> {
        self.check_same(x, h)?;
        self.check_same(x, w)?;
        let frozen = self.freeze(x);
        let mut out = vec![0.0; x.space().dim()];
        frozen.apply_derivative(&h.real_coords(), &w.real_coords(), &mut out);
        SpectralField::from_real_coords(x.space(), &out)
    }

    /// Galerkin matrix of `Φ_m(x)` in the real eigenbasis, assembled by
    /// applying the operator to each basis vector.
    pub fn galerkin_matrix(&self, x: &SpectralField) -> DMatrix<f64> {
        let frozen = self.freeze(x);
        let dim = x.space().dim();
        let mut m = DMatrix::zeros(dim, dim);
        let mut e = vec![0.0; dim];
        let mut col = vec![0.0; dim];
        for j in 0..dim {
            e[j] = 1.0;
            frozen.apply(&e, &mut col);
            for i in 0..dim {
                m[(i, j)] = col[i];
            }
            e[j] = 0.0;
        }
        m
    }

    /// `Tr[(-A)^{1+g} Φ(x) Φ*(x)]` on the Galerkin space.
    pub fn smoothness_trace(&self, x: &SpectralField) -> f64 {
        let m = self.galerkin_matrix(x);
        let space = x.space();
        let mut acc = 0.0;
        for i in 0..m.nrows() {
            let w = space.basis_eigenvalue(i).powf(1.0 + self.params.g);
            acc += w * m.row(i).iter().map(|v| v * v).sum::<f64>();
        }
        acc
    }

    /// `Tr[Φ(x) Φ*(x)]`.
    pub fn hs_norm_sq(&self, x: &SpectralField) -> f64 {
        self.galerkin_matrix(x).iter().map(|v| v * v).sum()
    }

    /// Upper bound of `Tr[Φ(x)Φ*(x)]` over all states. Exact for the
    /// multiplier (each `tanh` saturates independently); for the kernel the
    /// maximum over `samples` is used.
    pub fn sup_hs_norm_sq(&self, space: &Arc<GalerkinSpace>, samples: &[SpectralField]) -> f64 {
        match (&self.params.kappa, self.params.c == 0.0) {
            (KappaSpec::Zero, _) | (_, true) => self.hs_norm_sq(&SpectralField::zeros(space)),
            (KappaSpec::Multiplier { lambda_decay }, false) => (0..space.dim())
                .map(|n| {
                    let mu = space.basis_eigenvalue(n);
                    let d = self.base(mu) + self.multiplier_weight(n, mu, *lambda_decay);
                    d * d
                })
                .sum(),
            (KappaSpec::IntegralKernel { .. }, false) => samples
                .iter()
                .map(|x| self.hs_norm_sq(x))
                .fold(self.hs_norm_sq(&SpectralField::zeros(space)), f64::max),
        }
    }

    /// Empirical witnesses for the smoothness, nondegeneracy and derivative
    /// bounds on a set of states.
    pub fn validate_assumptions(&self, sample_states: &[SpectralField]) -> Result<AssumptionReport> {
        if sample_states.is_empty() {
            return invalid("validate_assumptions needs at least one state");
        }
        let p = &self.params;
        let mut states = Vec::with_capacity(sample_states.len());
        for x in sample_states {
            let space = x.space();
            let dim = space.dim();
            let frozen = self.freeze(x);
            let trace = self.smoothness_trace(x);

            let mut inverse_witness: f64 = 0.0;
            let mut e = vec![0.0; dim];
            let mut v = vec![0.0; dim];
            for j in 0..dim {
                e[j] = 1.0;
                frozen.apply_inverse(&e, &mut v)?;
                let num = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                inverse_witness = inverse_witness.max(num / space.basis_eigenvalue(j).powf(p.r));
                e[j] = 0.0;
            }

            let mut derivative_witness: f64 = 0.0;
            if !self.is_state_independent() {
                let probes = derivative_probes(space);
                let mut col = vec![0.0; dim];
                for h in &probes {
                    let hf = SpectralField::from_real_coords(space, h)?;
                    let denom = hf.sobolev_norm(p.delta).powi(2);
                    let mut tr = 0.0;
                    for j in 0..dim {
                        e[j] = 1.0;
                        frozen.apply_derivative(h, &e, &mut col);
                        for (i, c) in col.iter().enumerate() {
                            tr += space.basis_eigenvalue(i).powi(2) * c * c;
                        }
                        e[j] = 0.0;
                    }
                    derivative_witness = derivative_witness.max(tr / denom);
                }
            }
            states.push(StateAssumption {
                trace,
                inverse_witness,
                derivative_witness,
            });
        }
        let max_trace = states.iter().map(|s| s.trace).fold(0.0, f64::max);
        let max_inverse = states.iter().map(|s| s.inverse_witness).fold(0.0, f64::max);
        let max_derivative = states.iter().map(|s| s.derivative_witness).fold(0.0, f64::max);
        let g_limit = 2.0 * p.alpha - 2.5;
        Ok(AssumptionReport {
            exceeds_m1: max_trace > p.m1 || max_inverse > p.m1 || max_derivative > p.m1,
            states,
            max_trace,
            max_inverse,
            max_derivative,
            m1: p.m1,
            g: p.g,
            g_limit,
            trace_converges: p.g < g_limit,
        })
    }
}

/// Directions probing the derivative bound: every 4th basis vector (one per
/// positive mode) plus a few fixed mixtures.
fn derivative_probes(space: &GalerkinSpace) -> Vec<Vec<f64>> {
    let dim = space.dim();
    let mut out = Vec::new();
    for j in (0..dim).step_by(4) {
        let mut h = vec![0.0; dim];
        h[j] = 1.0;
        out.push(h);
    }
    for s in 0..4u64 {
        let mut state = 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(s + 1);
        let h = (0..dim)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        out.push(h);
    }
    out
}

impl FrozenNoise {
    pub(crate) fn apply(&self, w: &[f64], out: &mut [f64]) {
        match self {
            FrozenNoise::Diagonal { diag, .. } => {
                for ((o, d), v) in out.iter_mut().zip(diag).zip(w) {
                    *o = d * v;
                }
            }
            FrozenNoise::Dense(dn) => {
                let r = &dn.matrix * DVector::from_column_slice(w);
                out.copy_from_slice(r.as_slice());
            }
        }
    }

    pub(crate) fn apply_inverse(&self, h: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            FrozenNoise::Diagonal { diag, .. } => {
                for ((o, d), v) in out.iter_mut().zip(diag).zip(h) {
                    if !(d.abs() > 1e-300) {
                        return Err(Error::DegenerateNoise("Φ(x) has a zero eigenvalue".into()));
                    }
                    *o = v / d;
                }
                Ok(())
            }
            FrozenNoise::Dense(dn) => {
                let lu = dn.matrix.clone().lu();
                let umax = (0..lu.u().nrows()).map(|i| lu.u()[(i, i)].abs()).fold(0.0, f64::max);
                let umin = (0..lu.u().nrows()).map(|i| lu.u()[(i, i)].abs()).fold(f64::INFINITY, f64::min);
                if !(umin > 1e-13 * umax) {
                    return Err(Error::DegenerateNoise(format!(
                        "Galerkin matrix of Φ(x) numerically singular (pivot ratio {:.3e})",
                        umin / umax
                    )));
                }
                let sol = lu
                    .solve(&DVector::from_column_slice(h))
                    .ok_or_else(|| Error::DegenerateNoise("LU solve failed".into()))?;
                out.copy_from_slice(sol.as_slice());
                Ok(())
            }
        }
    }

    /// `(Φ'(x)·h) w`.
    pub(crate) fn apply_derivative(&self, h: &[f64], w: &[f64], out: &mut [f64]) {
        match self {
            FrozenNoise::Diagonal { deriv, .. } => {
                for i in 0..out.len() {
                    out[i] = deriv[i] * h[i] * w[i];
                }
            }
            FrozenNoise::Dense(dn) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let hv = dn.quad.synthesize(h);
                let wv = dn.quad.synthesize(w);
                let rho: Vec<f64> = dn.dtheta.iter().zip(&hv).map(|(t, hp)| t * hp[0]).collect();
                for (n, o) in out.iter_mut().enumerate().take(dn.modes) {
                    let nu = 1.0 / (n as f64 + 1.0);
                    *o = dn.coupling * nu * dn.quad.weighted_projection(n, &rho, &wv);
                }
            }
        }
    }

    #[allow(dead_code)]
    pub(crate) fn dim(&self) -> usize {
        match self {
            FrozenNoise::Diagonal { diag, .. } => diag.len(),
            FrozenNoise::Dense(dn) => dn.quad.dim,
        }
    }
}

/// Per-state assumption witnesses.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct StateAssumption {
    /// `Tr[(-A)^{1+g} Φ Φ*]`
    pub trace: f64,
    /// `max_j |Φ^{-1} e_j| / |(-A)^r e_j|`
    pub inverse_witness: f64,
    /// `max_h Tr[(-A)² (Φ'h)(Φ'h)*] / |(-A)^δ h|²`
    pub derivative_witness: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AssumptionReport {
    pub states: Vec<StateAssumption>,
    pub max_trace: f64,
    pub max_inverse: f64,
    pub max_derivative: f64,
    pub m1: f64,
    pub exceeds_m1: bool,
    pub g: f64,
    /// `2α - 5/2`: the untruncated trace converges iff `g` is below it.
    pub g_limit: f64,
    pub trace_converges: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::WaveVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_on(space: &Arc<GalerkinSpace>, k: WaveVector) -> (usize, SpectralField) {
        let n = (0..space.dim()).find(|&n| space.basis_mode(n) == k).unwrap();
        (n, SpectralField::basis_vector(space, n, 1.0).unwrap())
    }

    #[test]
    fn additive_scales_by_eigenvalue_power() {
        let s = GalerkinSpace::new(1).unwrap();
        let op = NoiseOperator::additive(1.3).unwrap();
        let x = SpectralField::zeros(&s);
        let (_, w) = unit_on(&s, WaveVector([1, 1, 0]));
        let out = op.apply_noise(&x, &w).unwrap();
        assert!(out.sub(&w.scaled(2f64.powf(-1.3))).norm() < 1e-15);
        let (_, w1) = unit_on(&s, WaveVector([1, 0, 0]));
        assert!(op.inverse_apply(&x, &w1).unwrap().sub(&w1).norm() < 1e-15);
    }

    #[test]
    fn rejects_alpha_outside_window() {
        assert!(NoiseOperator::additive(1.0).is_err());
        assert!(NoiseOperator::additive(1.5).is_err());
        let p = NoiseParams {
            r: 1.6,
            ..NoiseParams::default()
        };
        assert!(NoiseOperator::new(p).is_err());
        let p = NoiseParams {
            g: 0.0,
            ..NoiseParams::default()
        };
        assert!(NoiseOperator::new(p).is_err());
    }

    #[test]
    fn zero_kappa_multiplier_matches_additive() {
        let s = GalerkinSpace::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = SpectralField::random(&s, &mut rng, 0.5);
        let w = SpectralField::random(&s, &mut rng, 0.0);
        let add = NoiseOperator::additive(1.3).unwrap();
        let zero_c = NoiseOperator::new(NoiseParams {
            c: 0.0,
            ..NoiseParams::default()
        })
        .unwrap();
        assert_eq!(add.apply_noise(&x, &w).unwrap(), zero_c.apply_noise(&x, &w).unwrap());
    }

    #[test]
    fn multiplier_matches_per_mode_evaluation() {
        let s = GalerkinSpace::new(1).unwrap();
        let op = NoiseOperator::new(NoiseParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = SpectralField::random(&s, &mut rng, 0.0);
        let w = SpectralField::random(&s, &mut rng, 0.0);
        let out = op.apply_noise(&x, &w).unwrap().real_coords();
        let (qx, qw) = (x.real_coords(), w.real_coords());
        for n in 0..s.dim() {
            let mu = s.basis_eigenvalue(n);
            let lam = 1.0 / (n as f64 + 1.0);
            let expected = mu.powf(-1.3) * qw[n] + 0.05 * mu.powf(-1.5) * lam * qx[n].tanh() * qw[n];
            assert!((out[n] - expected).abs() < 1e-14, "mode {n}");
        }
        let m = op.galerkin_matrix(&x);
        for i in 0..s.dim() {
            for j in 0..s.dim() {
                if i != j {
                    assert_eq!(m[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn inverse_round_trips() {
        for kappa in [
            KappaSpec::default(),
            KappaSpec::IntegralKernel { modes: 4, radius: 2.0 },
        ] {
            let s = GalerkinSpace::new(1).unwrap();
            let op = NoiseOperator::new(NoiseParams {
                kappa,
                c: 0.2,
                ..NoiseParams::default()
            })
            .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let x = SpectralField::random(&s, &mut rng, 0.0).scaled(0.5);
            let h = SpectralField::random(&s, &mut rng, 0.0);
            let v = op.inverse_apply(&x, &h).unwrap();
            let back = op.apply_noise(&x, &v).unwrap();
            assert!(back.sub(&h).norm() < 1e-10 * h.norm());
            let fwd = op.apply_noise(&x, &h).unwrap();
            assert!(op.inverse_apply(&x, &fwd).unwrap().sub(&h).norm() < 1e-10 * h.norm());
        }
    }

    #[test]
    fn inverse_ratio_is_one_on_single_modes() {
        let s = GalerkinSpace::new(2).unwrap();
        let op = NoiseOperator::new(NoiseParams {
            r: 1.3,
            ..NoiseParams::additive(1.3)
        })
        .unwrap();
        let x = SpectralField::zeros(&s);
        for n in (0..s.dim()).step_by(7) {
            let h = SpectralField::basis_vector(&s, n, 1.0).unwrap();
            let r = op.inverse_apply(&x, &h).unwrap().norm() / h.sobolev_norm(1.3);
            assert!((r - 1.0).abs() < 1e-13);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = SpectralField::random(&s, &mut rng, 0.0);
        let r = op.inverse_apply(&x, &h).unwrap().norm() / h.sobolev_norm(1.3);
        assert!(r <= 1.0 + 1e-13);
    }

    #[test]
    fn derivative_vanishes_without_coupling_and_is_linear() {
        let s = GalerkinSpace::new(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = SpectralField::random(&s, &mut rng, 0.0);
        let h = SpectralField::random(&s, &mut rng, 0.0);
        let w = SpectralField::random(&s, &mut rng, 0.0);
        let add = NoiseOperator::additive(1.3).unwrap();
        assert!(add.noise_derivative(&x, &h, &w).unwrap().is_zero());
        let op = NoiseOperator::new(NoiseParams::default()).unwrap();
        let d1 = op.noise_derivative(&x, &h, &w).unwrap();
        let d2 = op.noise_derivative(&x, &h.scaled(2.0), &w).unwrap();
        assert!(d2.sub(&d1.scaled(2.0)).norm() <= 1e-12 * d1.norm());
    }

    fn fd_orders(op: &NoiseOperator, s: &Arc<GalerkinSpace>) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = SpectralField::random(s, &mut rng, 0.0).scaled(0.7);
        let h = SpectralField::random(s, &mut rng, 0.0);
        let w = SpectralField::random(s, &mut rng, 0.0);
        let exact = op.noise_derivative(&x, &h, &w).unwrap();
        let base = op.apply_noise(&x, &w).unwrap();
        [1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&eps| {
                let mut xe = x.clone();
                xe.axpy(eps, &h);
                let fd = op.apply_noise(&xe, &w).unwrap().sub(&base).scaled(1.0 / eps);
                fd.sub(&exact).norm()
            })
            .collect()
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let s = GalerkinSpace::new(1).unwrap();
        for kappa in [
            KappaSpec::default(),
            KappaSpec::IntegralKernel { modes: 4, radius: 2.0 },
        ] {
            let op = NoiseOperator::new(NoiseParams {
                kappa,
                c: 0.2,
                ..NoiseParams::default()
            })
            .unwrap();
            let errs = fd_orders(&op, &s);
            // first order: error drops ~10x per decade of ε
            assert!(errs[0] / errs[1] > 5.0 && errs[0] / errs[1] < 20.0, "{errs:?}");
            assert!(errs[1] / errs[2] > 5.0, "{errs:?}");
        }
    }

    #[test]
    fn kernel_output_is_divergence_free_and_low_mode() {
        let s = GalerkinSpace::new(1).unwrap();
        let op = NoiseOperator::new(NoiseParams {
            kappa: KappaSpec::IntegralKernel { modes: 4, radius: 2.0 },
            c: 0.2,
            ..NoiseParams::additive(1.3)
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = SpectralField::random(&s, &mut rng, 0.0);
        let w = SpectralField::random(&s, &mut rng, 0.0);
        let out = op.apply_noise(&x, &w).unwrap();
        assert!(out.is_valid(1e-13));
        let base = NoiseOperator::additive(1.3).unwrap().apply_noise(&x, &w).unwrap();
        let pert = out.sub(&base).real_coords();
        assert!(pert[4..].iter().all(|v| *v == 0.0));
        assert!(pert[..4].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn trace_matches_closed_form_sum() {
        let s = GalerkinSpace::new(2).unwrap();
        let g = 0.05;
        let op = NoiseOperator::new(NoiseParams {
            g,
            ..NoiseParams::additive(1.3)
        })
        .unwrap();
        // independent summation over the box: two polarizations per k
        let mut expected = 0.0;
        for k1 in -2i32..=2 {
            for k2 in -2i32..=2 {
                for k3 in -2i32..=2 {
                    let k2sum = (k1 * k1 + k2 * k2 + k3 * k3) as f64;
                    if k2sum > 0.0 {
                        expected += 2.0 * k2sum.powf(1.0 + g - 2.0 * 1.3);
                    }
                }
            }
        }
        let rep = op.validate_assumptions(&[SpectralField::zeros(&s)]).unwrap();
        assert!((rep.max_trace - expected).abs() < 1e-12 * expected);
        assert_eq!(rep.max_derivative, 0.0);
        assert!((rep.g_limit - 0.1).abs() < 1e-15);
        assert!(rep.trace_converges);
        assert!(!rep.exceeds_m1);
    }

    #[test]
    fn trace_non_increasing_in_alpha() {
        let s = GalerkinSpace::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = SpectralField::random(&s, &mut rng, 0.5);
        let mut prev = f64::INFINITY;
        for alpha in [1.26, 1.3, 1.35, 1.4, 1.45, 1.49] {
            let op = NoiseOperator::new(NoiseParams {
                alpha,
                ..NoiseParams::default()
            })
            .unwrap();
            let t = op.smoothness_trace(&x);
            assert!(t <= prev);
            prev = t;
        }
    }

    #[test]
    fn degenerate_settings_rejected() {
        let p = NoiseParams {
            c: 1.5,
            ..NoiseParams::default()
        };
        assert!(matches!(NoiseOperator::new(p), Err(Error::DegenerateNoise(_))));
        let p = NoiseParams {
            c: 1.0,
            kappa: KappaSpec::IntegralKernel { modes: 4, radius: 2.0 },
            ..NoiseParams::default()
        };
        assert!(matches!(NoiseOperator::new(p), Err(Error::DegenerateNoise(_))));
    }
}
