//! Divergence-free Fourier eigenbasis of the Stokes operator on the 2π-periodic
//! 3-torus.
//!
//! Fields are stored as full complex 3-vector coefficients on every retained
//! wavevector `k` with `0 < |k|_∞ ≤ cutoff`. The mean mode is excluded so that
//! `-A` (eigenvalue `|k|²` on mode `k`) is strictly positive. Inner products use
//! the normalized measure `(2π)^{-3} dξ`, so by Parseval `|u|² = Σ_k |û_k|²`.
//!
//! Besides the complex coefficients every space carries a real orthonormal
//! eigenbasis `e_n`: for each positive representative `k` (first nonzero
//! component positive) and each of the two polarizations `p_a(k) ⊥ k`,
//!
//! ```text
//!   e_{4j+2a}   = √2 cos(k·ξ) p_a(k)
//!   e_{4j+2a+1} = √2 sin(k·ξ) p_a(k)
//! ```
//!
//! The real coordinates `q_n = (u, e_n)` are what the noise acts on.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Complex velocity coefficient of one Fourier mode.
pub type Coeff = [Complex64; 3];

pub(crate) const CZERO: Complex64 = Complex64::new(0.0, 0.0);
pub(crate) const COEFF_ZERO: Coeff = [CZERO; 3];

/// Nonzero integer wavevector on the 2π-periodic torus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WaveVector(pub [i32; 3]);

impl WaveVector {
    pub fn new(k1: i32, k2: i32, k3: i32) -> Result<Self> {
        if k1 == 0 && k2 == 0 && k3 == 0 {
            return invalid("the zero wavevector carries the mean mode and is excluded");
        }
        Ok(WaveVector([k1, k2, k3]))
    }

    pub fn norm_sq(&self) -> i64 {
        self.0.iter().map(|&c| (c as i64) * (c as i64)).sum()
    }

    /// Eigenvalue of `-A` on this mode.
    pub fn eigenvalue(&self) -> f64 {
        self.norm_sq() as f64
    }

    pub fn sup_norm(&self) -> i32 {
        self.0.iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    /// First nonzero component is positive.
    pub fn is_positive(&self) -> bool {
        self.0.iter().find(|&&c| c != 0).is_some_and(|&c| c > 0)
    }

    pub fn as_f64(&self) -> [f64; 3] {
        [self.0[0] as f64, self.0[1] as f64, self.0[2] as f64]
    }
}

impl std::ops::Neg for WaveVector {
    type Output = WaveVector;

    fn neg(self) -> WaveVector {
        WaveVector([-self.0[0], -self.0[1], -self.0[2]])
    }
}

impl std::ops::Add for WaveVector {
    type Output = [i32; 3];
    fn add(self, rhs: Self) -> [i32; 3] {
        [self.0[0] + rhs.0[0], self.0[1] + rhs.0[1], self.0[2] + rhs.0[2]]
    }
}

/// Retained-mode set for a cutoff level together with the spectrum of `-A`.
pub struct GalerkinSpace {
    cutoff: u32,
    modes: Vec<WaveVector>,
    eigenvalues: Vec<f64>,
    negation: Vec<usize>,
    lookup: Vec<i32>,
    positive: Vec<usize>,
    polarization: Vec<[[f64; 3]; 2]>,
}

impl std::fmt::Debug for GalerkinSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GalerkinSpace")
            .field("cutoff", &self.cutoff)
            .field("modes", &self.modes.len())
            .finish()
    }
}

impl GalerkinSpace {
    /// Retains every `k` with `0 < |k|_∞ ≤ cutoff`, ordered by `(|k|², k₁, k₂, k₃)`.
    pub fn new(cutoff: u32) -> Result<Arc<Self>> {
        if cutoff == 0 {
            return invalid("cutoff must be at least 1 (cutoff 0 gives an empty space)");
        }
        if cutoff > 32 {
            return invalid(format!("cutoff {cutoff} is beyond desk scale (max 32)"));
        }
        let m = cutoff as i32;
        let mut modes = Vec::new();
        for k1 in -m..=m {
            for k2 in -m..=m {
                for k3 in -m..=m {
                    if let Ok(k) = WaveVector::new(k1, k2, k3) {
                        modes.push(k);
                    }
                }
            }
        }
        modes.sort_by_key(|k| (k.norm_sq(), k.0[0], k.0[1], k.0[2]));

        let side = (2 * m + 1) as usize;
        let mut lookup = vec![-1i32; side * side * side];
        for (i, k) in modes.iter().enumerate() {
            lookup[box_index(k.0, m, side)] = i as i32;
        }
        let negation = modes
            .iter()
            .map(|k| lookup[box_index((-*k).0, m, side)] as usize)
            .collect::<Vec<_>>();
        let eigenvalues = modes.iter().map(|k| k.eigenvalue()).collect();
        let positive = (0..modes.len()).filter(|&i| modes[i].is_positive()).collect();
        let polarization = modes
            .iter()
            .map(|k| {
                let rep = if k.is_positive() { *k } else { -*k };
                polarization_pair(rep.as_f64())
            })
            .collect();

        Ok(Arc::new(GalerkinSpace {
            cutoff,
            modes,
            eigenvalues,
            negation,
            lookup,
            positive,
            polarization,
        }))
    }

    pub fn cutoff(&self) -> u32 {
        self.cutoff
    }

    pub fn modes(&self) -> &[WaveVector] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Number of real degrees of freedom: two polarizations of one complex
    /// amplitude per `{k, -k}` pair, i.e. four reals per pair.
    pub fn dim(&self) -> usize {
        4 * self.positive.len()
    }

    pub fn index_of(&self, k: WaveVector) -> Option<usize> {
        self.index_of_raw(k.0)
    }

    pub(crate) fn index_of_raw(&self, k: [i32; 3]) -> Option<usize> {
        let m = self.cutoff as i32;
        if k.iter().any(|c| c.abs() > m) {
            return None;
        }
        let side = (2 * m + 1) as usize;
        match self.lookup[box_index(k, m, side)] {
            -1 => None,
            i => Some(i as usize),
        }
    }

    pub fn negation(&self) -> &[usize] {
        &self.negation
    }

    /// Mode indices of the positive representatives, in mode order.
    pub fn positive_modes(&self) -> &[usize] {
        &self.positive
    }

    pub fn polarization(&self, mode: usize) -> &[[f64; 3]; 2] {
        &self.polarization[mode]
    }

    /// Eigenvalue of `-A` on the real basis vector `e_n`.
    pub fn basis_eigenvalue(&self, n: usize) -> f64 {
        self.eigenvalues[self.positive[n / 4]]
    }

    pub fn basis_eigenvalues(&self) -> Vec<f64> {
        (0..self.dim()).map(|n| self.basis_eigenvalue(n)).collect()
    }

    /// Wavevector of the real basis vector `e_n`.
    pub fn basis_mode(&self, n: usize) -> WaveVector {
        self.modes[self.positive[n / 4]]
    }

    pub fn same(&self, other: &GalerkinSpace) -> bool {
        self.cutoff == other.cutoff
    }
}

fn box_index(k: [i32; 3], m: i32, side: usize) -> usize {
    ((k[0] + m) as usize * side + (k[1] + m) as usize) * side + (k[2] + m) as usize
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Two orthonormal real vectors orthogonal to `k`, built from the coordinate
/// axis least aligned with `k`.
fn polarization_pair(k: [f64; 3]) -> [[f64; 3]; 2] {
    let mut axis = 0;
    for i in 1..3 {
        if k[i].abs() < k[axis].abs() {
            axis = i;
        }
    }
    let mut e = [0.0; 3];
    e[axis] = 1.0;
    let p1 = normalize(cross(k, e));
    let p2 = normalize(cross(normalize(k), p1));
    [p1, p2]
}

/// Divergence-free real velocity field stored as Fourier coefficients.
#[derive(Clone, Debug)]
pub struct SpectralField {
    space: Arc<GalerkinSpace>,
    coeffs: Vec<Coeff>,
}

impl PartialEq for SpectralField {
    fn eq(&self, other: &Self) -> bool {
        self.space.same(&other.space) && self.coeffs == other.coeffs
    }
}

impl SpectralField {
    pub fn zeros(space: &Arc<GalerkinSpace>) -> Self {
        SpectralField {
            space: Arc::clone(space),
            coeffs: vec![COEFF_ZERO; space.len()],
        }
    }

    /// Wraps raw coefficients; the caller guarantees the reality and
    /// divergence constraints.
    pub(crate) fn from_raw(space: &Arc<GalerkinSpace>, coeffs: Vec<Coeff>) -> Self {
        debug_assert_eq!(coeffs.len(), space.len());
        SpectralField {
            space: Arc::clone(space),
            coeffs,
        }
    }

    /// Sets the coefficient on `k` (and its conjugate on `-k`), rejecting
    /// vectors that are not orthogonal to `k`.
    pub fn with_mode(mut self, k: WaveVector, value: Coeff) -> Result<Self> {
        let Some(i) = self.space.index_of(k) else {
            return invalid(format!("wavevector {:?} is not retained at cutoff {}", k.0, self.space.cutoff));
        };
        let kf = k.as_f64();
        let div = value[0] * kf[0] + value[1] * kf[1] + value[2] * kf[2];
        let scale = value.iter().map(|c| c.norm()).fold(1.0, f64::max) * k.eigenvalue().sqrt();
        if div.norm() > 1e-12 * scale {
            return invalid(format!("coefficient on {:?} is not divergence-free", k.0));
        }
        let j = self.space.negation[i];
        self.coeffs[i] = value;
        self.coeffs[j] = [value[0].conj(), value[1].conj(), value[2].conj()];
        Ok(self)
    }

    /// Single real mode `amplitude · (cos(k·ξ) v)` with `v ⊥ k` real.
    pub fn cosine_mode(space: &Arc<GalerkinSpace>, k: WaveVector, v: [f64; 3], amplitude: f64) -> Result<Self> {
        let half = |c: f64| Complex64::new(0.5 * amplitude * c, 0.0);
        SpectralField::zeros(space).with_mode(k, [half(v[0]), half(v[1]), half(v[2])])
    }

    /// Field with real coordinates `q` in the orthonormal basis `e_n`.
    pub fn from_real_coords(space: &Arc<GalerkinSpace>, q: &[f64]) -> Result<Self> {
        if q.len() != space.dim() {
            return invalid(format!("expected {} real coordinates, got {}", space.dim(), q.len()));
        }
        let mut f = SpectralField::zeros(space);
        coords_to_coeffs(space, q, &mut f.coeffs);
        Ok(f)
    }

    /// Basis vector `e_n` scaled by `amplitude`.
    pub fn basis_vector(space: &Arc<GalerkinSpace>, n: usize, amplitude: f64) -> Result<Self> {
        if n >= space.dim() {
            return invalid(format!("basis index {n} out of range (dim {})", space.dim()));
        }
        let mut q = vec![0.0; space.dim()];
        q[n] = amplitude;
        SpectralField::from_real_coords(space, &q)
    }

    /// Gaussian random field with coordinate standard deviation `μ_n^{-decay}`.
    pub fn random<R: Rng + ?Sized>(space: &Arc<GalerkinSpace>, rng: &mut R, decay: f64) -> Self {
        let q: Vec<f64> = (0..space.dim())
            .map(|n| {
                let z: f64 = rng.sample(StandardNormal);
                z * space.basis_eigenvalue(n).powf(-decay)
            })
            .collect();
        SpectralField::from_real_coords(space, &q).expect("dimension matches")
    }

    pub fn space(&self) -> &Arc<GalerkinSpace> {
        &self.space
    }

    pub fn coeffs(&self) -> &[Coeff] {
        &self.coeffs
    }

    pub(crate) fn coeffs_mut(&mut self) -> &mut [Coeff] {
        &mut self.coeffs
    }

    pub fn coeff(&self, k: WaveVector) -> Option<Coeff> {
        self.space.index_of(k).map(|i| self.coeffs[i])
    }

    pub fn real_coords(&self) -> Vec<f64> {
        let mut q = vec![0.0; self.space.dim()];
        coeffs_to_coords(&self.space, &self.coeffs, &mut q);
        q
    }

    /// `(u, v)` in H.
    pub fn inner(&self, other: &SpectralField) -> f64 {
        assert!(self.space.same(&other.space), "inner product across Galerkin spaces");
        inner_raw(&self.coeffs, &other.coeffs)
    }

    /// `|u|` in H.
    pub fn norm(&self) -> f64 {
        self.sobolev_norm(0.0)
    }

    /// `|(-A)^γ u| = (Σ_k |k|^{4γ} |û_k|²)^{1/2}`.
    pub fn sobolev_norm(&self, gamma: f64) -> f64 {
        sobolev_sq_raw(&self.space, &self.coeffs, gamma).sqrt()
    }

    /// `|Au|`, the D(A) graph seminorm.
    pub fn a_norm(&self) -> f64 {
        a_norm_sq_raw(&self.space, &self.coeffs).sqrt()
    }

    /// `(-A)^γ u`.
    pub fn fractional_power(&self, gamma: f64) -> SpectralField {
        let mut out = self.clone();
        for (c, &mu) in out.coeffs.iter_mut().zip(self.space.eigenvalues.iter()) {
            let s = mu.powf(gamma);
            for z in c.iter_mut() {
                *z *= s;
            }
        }
        out
    }

    /// `e^{tA} u`.
    pub fn heat(&self, t: f64) -> SpectralField {
        let mut out = self.clone();
        for (c, &mu) in out.coeffs.iter_mut().zip(self.space.eigenvalues.iter()) {
            let s = (-mu * t).exp();
            for z in c.iter_mut() {
                *z *= s;
            }
        }
        out
    }

    /// Galerkin projection onto `space` (coefficients outside are dropped,
    /// missing ones are zero).
    pub fn project(&self, space: &Arc<GalerkinSpace>) -> SpectralField {
        if self.space.same(space) {
            return SpectralField {
                space: Arc::clone(space),
                coeffs: self.coeffs.clone(),
            };
        }
        let mut out = SpectralField::zeros(space);
        for (i, k) in space.modes.iter().enumerate() {
            if let Some(j) = self.space.index_of(*k) {
                out.coeffs[i] = self.coeffs[j];
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> SpectralField {
        let mut out = self.clone();
        out.scale_mut(s);
        out
    }

    pub fn scale_mut(&mut self, s: f64) {
        for c in self.coeffs.iter_mut() {
            for z in c.iter_mut() {
                *z *= s;
            }
        }
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &SpectralField) {
        assert!(self.space.same(&other.space), "axpy across Galerkin spaces");
        for (a, b) in self.coeffs.iter_mut().zip(other.coeffs.iter()) {
            for d in 0..3 {
                a[d] += b[d] * s;
            }
        }
    }

    pub fn add(&self, other: &SpectralField) -> SpectralField {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &SpectralField) -> SpectralField {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c.iter().all(|z| z.re == 0.0 && z.im == 0.0))
    }

    /// Largest `|k · û_k|` over retained modes.
    pub fn divergence_residual(&self) -> f64 {
        divergence_residual_raw(&self.space, &self.coeffs)
    }

    /// Largest `|û_{-k} - conj(û_k)|` over retained modes.
    pub fn reality_residual(&self) -> f64 {
        reality_residual_raw(&self.space, &self.coeffs)
    }

    /// Divergence and reality constraints hold to `tol` relative to `|u|`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let scale = self.norm().max(1.0) * (3.0 * (self.space.cutoff as f64).powi(2)).sqrt();
        self.divergence_residual() <= tol * scale && self.reality_residual() <= tol * scale
    }

    /// Number of wavevectors with a nonzero coefficient.
    pub fn support_len(&self) -> usize {
        self.coeffs
            .iter()
            .filter(|c| c.iter().any(|z| z.re != 0.0 || z.im != 0.0))
            .count()
    }
}

pub(crate) fn inner_raw(a: &[Coeff], b: &[Coeff]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        for d in 0..3 {
            acc += x[d].re * y[d].re + x[d].im * y[d].im;
        }
    }
    acc
}

pub(crate) fn sobolev_sq_raw(space: &GalerkinSpace, c: &[Coeff], gamma: f64) -> f64 {
    let mut acc = 0.0;
    for (z, &mu) in c.iter().zip(space.eigenvalues.iter()) {
        let m2 = z[0].norm_sqr() + z[1].norm_sqr() + z[2].norm_sqr();
        if m2 != 0.0 {
            acc += mu.powf(2.0 * gamma) * m2;
        }
    }
    acc
}

pub(crate) fn a_norm_sq_raw(space: &GalerkinSpace, c: &[Coeff]) -> f64 {
    let mut acc = 0.0;
    for (z, &mu) in c.iter().zip(space.eigenvalues.iter()) {
        acc += mu * mu * (z[0].norm_sqr() + z[1].norm_sqr() + z[2].norm_sqr());
    }
    acc
}

/// `(Ax, Ay)`.
pub(crate) fn a_inner_raw(space: &GalerkinSpace, x: &[Coeff], y: &[Coeff]) -> f64 {
    let mut acc = 0.0;
    for ((a, b), &mu) in x.iter().zip(y.iter()).zip(space.eigenvalues.iter()) {
        let mut s = 0.0;
        for d in 0..3 {
            s += a[d].re * b[d].re + a[d].im * b[d].im;
        }
        acc += mu * mu * s;
    }
    acc
}

pub(crate) fn divergence_residual_raw(space: &GalerkinSpace, c: &[Coeff]) -> f64 {
    space
        .modes
        .iter()
        .zip(c.iter())
        .map(|(k, z)| {
            let kf = k.as_f64();
            (z[0] * kf[0] + z[1] * kf[1] + z[2] * kf[2]).norm()
        })
        .fold(0.0, f64::max)
}

pub(crate) fn reality_residual_raw(space: &GalerkinSpace, c: &[Coeff]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, z) in c.iter().enumerate() {
        let w = &c[space.negation[i]];
        for d in 0..3 {
            worst = worst.max((w[d] - z[d].conj()).norm());
        }
    }
    worst
}

pub(crate) fn coeffs_to_coords(space: &GalerkinSpace, c: &[Coeff], q: &mut [f64]) {
    for (j, &i) in space.positive.iter().enumerate() {
        let p = &space.polarization[i];
        let z = &c[i];
        for a in 0..2 {
            let pa = p[a];
            let re = z[0].re * pa[0] + z[1].re * pa[1] + z[2].re * pa[2];
            let im = z[0].im * pa[0] + z[1].im * pa[1] + z[2].im * pa[2];
            q[4 * j + 2 * a] = SQRT_2 * re;
            q[4 * j + 2 * a + 1] = -SQRT_2 * im;
        }
    }
}

pub(crate) fn coords_to_coeffs(space: &GalerkinSpace, q: &[f64], c: &mut [Coeff]) {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    for (j, &i) in space.positive.iter().enumerate() {
        let p = &space.polarization[i];
        let z0 = Complex64::new(q[4 * j] * s, -q[4 * j + 1] * s);
        let z1 = Complex64::new(q[4 * j + 2] * s, -q[4 * j + 3] * s);
        let mut v = COEFF_ZERO;
        for d in 0..3 {
            v[d] = z0 * p[0][d] + z1 * p[1][d];
        }
        c[i] = v;
        c[space.negation[i]] = [v[0].conj(), v[1].conj(), v[2].conj()];
    }
}

/// Leray projection of one coefficient: `v - k (k·v)/|k|²`.
pub(crate) fn leray(k: [f64; 3], v: Coeff) -> Coeff {
    let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
    let kv = (v[0] * k[0] + v[1] * k[1] + v[2] * k[2]) / k2;
    [v[0] - kv * k[0], v[1] - kv * k[1], v[2] - kv * k[2]]
}

/// Uniform tensor grid on the torus used for physical-space quadrature.
#[derive(Debug, Clone)]
pub struct PhysicalGrid {
    points: usize,
    cutoff: i32,
    // phase[axis-independent][j][k+m] = e^{i k ξ_j}
    phase: Vec<Complex64>,
}

impl PhysicalGrid {
    /// `points` per axis; resolves a cutoff-`m` field's quadratic
    /// quantities exactly when `points > 2m`.
    pub fn new(cutoff: u32, points: usize) -> Self {
        let m = cutoff as i32;
        let width = (2 * m + 1) as usize;
        let mut phase = vec![CZERO; points * width];
        for j in 0..points {
            let xi = 2.0 * PI * j as f64 / points as f64;
            for k in -m..=m {
                phase[j * width + (k + m) as usize] = Complex64::from_polar(1.0, k as f64 * xi);
            }
        }
        PhysicalGrid {
            points,
            cutoff: m,
            phase,
        }
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points * self.points * self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points == 0
    }

    fn ph(&self, j: usize, k: i32) -> Complex64 {
        let width = (2 * self.cutoff + 1) as usize;
        self.phase[j * width + (k + self.cutoff) as usize]
    }

    /// Point values `u(ξ)` in row-major `(j1, j2, j3)` order.
    pub fn evaluate(&self, field: &SpectralField) -> Vec<[f64; 3]> {
        assert!(field.space.cutoff as i32 <= self.cutoff, "grid cutoff too small for field");
        let n = self.points;
        let mut out = vec![[0.0; 3]; n * n * n];
        let support: Vec<(WaveVector, Coeff)> = field
            .space
            .modes
            .iter()
            .zip(field.coeffs.iter())
            .filter(|(_, c)| c.iter().any(|z| z.re != 0.0 || z.im != 0.0))
            .map(|(k, c)| (*k, *c))
            .collect();
        for j1 in 0..n {
            for j2 in 0..n {
                for j3 in 0..n {
                    let mut v = [0.0; 3];
                    for (k, c) in &support {
                        let e = self.ph(j1, k.0[0]) * self.ph(j2, k.0[1]) * self.ph(j3, k.0[2]);
                        for d in 0..3 {
                            v[d] += (c[d] * e).re;
                        }
                    }
                    out[(j1 * n + j2) * n + j3] = v;
                }
            }
        }
        out
    }

    /// Discrete Fourier analysis of point values onto the modes of `space`,
    /// followed by Leray projection.
    pub fn analyze(&self, values: &[[f64; 3]], space: &Arc<GalerkinSpace>) -> SpectralField {
        let n = self.points;
        assert_eq!(values.len(), n * n * n);
        let norm = 1.0 / (n * n * n) as f64;
        let mut out = SpectralField::zeros(space);
        for &i in space.positive_modes() {
            let k = space.modes[i];
            let mut acc = COEFF_ZERO;
            for j1 in 0..n {
                for j2 in 0..n {
                    let e12 = self.ph(j1, k.0[0]) * self.ph(j2, k.0[1]);
                    for j3 in 0..n {
                        let e = (e12 * self.ph(j3, k.0[2])).conj();
                        let v = &values[(j1 * n + j2) * n + j3];
                        for d in 0..3 {
                            acc[d] += e * v[d];
                        }
                    }
                }
            }
            for z in acc.iter_mut() {
                *z *= norm;
            }
            let p = leray(k.as_f64(), acc);
            out.coeffs[i] = p;
            out.coeffs[space.negation[i]] = [p[0].conj(), p[1].conj(), p[2].conj()];
        }
        out
    }

    /// `(2π)^{-3} ∫ |u|² dξ` by the trapezoid rule.
    pub fn mean_square(&self, field: &SpectralField) -> f64 {
        let vals = self.evaluate(field);
        vals.iter().map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sum::<f64>() / vals.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cutoff_one_has_26_modes() {
        let s = GalerkinSpace::new(1).unwrap();
        assert_eq!(s.len(), 26);
        assert_eq!(s.dim(), 52);
        assert_eq!(s.modes()[0], WaveVector([-1, 0, 0]));
        let min = s.eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(min, 1.0);
        assert!(s.index_of(WaveVector([1, 0, 0])).is_some());
    }

    #[test]
    fn cutoff_zero_rejected() {
        assert!(GalerkinSpace::new(0).is_err());
        assert!(WaveVector::new(0, 0, 0).is_err());
    }

    #[test]
    fn mode_list_closed_under_negation() {
        let s = GalerkinSpace::new(3).unwrap();
        for (i, k) in s.modes().iter().enumerate() {
            assert_eq!(s.modes()[s.negation()[i]], -*k);
        }
    }

    #[test]
    fn ordering_is_lexicographic_on_energy_then_components() {
        let s = GalerkinSpace::new(2).unwrap();
        let keys: Vec<_> = s.modes().iter().map(|k| (k.norm_sq(), k.0)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn polarizations_orthonormal_and_transverse() {
        let s = GalerkinSpace::new(2).unwrap();
        for (i, k) in s.modes().iter().enumerate() {
            let kf = k.as_f64();
            let p = s.polarization(i);
            let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            assert!(dot(p[0], kf).abs() < 1e-14);
            assert!(dot(p[1], kf).abs() < 1e-14);
            assert!(dot(p[0], p[1]).abs() < 1e-14);
            assert!((dot(p[0], p[0]) - 1.0).abs() < 1e-14);
            assert!((dot(p[1], p[1]) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn real_coords_round_trip_and_isometry() {
        let s = GalerkinSpace::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = SpectralField::random(&s, &mut rng, 0.5);
        let q = f.real_coords();
        let g = SpectralField::from_real_coords(&s, &q).unwrap();
        let diff = f.sub(&g).norm();
        assert!(diff < 1e-13 * f.norm());
        let qn: f64 = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((qn - f.norm()).abs() < 1e-13 * qn);
        assert!(f.is_valid(1e-13));
    }

    #[test]
    fn fractional_power_examples() {
        let s = GalerkinSpace::new(2).unwrap();
        let e1 = SpectralField::cosine_mode(&s, WaveVector([1, 0, 0]), [0.0, 1.0, 0.0], 1.0).unwrap();
        assert_eq!(e1.fractional_power(7.0), e1);
        let k = WaveVector([1, 1, 0]);
        let f = SpectralField::cosine_mode(&s, k, [0.0, 0.0, 1.0], 1.0).unwrap();
        let g = f.fractional_power(0.5);
        let ratio = g.coeff(k).unwrap()[2].re / f.coeff(k).unwrap()[2].re;
        assert!((ratio - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sobolev_norm_of_single_mode() {
        let s = GalerkinSpace::new(1).unwrap();
        assert_eq!(SpectralField::zeros(&s).sobolev_norm(1.3), 0.0);
        // unit-amplitude basis vector on k = (1,1,0)
        let n = (0..s.dim()).find(|&n| s.basis_mode(n) == WaveVector([1, 1, 0])).unwrap();
        let f = SpectralField::basis_vector(&s, n, 1.0).unwrap();
        assert!((f.norm() - 1.0).abs() < 1e-15);
        assert!((f.sobolev_norm(1.0) - 2.0).abs() < 1e-14);
        assert!((f.a_norm() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn projection_drops_outside_modes() {
        let s1 = GalerkinSpace::new(1).unwrap();
        let s2 = GalerkinSpace::new(2).unwrap();
        let f = SpectralField::cosine_mode(&s2, WaveVector([2, 0, 0]), [0.0, 1.0, 0.0], 1.0).unwrap();
        assert!(f.project(&s1).is_zero());
        let g = SpectralField::cosine_mode(&s1, WaveVector([1, 0, 0]), [0.0, 1.0, 0.0], 1.0).unwrap();
        assert_eq!(g.project(&s2).project(&s1), g);
    }

    #[test]
    fn negative_gamma_inverts() {
        let s = GalerkinSpace::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = SpectralField::random(&s, &mut rng, 0.0);
        let g = f.fractional_power(0.7).fractional_power(-0.7);
        assert!(g.sub(&f).norm() <= 1e-14 * f.norm());
    }

    #[test]
    fn parseval_matches_grid_quadrature() {
        let s = GalerkinSpace::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = SpectralField::random(&s, &mut rng, 0.3);
        let grid = PhysicalGrid::new(2, 7);
        let quad = grid.mean_square(&f);
        let spec = f.norm().powi(2);
        assert!((quad - spec).abs() <= 1e-10 * spec);
    }

    #[test]
    fn grid_analysis_inverts_evaluation() {
        let s = GalerkinSpace::new(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = SpectralField::random(&s, &mut rng, 0.0);
        let grid = PhysicalGrid::new(1, 5);
        let g = grid.analyze(&grid.evaluate(&f), &s);
        assert!(g.sub(&f).norm() < 1e-13 * f.norm());
    }

    #[test]
    fn with_mode_rejects_compressible_coefficient() {
        let s = GalerkinSpace::new(1).unwrap();
        let c = Complex64::new(1.0, 0.0);
        assert!(SpectralField::zeros(&s)
            .with_mode(WaveVector([1, 0, 0]), [c, CZERO, CZERO])
            .is_err());
        assert!(SpectralField::zeros(&s)
            .with_mode(WaveVector([2, 0, 0]), [CZERO, c, CZERO])
            .is_err());
    }
}
