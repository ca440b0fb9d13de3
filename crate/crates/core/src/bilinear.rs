//! Leray-projected convective term `b(x, y) = -P((x·∇)y)` and its Galerkin
//! truncation.
//!
//! The product is formed exactly in coefficient space:
//! `((x·∇)y)^_k = Σ_{p+q=k} i (x̂_p · q) ŷ_q`. The fast path walks a precomputed
//! interaction table over the positive half of the output modes and fills the
//! negative half by conjugation. [`bilinear_direct`] is an independent
//! reference that knows nothing about the table.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::spectral::{leray, Coeff, GalerkinSpace, SpectralField, WaveVector, COEFF_ZERO};

/// Support size above which [`bilinear_direct`] refuses to run.
pub const DIRECT_SUPPORT_LIMIT: usize = 500;

#[derive(Clone, Copy, Debug)]
struct Interaction {
    p: u32,
    q: u32,
    qv: [f64; 3],
}

#[derive(Debug)]
struct InteractionTable {
    outputs: Vec<usize>,
    offsets: Vec<usize>,
    entries: Vec<Interaction>,
    kvec: Vec<[f64; 3]>,
}

impl InteractionTable {
    fn new(space: &GalerkinSpace) -> Self {
        let outputs = space.positive_modes().to_vec();
        let mut offsets = Vec::with_capacity(outputs.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for &ko in &outputs {
            let k = space.modes()[ko];
            for (pi, p) in space.modes().iter().enumerate() {
                let q = [k.0[0] - p.0[0], k.0[1] - p.0[1], k.0[2] - p.0[2]];
                if let Some(qi) = space.index_of_raw(q) {
                    entries.push(Interaction {
                        p: pi as u32,
                        q: qi as u32,
                        qv: [q[0] as f64, q[1] as f64, q[2] as f64],
                    });
                }
            }
            offsets.push(entries.len());
        }
        let kvec = outputs.iter().map(|&i| space.modes()[i].as_f64()).collect();
        InteractionTable {
            outputs,
            offsets,
            entries,
            kvec,
        }
    }
}

/// Per-worker evaluator for `b_m` on one Galerkin space.
#[derive(Debug, Clone)]
pub struct BilinearWorkspace {
    space: Arc<GalerkinSpace>,
    table: Arc<InteractionTable>,
}

impl BilinearWorkspace {
    pub fn new(space: &Arc<GalerkinSpace>) -> Self {
        BilinearWorkspace {
            space: Arc::clone(space),
            table: Arc::new(InteractionTable::new(space)),
        }
    }

    pub fn space(&self) -> &Arc<GalerkinSpace> {
        &self.space
    }

    /// Number of retained `(p, q)` interactions feeding the positive outputs.
    pub fn interaction_count(&self) -> usize {
        self.table.entries.len()
    }

    fn check(&self, f: &SpectralField) -> Result<()> {
        if !self.space.same(f.space()) {
            return invalid(format!(
                "field lives at cutoff {} but the workspace is built for cutoff {}",
                f.space().cutoff(),
                self.space.cutoff()
            ));
        }
        Ok(())
    }

    /// `b_m(x, y) = -P_m P((x·∇)y)`.
    pub fn bilinear(&self, x: &SpectralField, y: &SpectralField) -> Result<SpectralField> {
        self.check(x)?;
        self.check(y)?;
        let mut out = SpectralField::zeros(&self.space);
        self.bilinear_into(x.coeffs(), y.coeffs(), out.coeffs_mut());
        Ok(out)
    }

    /// `b_m(x) = b_m(x, x)`.
    pub fn quadratic(&self, x: &SpectralField) -> Result<SpectralField> {
        self.bilinear(x, x)
    }

    /// `b_m(x, y) + b_m(y, x)`, the linearization `b'_m(x)·y`.
    pub fn symmetric(&self, x: &SpectralField, y: &SpectralField) -> Result<SpectralField> {
        self.check(x)?;
        self.check(y)?;
        let mut out = SpectralField::zeros(&self.space);
        self.symmetric_into(x.coeffs(), y.coeffs(), out.coeffs_mut());
        Ok(out)
    }

    /// `ϑ(|Ax|/R) b_m(x)` with the smooth cutoff [`cutoff_weight`].
    pub fn cutoff_bilinear(&self, x: &SpectralField, radius: f64) -> Result<SpectralField> {
        if !(radius > 0.0) {
            return invalid(format!("cutoff radius must be positive, got {radius}"));
        }
        let mut out = self.quadratic(x)?;
        out.scale_mut(cutoff_weight(x.a_norm() / radius));
        Ok(out)
    }

    pub(crate) fn bilinear_into(&self, x: &[Coeff], y: &[Coeff], out: &mut [Coeff]) {
        let t = &*self.table;
        let neg = self.space.negation();
        for (slot, &ko) in t.outputs.iter().enumerate() {
            let mut acc = COEFF_ZERO;
            for e in &t.entries[t.offsets[slot]..t.offsets[slot + 1]] {
                let xp = &x[e.p as usize];
                let s = xp[0] * e.qv[0] + xp[1] * e.qv[1] + xp[2] * e.qv[2];
                let yq = &y[e.q as usize];
                acc[0] += s * yq[0];
                acc[1] += s * yq[1];
                acc[2] += s * yq[2];
            }
            finish(t.kvec[slot], acc, ko, neg[ko], out);
        }
    }

    pub(crate) fn symmetric_into(&self, x: &[Coeff], y: &[Coeff], out: &mut [Coeff]) {
        let t = &*self.table;
        let neg = self.space.negation();
        for (slot, &ko) in t.outputs.iter().enumerate() {
            let mut acc = COEFF_ZERO;
            for e in &t.entries[t.offsets[slot]..t.offsets[slot + 1]] {
                let (p, q) = (e.p as usize, e.q as usize);
                let (xp, yp) = (&x[p], &y[p]);
                let sx = xp[0] * e.qv[0] + xp[1] * e.qv[1] + xp[2] * e.qv[2];
                let sy = yp[0] * e.qv[0] + yp[1] * e.qv[1] + yp[2] * e.qv[2];
                let (xq, yq) = (&x[q], &y[q]);
                acc[0] += sx * yq[0] + sy * xq[0];
                acc[1] += sx * yq[1] + sy * xq[1];
                acc[2] += sx * yq[2] + sy * xq[2];
            }
            finish(t.kvec[slot], acc, ko, neg[ko], out);
        }
    }
}

#[inline]
fn finish(k: [f64; 3], acc: Coeff, ko: usize, kneg: usize, out: &mut [Coeff]) {
    // -P(i acc)
    let i = Complex64::new(0.0, -1.0);
    let v = leray(k, [acc[0] * i, acc[1] * i, acc[2] * i]);
    out[ko] = v;
    out[kneg] = [v[0].conj(), v[1].conj(), v[2].conj()];
}

/// Smooth cutoff: 1 on `[0, 1]`, 0 on `[2, ∞)`, quintic smoothstep in between
/// (C² at both junctions).
pub fn cutoff_weight(r: f64) -> f64 {
    if r <= 1.0 {
        1.0
    } else if r >= 2.0 {
        0.0
    } else {
        let s = r - 1.0;
        1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
    }
}

fn support(f: &SpectralField) -> Vec<(WaveVector, Coeff)> {
    f.space()
        .modes()
        .iter()
        .zip(f.coeffs().iter())
        .filter(|(_, c)| c.iter().any(|z| z.re != 0.0 || z.im != 0.0))
        .map(|(k, c)| (*k, *c))
        .collect()
}

fn direct_sum<F>(x: &SpectralField, y: &SpectralField, mut term: F) -> Result<SpectralField>
where
    F: FnMut([i32; 3], &WaveVector, &Coeff, &WaveVector, &Coeff) -> Coeff,
{
    let sx = support(x);
    let sy = support(y);
    if sx.len() > DIRECT_SUPPORT_LIMIT || sy.len() > DIRECT_SUPPORT_LIMIT {
        return Err(Error::ResourceLimit(format!(
            "direct bilinear sum limited to {DIRECT_SUPPORT_LIMIT} modes per argument (got {} and {})",
            sx.len(),
            sy.len()
        )));
    }
    let mut acc: BTreeMap<[i32; 3], Coeff> = BTreeMap::new();
    for (p, xp) in &sx {
        for (q, yq) in &sy {
            let k = *p + *q;
            if k == [0, 0, 0] {
                continue;
            }
            let t = term(k, p, xp, q, yq);
            let slot = acc.entry(k).or_insert(COEFF_ZERO);
            for d in 0..3 {
                slot[d] += t[d];
            }
        }
    }
    let cutoff = 2 * x.space().cutoff().max(y.space().cutoff());
    let big = GalerkinSpace::new(cutoff)?;
    let mut out = SpectralField::zeros(&big);
    let coeffs = out.coeffs_mut();
    for (k, v) in acc {
        let kf = [k[0] as f64, k[1] as f64, k[2] as f64];
        let p = leray(kf, v);
        let idx = big.index_of_raw(k).expect("sum of retained modes fits the doubled box");
        coeffs[idx] = [-p[0], -p[1], -p[2]];
    }
    Ok(out)
}

/// Reference evaluation of the untruncated `-P((x·∇)y)` by an explicit double
/// sum over the supports of `x` and `y`. The result lives at twice the input
/// cutoff, which holds the full convolution support.
pub fn bilinear_direct(x: &SpectralField, y: &SpectralField) -> Result<SpectralField> {
    let i = Complex64::new(0.0, 1.0);
    direct_sum(x, y, |_k, _p, xp, q, yq| {
        let qf = q.as_f64();
        let s: Complex64 = (0..3).map(|d| xp[d] * qf[d]).sum::<Complex64>() * i;
        [s * yq[0], s * yq[1], s * yq[2]]
    })
}

/// Reference evaluation of `-P(∇·(x⊗y + y⊗x))` using the divergence form
/// `(∇·(x⊗y))^_k = Σ_{p+q=k} i (k·x̂_p) ŷ_q`.
pub fn symmetric_divergence_direct(x: &SpectralField, y: &SpectralField) -> Result<SpectralField> {
    let i = Complex64::new(0.0, 1.0);
    let a = direct_sum(x, y, |k, _p, xp, _q, yq| {
        let kf = [k[0] as f64, k[1] as f64, k[2] as f64];
        let s: Complex64 = (0..3).map(|d| xp[d] * kf[d]).sum::<Complex64>() * i;
        [s * yq[0], s * yq[1], s * yq[2]]
    })?;
    let b = direct_sum(y, x, |k, _p, yp, _q, xq| {
        let kf = [k[0] as f64, k[1] as f64, k[2] as f64];
        let s: Complex64 = (0..3).map(|d| yp[d] * kf[d]).sum::<Complex64>() * i;
        [s * xq[0], s * xq[1], s * xq[2]]
    })?;
    Ok(a.add(&b))
}
