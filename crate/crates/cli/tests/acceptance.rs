//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line
//! each; pass criterion numbers as arguments to run a subset.

use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spde_core::analysis::{self, ErgodicOptions, GradientScalingSetup, ZProbe};
use spde_core::bilinear::bilinear_direct;
use spde_core::control::{build_control, verify_reachability};
use spde_core::kolmogorov::{
    check_chapman_kolmogorov, check_variation_of_constants, compare_bel_finite_difference, estimate_semigroup_at,
};
use spde_core::sde::simulate_with_variation;
use spde_core::stats::gaussian_quadratic_moment;
use spde_core::{
    BilinearWorkspace, GalerkinSpace, NoiseOperator, NoiseParams, Observable, SimConfig, SpectralField, WaveVector,
};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 14] = [
    ("bilinear oracle equivalence", bilinear_oracle),
    ("energy orthogonality", energy_orthogonality),
    ("interpolation with constant 1", interpolation),
    ("OU closed form", ou_closed_form),
    ("BEL against finite difference", bel_vs_fd),
    ("variation of constants", variation_of_constants),
    ("Chapman-Kolmogorov", chapman_kolmogorov),
    ("pathwise energy witness", pathwise_energy),
    ("variation bound witness", variation_bound),
    ("gradient scaling", gradient_scaling),
    ("Z regularity", z_regularity),
    ("ergodic self-consistency", ergodic),
    ("reachability", reachability),
    ("determinism across workers", determinism),
];

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (i, (name, run)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let out = run();
        let verdict = if out.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:>2} {verdict} {name}: {} ({:.1} s)",
            out.detail,
            start.elapsed().as_secs_f64()
        );
        if !out.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn space(m: u32) -> Arc<GalerkinSpace> {
    GalerkinSpace::new(m).unwrap()
}

fn config(m: u32, dt: f64, horizon: f64, noise: NoiseParams, seed: u64) -> SimConfig {
    SimConfig::new(&space(m), dt, horizon, NoiseOperator::new(noise).unwrap(), seed).unwrap()
}

fn random_field(s: &Arc<GalerkinSpace>, rng: &mut ChaCha8Rng, a_norm: f64) -> SpectralField {
    let f = SpectralField::random(s, rng, 1.0);
    let a = f.a_norm();
    f.scaled(a_norm / a)
}

/// `|(-A)^p x|` from real coordinates and basis eigenvalues.
fn power_norm(x: &SpectralField, p: f64) -> f64 {
    let lam = x.space().basis_eigenvalues();
    x.real_coords().iter().zip(&lam).map(|(q, l)| l.powf(2.0 * p) * q * q).sum::<f64>().sqrt()
}

fn bilinear_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for m in 1..=3 {
        let s = space(m);
        let ws = BilinearWorkspace::new(&s);
        for _ in 0..200 {
            let amp = 1.0 + 4.0 * rng.random::<f64>();
            let x = random_field(&s, &mut rng, amp);
            let y = random_field(&s, &mut rng, 1.0);
            let fast = ws.bilinear(&x, &y).unwrap();
            let direct = bilinear_direct(&x, &y).unwrap().project(&s);
            worst = worst.max(fast.sub(&direct).norm() / direct.norm());
        }
    }
    Outcome::new(worst <= 1e-12, format!("max relative deviation {worst:.2e} over 600 pairs, cutoffs 1..3"))
}

fn energy_orthogonality() -> Outcome {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for m in 1..=3 {
        let s = space(m);
        let ws = BilinearWorkspace::new(&s);
        for i in 0..100 {
            let x = random_field(&s, &mut rng, 0.1 * (1 + i) as f64);
            let y = random_field(&s, &mut rng, 0.05 * (1 + i) as f64);
            let v = ws.bilinear(&x, &y).unwrap().inner(&y).abs();
            let scale = (1.0 + x.a_norm()) * (1.0 + y.a_norm()) * (1.0 + y.norm());
            worst = worst.max(v / scale);
        }
    }
    Outcome::new(worst <= 1e-10, format!("max normalized |(b(x,y),y)| = {worst:.2e}"))
}

fn interpolation() -> Outcome {
    let triples = [(0.0, 0.5, 1.0), (0.25, 0.5, 1.5), (0.5, 1.0, 2.0)];
    let mut worst = f64::NEG_INFINITY;
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let s = space(2);
    for (a, b, c) in triples {
        for _ in 0..100 {
            let x = random_field(&s, &mut rng, 1.0);
            let lhs = x.sobolev_norm(b);
            let rhs = power_norm(&x, a).powf((c - b) / (c - a)) * power_norm(&x, c).powf((b - a) / (c - a));
            worst = worst.max(lhs / rhs - 1.0);
        }
    }
    Outcome::new(worst <= 1e-12, format!("max lhs/rhs - 1 = {worst:.2e} over 3 triples"))
}

fn ou_closed_form() -> Outcome {
    let params = NoiseParams::additive(1.3);
    let alpha = params.alpha;
    let cfg = config(1, 1e-3, 1.0, params, 104).without_nonlinearity();
    let x0 = SpectralField::zeros(cfg.space());
    let times = [0.5, 1.0];
    let est = estimate_semigroup_at(&Observable::norm_sq(), &times, &x0, &cfg, 100_000).unwrap();
    let lam = cfg.space().basis_eigenvalues();
    let mut pass = true;
    let mut parts = Vec::new();
    for (t, e) in times.iter().zip(&est) {
        let exact: f64 = lam
            .iter()
            .map(|l| l.powf(-2.0 * alpha) * (1.0 - (-2.0 * l * t).exp()) / (2.0 * l))
            .sum();
        let z = (e.value - exact).abs() / e.stderr;
        let rel = (e.value - exact).abs() / exact;
        pass &= z <= 3.0 && rel <= 0.02;
        parts.push(format!("t={t}: {:.5} vs {exact:.5} (z {z:.2}, rel {rel:.2e})", e.value));
    }
    Outcome::new(pass, parts.join("; "))
}

fn bel_vs_fd() -> Outcome {
    let cfg = config(1, 1e-3, 0.5, NoiseParams::default().with_scale(0.15), 105);
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let x = random_field(cfg.space(), &mut rng, 0.2);
    let h = SpectralField::basis_vector(cfg.space(), 0, 1.0).unwrap();
    let g = compare_bel_finite_difference(&Observable::sin_coord(0, 1.0), 10.0, 0.5, &x, &h, 1e-3, &cfg, 100_000)
        .unwrap();
    let rel = g.relative_error();
    Outcome::new(
        rel < 0.05,
        format!(
            "BEL {:.5} ± {:.5}, FD {:.5} ± {:.5}, relative error {rel:.3}",
            g.bel.value, g.bel.stderr, g.finite_difference.value, g.finite_difference.stderr
        ),
    )
}

fn variation_of_constants() -> Outcome {
    let cfg = config(1, 1e-3, 0.5, NoiseParams::default(), 106);
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let x = random_field(cfg.space(), &mut rng, 1.0);
    let phi = Observable::bounded_energy();
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, outer, inner) in [(0.0, 200, 5), (1.0, 800, 20)] {
        let r = check_variation_of_constants(&phi, k, 0.5, &x, &cfg, outer, inner).unwrap();
        pass &= r.pass;
        parts.push(format!("K={k}: residual {:.2e} ± {:.2e}", r.residual.value, r.residual.stderr));
    }
    Outcome::new(pass, parts.join("; "))
}

fn chapman_kolmogorov() -> Outcome {
    let cfg = config(1, 1e-3, 1.0, NoiseParams::default(), 107);
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let x = random_field(cfg.space(), &mut rng, 1.0);
    let panel = [
        Observable::cos_coord(0, 1.0),
        Observable::tanh_coord(1, 2.0),
        Observable::gaussian_bump(2, 1.0),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for phi in &panel {
        let r = check_chapman_kolmogorov(phi, 0.5, 0.5, &x, &cfg, 400, 20).unwrap();
        let combined = r.direct.stderr.hypot(r.nested.stderr);
        let gap = (r.direct.value - r.nested.value).abs();
        pass &= gap <= 3.0 * combined;
        parts.push(format!("{}: |gap| {gap:.2e} vs 3σ {:.2e}", phi.name(), 3.0 * combined));
    }
    Outcome::new(pass, parts.join("; "))
}

fn pathwise_energy() -> Outcome {
    let cfg = config(2, 1e-3, 1.0, NoiseParams::default(), 108);
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let x = random_field(cfg.space(), &mut rng, 1.0);
    let (series, censored) = analysis::energy_series(&x, &cfg, 2000).unwrap();
    let grid = analysis::DEFAULT_CONSTANT_GRID;
    let half = analysis::check_pathwise_energy_series(&series[..1000], &grid).unwrap();
    let full = analysis::check_pathwise_energy_series(&series, &grid).unwrap();
    let (c1, c2) = (half.witness["c"], full.witness["c"]);
    let stable = (c2 - c1).abs() <= 0.1 * c2;
    Outcome::new(
        half.pass && full.pass && c2 <= 100.0 && stable && censored == 0,
        format!("c = {c1} at 1000 paths, {c2} at 2000 paths, margin {:.3}", full.margin),
    )
}

fn variation_bound() -> Outcome {
    let cfg = config(2, 1e-3, 0.5, NoiseParams::default(), 109);
    let delta = cfg.noise().params().delta;
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let x = random_field(cfg.space(), &mut rng, 1.0);
    let h = SpectralField::random(cfg.space(), &mut rng, 1.0);
    let grid = [1.0, 5.0, 10.0, 50.0];
    let (series, _) = analysis::variation_series(&x, &h, 1.0, &cfg, 1000).unwrap();
    let rep = analysis::check_variation_bound_series(&series, 1.0, delta, &grid).unwrap();
    let c = rep.witness["c_gamma"];

    let zero = SpectralField::zeros(cfg.space());
    let t = simulate_with_variation(&x, &zero, &cfg).unwrap();
    let exact_zero = t.variation.as_ref().unwrap().iter().all(SpectralField::is_zero);
    let zrep = analysis::check_variation_bound(&[t], 1.0, delta, &grid).unwrap();
    Outcome::new(
        rep.pass && c <= 50.0 && exact_zero && zrep.pass,
        format!(
            "c_gamma = {c} on 1000 pairs (margin {:.3}); h = 0 variation identically zero: {exact_zero}",
            rep.margin
        ),
    )
}

fn gradient_scaling() -> Outcome {
    let noise = NoiseParams::default().with_scale(0.5);
    let cfgs = [config(1, 1e-3, 1.0, noise.clone(), 110), config(2, 1e-3, 1.0, noise, 110)];
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let x = random_field(cfgs[1].space(), &mut rng, 0.3);
    // one random probe plus the mode the observable reads
    let setup = GradientScalingSetup {
        gamma: 1.0,
        k_damp: 1.0,
        t_grid: vec![0.05, 0.1, 0.2, 0.5, 1.0],
        states: vec![x],
        directions: 1,
        fixed_directions: vec![SpectralField::basis_vector(cfgs[1].space(), 0, 1.0).unwrap()],
        samples: 1000,
    };
    let rep = analysis::check_gradient_scaling(&Observable::sin_coord(0, 1.0), &setup, &cfgs).unwrap();
    Outcome::new(
        rep.pass,
        format!(
            "constant {:.4e} (half sample {:.4e}, change {:.3})",
            rep.witness["constant"], rep.details["constant_half"], rep.details["stability"]
        ),
    )
}

fn z_regularity() -> Outcome {
    let params = NoiseParams::additive(1.3);
    let (alpha, g) = (params.alpha, params.g);
    let cfg = config(2, 1e-3, 1.0, params, 111).without_nonlinearity();
    let probe = ZProbe::dyadic(cfg.steps(), 6).unwrap();
    let x0 = SpectralField::zeros(cfg.space());
    let m = 1u32;
    let (samples, _) = analysis::z_regularity_samples(&x0, &cfg, 800, 0.0, &probe).unwrap();
    let rep = analysis::check_z_regularity_samples(&samples, &probe, cfg.dt(), 0.0, 0.01, m, g).unwrap();
    let slope = rep.witness["slope"];

    // Exact increment moments of the per-mode OU convolution, averaged over
    // the probe positions.
    let dt = cfg.dt();
    let lam = cfg.space().basis_eigenvalues();
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for &gap in &probe.gaps {
        let tau = gap as f64 * dt;
        let mut acc = 0.0;
        for &p in &probe.positions {
            let t = p as f64 * dt;
            let weights: Vec<f64> = lam
                .iter()
                .map(|&l| {
                    let s2 = l.powf(-2.0 * alpha);
                    let var = (1.0 - (-l * tau).exp()).powi(2) * s2 * (1.0 - (-2.0 * l * t).exp()) / (2.0 * l)
                        + s2 * (1.0 - (-2.0 * l * tau).exp()) / (2.0 * l);
                    l * l * var
                })
                .collect();
            acc += gaussian_quadratic_moment(&weights, m);
        }
        lx.push(tau.ln());
        ly.push((acc / probe.positions.len() as f64).ln());
    }
    let exact = spde_core::stats::linear_fit(&lx, &ly).0;
    let stability = rep.details["stability"];
    Outcome::new(
        (slope - exact).abs() <= 0.3 && stability < 0.1,
        format!("slope {slope:.3} vs exact {exact:.3}; sup-moment change {stability:.3} under doubling"),
    )
}

fn ergodic() -> Outcome {
    let cfg = config(2, 1e-3, 1.0, NoiseParams::default(), 112);
    let shear = SpectralField::cosine_mode(cfg.space(), WaveVector::new(1, 0, 0).unwrap(), [0.0, 1.0, 0.0], 2.0).unwrap();
    let x0s = [SpectralField::zeros(cfg.space()), shear];
    let opts = ErgodicOptions {
        chains: 2,
        ..ErgodicOptions::default()
    };
    let panel = [
        Observable::bounded_energy(),
        Observable::cos_coord(0, 1.0),
        Observable::tanh_coord(1, 1.0),
    ];
    let (_, rep) = analysis::ergodic_averages(&x0s, &cfg, &opts, &panel).unwrap();
    let finite = rep.witness.values().all(|v| v.is_finite());
    Outcome::new(
        rep.pass && finite,
        format!(
            "time averages {:.4} / {:.4} (spread {:.4}), moment change {:.4}, margin {:.2e}",
            rep.details["time_average[ic=0]"],
            rep.details["time_average[ic=1]"],
            rep.witness["agreement"],
            rep.details["moment_stability"],
            rep.margin
        ),
    )
}

fn reachability() -> Outcome {
    let cfg = config(2, 1e-4, 3.0, NoiseParams::default(), 113).without_noise();
    let s = cfg.space().clone();
    let single = SpectralField::cosine_mode(&s, WaveVector::new(1, 0, 0).unwrap(), [0.0, 1.0, 0.0], 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(113);
    let (a, b) = (random_field(&s, &mut rng, 1.0), random_field(&s, &mut rng, 1.0));
    let cases = [("single mode to zero", single, SpectralField::zeros(&s), 1e-3), ("random pair", a, b, 0.1)];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, x, target, eps) in cases {
        let cp = build_control(&x, &target, 3.0, &cfg, 100).unwrap();
        let r = verify_reachability(&cp, &x, &target, eps, &cfg).unwrap();
        pass &= r.hit && r.distance < eps;
        parts.push(format!("{name}: |A(X(T)-x0)| = {:.2e} (< {eps})", r.distance));
    }
    Outcome::new(pass, parts.join("; "))
}

fn determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_spde-lab");
    let root = tempfile::tempdir().unwrap();
    let run = |tag: &str, workers: u32, args: &[&str]| -> std::path::PathBuf {
        let out = root.path().join(tag);
        let status = Command::new(bin)
            .args(args)
            .args(["--seed", "7", "--workers", &workers.to_string(), "--output"])
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        std::fs::read_dir(&out).unwrap().next().unwrap().unwrap().path()
    };
    let read = |p: std::path::PathBuf| std::fs::read(p).unwrap();
    let mut same = true;
    let mut checked = 0;
    for (sub, files) in [
        (vec!["simulate", "--sde.horizon=0.2"], vec!["trajectory.spdt", "final_state.spdf", "results.csv"]),
        (vec!["estimate", "--t", "0.2", "--samples", "64"], vec!["results.csv"]),
    ] {
        let dirs: Vec<_> = [("a", 1), ("b", 1), ("c", 4)]
            .iter()
            .map(|(t, w)| run(&format!("{}-{t}", sub[0]), *w, &sub))
            .collect();
        for f in files {
            let base = read(dirs[0].join(f));
            for d in &dirs[1..] {
                same &= read(d.join(f)) == base;
                checked += 1;
            }
        }
    }
    Outcome::new(same, format!("{checked} artifact comparisons across reruns and 1 vs 4 workers, all identical: {same}"))
}
