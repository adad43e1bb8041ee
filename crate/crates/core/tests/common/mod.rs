//! Independent reference computations shared by the integration tests and
//! the acceptance harness. Nothing here calls the library's numerics.

#![allow(dead_code)]

use std::f64::consts::PI;

use modalvgae::dataset::GraphSample;
use modalvgae::truss::{Element, Rayleigh, TrussModel};
use modalvgae::uq::{self, Nig, Predictive};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n % 2 == 0);
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// `ln Γ(x)` by the Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let mut a = C[0];
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

/// `ln p(y)` of the Normal-Inverse-Gamma hierarchy by brute-force
/// integration over both the mean `μ ~ N(γ, σ²/ν)` and the variance
/// `σ² ~ IG(α, β)`; the variance integral runs over `s = ln σ²`.
pub fn nig_marginal_by_quadrature(y: f64, gamma: f64, nu: f64, alpha: f64, beta: f64) -> f64 {
    let ln_ig = |s: f64| alpha * beta.ln() - ln_gamma(alpha) - alpha * s - beta * (-s).exp();
    // log-density of s = ln σ² peaks at ln(β/α)
    let s0 = (beta / alpha).ln();
    let (lo, hi) = (s0 - 8.0, s0 + 40.0 / alpha + 8.0);
    let inner = |s: f64| {
        let var = s.exp();
        let sd_mu = (var / nu).sqrt();
        let sd_y = var.sqrt();
        let (a, b) = (gamma.min(y) - 12.0 * sd_mu.max(sd_y), gamma.max(y) + 12.0 * sd_mu.max(sd_y));
        simpson(|mu| normal_pdf(y, mu, var) * normal_pdf(mu, gamma, var / nu), a, b, 400)
    };
    simpson(|s| inner(s) * ln_ig(s).exp(), lo, hi, 4000).ln()
}

/// Continuous ranked probability score of `N(mu, sigma²)` at `y` by direct
/// integration of `(F(x) − 1{x ≥ y})²`.
pub fn crps_by_quadrature(y: f64, mu: f64, sigma: f64) -> f64 {
    let cdf = |x: f64| 0.5 * erfc(-(x - mu) / (sigma * 2f64.sqrt()));
    let (a, b) = (mu.min(y) - 14.0 * sigma, mu.max(y) + 14.0 * sigma);
    simpson(|x| cdf(x).powi(2), a, y, 20000) + simpson(|x| (1.0 - cdf(x)).powi(2), y, b, 20000)
}

/// Complementary error function: Maclaurin series below 2.5, Lentz
/// continued fraction above.
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let r = if z < 2.5 {
        1.0 - erf_series(z)
    } else {
        erfc_continued_fraction(z)
    };
    if x >= 0.0 { r } else { 2.0 - r }
}

fn erf_series(z: f64) -> f64 {
    // erf z = 2/√π Σ (−1)^n z^{2n+1} / (n! (2n+1))
    let mut term = z;
    let mut sum = z;
    for n in 1..200 {
        term *= -z * z / n as f64;
        let add = term / (2 * n + 1) as f64;
        sum += add;
        if add.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    2.0 / PI.sqrt() * sum
}

fn erfc_continued_fraction(z: f64) -> f64 {
    // Lentz evaluation of erfc z = exp(−z²)/√π · 1/(z + 1/2/(z + 1/(z + 3/2/(z + …))))
    let mut f = z;
    let tiny = 1e-300;
    let mut c = f;
    let mut d = 0.0;
    for n in 1..500 {
        let a = n as f64 / 2.0;
        d = z + a * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = z + a / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-z * z).exp() / PI.sqrt() / f
}

/// Horizontal 2-bar chain pinned at the left end; only the two axial DOFs
/// remain. Returns the truss and the two natural frequencies (Hz) from the
/// roots of `det(K − λM) = 0`.
pub fn two_dof_chain(l1: f64, l2: f64, ea1: f64, ea2: f64, rho_a: f64) -> (TrussModel, [f64; 2]) {
    let coords = vec![[0.0, 0.0], [l1, 0.0], [l1 + l2, 0.0]];
    let el = |a: usize, b: usize, ea: f64| Element { nodes: [a, b], youngs_modulus: ea, area: 1.0, density: rho_a };
    let support_mask = vec![true, true, false, true, false, true];
    let truss = TrussModel { coords, elements: vec![el(0, 1, ea1), el(1, 2, ea2)], support_mask, rayleigh: Rayleigh::default() };
    let (k1, k2) = (ea1 / l1, ea2 / l2);
    let m1 = 0.5 * rho_a * (l1 + l2);
    let m2 = 0.5 * rho_a * l2;
    // m1 m2 λ² − (m1 k2 + m2 (k1 + k2)) λ + k1 k2 = 0
    let a = m1 * m2;
    let b = -(m1 * k2 + m2 * (k1 + k2));
    let c = k1 * k2;
    let disc = (b * b - 4.0 * a * c).sqrt();
    let big = (-b + disc) / (2.0 * a);
    let small = c / (a * big);
    let hz = |l: f64| l.sqrt() / (2.0 * PI);
    (truss, [hz(small), hz(big)])
}

/// Small hand-built graph sample with `n` nodes on a ring plus chords,
/// `m` unit-norm target shapes and `f` feature columns.
pub fn toy_sample(id: u32, n: usize, m: usize, f: usize, seed: u64) -> GraphSample {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut next = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    let mut edges = Vec::new();
    for i in 0..n {
        let j = (i + 1) % n;
        edges.push([i as u32, j as u32]);
        edges.push([j as u32, i as u32]);
    }
    if n > 3 {
        edges.push([0, (n / 2) as u32]);
        edges.push([(n / 2) as u32, 0]);
    }
    let features = Array2::from_shape_fn((n, f), |_| next() as f32);
    let coords = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { i as f32 } else { (i % 2) as f32 });
    let mut shapes = Array2::from_shape_fn((n, m), |_| next() as f32);
    for mut col in shapes.columns_mut() {
        let norm = col.iter().map(|v| v * v).sum::<f32>().sqrt();
        col.mapv_inplace(|v| v / norm);
    }
    let frequencies = (0..m).map(|k| 10.0 * (k + 1) as f32 * (1.0 + 0.1 * next() as f32)).collect();
    let damping = (0..m).map(|_| 0.02 + 0.005 * next() as f32).collect();
    GraphSample { id, coords, edges, features, frequencies, damping, shapes, meta: Default::default() }
}

/// Relative error with a floor so that near-zero gradients compare absolutely.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest relative gap between `analytic` and central differences of `f`
/// at `x` with absolute step `h`.
pub fn fd_max_rel_gap(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64, floor: f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let down = f(&xp);
        xp[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h), floor));
    }
    worst
}

/// Predictive distributions of random NIGs paired with one draw each from
/// the matching hierarchy, so every interval is calibrated by construction.
pub fn calibrated_predictions(n: usize, seed: u64) -> (Vec<Predictive>, Vec<f64>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let p = Nig::new(r.random_range(-1.0..1.0), r.random_range(0.5..5.0), r.random_range(2.0..8.0), r.random_range(0.1..2.0));
            let var = 1.0 / Gamma::new(p.alpha, 1.0 / p.beta).unwrap().sample(&mut r);
            let mu = Normal::new(p.gamma, (var / p.nu).sqrt()).unwrap().sample(&mut r);
            let y = Normal::new(mu, var.sqrt()).unwrap().sample(&mut r);
            (uq::predictive_moments(&p).unwrap(), y)
        })
        .unzip()
}
