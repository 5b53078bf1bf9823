//! Acceptance criteria 1 to 12. Each test reports `criterion N: PASS|FAIL`
//! with the measured quantities before asserting.

use std::f64::consts::{E, PI};
use std::io::Write;

use fedlrgd_core::complexity::{
    erlang_quantile, fedave_optimal_b, lemma3_h, mc_max_erlang_mean, proposition1_sweep, FedAveProblem, Regime,
};
use fedlrgd_core::covering::{build_latent_matrix, holder_suite, lemma1_rows, theorem1_check, Bivariate};
use fedlrgd_core::fedave::{run_fedave, FedAveConfig, StepSchedule};
use fedlrgd_core::fedlrgd::{
    approx_gradient, bias_term, choose_iterations, client_weights, estimate_gradient_bound, run_fedlrgd,
    server_precompute, FedLRGDConfig, WeightTensor,
};
use fedlrgd_core::numerics::Matrix;
use fedlrgd_core::problem::{empirical_risk, exact_gd, reference_minimum, Dataset, LossModel, SeparableModel, SoftLabelLogistic};
use fedlrgd_core::rank_probe::{approximate_rank, build_gradient_tensor, rank_histogram, ProbeConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Writes through the raw stderr handle so the line survives output capture.
fn report(id: &str, pass: bool, detail: &str) {
    let line = format!("criterion {id}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn direct_gradient(model: &dyn LossModel, data: &Dataset, theta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; model.param_dim()];
    for x in data.points() {
        for (a, b) in g.iter_mut().zip(model.grad(x, theta)) {
            *a += b;
        }
    }
    g.iter().map(|v| v / data.n() as f64).collect()
}

fn singular_values_oracle(rows: &[Vec<f64>]) -> Vec<f64> {
    let (n, k) = (rows.len(), rows[0].len());
    let m = DMatrix::from_fn(n, k, |i, j| rows[i][j]);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    sv
}

#[test]
fn criterion_01_gamma_closed_form() {
    let mut g = rng(1);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let d = g.random_range(1..=3);
        let p = g.random_range(1..=4);
        let r = g.random_range(1..=3);
        let m = g.random_range(1..=8);
        let s = g.random_range(1..=6);
        let big_s = g.random_range(1..=12);
        let phi = g.random_range(1..=200) as f64;
        let model = SeparableModel::random(d, p, r, 0.5, case).unwrap();
        let data = Dataset::uniform(d, m, s, r, case).unwrap();
        let l1 = model.constants().l1.unwrap();
        let run = run_fedlrgd(&model, &data, &FedLRGDConfig::new(r, big_s, l1, case)).unwrap();
        let (rf, sf, bf, mf) = (r as f64, s as f64, big_s as f64, m as f64);
        let expected = rf * rf + rf * sf + rf * bf + phi * mf * rf;
        worst = worst.max((run.ledger.gamma_at(phi).unwrap() - expected).abs());
    }
    for case in 0..20 {
        let m = g.random_range(1..=8);
        let b = g.random_range(1..=5);
        let t = g.random_range(1..=6);
        let tau = [0.25, 0.5, 0.75, 1.0][g.random_range(0..4)];
        let phi = g.random_range(1..=100) as f64;
        let model = SoftLabelLogistic::new(2, 0.5).unwrap();
        let data = Dataset::uniform(2, m, 3, 1, case).unwrap();
        let cfg = FedAveConfig {
            b,
            t_epochs: t,
            tau,
            step: StepSchedule::Constant { step: 0.1 },
            seed: case,
            theta0: None,
        };
        let run = run_fedave(&model, &data, &cfg).unwrap();
        let expected = t as f64 * (b as f64 + phi * tau * m as f64);
        worst = worst.max((run.ledger.gamma_at(phi).unwrap() - expected).abs());
    }
    report("1", worst == 0.0, &format!("40 configs, max |Γ − closed form| = {worst:e}"));
    assert_eq!(worst, 0.0);
}

#[test]
fn criterion_02_exact_low_rank_recovery() {
    let mut g = rng(2);
    let (mut worst_grad, mut worst_traj) = (0.0f64, 0.0f64);
    for (case, r0) in [1usize, 2, 3, 1, 2, 3].into_iter().enumerate() {
        let d = 1 + case % 3;
        let p = 2 + case % 4;
        let m = 3 + 2 * case % 8;
        let model = SeparableModel::random(d, p, r0, 0.5, case as u64).unwrap();
        let data = Dataset::uniform(d, m, 4, r0, 10 + case as u64).unwrap();
        let l1 = model.constants().l1.unwrap();
        let cfg = FedLRGDConfig::new(r0, 25, l1, case as u64);
        let pre = server_precompute(&model, &data, &cfg).unwrap();
        let per_client = data
            .clients()
            .iter()
            .map(|block| client_weights(&model, block, &pre).unwrap())
            .collect();
        let agg = WeightTensor::from_clients(per_client, p, r0).unwrap().aggregate();
        for _ in 0..50 {
            let theta: Vec<f64> = (0..p).map(|_| g.sample::<f64, _>(StandardNormal)).collect();
            let approx = approx_gradient(&model, data.server(), data.n(), &theta, &agg);
            let exact = direct_gradient(&model, &data, &theta);
            for (a, b) in approx.iter().zip(&exact) {
                worst_grad = worst_grad.max((a - b).abs());
            }
        }
        let run = run_fedlrgd(&model, &data, &cfg).unwrap();
        let gd = exact_gd(&model, &data, &run.trajectory[0], l1, 25).unwrap();
        assert_eq!(run.trajectory.len(), gd.len());
        for (a, b) in run.trajectory.iter().zip(&gd) {
            for (x, y) in a.iter().zip(b) {
                worst_traj = worst_traj.max((x - y).abs());
            }
        }
    }
    let pass = worst_grad <= 1e-8 && worst_traj <= 1e-8;
    report("2", pass, &format!("gradient error {worst_grad:e}, trajectory deviation {worst_traj:e}"));
    assert!(pass);
}

#[test]
fn criterion_03_piecewise_taylor_bound() {
    let mut worst = 0.0f64;
    let mut count = 0;
    for f in holder_suite() {
        let thetas: Vec<Vec<f64>> = [0.3, 1.1, 2.0].iter().map(|&t| vec![t; f.param_dim()]).collect();
        for row in lemma1_rows(&f, &thetas, &[2, 4, 8]).unwrap() {
            let l = f.eta.ceil() as i32 - 1;
            let fact: f64 = (1..=l).map(f64::from).product();
            let bound = f.l2 / (fact * (row.q as f64).powf(f.eta));
            assert!((row.bound - bound).abs() <= 1e-12 * bound);
            worst = worst.max(row.sup_error / bound);
            count += 1;
        }
    }
    let pass = worst <= 1.05;
    report("3", pass, &format!("{count} (function, q) rows, max error/bound = {worst:.4}"));
    assert!(pass);
}

#[test]
fn criterion_04_low_rank_latent_bound() {
    let r = (2.0 * E).ceil() as usize;
    assert_eq!(r, 6);
    let mut g = rng(4);
    let n = 64;
    let ys: Vec<Vec<f64>> = (0..n).map(|_| vec![g.random::<f64>()]).collect();
    let ts: Vec<Vec<f64>> = (0..n).map(|_| vec![g.random_range(0.0..2.0 * PI)]).collect();
    let mut all = true;
    let mut lines = Vec::new();
    for f in holder_suite().into_iter().filter(|f| f.d == 1 && f.eta == 1.0) {
        let rows: Vec<Vec<f64>> = ys.iter().map(|y| ts.iter().map(|t| f.value(y, t)).collect()).collect();
        let sv = singular_values_oracle(&rows);
        let lhs: f64 = sv[r..].iter().map(|s| s * s).sum::<f64>() / (n * n) as f64;
        let (d, eta) = (1.0f64, f.eta);
        let l = 0.0f64;
        let rhs = f.l2 * f.l2
            * (2.0 * eta / d).exp()
            * d.powf(eta / d)
            * 4f64.powf(eta)
            * (l + d).powf(2.0 * eta)
            * (r as f64).powf(-2.0 * eta / d);
        let rep = theorem1_check(&build_latent_matrix(&f, &ys, &ts).unwrap(), r, f.eta, f.l2, f.d).unwrap();
        assert!((rep.lhs - lhs).abs() <= 1e-9 * lhs.max(1e-12));
        assert!((rep.rhs - rhs).abs() <= 1e-12 * rhs);
        all &= lhs <= rhs;
        lines.push(format!("{} {lhs:.3e} <= {rhs:.3e}", f.name));
    }
    report("4", all, &lines.join("; "));
    assert!(all);
}

#[test]
fn criterion_05_inexact_gd_trajectory() {
    let mut cases: Vec<(Box<dyn LossModel>, Dataset, usize)> = Vec::new();
    for (r0, r) in [(3, 3), (3, 2), (2, 1), (1, 1)] {
        cases.push((
            Box::new(SeparableModel::random(2, 3, r0, 0.5, 1).unwrap()),
            Dataset::uniform(2, 5, 8, r, 2).unwrap(),
            r,
        ));
    }
    for r in [2, 3, 6] {
        cases.push((
            Box::new(SoftLabelLogistic::new(3, 0.5).unwrap()),
            Dataset::uniform(3, 5, 20, r, 3).unwrap(),
            r,
        ));
    }
    let mut worst = f64::NEG_INFINITY;
    for (model, data, r) in &cases {
        let c = model.constants();
        let (l1, mu) = (c.l1.unwrap(), c.mu.unwrap());
        let f_star = reference_minimum(model.as_ref(), data, l1).unwrap().f_star;
        let run = run_fedlrgd(model.as_ref(), data, &FedLRGDConfig::new(*r, 30, l1, 5)).unwrap();
        let q = 1.0 - mu / l1;
        let gap0 = run.f_trace[0] - f_star;
        for gamma in 1..run.f_trace.len() {
            let noise: f64 = (1..=gamma).map(|t| q.powi((gamma - t) as i32) * run.grad_errors[t - 1]).sum();
            let bound = q.powi(gamma as i32) * gap0 + noise / (2.0 * l1);
            worst = worst.max(run.f_trace[gamma] - f_star - bound);
        }
    }
    let pass = worst <= 1e-6;
    report("5", pass, &format!("{} runs, max (gap − bound) = {worst:e}", cases.len()));
    assert!(pass);
}

/// `P(Y > y)` for Y ~ Erlang(b, 1), summed in log space.
fn erlang_sf_oracle(y: f64, b: u64) -> f64 {
    let mut ln_term = -y;
    let mut total = ln_term.exp();
    for j in 1..b {
        ln_term += y.ln() - (j as f64).ln();
        total += ln_term.exp();
    }
    total
}

#[test]
fn criterion_06_erlang_quantile_bracket() {
    let qs = [2u64, 3, 5, 8, 12, 20, 56, 100, 1000, 10_000];
    let bs = [1u64, 2, 3, 5, 8, 10, 20, 50];
    let (mut count, mut all, mut worst_res) = (0, true, 0.0f64);
    for q in qs {
        for b in bs.into_iter().filter(|&b| (q - 1) * b >= 55) {
            let y = erlang_quantile(1.0 - 1.0 / q as f64, b).unwrap();
            let (qm, bf) = ((q - 1) as f64, b as f64);
            let lower = 0.5 * qm.ln() + 0.5 * bf.ln();
            let upper = 2.0 * qm.ln() + 2.0 * bf * (2.0 * bf).ln();
            let residual = (erlang_sf_oracle(y, b) - 1.0 / q as f64).abs();
            worst_res = worst_res.max(residual);
            all &= lower <= y && y <= upper && residual <= 1e-10;
            count += 1;
        }
    }
    report("6", all, &format!("{count} (q, b) pairs, max residual {worst_res:e}"));
    assert!(all);
}

#[test]
fn criterion_07_cubic_root_expansion() {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..1000 {
        let t = i as f64 / 999.0;
        let h = ((1.0 - t * t).asin() / 3.0 + 2.0 * PI / 3.0).sin();
        assert!((lemma3_h(t).unwrap() - h).abs() <= 1e-15);
        worst = worst.max((h - 0.5 - t / 6f64.sqrt()).abs() - 5.0 * t * t / 9.0);
    }
    let h0 = (lemma3_h(0.0).unwrap() - 0.5).abs();
    let pass = worst <= 4.0 * f64::EPSILON && h0 <= 1e-12;
    report("7", pass, &format!("1000 points, max excess {worst:e}, |h(0) − ½| = {h0:e}"));
    assert!(pass);
}

#[test]
fn criterion_08_fedave_epoch_size_optimizer() {
    let cases: [(usize, f64, f64, f64); 10] = [
        (100, 1e-4, 50.0, 1.0),
        (100, 1e-6, 100.0, 1.0),
        (1000, 1e-5, 40.0, 1.0),
        (1000, 1e-8, 500.0, 0.5),
        (50, 1e-3, 80.0, 0.5),
        (10_000, 1e-6, 60.0, 1.0),
        (500, 1e-7, 200.0, 0.25),
        (200, 1e-4, 1000.0, 1.0),
        (20, 1e-2, 400.0, 0.1),
        (5000, 1e-9, 45.0, 1.0),
    ];
    let mut all = true;
    let (mut worst_res, mut worst_bis) = (0.0f64, 0.0f64);
    for (m, rho, phi, tau) in cases {
        let mf = m as f64;
        let c1 = 1.0 / (2.0 * mf * rho);
        let c2 = mf / rho.sqrt();
        let c3 = phi * tau * mf;
        let cubic = |b: f64| 2.0 * c1 * b.powi(3) + c1 * c3 * b * b - c2 * c3;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        while cubic(hi) < 0.0 {
            hi *= 2.0;
        }
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if cubic(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        let opt = fedave_optimal_b(&FedAveProblem::new(m, rho, phi, tau)).unwrap();
        let b = opt.b_star;
        let scale = 2.0 * c1 * b.powi(3) + c1 * c3 * b * b + c2 * c3;
        let residual = cubic(b).abs() / scale;
        let rel = ((b - oracle) / oracle).abs();
        let g = c1 * b * b + c1 * c3 * b + c2 * c3 / b + c2;
        let q = rho.powf(0.25);
        let k = phi * tau * mf * rho.powf(-0.75);
        all &= residual <= 1e-9
            && rel <= 1e-8
            && 0.5 * mf * q <= b
            && b <= 2.0 * mf * q
            && 0.75 * k <= g
            && g <= 8.0 * k;
        worst_res = worst_res.max(residual);
        worst_bis = worst_bis.max(rel);
    }
    report("8", all, &format!("10 cases, max residual {worst_res:e}, max bisection gap {worst_bis:e}"));
    assert!(all);
}

fn harmonic(k: usize) -> f64 {
    (1..=k).map(|i| 1.0 / i as f64).sum()
}

#[test]
fn criterion_09a_max_erlang_single_stage() {
    let mut all = true;
    let mut lines = Vec::new();
    for k in [1000usize, 10_000] {
        let est = mc_max_erlang_mean(k, 1, 10_000, 9).unwrap();
        let approx = (k as f64).ln() + 2.0;
        let rel = (est.mean - approx).abs() / approx;
        let z = (est.mean - 1.0 - harmonic(k)).abs() / est.std_error;
        all &= rel <= 0.15 && z <= 2.0;
        lines.push(format!("k={k}: rel {rel:.3}, {z:.2} SE from 1 + H_k"));
    }
    report("9a", all, &lines.join("; "));
    assert!(all);
}

/// The extreme-value approximation `ln k + 2b` undershoots the simulated
/// mean by more than 15% once `b ≥ 5`; see the decisions ledger.
#[test]
fn criterion_09b_max_erlang_multi_stage() {
    let mut all = true;
    let mut lines = Vec::new();
    for k in [1000usize, 10_000] {
        for b in [5u64, 10] {
            let est = mc_max_erlang_mean(k, b, 10_000, 9).unwrap();
            let approx = (k as f64).ln() + 2.0 * b as f64;
            let rel = (est.mean - approx).abs() / approx;
            all &= rel <= 0.15;
            lines.push(format!("k={k} b={b}: mean {:.3} vs {approx:.3}, rel {rel:.3}", est.mean));
        }
    }
    report("9b", all, &lines.join("; "));
    assert!(all);
}

fn logistic_instance() -> (SoftLabelLogistic, Dataset) {
    (SoftLabelLogistic::new(3, 0.5).unwrap(), Dataset::uniform(3, 6, 19, 6, 10).unwrap())
}

#[test]
fn criterion_10a_fedlrgd_reaches_epsilon() {
    let eps = 1e-3;
    let (model, data) = logistic_instance();
    assert_eq!((model.param_dim(), data.n()), (2, 120));
    let c = model.constants();
    let (l1, mu) = (c.l1.unwrap(), c.mu.unwrap());
    let f_star = reference_minimum(&model, &data, l1).unwrap().f_star;
    let f0 = empirical_risk(&model, &data, &[0.0, 0.0]).unwrap();
    let b = estimate_gradient_bound(&model, 100_000, 10);
    let numerator = f0 - f_star + bias_term(b, 2, mu);
    let s_iters = choose_iterations(l1 / mu, numerator, eps).unwrap();
    let expected = ((numerator / eps).ln() / (l1 / (l1 - mu)).ln()).ceil() as usize;
    assert_eq!(s_iters, expected);
    let run = run_fedlrgd(&model, &data, &FedLRGDConfig::new(6, s_iters, l1, 10)).unwrap();
    let gap = run.f_trace.last().unwrap() - f_star;
    let pass = gap <= eps;
    report("10a", pass, &format!("r=6, S={s_iters}, gap {gap:e}"));
    assert!(pass);
}

#[test]
fn criterion_10b_fedave_reaches_epsilon() {
    let eps = 1e-3;
    let (model, data) = logistic_instance();
    let c = model.constants();
    let f_star = reference_minimum(&model, &data, c.l1.unwrap()).unwrap().f_star;
    let (b, t) = (20, 50);
    let gaps: Vec<f64> = (0..20)
        .map(|seed| {
            let cfg = FedAveConfig {
                b,
                t_epochs: t,
                tau: 1.0,
                step: StepSchedule::default_for(c.mu.unwrap()),
                seed,
                theta0: None,
            };
            run_fedave(&model, &data, &cfg).unwrap().f_trace.last().unwrap() - f_star
        })
        .collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let pass = mean <= eps;
    report("10b", pass, &format!("b={b}, T={t}, mean gap over 20 seeds {mean:e}"));
    assert!(pass);
}

#[test]
fn criterion_11_complexity_ratio_trend() {
    let rows = proposition1_sweep(&Regime::default().grid().unwrap()).unwrap();
    for row in &rows {
        let p = &row.point;
        let (r, s, big_s, m) = (p.r as f64, p.s as f64, p.s_iters as f64, p.m as f64);
        let gl = r * r + r * s + r * big_s + p.phi * m * r;
        let ga = p.phi * m * (p.p as f64 / p.epsilon).powf(0.75);
        assert_eq!(row.gamma_fedlrgd, gl);
        assert!((row.gamma_fedave_plus - ga).abs() <= 1e-12 * ga);
    }
    let ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    let last = *ratios.last().unwrap();
    let pass = ratios.windows(2).all(|w| w[1] < w[0]) && last < 0.1;
    report("11", pass, &format!("ratios {ratios:.4?}"));
    assert!(pass);
}

fn random_rank_k(g: &mut ChaCha20Rng, n: usize, c: usize, k: usize) -> Matrix {
    let u: Vec<f64> = (0..n * k).map(|_| g.sample(StandardNormal)).collect();
    let v: Vec<f64> = (0..k * c).map(|_| g.sample(StandardNormal)).collect();
    Matrix::from_fn(n, c, |i, j| (0..k).map(|l| u[i * k + l] * v[l * c + j]).sum())
}

#[test]
fn criterion_12_rank_probe_sanity() {
    let mut g = rng(12);
    let fractions = [0.5, 0.8, 0.9, 0.99, 1.0];
    let mut all = true;
    for _ in 0..100 {
        let n = g.random_range(2..=12);
        let c = g.random_range(2..=12);
        let k = g.random_range(1..=n.min(c));
        let a = random_rank_k(&mut g, n, c, k);
        let rows: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
        let sv = singular_values_oracle(&rows);
        let true_rank = sv.iter().filter(|s| **s > 1e-10 * sv[0]).count();
        let ranks: Vec<usize> = fractions.iter().map(|&f| approximate_rank(&a, f).unwrap()).collect();
        all &= ranks.windows(2).all(|w| w[0] <= w[1]);
        all &= ranks.iter().all(|&r| r >= 1 && r <= true_rank && r <= k);
        for scale in [1e-3, 0.5, 7.0, 1e4] {
            all &= approximate_rank(&a.scale(scale), 0.9).unwrap() == ranks[2];
        }
    }
    let mut full_energy = Vec::new();
    for r0 in 1..=3 {
        let model = SeparableModel::random(2, 4, r0, 0.5, r0 as u64).unwrap();
        let data = Dataset::uniform(2, 4, 10, 1, 3).unwrap();
        let points: Vec<Vec<f64>> = data.points().map(|x| x.to_vec()).collect();
        let theta_star = vec![0.7, -0.4, 1.2, 0.3];
        let tensor = build_gradient_tensor(&model, &points, &theta_star, 12).unwrap();
        for fraction in [0.9, 1.0] {
            let cfg = ProbeConfig {
                energy_fraction: fraction,
                ..ProbeConfig::new(points.len(), 12)
            };
            let hist = rank_histogram(&tensor, &theta_star, &cfg).unwrap();
            let top = *hist.counts.keys().last().unwrap();
            if fraction == 1.0 {
                full_energy.push(top);
            }
            all &= top <= r0 && hist.total() == 4;
        }
    }
    report("12", all, &format!("100 random matrices; full-energy slice ranks for r0 = 1, 2, 3: {full_energy:?}"));
    assert!(all);
}
