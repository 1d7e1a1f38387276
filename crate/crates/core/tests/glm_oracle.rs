use qappp_core::formula::{build_design_matrix, parse_formula, DesignMatrix, DesignOptions, Frame};
use qappp_core::glm::{fit_logistic, gradient, log_likelihood, model_stats, FitOptions};
use qappp_core::Execution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

// intercept, A[T.b], A[T.c], x, A[T.b]:x, A[T.c]:x
const TRUTH: [f64; 6] = [-1.0, 0.5, -0.3, 0.8, 0.6, 0.0];

fn synthetic(n: usize, seed: u64) -> (DesignMatrix, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = ["a", "b", "c"];
    let mut cat = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let l = rng.random_range(0..3usize);
        let v: f64 = rng.sample(StandardNormal);
        let eta = TRUTH[0]
            + TRUTH[3] * v
            + match l {
                1 => TRUTH[1] + TRUTH[4] * v,
                2 => TRUTH[2] + TRUTH[5] * v,
                _ => 0.0,
            };
        let p = 1.0 / (1.0 + (-eta).exp());
        cat.push(levels[l]);
        x.push(v);
        y.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
    }
    let frame = Frame::new()
        .with_categorical("A", cat)
        .unwrap()
        .with_numeric("x", x)
        .unwrap()
        .with_numeric("y", y)
        .unwrap();
    let ast = parse_formula("y ~ A*x", &frame).unwrap();
    build_design_matrix(&ast, &frame, DesignOptions { standardize: false }).unwrap()
}

/// Plain loglik, written independently of the library's stable form.
fn naive_loglik(x: &DesignMatrix, y: &[f64], beta: &[f64]) -> f64 {
    (0..x.n_rows())
        .map(|i| {
            let eta: f64 = x.row(i).iter().zip(beta).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-eta).exp());
            if y[i] == 1.0 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum()
}

/// Gradient ascent on the mean log-likelihood: Barzilai-Borwein trial step,
/// Armijo backtracking.
fn gradient_ascent(x: &DesignMatrix, y: &[f64]) -> Vec<f64> {
    let n = x.n_rows() as f64;
    let grad = |b: &[f64]| -> Vec<f64> { gradient(x, y, b).iter().map(|v| v / n).collect() };
    let mut beta = vec![0.0; x.n_cols()];
    let mut f = naive_loglik(x, y, &beta) / n;
    let mut g = grad(&beta);
    let mut step = 1.0;
    for _ in 0..20_000 {
        let gg: f64 = g.iter().map(|v| v * v).sum();
        // |g| < 1e-7 bounds the mean-loglik gap by ~g²/(2λmin), far below 1e-6 in total
        if gg.sqrt() < 1e-7 {
            break;
        }
        let (next, fnext) = loop {
            let cand: Vec<f64> = beta.iter().zip(&g).map(|(b, d)| b + step * d).collect();
            let fc = naive_loglik(x, y, &cand) / n;
            if fc >= f + 1e-4 * step * gg {
                break (cand, fc);
            }
            step *= 0.5;
            assert!(step > 1e-14, "line search failed");
        };
        let gnext = grad(&next);
        let s: Vec<f64> = next.iter().zip(&beta).map(|(a, b)| a - b).collect();
        let d: Vec<f64> = gnext.iter().zip(&g).map(|(a, b)| b - a).collect();
        let sd: f64 = s.iter().zip(&d).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        step = if sd > 0.0 { ss / sd } else { 1.0 };
        let stalled = fnext <= f;
        beta = next;
        f = fnext;
        g = gnext;
        if stalled {
            break;
        }
    }
    beta
}

#[test]
fn recovers_truth_and_matches_independent_oracle() {
    let (x, y) = synthetic(50_000, 11);
    assert_eq!(
        x.column_names,
        vec!["Intercept", "A[T.b]", "A[T.c]", "x", "A[T.b]:x", "A[T.c]:x"]
    );
    let fit = fit_logistic(&x, &y, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    for (j, truth) in TRUTH.iter().enumerate() {
        let z = (fit.coefficients[j] - truth) / fit.std_error(j);
        assert!(
            z.abs() < 3.0,
            "{}: beta {} truth {} z {}",
            x.column_names[j],
            fit.coefficients[j],
            truth,
            z
        );
    }
    let oracle = gradient_ascent(&x, &y);
    let ll_oracle = naive_loglik(&x, &y, &oracle);
    assert!((fit.loglik - ll_oracle).abs() < 1e-6, "{} vs {}", fit.loglik, ll_oracle);
    assert!(fit.gradient_inf_norm < 1e-6);
    // stationarity recomputed from scratch
    let g = gradient(&x, &y, &fit.coefficients);
    assert!(g.iter().all(|v| v.abs() < 1e-6));
    let stats = model_stats(&fit).unwrap();
    assert!(stats.mcfadden_r2 > 0.0 && stats.mcfadden_r2 < 1.0);
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let (x, y) = synthetic(5_000, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let h = 1e-5;
    for _ in 0..20 {
        let beta: Vec<f64> = (0..x.n_cols()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = gradient(&x, &y, &beta);
        for j in 0..beta.len() {
            let mut up = beta.clone();
            let mut dn = beta.clone();
            up[j] += h;
            dn[j] -= h;
            let fd = (log_likelihood(&x, &y, &up) - log_likelihood(&x, &y, &dn)) / (2.0 * h);
            let rel = (g[j] - fd).abs() / g[j].abs().max(1.0);
            assert!(rel < 1e-6, "coordinate {j}: analytic {} fd {} rel {rel}", g[j], fd);
        }
    }
}

#[test]
fn row_permutation_invariance() {
    let (x, y) = synthetic(3_000, 13);
    let fit = fit_logistic(&x, &y, &FitOptions::default()).unwrap();
    let mut perm: Vec<usize> = (0..x.n_rows()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    let xp = x.take_rows(&perm);
    let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
    let fitp = fit_logistic(&xp, &yp, &FitOptions::default()).unwrap();
    for (a, b) in fit.coefficients.iter().zip(&fitp.coefficients) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn sequential_and_parallel_fits_are_bitwise_identical() {
    let (x, y) = synthetic(20_000, 14);
    let base = FitOptions {
        chunk_rows: 1024,
        ..FitOptions::default()
    };
    let seq = fit_logistic(
        &x,
        &y,
        &FitOptions {
            execution: Execution::Sequential,
            ..base
        },
    )
    .unwrap();
    let par = fit_logistic(
        &x,
        &y,
        &FitOptions {
            execution: Execution::Parallel,
            ..base
        },
    )
    .unwrap();
    assert_eq!(seq, par);
    for (a, b) in seq.covariance.iter().zip(&par.covariance) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn nested_terms_never_lower_training_loglik() {
    let (x, y) = synthetic(4_000, 15);
    let cols = |k: usize| {
        let idx: Vec<usize> = (0..k).collect();
        let vals: Vec<f64> = (0..x.n_rows())
            .flat_map(|i| idx.iter().map(move |&j| (i, j)))
            .map(|(i, j)| x.get(i, j))
            .collect();
        DesignMatrix::from_rows(x.n_rows(), x.column_names[..k].to_vec(), vals)
    };
    let mut prev = f64::NEG_INFINITY;
    for k in 1..=x.n_cols() {
        let fit = fit_logistic(&cols(k), &y, &FitOptions::default()).unwrap();
        assert!(fit.loglik >= prev - 1e-9, "k={k}");
        prev = fit.loglik;
    }
}

#[test]
fn covariance_is_symmetric_positive_definite() {
    let (x, y) = synthetic(2_000, 16);
    let fit = fit_logistic(&x, &y, &FitOptions::default()).unwrap();
    let c = fit.covariance_matrix();
    assert_eq!(c, c.transpose());
    assert!(c.cholesky().is_some());
}
