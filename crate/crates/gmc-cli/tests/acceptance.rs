//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail line. Statistical checks use fixed seeds so the suite is
//! reproducible; every criterion also enforces its wall-clock budget.

use std::time::Instant;

use nalgebra::DVector;
use rand::Rng;

use gmc_core::chaos::reweight_shift;
use gmc_core::verify::{
    test_expectation, test_kahane_comparison, test_martingale, test_moment_scaling,
    test_mollifier_independence, test_nonatomicity, test_peyriere_bounded, test_peyriere_linear,
    test_second_moment, EnsembleSpec,
};
use gmc_core::{
    build_chaos, build_grid, cameron_martin_shift, eval_kernel, hermite, kahan_sum, sample_field,
    shift_from_test_function, sigma_positive_decompose, wick_l2_check, CovMatrix, DomainGrid,
    GFunction, KernelSpec, Mollifier, SeedRecord,
};

fn kernel_2x2() -> KernelSpec {
    KernelSpec::Explicit {
        entries: vec![vec![1.0, 0.2], vec![0.2, 1.0]],
    }
}

fn grid_1d(n: usize) -> DomainGrid {
    build_grid(1, &[(0.0, 1.0)], n, None).unwrap()
}

fn cov(spec: &KernelSpec, grid: &DomainGrid) -> CovMatrix {
    eval_kernel(spec, grid).unwrap()
}

fn budget(start: Instant, limit_s: u64, what: &str) {
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < limit_s,
        "{what} took {elapsed:?}, budget {limit_s}s"
    );
}

#[test]
fn criterion_01_exact_shift_covariance() {
    let start = Instant::now();
    let fixtures: Vec<(&str, CovMatrix, DomainGrid)> = vec![
        ("explicit_2x2", cov(&kernel_2x2(), &grid_1d(2)), grid_1d(2)),
        (
            "kahane_c16_n64",
            cov(&KernelSpec::KahaneFamily { c: 16.0, gamma: 1.0 }, &grid_1d(64)),
            grid_1d(64),
        ),
    ];
    for (label, cov, grid) in fixtures {
        let seed = SeedRecord::new(42);
        let mut rng = seed.substream(0).rng();
        for trial in 0..10 {
            let f = DVector::from_fn(grid.len(), |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let xi = shift_from_test_function(&f, &cov, &grid).unwrap();
            // 100 random samples per test function, per-cell relative check
            for r in 0..100u64 {
                let x = sample_field(&cov, seed.substream(1 + trial * 100 + r));
                let base = build_chaos(&x, &cov, &grid).unwrap();
                let reweighted = reweight_shift(&base, &xi);
                let recomputed =
                    build_chaos(&cameron_martin_shift(&x, &xi), &cov, &grid).unwrap();
                for i in 0..grid.len() {
                    let rel = (reweighted.weights[i] - recomputed.weights[i]).abs()
                        / recomputed.weights[i].abs();
                    assert!(rel <= 1e-12, "{label} trial {trial} cell {i}: rel {rel}");
                }
            }
        }
    }
    budget(start, 5, "criterion 1");
    println!("criterion 01 exact shift covariance: PASS");
}

#[test]
fn criterion_02_second_moment_identity() {
    let start = Instant::now();
    // 2x2 kernel: closed-form targets 0.25 e^{0.2} and 0.25 e
    let spec = EnsembleSpec::new(cov(&kernel_2x2(), &grid_1d(2)), grid_1d(2), 100_000, 7).unwrap();
    let r = test_second_moment(&spec, &[(0, 1), (0, 0)], None, 0).unwrap();
    assert!(r.passed(), "{r:?}");
    // all 136 unordered pairs on KahaneFamily N=16 with multiple-testing slack
    let grid = grid_1d(16);
    let kcov = cov(&KernelSpec::KahaneFamily { c: 16.0, gamma: 1.0 }, &grid);
    let spec16 = EnsembleSpec::new(kcov, grid, 100_000, 7).unwrap();
    let mut pairs = Vec::new();
    for i in 0..16 {
        for j in i..16 {
            pairs.push((i, j));
        }
    }
    assert_eq!(pairs.len(), 136);
    let r16 = test_second_moment(&spec16, &pairs, None, 2).unwrap();
    assert!(r16.passed(), "{r16:?}");
    budget(start, 60, "criterion 2");
    println!("criterion 02 second-moment identity: PASS");
}

#[test]
fn criterion_03_expectation_normalization() {
    let start = Instant::now();
    for gamma in [0.5, 1.0] {
        let grid = grid_1d(64);
        let kcov = cov(&KernelSpec::KahaneFamily { c: 64.0, gamma }, &grid);
        let spec = EnsembleSpec::new(kcov, grid, 100_000, 7).unwrap();
        let r = test_expectation(&spec, None).unwrap();
        assert!(r.passed(), "gamma {gamma}: {r:?}");
    }
    // zero kernel: deterministic masses, exact path with se = 0
    let grid = grid_1d(8);
    let zcov = cov(
        &KernelSpec::Explicit {
            entries: vec![vec![0.0; 8]; 8],
        },
        &grid,
    );
    let spec = EnsembleSpec::new(zcov, grid, 100, 7).unwrap();
    let r = test_expectation(&spec, None).unwrap();
    assert_eq!(r.se, 0.0);
    assert!(r.passed(), "{r:?}");
    budget(start, 60, "criterion 3");
    println!("criterion 03 expectation normalization: PASS");
}

#[test]
fn criterion_04_martingale_property() {
    let start = Instant::now();
    let grid = grid_1d(32);
    let levels = sigma_positive_decompose(
        &KernelSpec::KahaneFamily { c: 8.0, gamma: 1.0 },
        &grid,
        3,
        None,
    )
    .unwrap();
    let left_half: Vec<usize> = (0..16).collect();
    let r = test_martingale(&levels, &grid, &left_half, 1, 10_000, SeedRecord::new(7), 3.0)
        .unwrap();
    assert!(r.passed(), "{r:?}");
    budget(start, 30, "criterion 4");
    println!("criterion 04 martingale property: PASS");
}

#[test]
fn criterion_05_peyriere_identity() {
    let start = Instant::now();
    let spec = EnsembleSpec::new(cov(&kernel_2x2(), &grid_1d(2)), grid_1d(2), 100_000, 7).unwrap();
    let g = DVector::from_vec(vec![1.0, 0.0]);
    let linear = test_peyriere_linear(&spec, &g, &[1]).unwrap();
    assert!((linear.target - 0.1).abs() < 1e-13, "{linear:?}");
    assert!(linear.passed(), "{linear:?}");
    let bounded = test_peyriere_bounded(&spec, 0, 3.0, &[0]).unwrap();
    assert!(bounded.passed(), "{bounded:?}");
    budget(start, 60, "criterion 5");
    println!("criterion 05 peyriere identity: PASS");
}

#[test]
fn criterion_06_mollifier_independence() {
    let start = Instant::now();
    let coarse = grid_1d(64);
    let fine = grid_1d(512);
    let fine_cov = cov(
        &KernelSpec::LogKernel {
            gamma: 1.0,
            g: GFunction::Zero,
        },
        &fine,
    );
    let ladder: Vec<f64> = (2..=6).map(|k| 2.0f64.powi(-k)).collect();
    let r = test_mollifier_independence(
        &fine_cov,
        &fine,
        &coarse,
        &Mollifier::Box { radius: 1.0 },
        &Mollifier::Triangle { radius: 1.0 },
        &ladder,
        10_000,
        SeedRecord::new(7),
        3.0,
        0.1,
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
    budget(start, 300, "criterion 6");
    println!("criterion 06 mollifier independence: PASS");
}

#[test]
fn criterion_07_kahane_comparison() {
    let start = Instant::now();
    let grid = grid_1d(2);
    let cov1 = cov(&kernel_2x2(), &grid);
    let cov2 = cov(
        &KernelSpec::Explicit {
            entries: vec![vec![1.1, 0.3], vec![0.3, 1.1]],
        },
        &grid,
    );
    let reports =
        test_kahane_comparison(&cov1, &cov2, &grid, 100_000, SeedRecord::new(7), 3.0).unwrap();
    assert_eq!(reports.len(), 4, "closed form + three convex f");
    for r in &reports {
        assert!(r.passed(), "{r:?}");
    }
    budget(start, 60, "criterion 7");
    println!("criterion 07 kahane comparison: PASS");
}

#[test]
fn criterion_08_wick_calculus() {
    let start = Instant::now();
    // Hermite orthogonality E[h_n h_m] = n! delta_nm, n,m <= 6, 1e5 draws
    let mut rng = SeedRecord::new(7).rng();
    let m = 100_000usize;
    let draws: Vec<f64> = (0..m)
        .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    for n in 0..=6usize {
        for k in n..=6usize {
            let prods: Vec<f64> = draws
                .iter()
                .map(|&z| hermite(n, z).unwrap() * hermite(k, z).unwrap())
                .collect();
            let mean = kahan_sum(prods.iter().copied()) / m as f64;
            let var = kahan_sum(prods.iter().map(|p| (p - mean) * (p - mean))) / m as f64;
            let se = (var / m as f64).sqrt();
            let target = if n == k {
                (1..=n).map(|v| v as f64).product()
            } else {
                0.0
            };
            assert!(
                (mean - target).abs() <= 3.0 * se,
                "orthogonality n={n} m={k}: mean {mean}, target {target}, se {se}"
            );
        }
    }
    // Wick L2 identity on the 2x2 kernel for n in {2, 3}
    let grid = grid_1d(2);
    let kcov = cov(&kernel_2x2(), &grid);
    for n in [2usize, 3] {
        let r = wick_l2_check(&kcov, &grid, n, 100_000, SeedRecord::new(7 + n as u64), 3.0)
            .unwrap();
        assert!(r.passed(), "n={n}: {r:?}");
    }
    budget(start, 60, "criterion 8");
    println!("criterion 08 wick calculus: PASS");
}

#[test]
fn criterion_09_nonatomicity_and_log_scaling() {
    let start = Instant::now();
    let r = test_nonatomicity(
        &KernelSpec::LogKernel {
            gamma: 1.0,
            g: GFunction::Zero,
        },
        &[64, 128, 256],
        4_000,
        SeedRecord::new(7),
        3.0,
    )
    .unwrap();
    assert!(r.passed(), "{r:?}");
    let ladder: Vec<f64> = (3..=7).map(|k| 2.0f64.powi(-k)).collect();
    for n in [1u32, 2] {
        let s = test_moment_scaling(1.0, 2048, n, &ladder).unwrap();
        assert!(s.passed(), "n={n}: {s:?}");
    }
    budget(start, 300, "criterion 9");
    println!("criterion 09 nonatomicity and log-scaling: PASS");
}

#[test]
fn criterion_10_determinism() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let runs: Vec<(&str, Vec<&str>, Vec<&str>)> = vec![
        (
            "sample",
            vec![
                "sample", "--kernel", "kahane", "--C", "16", "--gamma", "1.0", "--n", "32",
                "--replicas", "4", "--seed", "9", "--out", "det_sample",
            ],
            vec!["det_sample/sample_0000.csv", "det_sample/sample_0003.csv", "det_sample/manifest.json"],
        ),
        (
            "chaos",
            vec![
                "chaos", "--kernel", "kahane", "--C", "16", "--gamma", "1.0", "--n", "32",
                "--replicas", "4", "--seed", "9", "--out", "det_chaos",
            ],
            vec!["det_chaos/chaos_0000.csv", "det_chaos/summary.json"],
        ),
        (
            "verify",
            vec!["verify", "--suite", "exact", "--seed", "9", "--out", "det_verify"],
            vec!["det_verify/reports.jsonl"],
        ),
        (
            "sweep",
            vec![
                "sweep", "--kernel", "kahane", "--C", "8", "--n", "8", "--replicas", "100",
                "--seed", "9", "--gamma-ladder", "0.5,1.0", "--out", "det_sweep",
            ],
            vec!["det_sweep/sweep_gamma.csv"],
        ),
    ];
    for (what, args, outputs) in runs {
        let run = || {
            let out = std::process::Command::new(env!("CARGO_BIN_EXE_gmc"))
                .args(&args)
                .current_dir(tmp.path())
                .output()
                .expect("binary runs");
            assert!(
                out.status.success(),
                "{what}: {}",
                String::from_utf8_lossy(&out.stderr)
            );
        };
        run();
        let first: Vec<Vec<u8>> = outputs
            .iter()
            .map(|f| std::fs::read(tmp.path().join(f)).unwrap())
            .collect();
        run();
        for (f, bytes) in outputs.iter().zip(first) {
            let again = std::fs::read(tmp.path().join(f)).unwrap();
            assert_eq!(bytes, again, "{what}: {f} differs between identical runs");
        }
    }
    budget(start, 60, "criterion 10");
    println!("criterion 10 determinism: PASS");
}
