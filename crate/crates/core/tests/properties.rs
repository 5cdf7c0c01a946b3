mod common;

use common::gram_tail;
use phlora::energy::{preserved_energy, select_rank};
use phlora::factorizer::factorize_matrix;
use phlora::linalg::svd_thin;
use phlora::{Matrix, SvdMethod};
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = Matrix> {
    (1usize..12, 1usize..12).prop_flat_map(|(d, k)| {
        proptest::collection::vec(-10.0f64..10.0, d * k).prop_map(move |v| Matrix::from_vec(d, k, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn truncation_error_is_the_spectral_tail(m in matrix(), r in 1usize..6) {
        let f = factorize_matrix("m", &m, r, SvdMethod::Exact).unwrap();
        let residual = m.sub(&f.b.matmul(&f.a).unwrap()).unwrap().frobenius_norm_sq();
        let tail = gram_tail(&m, f.rank);
        let scale = m.frobenius_norm_sq().max(1e-300);
        prop_assert!((residual - tail).abs() <= 1e-10 * scale, "{} vs {}", residual, tail);
    }

    #[test]
    fn singular_values_ignore_row_and_column_sign_flips(m in matrix(), flips in proptest::collection::vec(any::<bool>(), 24)) {
        let (d, k) = m.shape();
        let flipped = Matrix::from_fn(d, k, |i, j| {
            let s = if flips[i] ^ flips[12 + j] { -1.0 } else { 1.0 };
            s * m[(i, j)]
        });
        let a = svd_thin(&m).unwrap();
        let b = svd_thin(&flipped).unwrap();
        let top = a.sigma.first().copied().unwrap_or(0.0);
        for (x, y) in a.sigma.iter().zip(&b.sigma) {
            prop_assert!((x - y).abs() <= 1e-12 * top.max(1.0));
        }
        // the balanced factors reproduce each matrix regardless of which signs the kernel picks
        let fa = factorize_matrix("m", &flipped, d.min(k), SvdMethod::Exact).unwrap();
        prop_assert!(flipped.sub(&fa.update()).unwrap().frobenius_norm() <= 1e-10 * top.max(1.0));
    }

    #[test]
    fn energy_is_monotone_and_threshold_selection_is_minimal(m in matrix(), tau in 0.01f64..=1.0) {
        let svd = svd_thin(&m).unwrap();
        let e: Vec<f64> = (1..=svd.sigma.len()).map(|r| preserved_energy(&svd.sigma, r)).collect();
        prop_assert!(e.windows(2).all(|w| w[1] >= w[0]));
        prop_assert_eq!(*e.last().unwrap(), 1.0);
        let r = select_rank(&svd.sigma, tau).unwrap();
        prop_assert!(e[r - 1] >= tau - 1e-12);
        if r > 1 {
            prop_assert!(e[r - 2] < tau - 1e-12);
        }
    }
}
