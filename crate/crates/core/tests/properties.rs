mod common;

use common::*;
use prnu_match::eval::{closed_set_accuracy, open_set, roc_auc, ScoreMatrix};
use prnu_match::imaging::normalize_by_std;
use prnu_match::pcn::{ArchDescriptor, PcnGradients, PcnModel};
use prnu_match::residual::{dwt2, idwt2, zero_mean_plane, Wavelet};
use proptest::prelude::*;
use rand::Rng;

fn random_matrix(seed: u64, n_dev: usize, per_dev: usize) -> ScoreMatrix {
    let mut r = rng(seed);
    let cols: Vec<String> = (0..n_dev).map(|d| format!("d{d}")).collect();
    let mut names = Vec::new();
    let mut truth = Vec::new();
    let mut values = Vec::new();
    for d in 0..n_dev {
        for q in 0..per_dev {
            names.push(format!("d{d}/{q}"));
            truth.push(cols[d].clone());
            for j in 0..n_dev {
                // coarse grid so ties actually happen
                let bump = if j == d { 1.0 } else { 0.0 };
                values.push((r.random_range(0..6) as f64 + bump) / 2.0);
            }
        }
    }
    ScoreMatrix::new(names, truth, cols, values, "random").unwrap()
}

fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut s = 0.0;
    for p in pos {
        for n in neg {
            s += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    s / (pos.len() * neg.len()) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn accuracy_and_auc_ignore_monotone_transforms(seed in any::<u64>(), n_dev in 2usize..6, per in 1usize..5) {
        let sm = random_matrix(seed, n_dev, per);
        let warped = sm.map(|v| (3.0 * v).exp() - 7.0).unwrap();
        prop_assert_eq!(closed_set_accuracy(&sm).unwrap(), closed_set_accuracy(&warped).unwrap());
        prop_assert_eq!(open_set(&sm).unwrap().roc.auc, open_set(&warped).unwrap().roc.auc);
    }

    #[test]
    fn auc_equals_pair_count_and_trapezoid(
        pos in prop::collection::vec(0u8..8, 1..40),
        neg in prop::collection::vec(0u8..8, 1..40),
    ) {
        let pos: Vec<f64> = pos.into_iter().map(f64::from).collect();
        let neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
        let roc = roc_auc(&pos, &neg).unwrap();
        prop_assert!((roc.auc - brute_auc(&pos, &neg)).abs() < 1e-12);
        prop_assert!((roc.trapezoid_area() - roc.auc).abs() < 1e-9);
        prop_assert!(roc.points.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
    }

    #[test]
    fn wavelet_reconstructs(seed in any::<u64>(), rows in 1usize..40, cols in 1usize..40, levels in 1usize..5) {
        let mut r = rng(seed);
        let x = random_plane(rows, cols, &mut r);
        let back = idwt2(&dwt2(&x, Wavelet::Daubechies8Tap, levels));
        prop_assert!(back.max_abs_diff(&x) < 1e-9);
    }

    #[test]
    fn zero_mean_clears_rows_and_columns(seed in any::<u64>(), rows in 1usize..20, cols in 1usize..20) {
        let mut r = rng(seed);
        let x = random_plane(rows, cols, &mut r).map(|v| v + 5.0);
        let z = zero_mean_plane(&x);
        for i in 0..rows {
            prop_assert!(z.row(i).iter().sum::<f64>().abs() < 1e-9);
        }
        for j in 0..cols {
            prop_assert!((0..rows).map(|i| z[(i, j)]).sum::<f64>().abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_planes_have_unit_std(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut r = rng(seed);
        let x = random_plane(9, 9, &mut r).scale(scale);
        prop_assert!((normalize_by_std(&x).unwrap().population_std() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn circshift_composes(seed in any::<u64>(), a in 0usize..10, b in 0usize..10) {
        let mut r = rng(seed);
        let x = random_plane(5, 7, &mut r);
        let back = x.circshift(a, b).circshift(5 - a % 5, 7 - b % 7);
        prop_assert_eq!(back, x);
    }
}

#[test]
fn tree_sum_is_order_fixed_and_close_to_a_plain_sum() {
    let model = PcnModel::<f64>::init(ArchDescriptor::default(), 4).unwrap();
    let mut r = rng(5);
    let items: Vec<PcnGradients<f64>> = (0..7)
        .map(|_| {
            let mut g = PcnGradients::zeros_like(&model);
            for seg in g.segments.iter_mut() {
                for v in seg.iter_mut() {
                    *v = r.random_range(-1.0..1.0);
                }
            }
            g
        })
        .collect();
    let a = PcnGradients::tree_sum(items.clone()).unwrap();
    let b = PcnGradients::tree_sum(items.clone()).unwrap();
    assert_eq!(a, b);
    let plain = items.iter().skip(1).fold(items[0].clone(), |acc, g| acc.add(g));
    for (x, y) in a.segments.iter().flatten().zip(plain.segments.iter().flatten()) {
        assert!((x - y).abs() < 1e-12);
    }
}
