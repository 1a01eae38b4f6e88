//! Forward kernels against direct loop implementations, and algebraic invariants.

use proptest::prelude::*;
use weedsense_tensor::ops::{self, Conv2dOptions, PoolOptions};
use weedsense_tensor::{Tensor, Var};

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn var(shape: &[usize], data: Vec<f64>) -> Var<f64> {
    Var::constant(Tensor::new(shape.to_vec(), data).unwrap())
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + y.abs()))
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(x: &[f64], w: &[f64], b: &[f64], n: usize, cin: usize, h: usize, wd: usize, cout: usize, k: usize, s: usize, p: usize, g: usize) -> Vec<f64> {
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (wd + 2 * p - k) / s + 1;
    let (cig, cog) = (cin / g, cout / g);
    let mut out = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            let grp = co / cog;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cig {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xc = grp * cig + ci;
                                acc += x[((ni * cin + xc) * h + iy as usize) * wd + ix as usize] * w[((co * cig + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv_case() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize, usize)> {
    // n, groups, cin per group, cout per group, kernel, stride, padding, side
    (1usize..3, 1usize..4, 1usize..3, 1usize..3, prop::sample::select(vec![1usize, 3, 5]), 1usize..3, 0usize..3, 5usize..9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_direct_loops((n, g, cig, cog, k, s, p, side) in conv_case(), seed in any::<u64>()) {
        let (cin, cout, p) = (g * cig, g * cog, p.min(k / 2));
        let gen = |len: usize, salt: u64| -> Vec<f64> {
            (0..len).map(|i| (((i as u64 + 1).wrapping_mul(seed | 1).wrapping_add(salt) >> 11) % 1000) as f64 / 500.0 - 1.0).collect()
        };
        let x = gen(n * cin * side * side, 1);
        let w = gen(cout * cig * k * k, 2);
        let b = gen(cout, 3);
        let y = ops::conv2d(
            &var(&[n, cin, side, side], x.clone()),
            &var(&[cout, cig, k, k], w.clone()),
            Some(&var(&[cout], b.clone())),
            Conv2dOptions::new(s, p, g),
        )
        .unwrap();
        prop_assert!(close(y.value().data(), &naive_conv(&x, &w, &b, n, cin, side, side, cout, k, s, p, g)));
    }

    #[test]
    fn matmul_matches_direct_loops(m in 1usize..6, k in 1usize..6, n in 1usize..6, a in values(36), b in values(36), t in any::<bool>()) {
        let (a, b) = (a[..m * k].to_vec(), b[..k * n].to_vec());
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let y = if t {
            ops::matmul(&var(&[1, m, k], a.clone()), &var(&[1, n, k], bt), true).unwrap()
        } else {
            ops::matmul(&var(&[1, m, k], a.clone()), &var(&[1, k, n], b.clone()), false).unwrap()
        };
        let want: Vec<f64> = (0..m * n).map(|i| (0..k).map(|j| a[(i / n) * k + j] * b[j * n + i % n]).sum()).collect();
        prop_assert!(close(y.value().data(), &want));
    }

    #[test]
    fn max_pool_matches_direct_loops(side in 3usize..9, k in 2usize..4, s in 1usize..3, x in values(2 * 81)) {
        let p = k / 2;
        let x = x[..2 * side * side].to_vec();
        let y = ops::max_pool2d(&var(&[1, 2, side, side], x.clone()), PoolOptions::new(k, s, p)).unwrap();
        let o = (side + 2 * p - k) / s + 1;
        let mut want = Vec::new();
        for c in 0..2 {
            for oy in 0..o {
                for ox in 0..o {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = ((oy * s + ky) as isize - p as isize, (ox * s + kx) as isize - p as isize);
                            if iy >= 0 && ix >= 0 && (iy as usize) < side && (ix as usize) < side {
                                best = best.max(x[(c * side + iy as usize) * side + ix as usize]);
                            }
                        }
                    }
                    want.push(best);
                }
            }
        }
        prop_assert!(close(y.value().data(), &want));
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(x in values(12), shift in -50.0f64..50.0) {
        let y = ops::softmax(&var(&[3, 4], x.clone()));
        for row in y.value().data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
        let shifted = ops::softmax(&var(&[3, 4], x.iter().map(|v| v + shift).collect()));
        prop_assert!(close(shifted.value().data(), y.value().data()));
    }

    #[test]
    fn pixel_shuffle_is_a_permutation(x in values(2 * 8 * 9)) {
        let y = ops::pixel_shuffle(&var(&[1, 8, 3, 3], x[..72].to_vec()), 2).unwrap();
        prop_assert_eq!(y.shape(), &[1, 2, 6, 6]);
        let mut a = x[..72].to_vec();
        let mut b = y.value().data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }
}
