//! Small dense linear algebra and deterministic summation helpers.

use crate::scalar::Scalar;

/// Maximum spatial dimension handled by the stack-allocated fast paths.
pub const MAX_N: usize = 8;

const PAIRWISE_BASE: usize = 32;

/// Fixed-order pairwise-tree reduction of `f(0..len)`.
///
/// The reduction order depends only on `len`, never on thread count, so
/// results are bit-reproducible.
pub fn pairwise_sum<S: Scalar>(len: usize, f: &impl Fn(usize) -> S) -> S {
    fn go<S: Scalar>(lo: usize, hi: usize, f: &impl Fn(usize) -> S) -> S {
        if hi - lo <= PAIRWISE_BASE {
            let mut acc = S::zero();
            for i in lo..hi {
                acc += f(i);
            }
            acc
        } else {
            let mid = lo + (hi - lo) / 2;
            go(lo, mid, f) + go(mid, hi, f)
        }
    }
    if len == 0 {
        S::zero()
    } else {
        go(0, len, f)
    }
}

/// Pairwise-tree reduction producing `m <= MAX_N * MAX_N` components at once.
///
/// Used by the N-body loops to accumulate a velocity vector (and optionally a
/// velocity gradient) in a single pass over the sources.
pub fn pairwise_sum_multi<S: Scalar, const M: usize>(
    len: usize,
    f: &impl Fn(usize, &mut [S; M]),
) -> [S; M] {
    fn go<S: Scalar, const M: usize>(
        lo: usize,
        hi: usize,
        f: &impl Fn(usize, &mut [S; M]),
    ) -> [S; M] {
        if hi - lo <= PAIRWISE_BASE {
            let mut acc = [S::zero(); M];
            for i in lo..hi {
                f(i, &mut acc);
            }
            acc
        } else {
            let mid = lo + (hi - lo) / 2;
            let a = go(lo, mid, f);
            let mut b = go(mid, hi, f);
            for k in 0..M {
                b[k] += a[k];
            }
            b
        }
    }
    if len == 0 {
        [S::zero(); M]
    } else {
        go(0, len, f)
    }
}

/// Plain sequential left-to-right sum, kept for the `summation = sequential`
/// quadrature option.
pub fn sequential_sum_multi<S: Scalar, const M: usize>(
    len: usize,
    f: &impl Fn(usize, &mut [S; M]),
) -> [S; M] {
    let mut acc = [S::zero(); M];
    for i in 0..len {
        f(i, &mut acc);
    }
    acc
}

/// Determinant of a dense `n x n` matrix stored row-major.
///
/// Direct formulas up to `n = 3`, Gaussian elimination with partial pivoting
/// above that.
pub fn determinant<S: Scalar>(a: &[S], n: usize) -> S {
    debug_assert_eq!(a.len(), n * n);
    match n {
        0 => S::one(),
        1 => a[0],
        2 => a[0] * a[3] - a[1] * a[2],
        3 => {
            a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
                + a[2] * (a[3] * a[7] - a[4] * a[6])
        }
        _ => {
            let mut m = a.to_vec();
            let mut det = S::one();
            for col in 0..n {
                let mut piv = col;
                for r in col + 1..n {
                    if m[r * n + col].abs() > m[piv * n + col].abs() {
                        piv = r;
                    }
                }
                if m[piv * n + col] == S::zero() {
                    return S::zero();
                }
                if piv != col {
                    for c in 0..n {
                        m.swap(piv * n + c, col * n + c);
                    }
                    det = -det;
                }
                det *= m[col * n + col];
                for r in col + 1..n {
                    let factor = m[r * n + col] / m[col * n + col];
                    for c in col..n {
                        let sub = factor * m[col * n + c];
                        m[r * n + c] -= sub;
                    }
                }
            }
            det
        }
    }
}

/// Determinant of the complementary submatrix of `a` obtained by erasing
/// row `i` and column `j`.
pub fn complementary_det<S: Scalar>(a: &[S], n: usize, i: usize, j: usize) -> S {
    debug_assert!(n >= 1 && i < n && j < n);
    let m = n - 1;
    let mut sub = [S::zero(); (MAX_N - 1) * (MAX_N - 1)];
    let mut idx = 0;
    for r in 0..n {
        if r == i {
            continue;
        }
        for c in 0..n {
            if c == j {
                continue;
            }
            sub[idx] = a[r * n + c];
            idx += 1;
        }
    }
    determinant(&sub[..m * m], m)
}

/// d/deps det(a + eps b) at eps = 0, via the cofactor sum
/// sum_{i,j} (-1)^{i+j} b_{ij} det(a^c_{i,j}).
pub fn det_derivative<S: Scalar>(a: &[S], b: &[S], n: usize) -> S {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n * n);
    let mut acc = S::zero();
    for i in 0..n {
        for j in 0..n {
            let sign = if (i + j) % 2 == 0 { S::one() } else { -S::one() };
            acc += sign * b[i * n + j] * complementary_det(a, n, i, j);
        }
    }
    acc
}

/// Euclidean norm of a slice.
pub fn norm<S: Scalar>(x: &[S]) -> S {
    x.iter().map(|&v| v * v).sum::<S>().sqrt()
}

/// Euclidean distance between two points of equal dimension.
pub fn dist<S: Scalar>(x: &[S], y: &[S]) -> S {
    x.iter()
        .zip(y)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<S>()
        .sqrt()
}

/// Max-abs entry of a slice.
pub fn max_abs<S: Scalar>(x: &[S]) -> S {
    x.iter().fold(S::zero(), |m, &v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_sequential() {
        let data: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let p = pairwise_sum(data.len(), &|i| data[i]);
        let s: f64 = data.iter().sum();
        assert!((p - s).abs() < 1e-12);
    }

    #[test]
    fn determinant_small() {
        assert_eq!(determinant(&[2.0, 0.0, 0.0, 3.0], 2), 6.0);
        let a: [f64; 9] = [1.0, 2.0, 3.0, 0.0, 1.0, 4.0, 5.0, 6.0, 0.0];
        assert!((determinant(&a, 3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn determinant_pivoting_4x4() {
        // singular leading minor forces a row swap
        let a: [f64; 16] = [
            0.0, 1.0, 0.0, 0.0, //
            1.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 2.0, 0.0, //
            0.0, 0.0, 0.0, 3.0,
        ];
        assert!((determinant(&a, 4) + 6.0).abs() < 1e-12);
    }

    #[test]
    fn det_derivative_trace_at_identity() {
        let i2 = [1.0, 0.0, 0.0, 1.0];
        let b = [4.0, -1.0, 7.0, 9.0];
        assert_eq!(det_derivative(&i2, &b, 2), 13.0);
    }

    #[test]
    fn det_derivative_diag_example() {
        let a = [2.0, 0.0, 0.0, 3.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(det_derivative(&a, &b, 2), 5.0);
    }

    #[test]
    fn det_derivative_linear_in_b() {
        let a: [f64; 9] = [0.3, 1.1, -0.4, 0.9, 2.0, 0.1, 0.0, -1.2, 0.7];
        let b = [0.5, -0.3, 0.2, 1.0, 0.4, -0.9, 0.3, 0.8, -0.1];
        let c = [1.5, 0.3, -0.2, 0.0, 2.4, 0.9, -0.3, 0.1, 1.1];
        let lhs = det_derivative(
            &{
                let mut s = [0.0; 9];
                for k in 0..9 {
                    s[k] = 2.0 * b[k] + c[k];
                }
                s
            },
            &a,
            3,
        );
        // linearity is in the perturbation argument
        let lhs2 = det_derivative(&a, &b, 3) * 2.0 + det_derivative(&a, &c, 3);
        let rhs = det_derivative(
            &a,
            &{
                let mut s = [0.0; 9];
                for k in 0..9 {
                    s[k] = 2.0 * b[k] + c[k];
                }
                s
            },
            3,
        );
        assert!((rhs - lhs2).abs() < 1e-12);
        let _ = lhs;
    }
}
