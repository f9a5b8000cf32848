// Plain loops over row-major slices. Each output entry accumulates its k
// terms in increasing order. Zero entries of the left operand are skipped,
// which matters for the mostly-empty raster patches.

/// `c[p×r] += a[p×q] · b[q×r]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let c_row = &mut c[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * r..(k + 1) * r];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

fn transposed(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = m[i * cols + j];
        }
    }
    t
}

/// `da[p×q] += dc[p×r] · b[q×r]ᵀ`
pub(crate) fn gemm_nt(dc: &[f64], b: &[f64], da: &mut [f64], p: usize, q: usize, r: usize) {
    // The transpose turns the inner loop into a contiguous axpy.
    gemm_nn(dc, &transposed(b, q, r), da, p, r, q);
}

/// `db[q×r] += a[p×q]ᵀ · dc[p×r]`
pub(crate) fn gemm_tn(a: &[f64], dc: &[f64], db: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let dc_row = &dc[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let db_row = &mut db[k * r..(k + 1) * r];
            for (dv, &g) in db_row.iter_mut().zip(dc_row) {
                *dv += aik * g;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU, written with 0.5·(1 + tanh u) = σ(2u).
pub(crate) fn gelu(x: f64) -> f64 {
    x * sigmoid_2u(x)
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let s = sigmoid_2u(x);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    s + 2.0 * x * s * (1.0 - s) * du
}

fn sigmoid_2u(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
        let mut c = vec![0.0; p * r];
        for i in 0..p {
            for j in 0..r {
                for k in 0..q {
                    c[i * r + j] += a[i * q + k] * b[k * r + j];
                }
            }
        }
        c
    }

    #[test]
    fn gelu_matches_the_tanh_form() {
        for i in -400..=400 {
            let x = i as f64 * 0.05;
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            assert!((gelu(x) - 0.5 * x * (1.0 + t)).abs() < 1e-14 * (1.0 + x.abs()));
            let g =
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
            assert!((gelu_grad(x) - g).abs() < 1e-13 * (1.0 + x.abs()), "{x}");
        }
    }

    #[test]
    fn gemm_variants_match_the_triple_loop_bit_for_bit() {
        for (p, q, r) in [(3, 4, 5), (9, 7, 19), (8, 33, 16), (1, 1, 1)] {
            // Every third entry of a is zero to exercise the skips.
            let a: Vec<f64> = (0..p * q)
                .map(|i| {
                    if i % 3 == 1 {
                        0.0
                    } else {
                        (i as f64 * 0.37).sin()
                    }
                })
                .collect();
            let b: Vec<f64> = (0..q * r).map(|i| (i as f64 * 0.11).cos()).collect();
            let mut c = vec![0.0; p * r];
            gemm_nn(&a, &b, &mut c, p, q, r);
            assert_eq!(c, naive(&a, &b, p, q, r));

            let mut da = vec![0.0; p * q];
            gemm_nt(&c, &b, &mut da, p, q, r);
            assert_eq!(da, naive(&c, &transposed(&b, q, r), p, r, q));

            let mut db = vec![0.0; q * r];
            gemm_tn(&a, &c, &mut db, p, q, r);
            assert_eq!(db, naive(&transposed(&a, p, q), &c, q, p, r));
        }
    }
}
