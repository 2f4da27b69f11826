//! Allocation-returning numeric kernels shared by the tape and by
//! gradient-free forward passes. Sharing them keeps tape and frozen
//! forwards bit-identical.

use crate::scalar::Scalar;

/// `a[m,k] · b[k,n]`.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,n] · b[k,n]ᵀ`, giving `[m,k]`.
pub fn matmul_bt<S: Scalar>(a: &[S], b: &[S], m: usize, n: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `a[m,k]ᵀ · b[m,n]`, giving `[k,n]`.
pub fn matmul_at<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Adds `bias[n]` to every row of `a[m,n]` in place.
pub fn add_row_inplace<S: Scalar>(a: &mut [S], bias: &[S]) {
    for row in a.chunks_mut(bias.len()) {
        for (x, &b) in row.iter_mut().zip(bias) {
            *x += b;
        }
    }
}

pub fn relu_inplace<S: Scalar>(a: &mut [S]) {
    for x in a.iter_mut() {
        if *x < S::zero() {
            *x = S::zero();
        }
    }
}

/// Numerically stable softmax over each row of width `cols`.
pub fn softmax_rows<S: Scalar>(a: &[S], cols: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(a.len());
    for row in a.chunks(cols) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let start = out.len();
        let mut total = S::zero();
        for &x in row {
            let e = (x - max).exp();
            total += e;
            out.push(e);
        }
        for y in &mut out[start..] {
            *y /= total;
        }
    }
    out
}

/// Per-row L1 distance between two equally shaped buffers.
pub fn row_l1<S: Scalar>(a: &[S], b: &[S], cols: usize) -> Vec<S> {
    a.chunks(cols)
        .zip(b.chunks(cols))
        .map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| (x - y).abs()).sum())
        .collect()
}

/// Per-row Euclidean distance between two equally shaped buffers.
pub fn row_l2<S: Scalar>(a: &[S], b: &[S], cols: usize) -> Vec<S> {
    a.chunks(cols)
        .zip(b.chunks(cols))
        .map(|(ra, rb)| {
            ra.iter()
                .zip(rb)
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<S>()
                .sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        // a: 2x3, b: 3x2
        let a = [1.0, 2.0, 3.0, -1.0, 0.5, 4.0];
        let b = [2.0, -1.0, 0.0, 1.0, 3.0, 0.25];
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![11.0, 1.75, 10.0, 2.5]);
        // bᵀ is 2x3
        let bt = [2.0, 0.0, 3.0, -1.0, 1.0, 0.25];
        assert_eq!(matmul_bt(&a, &bt, 2, 3, 2), c);
        // aᵀ is 3x2
        let at = [1.0, -1.0, 2.0, 0.5, 3.0, 4.0];
        assert_eq!(matmul_at(&at, &b, 3, 2, 2), c);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax_rows(&[1.0f64, 2.0, 3.0], 3);
        let b = softmax_rows(&[101.0, 102.0, 103.0], 3);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
