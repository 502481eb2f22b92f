use super::{Element, Tensor};
use crate::error::{shape_err, Result};

const TILE_J: usize = 512;
const TILE_K: usize = 128;

/// `out[M×N] += a[M×K] · b[K×N]` over raw row-major slices.
///
/// Every output element accumulates its products in ascending `k` order,
/// independent of the tiling, so results are reproducible bit for bit.
pub(crate) fn gemm_acc<T: Element>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for j0 in (0..n).step_by(TILE_J) {
        let j1 = (j0 + TILE_J).min(n);
        for k0 in (0..k).step_by(TILE_K) {
            let k1 = (k0 + TILE_K).min(k);
            for i in 0..m {
                let a_row = &a[i * k..(i + 1) * k];
                let out_row = &mut out[i * n + j0..i * n + j1];
                for kk in k0..k1 {
                    let aik = a_row[kk];
                    if aik == T::ZERO {
                        continue;
                    }
                    let b_row = &b[kk * n + j0..kk * n + j1];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += aik * bv;
                    }
                }
            }
        }
    }
}

/// Matrix product `a[M×K] · b[K×N]`.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.shape2()?;
    let (k2, n) = b.shape2()?;
    if k != k2 {
        return shape_err(format!("matmul: [{m}×{k}]·[{k2}×{n}]"));
    }
    let mut out = vec![T::ZERO; m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new([m, n], out)
}

/// `a[M×K] · b[N×K]ᵀ`; each entry is a sequential dot product of two rows.
pub fn matmul_nt<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.shape2()?;
    let (n, k2) = b.shape2()?;
    if k != k2 {
        return shape_err(format!("matmul_nt: [{m}×{k}]·[{n}×{k2}]ᵀ"));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &bd[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&x, &y) in ar.iter().zip(br) {
                acc += x * y;
            }
            out.push(acc);
        }
    }
    Tensor::new([m, n], out)
}

/// `a[K×M]ᵀ · b[K×N]`.
pub fn matmul_tn<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.shape2()?;
    let (k2, n) = b.shape2()?;
    if k != k2 {
        return shape_err(format!("matmul_tn: [{k}×{m}]ᵀ·[{k2}×{n}]"));
    }
    let at = a.transpose2()?;
    let mut out = vec![T::ZERO; m * n];
    gemm_acc(at.data(), b.data(), &mut out, m, k, n);
    Tensor::new([m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_leaves_matrix_unchanged() {
        let x = Tensor::<f64>::from_fn([3, 4], |i| i as f64 - 5.5);
        assert_eq!(matmul(&Tensor::eye(3), &x).unwrap(), x);
    }

    #[test]
    fn hand_computed_product() {
        let a = Tensor::<f64>::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::new([2, 1], vec![0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn inner_extent_mismatch_is_shape_error() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let b = Tensor::<f32>::zeros([2, 3]);
        assert!(matches!(
            matmul(&a, &b),
            Err(crate::Error::Shape(_))
        ));
    }

    #[test]
    fn transposed_variants_agree_with_plain_product() {
        let a = Tensor::<f64>::from_fn([5, 7], |i| ((i * 37) % 11) as f64 - 5.0);
        let b = Tensor::<f64>::from_fn([7, 3], |i| ((i * 13) % 7) as f64 * 0.5);
        let ab = matmul(&a, &b).unwrap();
        let nt = matmul_nt(&a, &b.transpose2().unwrap()).unwrap();
        let tn = matmul_tn(&a.transpose2().unwrap(), &b).unwrap();
        assert!(ab.max_abs_diff(&nt).unwrap() < 1e-12);
        assert!(ab.max_abs_diff(&tn).unwrap() < 1e-12);
    }

    #[test]
    fn tiled_kernel_handles_ragged_tiles() {
        // Larger than one tile in both k and n.
        let (m, k, n) = (3, TILE_K + 17, TILE_J + 9);
        let a = Tensor::<f64>::from_fn([m, k], |i| ((i * 7) % 13) as f64 - 6.0);
        let b = Tensor::<f64>::from_fn([k, n], |i| ((i * 5) % 17) as f64 * 0.25 - 2.0);
        let got = matmul(&a, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a.data()[i * k + kk] * b.data()[kk * n + j];
                }
                assert!((got.data()[i * n + j] - acc).abs() < 1e-9);
            }
        }
    }
}
