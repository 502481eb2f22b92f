//! 3×3 convolution with zero padding 1, lowered to a matrix product via im2col.

use super::linalg::gemm_acc;
use super::{matmul_nt, matmul_tn, Element, Tensor};
use crate::error::{shape_err, Result};

const K: usize = 3;
const PAD: usize = 1;

pub fn conv2d_output_hw(h: usize, w: usize, stride: usize) -> (usize, usize) {
    ((h + 2 * PAD - K) / stride + 1, (w + 2 * PAD - K) / stride + 1)
}

fn conv_dims<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<(usize, usize, usize, usize)> {
    if stride != 1 && stride != 2 {
        return shape_err(format!("conv2d stride must be 1 or 2, got {stride}"));
    }
    let [c_in, h, wd] = x.dims()[..] else {
        return shape_err(format!("conv2d input must be C×H×W, got {:?}", x.dims()));
    };
    let [c_out, wc_in, kh, kw] = w.dims()[..] else {
        return shape_err(format!("conv2d weight must be rank 4, got {:?}", w.dims()));
    };
    if kh != K || kw != K {
        return shape_err(format!("conv2d kernel must be 3×3, got {kh}×{kw}"));
    }
    if wc_in != c_in {
        return shape_err(format!(
            "conv2d channel mismatch: input has {c_in}, weight expects {wc_in}"
        ));
    }
    if b.len() != c_out {
        return shape_err(format!("conv2d bias length {} for {c_out} outputs", b.len()));
    }
    Ok((c_in, h, wd, c_out))
}

/// Unfold `x[C×H×W]` into `[C·9 × H'·W']` patch columns.
pub fn im2col<T: Element>(x: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let [c_in, h, w] = x.dims()[..] else {
        return shape_err(format!("im2col input must be C×H×W, got {:?}", x.dims()));
    };
    let (ho, wo) = conv2d_output_hw(h, w, stride);
    let p = ho * wo;
    let xd = x.data();
    let mut cols = vec![T::ZERO; c_in * K * K * p];
    for c in 0..c_in {
        for ky in 0..K {
            for kx in 0..K {
                let row = (c * K + ky) * K + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &xd[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - PAD as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new([c_in * K * K, p], cols)
}

fn col2im<T: Element>(cols: &Tensor<T>, c_in: usize, h: usize, w: usize, stride: usize) -> Tensor<T> {
    let (ho, wo) = conv2d_output_hw(h, w, stride);
    let p = ho * wo;
    let cd = cols.data();
    let mut x = vec![T::ZERO; c_in * h * w];
    for c in 0..c_in {
        for ky in 0..K {
            for kx in 0..K {
                let row = (c * K + ky) * K + kx;
                let src = &cd[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - PAD as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - PAD as isize;
                        if ix >= 0 && ix < w as isize {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    Tensor::new([c_in, h, w], x).expect("col2im dims")
}

pub(crate) fn conv2d_with_cols<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, h, wd, c_out) = conv_dims(x, w, b, stride)?;
    let (ho, wo) = conv2d_output_hw(h, wd, stride);
    let p = ho * wo;
    let cols = im2col(x, stride)?;
    let kdim = cols.dims()[0];
    let mut out = vec![T::ZERO; c_out * p];
    for (o, &bias) in out.chunks_mut(p).zip(b.data()) {
        o.fill(bias);
    }
    gemm_acc(w.data(), cols.data(), &mut out, c_out, kdim, p);
    Ok((Tensor::new([c_out, ho, wo], out)?, cols))
}

/// `x[C_in×H×W] ⊛ w[C_out×C_in×3×3] + b`, padding 1, stride 1 or 2.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    conv2d_with_cols(x, w, b, stride).map(|(y, _)| y)
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<T: Element> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

/// Gradients of a convolution given the upstream gradient `dy[C_out×H'×W']`.
///
/// `cols` is the im2col unfolding of the forward input.
pub fn conv2d_backward<T: Element>(
    x_dims: &[usize],
    w: &Tensor<T>,
    cols: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
) -> Result<Conv2dGrads<T>> {
    let [c_in, h, wd] = x_dims[..] else {
        return shape_err(format!("conv2d_backward input dims {x_dims:?}"));
    };
    let c_out = w.dims()[0];
    let (ho, wo) = conv2d_output_hw(h, wd, stride);
    if dy.dims() != [c_out, ho, wo] {
        return shape_err(format!(
            "conv2d_backward: upstream dims {:?}, expected {:?}",
            dy.dims(),
            [c_out, ho, wo]
        ));
    }
    let p = ho * wo;
    let dy2 = dy.reshape([c_out, p])?;
    let w2 = w.reshape([c_out, c_in * K * K])?;
    let dw = matmul_nt(&dy2, cols)?.into_reshaped(w.dims().to_vec())?;
    let db = Tensor::new(
        [c_out],
        dy2.data()
            .chunks(p)
            .map(|r| {
                let mut s = T::ZERO;
                for &v in r {
                    s += v;
                }
                s
            })
            .collect(),
    )?;
    let dcols = matmul_tn(&w2, &dy2)?;
    let dx = col2im(&dcols, c_in, h, wd, stride);
    Ok(Conv2dGrads { dx, dw, db })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_constant_bias_map() {
        let x = Tensor::<f32>::from_fn([2, 6, 6], |i| i as f32);
        let w = Tensor::<f32>::zeros([3, 2, 3, 3]);
        let b = Tensor::<f32>::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = conv2d(&x, &w, &b, 1).unwrap();
        assert_eq!(y.dims(), &[3, 6, 6]);
        for c in 0..3 {
            assert!(y.data()[c * 36..(c + 1) * 36].iter().all(|&v| v == b.data()[c]));
        }
    }

    #[test]
    fn stride_two_halves_even_extents() {
        assert_eq!(conv2d_output_hw(512, 512, 2), (256, 256));
        assert_eq!(conv2d_output_hw(64, 64, 1), (64, 64));
        assert_eq!(conv2d_output_hw(7, 9, 2), (4, 5));
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros([2, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 3, 3, 3]);
        let b = Tensor::<f32>::zeros([1]);
        assert!(matches!(conv2d(&x, &w, &b, 1), Err(crate::Error::Shape(_))));
    }
}
