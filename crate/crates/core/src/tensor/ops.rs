use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{NesError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    #[default]
    Valid,
    /// Output extent `ceil(in / stride)`; the extra border goes after.
    Same,
    Explicit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: Padding,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            padding: Padding::Valid,
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: Padding) -> Self {
        ConvGeometry { stride, padding }
    }

    /// Output extent and leading pad for one spatial axis.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(NesError::config("stride must be >= 1"));
        }
        let s = self.stride;
        match self.padding {
            Padding::Valid => {
                if input < kernel {
                    return Err(NesError::DimensionMismatch {
                        op: "conv (valid padding)",
                        left: vec![input],
                        right: vec![kernel],
                    });
                }
                Ok(((input - kernel) / s + 1, 0))
            }
            Padding::Same => {
                let out = input.div_ceil(s);
                let total = ((out - 1) * s + kernel).saturating_sub(input);
                Ok((out, total / 2))
            }
            Padding::Explicit(p) => {
                if input + 2 * p < kernel {
                    return Err(NesError::DimensionMismatch {
                        op: "conv (explicit padding)",
                        left: vec![input + 2 * p],
                        right: vec![kernel],
                    });
                }
                Ok(((input + 2 * p - kernel) / s + 1, p))
            }
        }
    }
}

pub fn conv2d_naive(input: &Tensor, weights: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    conv2d_naive_counted(input, weights, geom).map(|(t, _)| t)
}

/// Direct evaluation of
/// `G[tw,th,c] = sum_{i,j,m} F[tw*s + i - pad, th*s + j - pad, m] * W[i,j,m,c]`
/// with zero padding. Also returns the number of scalar multiplies plus adds
/// performed; every kernel tap is visited, padded or not, so the count is
/// `(2 * C_in * w * h - 1) * W' * H' * C_out`.
pub fn conv2d_naive_counted(
    input: &Tensor,
    weights: &Tensor,
    geom: ConvGeometry,
) -> Result<(Tensor, u64)> {
    if input.rank() != 3 || weights.rank() != 4 || input.shape()[2] != weights.shape()[2] {
        return Err(NesError::DimensionMismatch {
            op: "conv2d_naive",
            left: input.shape().to_vec(),
            right: weights.shape().to_vec(),
        });
    }
    let (iw, ih, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kw, kh, cout) = (weights.shape()[0], weights.shape()[1], weights.shape()[3]);
    let (ow, pw) = geom.output_extent(iw, kw)?;
    let (oh, ph) = geom.output_extent(ih, kh)?;
    let s = geom.stride;
    let x = input.data();
    let w = weights.data();
    let mut out = vec![0.0; ow * oh * cout];
    let mut ops = 0u64;
    for tw in 0..ow {
        for th in 0..oh {
            for c in 0..cout {
                let mut acc = 0.0;
                let mut first = true;
                for i in 0..kw {
                    for j in 0..kh {
                        let xw = (tw * s + i) as isize - pw as isize;
                        let xh = (th * s + j) as isize - ph as isize;
                        let inside = xw >= 0 && xh >= 0 && (xw as usize) < iw && (xh as usize) < ih;
                        for m in 0..cin {
                            let f = if inside {
                                x[((xw as usize) * ih + xh as usize) * cin + m]
                            } else {
                                0.0
                            };
                            let prod = f * w[((i * kh + j) * cin + m) * cout + c];
                            ops += 1;
                            if first {
                                acc = prod;
                                first = false;
                            } else {
                                acc += prod;
                                ops += 1;
                            }
                        }
                    }
                }
                out[(tw * oh + th) * cout + c] = acc;
            }
        }
    }
    Ok((Tensor::new(vec![ow, oh, cout], out)?, ops))
}

pub fn conv1d_naive(input: &Tensor, weights: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    conv1d_naive_counted(input, weights, geom).map(|(t, _)| t)
}

/// 1-D convolution on `[W, C_in]` features with `[w, C_in, C_out]` weights.
pub fn conv1d_naive_counted(
    input: &Tensor,
    weights: &Tensor,
    geom: ConvGeometry,
) -> Result<(Tensor, u64)> {
    if input.rank() != 2 || weights.rank() != 3 || input.shape()[1] != weights.shape()[1] {
        return Err(NesError::DimensionMismatch {
            op: "conv1d_naive",
            left: input.shape().to_vec(),
            right: weights.shape().to_vec(),
        });
    }
    let (iw, cin) = (input.shape()[0], input.shape()[1]);
    let (kw, cout) = (weights.shape()[0], weights.shape()[2]);
    let x = input.clone().reshape(&[iw, 1, cin])?;
    let k = weights.clone().reshape(&[kw, 1, cin, cout])?;
    let (g, ops) = conv2d_naive_counted(&x, &k, geom)?;
    let ow = g.shape()[0];
    Ok((g.reshape(&[ow, cout])?, ops))
}

pub fn matmul(a: &Tensor, d: &Tensor) -> Result<Tensor> {
    matmul_counted(a, d).map(|(t, _)| t)
}

/// Vector-matrix product `a[N_in] x D[N_in, N_out]`.
pub fn matmul_counted(a: &Tensor, d: &Tensor) -> Result<(Tensor, u64)> {
    if a.rank() != 1 || d.rank() != 2 || a.shape()[0] != d.shape()[0] {
        return Err(NesError::DimensionMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: d.shape().to_vec(),
        });
    }
    let (n_in, n_out) = (d.shape()[0], d.shape()[1]);
    let mut out = vec![0.0; n_out];
    let mut ops = 0u64;
    for (o, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for k in 0..n_in {
            acc += a.data()[k] * d.data()[k * n_out + o];
        }
        *slot = acc;
        ops += 2 * n_in as u64 - 1;
    }
    Ok((Tensor::new(vec![n_out], out)?, ops))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    /// Independent loop order: scatter each input element into every output
    /// it touches, instead of gathering per output.
    fn conv2d_scatter_oracle(x: &Tensor, w: &Tensor, stride: usize) -> Tensor {
        let (iw, ih, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kw, kh, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
        let ow = (iw - kw) / stride + 1;
        let oh = (ih - kh) / stride + 1;
        let mut g = Tensor::zeros(&[ow, oh, cout]);
        for m in 0..cin {
            for a in 0..iw {
                for b in 0..ih {
                    let f = x.get(&[a, b, m]).unwrap();
                    for i in 0..kw {
                        for j in 0..kh {
                            if a < i || b < j || (a - i) % stride != 0 || (b - j) % stride != 0 {
                                continue;
                            }
                            let (tw, th) = ((a - i) / stride, (b - j) / stride);
                            if tw >= ow || th >= oh {
                                continue;
                            }
                            for c in 0..cout {
                                let v = g.get(&[tw, th, c]).unwrap()
                                    + f * w.get(&[i, j, m, c]).unwrap();
                                g.set(&[tw, th, c], v).unwrap();
                            }
                        }
                    }
                }
            }
        }
        g
    }

    #[test]
    fn scalar_product() {
        let x = Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![3.0]).unwrap();
        let g = conv2d_naive(&x, &w, ConvGeometry::default()).unwrap();
        assert_eq!(g.data(), &[6.0]);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut rng = Rng::new(1);
        let x = Tensor::randn(&[5, 5, 2], 1.0, &mut rng);
        let w = Tensor::zeros(&[3, 3, 2, 4]);
        let g = conv2d_naive(&x, &w, ConvGeometry::new(1, Padding::Same)).unwrap();
        assert_eq!(g.shape(), &[5, 5, 4]);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_matches_scatter_oracle() {
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&[8, 8, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 3, 3, 4], 1.0, &mut rng);
        for stride in [1, 2] {
            let g = conv2d_naive(&x, &w, ConvGeometry::new(stride, Padding::Valid)).unwrap();
            let o = conv2d_scatter_oracle(&x, &w, stride);
            assert!(g.max_abs_diff(&o).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn same_padding_keeps_extent_and_count_matches_formula() {
        let mut rng = Rng::new(4);
        let x = Tensor::randn(&[8, 8, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 3, 3, 4], 1.0, &mut rng);
        let (g, ops) = conv2d_naive_counted(&x, &w, ConvGeometry::new(1, Padding::Same)).unwrap();
        assert_eq!(g.shape(), &[8, 8, 4]);
        assert_eq!(ops, 13568);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::zeros(&[4, 4, 2]);
        let w = Tensor::zeros(&[3, 3, 3, 1]);
        match conv2d_naive(&x, &w, ConvGeometry::default()) {
            Err(NesError::DimensionMismatch { left, right, .. }) => {
                assert_eq!(left, vec![4, 4, 2]);
                assert_eq!(right, vec![3, 3, 3, 1]);
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn conv1d_identity_and_stride() {
        let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv1d_naive(&x, &k, ConvGeometry::default()).unwrap().data(), &[1.0, 2.0, 3.0]);

        let x = Tensor::new(vec![4, 1], vec![1.0; 4]).unwrap();
        let k = Tensor::new(vec![2, 1, 1], vec![1.0, 1.0]).unwrap();
        let g = conv1d_naive(&x, &k, ConvGeometry::new(2, Padding::Valid)).unwrap();
        assert_eq!(g.data(), &[2.0, 2.0]);
    }

    #[test]
    fn conv1d_random_matches_loop() {
        let mut rng = Rng::new(5);
        let x = Tensor::randn(&[11, 2], 1.0, &mut rng);
        let k = Tensor::randn(&[3, 2, 3], 1.0, &mut rng);
        let g = conv1d_naive(&x, &k, ConvGeometry::default()).unwrap();
        for t in 0..9 {
            for c in 0..3 {
                let mut acc = 0.0;
                for i in 0..3 {
                    for m in 0..2 {
                        acc += x.get(&[t + i, m]).unwrap() * k.get(&[i, m, c]).unwrap();
                    }
                }
                assert!((g.get(&[t, c]).unwrap() - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_cases() {
        let a = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        assert_eq!(matmul(&a, &eye).unwrap().data(), a.data());
        let z = Tensor::zeros(&[3, 2]);
        assert_eq!(matmul(&a, &z).unwrap().data(), &[0.0, 0.0]);

        let mut rng = Rng::new(6);
        let a = Tensor::randn(&[4], 1.0, &mut rng);
        let d = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let (y, ops) = matmul_counted(&a, &d).unwrap();
        for o in 0..3 {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += a.data()[k] * d.get(&[k, o]).unwrap();
            }
            assert!((y.data()[o] - acc).abs() <= 1e-12);
        }
        assert_eq!(ops, 7 * 3);
        assert!(matmul(&a, &Tensor::zeros(&[3, 3])).is_err());
    }
}
