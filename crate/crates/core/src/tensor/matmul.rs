//! Batched matrix multiplication.
//!
//! `[.., M, K] x [.., K, P] -> [.., M, P]`, where one operand's batch dims
//! must be a suffix of the other's (typically a weight matrix with no batch
//! dims at all). Kernels are row-parallel; every output element is reduced
//! sequentially, so results are bitwise deterministic for any thread count.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{GradCtx, GradFn, Tensor};

const PAR_THRESHOLD: usize = 1 << 14; // mults below this run single-threaded

/// c[m, p] = sum_k a[m, k] * b[k, p]
fn mm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], _m: usize, k: usize, p: usize) {
    for (row, cm) in c.chunks_exact_mut(p).enumerate() {
        let ar = &a[row * k..(row + 1) * k];
        for (kk, &av) in ar.iter().enumerate() {
            let br = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in cm.iter_mut().zip(br) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// c[m, kk] = sum_p a[m, p] * b[kk, p]   (b used transposed)
fn mm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    let _ = m;
    for (row, cm) in c.chunks_exact_mut(k).enumerate() {
        let ar = &a[row * p..(row + 1) * p];
        for (kk, cv) in cm.iter_mut().enumerate() {
            let br = &b[kk * p..(kk + 1) * p];
            let mut s = T::zero();
            for (&av, &bv) in ar.iter().zip(br) {
                s = s + av * bv;
            }
            *cv = *cv + s;
        }
    }
}

/// c[kk, p] += sum_m a[m, kk] * b[m, p]   (a used transposed)
fn mm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    for row in 0..m {
        let br = &b[row * p..(row + 1) * p];
        for kk in 0..k {
            let av = a[row * k + kk];
            let cm = &mut c[kk * p..(kk + 1) * p];
            for (cv, &bv) in cm.iter_mut().zip(br) {
                *cv = *cv + av * bv;
            }
        }
    }
}

struct MatMulDims {
    batch: usize,
    a_batch: usize,
    b_batch: usize,
    m: usize,
    k: usize,
    p: usize,
    out_shape: Vec<usize>,
}

fn matmul_dims(a_shape: &[usize], b_shape: &[usize]) -> Result<MatMulDims> {
    if a_shape.len() < 2 || b_shape.len() < 2 {
        return Err(Error::Dimension(format!(
            "matmul requires >= 2 dims, got {:?} x {:?}",
            a_shape, b_shape
        )));
    }
    let (m, ka) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let (kb, p) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
    if ka != kb {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a_shape.to_vec(),
            rhs: b_shape.to_vec(),
        });
    }
    let ab = &a_shape[..a_shape.len() - 2];
    let bb = &b_shape[..b_shape.len() - 2];
    let out_batch: &[usize] = if ab.len() >= bb.len() {
        if !ab.ends_with(bb) {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a_shape.to_vec(),
                rhs: b_shape.to_vec(),
            });
        }
        ab
    } else {
        if !bb.ends_with(ab) {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a_shape.to_vec(),
                rhs: b_shape.to_vec(),
            });
        }
        bb
    };
    let mut out_shape = out_batch.to_vec();
    out_shape.push(m);
    out_shape.push(p);
    Ok(MatMulDims {
        batch: out_batch.iter().product::<usize>().max(1),
        a_batch: ab.iter().product::<usize>().max(1),
        b_batch: bb.iter().product::<usize>().max(1),
        m,
        k: ka,
        p,
        out_shape,
    })
}

struct MatMulGrad;

impl<T: Scalar> GradFn<T> for MatMulGrad {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, ctx: &GradCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let a = &ctx.inputs[0];
        let b = &ctx.inputs[1];
        let d = matmul_dims(a.shape(), b.shape()).expect("validated at forward");
        let (m, k, p) = (d.m, d.k, d.p);
        let g = ctx.grad;
        let ad = a.data();
        let bd = b.data();

        // dA = dY . B^T  (accumulated over batches broadcast into A)
        let mut da = vec![T::zero(); a.numel()];
        for i in 0..d.batch {
            let gs = &g[i * m * p..(i + 1) * m * p];
            let bs = &bd[(i % d.b_batch) * k * p..(i % d.b_batch + 1) * k * p];
            let das = &mut da[(i % d.a_batch) * m * k..(i % d.a_batch + 1) * m * k];
            mm_nt(gs, bs, das, m, k, p);
        }
        // dB = A^T . dY
        let mut db = vec![T::zero(); b.numel()];
        for i in 0..d.batch {
            let gs = &g[i * m * p..(i + 1) * m * p];
            let as_ = &ad[(i % d.a_batch) * m * k..(i % d.a_batch + 1) * m * k];
            let dbs = &mut db[(i % d.b_batch) * k * p..(i % d.b_batch + 1) * k * p];
            mm_tn(as_, gs, dbs, m, k, p);
        }
        vec![Some(da), Some(db)]
    }
}

impl<T: Scalar> Tensor<T> {
    /// Batched contracted product; see module docs for broadcasting rules.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let d = matmul_dims(self.shape(), rhs.shape())?;
        let (m, k, p) = (d.m, d.k, d.p);
        let mut out = vec![T::zero(); d.batch * m * p];
        let ad = self.data();
        let bd = rhs.data();
        let work = d.batch * m * k * p;
        if work >= PAR_THRESHOLD && d.batch * m > 1 {
            out.par_chunks_mut(p).enumerate().for_each(|(row, crow)| {
                let (bi, mi) = (row / m, row % m);
                let ar = &ad[(bi % d.a_batch) * m * k + mi * k..][..k];
                let bs = &bd[(bi % d.b_batch) * k * p..][..k * p];
                for (kk, &av) in ar.iter().enumerate() {
                    let br = &bs[kk * p..(kk + 1) * p];
                    for (cv, &bv) in crow.iter_mut().zip(br) {
                        *cv = *cv + av * bv;
                    }
                }
            });
        } else {
            for bi in 0..d.batch {
                let as_ = &ad[(bi % d.a_batch) * m * k..][..m * k];
                let bs = &bd[(bi % d.b_batch) * k * p..][..k * p];
                mm_nn(as_, bs, &mut out[bi * m * p..(bi + 1) * m * p], m, k, p);
            }
        }
        Ok(Tensor::from_op(
            out,
            &d.out_shape,
            &[self.clone(), rhs.clone()],
            Arc::new(MatMulGrad),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_case() {
        let a = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![3.0, 4.0], &[2, 1]).unwrap();
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.data(), &[3.0, 4.0]);
    }

    #[test]
    fn hand_arithmetic() {
        let a = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = Tensor::<f64>::from_vec(vec![3.0, 4.0], &[2, 1]).unwrap();
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.data(), &[11.0]);
    }

    #[test]
    fn matches_naive_triple_loop() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::<f64>::randn(&[3, 4], &mut rng);
        let b = Tensor::<f64>::randn(&[4, 2], &mut rng);
        let y = a.matmul(&b).unwrap();
        // independent triple-loop oracle
        let mut want = vec![0.0f64; 3 * 2];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                want[i * 2 + j] = s;
            }
        }
        for (got, want) in y.data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn batched_broadcast_weight_grads_accumulate() {
        let a = Tensor::<f64>::from_vec((0..12).map(|i| i as f64).collect(), &[3, 2, 2])
            .unwrap()
            .requires_grad(true);
        let w = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2])
            .unwrap()
            .requires_grad(true);
        let y = a.matmul(&w).unwrap();
        assert_eq!(y.shape(), &[3, 2, 2]);
        let loss = y.sum_all();
        loss.backward().unwrap();
        // dW[k][p] = sum over batch/rows of a[..,k]
        let gw = w.grad().unwrap();
        let col0: f64 = (0..6).map(|r| a.data()[r * 2]).sum();
        let col1: f64 = (0..6).map(|r| a.data()[r * 2 + 1]).sum();
        assert_eq!(gw, vec![col0, col0, col1, col1]);
        assert_eq!(a.grad().unwrap()[0..2], [3.0, 7.0]);
    }
}
