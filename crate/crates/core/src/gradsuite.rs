//! Finite-difference verification suite covering every differentiable
//! operation and both mixer block types.
//!
//! Each named check runs several randomized small shapes in f64 and
//! reports the worst relative error against central differences. The CLI
//! `grad-check` command and the acceptance suite both drive this module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Attention, RopeContext, TransformerBlock};
use crate::embedding::{apply_rope3d, RotaryFrequencies};
use crate::error::Result;
use crate::ssm::{dwconv_causal, selective_scan, MambaBlock, MambaLayer};
use crate::tensor::conv::Conv3dSpec;
use crate::tensor::gradcheck::{grad_check_multi, GradCheckReport, FD_STEP};
use crate::tensor::Tensor;
use crate::training::loss::{combined_loss, cross_entropy, dice_loss, Labels};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub op: String,
    pub module: String,
    pub shapes: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Run one named multi-shape check: `build` returns (inputs, loss fn) per
/// trial index.
fn run_check<F>(op: &str, module: &str, tol: f64, trials: usize, build: F) -> Result<CheckResult>
where
    F: Fn(
        usize,
        &mut ChaCha8Rng,
    ) -> Result<(
        Vec<Tensor<f64>>,
        Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>,
    )>,
{
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED ^ (trial as u64) << 8 ^ hash(op));
        let (inputs, f) = build(trial, &mut rng)?;
        let rep: GradCheckReport = grad_check_multi(|xs| f(xs), &inputs, FD_STEP, tol)?;
        worst = worst.max(rep.max_rel_err);
    }
    Ok(CheckResult {
        op: op.into(),
        module: module.into(),
        shapes: trials,
        max_rel_err: worst,
        tol,
    })
}

fn hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100000001b3)
    })
}

/// Weighted-sum loss over an op output: exercises non-uniform adjoints.
/// The RNG is cloned per call so repeated evaluations see identical weights.
fn weighted(y: Tensor<f64>, rng: &ChaCha8Rng) -> Result<Tensor<f64>> {
    let mut rng = rng.clone();
    let w = Tensor::<f64>::randn(y.shape(), &mut rng);
    Ok(y.mul(&w)?.sum_all())
}

type Loss = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>;

macro_rules! unary_check {
    ($checks:ident, $tol:ident, $name:literal, $shapes:expr, $range:expr, $apply:expr) => {
        $checks.push(run_check($name, "tensor-core", $tol, 3, |trial, rng| {
            let shapes: [&[usize]; 3] = $shapes;
            let (lo, hi) = $range;
            let x = Tensor::<f64>::rand_uniform(shapes[trial], lo, hi, rng);
            let wrng = ChaCha8Rng::seed_from_u64(99 + trial as u64);
            let f: Loss = Box::new(move |xs: &[Tensor<f64>]| {
                let y = $apply(&xs[0])?;
                weighted(y, &wrng)
            });
            Ok((vec![x], f))
        })?);
    };
}

/// Run the full suite (or the checks whose module/op matches `filter`).
pub fn run_suite(filter: Option<&str>, tol: f64) -> Result<Vec<CheckResult>> {
    let mut checks: Vec<CheckResult> = Vec::new();
    let shapes3: [&[usize]; 3] = [&[7], &[3, 5], &[2, 3, 4]];

    let wants = |op: &str, module: &str| match filter {
        Some(f) => op.contains(f) || module.contains(f),
        None => true,
    };

    macro_rules! gate {
        ($op:literal, $module:literal, $body:block) => {
            if wants($op, $module) $body
        };
    }

    gate!("add", "tensor-core", {
        checks.push(run_check("add", "tensor-core", tol, 3, |trial, rng| {
            let shapes: [(&[usize], &[usize]); 3] =
                [(&[6], &[6]), (&[3, 4], &[4]), (&[2, 3, 4], &[3, 4])];
            let (sa, sb) = shapes[trial];
            let a = Tensor::<f64>::randn(sa, rng);
            let b = Tensor::<f64>::randn(sb, rng);
            let wrng = ChaCha8Rng::seed_from_u64(1 + trial as u64);
            let f: Loss = Box::new(move |xs| weighted(xs[0].add(&xs[1])?, &wrng));
            Ok((vec![a, b], f))
        })?);
    });
    gate!("sub", "tensor-core", {
        checks.push(run_check("sub", "tensor-core", tol, 3, |trial, rng| {
            let shapes: [(&[usize], &[usize]); 3] =
                [(&[6], &[6]), (&[3, 4], &[4]), (&[2, 6], &[2, 6])];
            let (sa, sb) = shapes[trial];
            let a = Tensor::<f64>::randn(sa, rng);
            let b = Tensor::<f64>::randn(sb, rng);
            let wrng = ChaCha8Rng::seed_from_u64(2 + trial as u64);
            let f: Loss = Box::new(move |xs| weighted(xs[0].sub(&xs[1])?, &wrng));
            Ok((vec![a, b], f))
        })?);
    });
    gate!("mul", "tensor-core", {
        checks.push(run_check("mul", "tensor-core", tol, 3, |trial, rng| {
            let shapes: [(&[usize], &[usize]); 3] =
                [(&[6], &[6]), (&[3, 4], &[4]), (&[2, 3, 4], &[4])];
            let (sa, sb) = shapes[trial];
            let a = Tensor::<f64>::randn(sa, rng);
            let b = Tensor::<f64>::randn(sb, rng);
            let wrng = ChaCha8Rng::seed_from_u64(3 + trial as u64);
            let f: Loss = Box::new(move |xs| weighted(xs[0].mul(&xs[1])?, &wrng));
            Ok((vec![a, b], f))
        })?);
    });
    gate!("div", "tensor-core", {
        checks.push(run_check("div", "tensor-core", tol, 3, |trial, rng| {
            let shapes: [(&[usize], &[usize]); 3] =
                [(&[6], &[6]), (&[3, 4], &[4]), (&[2, 6], &[6])];
            let (sa, sb) = shapes[trial];
            let a = Tensor::<f64>::randn(sa, rng);
            // denominators bounded away from zero
            let b = Tensor::<f64>::rand_uniform(sb, 0.5, 2.0, rng);
            let wrng = ChaCha8Rng::seed_from_u64(4 + trial as u64);
            let f: Loss = Box::new(move |xs| weighted(xs[0].div(&xs[1])?, &wrng));
            Ok((vec![a, b], f))
        })?);
    });

    gate!("scale", "tensor-core", {
        unary_check!(checks, tol, "scale", shapes3, (-2.0, 2.0), |x: &Tensor<
            f64,
        >| Ok(
            x.scale(1.7)
        ));
    });
    gate!("exp", "tensor-core", {
        unary_check!(checks, tol, "exp", shapes3, (-2.0, 2.0), |x: &Tensor<
            f64,
        >| Ok(x.exp()));
    });
    gate!("log", "tensor-core", {
        unary_check!(checks, tol, "log", shapes3, (0.3, 3.0), |x: &Tensor<f64>| x
            .log());
    });
    gate!("sigmoid", "tensor-core", {
        unary_check!(
            checks,
            tol,
            "sigmoid",
            shapes3,
            (-3.0, 3.0),
            |x: &Tensor<f64>| Ok(x.sigmoid())
        );
    });
    gate!("silu", "tensor-core", {
        unary_check!(checks, tol, "silu", shapes3, (-3.0, 3.0), |x: &Tensor<
            f64,
        >| Ok(x.silu()));
    });
    gate!("softplus", "tensor-core", {
        unary_check!(
            checks,
            tol,
            "softplus",
            shapes3,
            (-3.0, 3.0),
            |x: &Tensor<f64>| Ok(x.softplus())
        );
    });
    gate!("gelu", "tensor-core", {
        unary_check!(checks, tol, "gelu", shapes3, (-3.0, 3.0), |x: &Tensor<
            f64,
        >| Ok(x.gelu()));
    });

    gate!("matmul", "tensor-core", {
        checks.push(run_check("matmul", "tensor-core", tol, 3, |trial, rng| {
            let dims = [(2, 3, 4), (1, 5, 2), (3, 2, 3)][trial];
            let batch = [None, Some(2), Some(3)][trial];
            let (m, k, p) = dims;
            let a_shape: Vec<usize> = match batch {
                Some(b) => vec![b, m, k],
                None => vec![m, k],
            };
            let a = Tensor::<f64>::randn(&a_shape, rng);
            let b = Tensor::<f64>::randn(&[k, p], rng);
            let wrng = ChaCha8Rng::seed_from_u64(7 + trial as u64);
            let f: Loss = Box::new(move |xs| weighted(xs[0].matmul(&xs[1])?, &wrng));
            Ok((vec![a, b], f))
        })?);
    });

    gate!("conv3d", "tensor-core", {
        checks.push(run_check("conv3d", "tensor-core", tol, 3, |trial, rng| {
            // (B, Cin, ext, O, k, stride, pad)
            let cases = [
                (1, 1, 4, 2, 3, 1, 1),
                (1, 2, 5, 2, 3, 2, 1),
                (2, 2, 4, 1, 2, 2, 0),
            ];
            let (b, ci, e, o, k, s, p) = cases[trial];
            let x = Tensor::<f64>::randn(&[b, ci, e, e, e], rng);
            let w = Tensor::<f64>::randn(&[o, ci, k, k, k], rng);
            let bias = Tensor::<f64>::randn(&[o], rng);
            let spec = Conv3dSpec {
                stride: [s; 3],
                padding: [p; 3],
            };
            let wrng = ChaCha8Rng::seed_from_u64(8 + trial as u64);
            let f: Loss = Box::new(move |xs| {
                weighted(xs[0].conv3d(&xs[1], &xs[2], spec)?, &wrng)
            });
            Ok((vec![x, w, bias], f))
        })?);
    });

    gate!("layer_norm", "tensor-core", {
        checks.push(run_check(
            "layer_norm",
            "tensor-core",
            tol,
            3,
            |trial, rng| {
                let shapes: [&[usize]; 3] = [&[5], &[3, 6], &[2, 2, 4]];
                let c = *shapes[trial].last().unwrap();
                let x = Tensor::<f64>::randn(shapes[trial], rng);
                let gamma = Tensor::<f64>::rand_uniform(&[c], 0.5, 1.5, rng);
                let beta = Tensor::<f64>::randn(&[c], rng);
                let wrng = ChaCha8Rng::seed_from_u64(9 + trial as u64);
                let f: Loss = Box::new(move |xs| {
                    weighted(xs[0].layer_norm(&xs[1], &xs[2], 1e-5)?, &wrng)
                });
                Ok((vec![x, gamma, beta], f))
            },
        )?);
    });

    gate!("softmax", "tensor-core", {
        checks.push(run_check("softmax", "tensor-core", tol, 3, |trial, rng| {
            let (shape, axis): (&[usize], usize) = [
                (&[8][..], 0),
                (&[3, 5][..], 1),
                (&[2, 4, 3][..], 1),
            ][trial];
            let x = Tensor::<f64>::randn(shape, rng);
            let wrng = ChaCha8Rng::seed_from_u64(10 + trial as u64);
            let f: Loss = Box::new(move |xs| weighted(xs[0].softmax(axis)?, &wrng));
            Ok((vec![x], f))
        })?);
    });
    gate!("log_softmax", "tensor-core", {
        checks.push(run_check(
            "log_softmax",
            "tensor-core",
            tol,
            3,
            |trial, rng| {
                let (shape, axis): (&[usize], usize) =
                    [(&[8][..], 0), (&[3, 5][..], 1), (&[2, 4, 3][..], 2)][trial];
                let x = Tensor::<f64>::randn(shape, rng);
                let wrng = ChaCha8Rng::seed_from_u64(11 + trial as u64);
                let f: Loss =
                    Box::new(move |xs| weighted(xs[0].log_softmax(axis)?, &wrng));
                Ok((vec![x], f))
            },
        )?);
    });

    gate!("reshape", "tensor-core", {
        checks.push(run_check("reshape", "tensor-core", tol, 3, |trial, rng| {
            let (from, to): (&[usize], &[usize]) = [
                (&[6][..], &[2, 3][..]),
                (&[2, 6][..], &[3, 4][..]),
                (&[2, 3, 4][..], &[24][..]),
            ][trial];
            let x = Tensor::<f64>::randn(from, rng);
            let to = to.to_vec();
            let wrng = ChaCha8Rng::seed_from_u64(12 + trial as u64);
            let f: Loss = Box::new(move |xs| weighted(xs[0].reshape(&to)?, &wrng));
            Ok((vec![x], f))
        })?);
    });
    gate!("permute", "tensor-core", {
        checks.push(run_check("permute", "tensor-core", tol, 3, |trial, rng| {
            let (shape, perm): (&[usize], &[usize]) = [
                (&[3, 4][..], &[1, 0][..]),
                (&[2, 3, 4][..], &[2, 0, 1][..]),
                (&[2, 2, 3, 2][..], &[0, 3, 1, 2][..]),
            ][trial];
            let x = Tensor::<f64>::randn(shape, rng);
            let perm = perm.to_vec();
            let wrng = ChaCha8Rng::seed_from_u64(13 + trial as u64);
            let f: Loss = Box::new(move |xs| weighted(xs[0].permute(&perm)?, &wrng));
            Ok((vec![x], f))
        })?);
    });
    gate!("concat", "tensor-core", {
        checks.push(run_check("concat", "tensor-core", tol, 3, |trial, rng| {
            let (sa, sb, axis): (&[usize], &[usize], usize) = [
                (&[2, 3][..], &[2, 2][..], 1),
                (&[2, 2][..], &[3, 2][..], 0),
                (&[2, 1, 3][..], &[2, 2, 3][..], 1),
            ][trial];
            let a = Tensor::<f64>::randn(sa, rng);
            let b = Tensor::<f64>::randn(sb, rng);
            let wrng = ChaCha8Rng::seed_from_u64(14 + trial as u64);
            let f: Loss = Box::new(move |xs| {
                weighted(
                    Tensor::concat(&[xs[0].clone(), xs[1].clone()], axis)?,
                    &wrng,
                )
            });
            Ok((vec![a, b], f))
        })?);
    });
    gate!("slice", "tensor-core", {
        checks.push(run_check("slice", "tensor-core", tol, 3, |trial, rng| {
            let (shape, axis, start, len): (&[usize], usize, usize, usize) = [
                (&[6][..], 0, 1, 3),
                (&[3, 5][..], 1, 2, 2),
                (&[2, 3, 4][..], 2, 0, 3),
            ][trial];
            let x = Tensor::<f64>::randn(shape, rng);
            let wrng = ChaCha8Rng::seed_from_u64(15 + trial as u64);
            let f: Loss =
                Box::new(move |xs| weighted(xs[0].slice(axis, start, len)?, &wrng));
            Ok((vec![x], f))
        })?);
    });
    gate!("sum", "tensor-core", {
        checks.push(run_check("sum", "tensor-core", tol, 3, |trial, rng| {
            let shapes: [&[usize]; 3] = [&[7], &[3, 5], &[2, 3, 4]];
            let x = Tensor::<f64>::randn(shapes[trial], rng);
            let f: Loss = Box::new(|xs| Ok(xs[0].mul(&xs[0])?.sum_all()));
            Ok((vec![x], f))
        })?);
    });
    gate!("mean", "tensor-core", {
        checks.push(run_check("mean", "tensor-core", tol, 3, |trial, rng| {
            let shapes: [&[usize]; 3] = [&[7], &[3, 5], &[2, 3, 4]];
            let x = Tensor::<f64>::randn(shapes[trial], rng);
            let f: Loss = Box::new(|xs| Ok(xs[0].mul(&xs[0])?.mean_all()));
            Ok((vec![x], f))
        })?);
    });
    gate!("upsample_trilinear", "tensor-core", {
        checks.push(run_check(
            "upsample_trilinear",
            "tensor-core",
            tol,
            3,
            |trial, rng| {
                let (shape, s): (&[usize], usize) = [
                    (&[1, 1, 2, 2, 2][..], 2),
                    (&[1, 2, 2, 2, 2][..], 3),
                    (&[2, 1, 3, 2, 2][..], 2),
                ][trial];
                let x = Tensor::<f64>::randn(shape, rng);
                let wrng = ChaCha8Rng::seed_from_u64(16 + trial as u64);
                let f: Loss =
                    Box::new(move |xs| weighted(xs[0].upsample_trilinear(s)?, &wrng));
                Ok((vec![x], f))
            },
        )?);
    });

    gate!("rope3d", "embedding", {
        checks.push(run_check("rope3d", "embedding", tol, 3, |trial, rng| {
            let (heads, grid, dh): (usize, [usize; 3], usize) = [
                (1, [2, 2, 2], 6),
                (2, [1, 2, 3], 12),
                (1, [3, 1, 2], 18),
            ][trial];
            let n: usize = grid.iter().product();
            let x = Tensor::<f64>::randn(&[1, heads, n, dh], rng);
            let freqs = RotaryFrequencies::standard(dh)?;
            let wrng = ChaCha8Rng::seed_from_u64(17 + trial as u64);
            let f: Loss = Box::new(move |xs| {
                weighted(apply_rope3d(&xs[0], grid, &freqs)?, &wrng)
            });
            Ok((vec![x], f))
        })?);
    });

    gate!("dwconv_causal", "ssm", {
        checks.push(run_check("dwconv_causal", "ssm", tol, 3, |trial, rng| {
            let (b, l, c, k) = [(1, 5, 2, 3), (2, 6, 3, 4), (1, 4, 4, 2)][trial];
            let x = Tensor::<f64>::randn(&[b, l, c], rng);
            let w = Tensor::<f64>::randn(&[c, k], rng);
            let bias = Tensor::<f64>::randn(&[c], rng);
            let wrng = ChaCha8Rng::seed_from_u64(18 + trial as u64);
            let f: Loss = Box::new(move |xs| {
                weighted(dwconv_causal(&xs[0], &xs[1], &xs[2])?, &wrng)
            });
            Ok((vec![x, w, bias], f))
        })?);
    });

    gate!("selective_scan", "ssm", {
        checks.push(run_check("selective_scan", "ssm", tol, 3, |trial, rng| {
            let (b, l, c, n) = [(1, 6, 2, 3), (2, 4, 3, 2), (1, 8, 1, 4)][trial];
            let x = Tensor::<f64>::randn(&[b, l, c], rng);
            let dt = Tensor::<f64>::rand_uniform(&[b, l, c], 0.01, 0.5, rng);
            let a = Tensor::<f64>::rand_uniform(&[c, n], -2.0, -0.1, rng);
            let bs = Tensor::<f64>::randn(&[b, l, n], rng);
            let cs = Tensor::<f64>::randn(&[b, l, n], rng);
            let d = Tensor::<f64>::randn(&[c], rng);
            let wrng = ChaCha8Rng::seed_from_u64(19 + trial as u64);
            let f: Loss = Box::new(move |xs| {
                weighted(
                    selective_scan(&xs[0], &xs[1], &xs[2], &xs[3], &xs[4], &xs[5])?,
                    &wrng,
                )
            });
            Ok((vec![x, dt, a, bs, cs, d], f))
        })?);
    });

    gate!("mamba_layer", "ssm", {
        checks.push(run_check("mamba_layer", "ssm", tol, 3, |trial, rng| {
            let (c, l) = [(4, 5), (6, 4), (2, 8)][trial];
            let layer = MambaLayer::<f64>::new(c, 3, 2, 3, rng);
            let x = Tensor::<f64>::randn(&[1, l, c], rng);
            let wrng = ChaCha8Rng::seed_from_u64(20 + trial as u64);
            let f: Loss = Box::new(move |xs| weighted(layer.forward(&xs[0])?, &wrng));
            Ok((vec![x], f))
        })?);
    });

    gate!("mamba_block", "ssm", {
        checks.push(run_check("mamba_block", "ssm", tol, 3, |trial, rng| {
            let (c, g) = [(8, 2), (4, 2), (6, 3)][trial];
            let block = MambaBlock::<f64>::new(c, 3, 2, 3, 2, rng);
            let x = Tensor::<f64>::randn(&[1, c, g, g, g], rng);
            let f: Loss = Box::new(move |xs| Ok(block.forward(&xs[0])?.sum_all()));
            Ok((vec![x], f))
        })?);
    });

    gate!("multi_head_attention", "attention", {
        checks.push(run_check(
            "multi_head_attention",
            "attention",
            tol,
            3,
            |trial, rng| {
                let (c, h, n, r) = [(6, 1, 3, 1), (6, 2, 4, 2), (4, 2, 5, 1)][trial];
                let attn = Attention::<f64>::new(c, h, r, rng)?;
                let x = Tensor::<f64>::randn(&[1, n, c], rng);
                let wrng = ChaCha8Rng::seed_from_u64(21 + trial as u64);
                let f: Loss =
                    Box::new(move |xs| weighted(attn.forward(&xs[0], None)?, &wrng));
                Ok((vec![x], f))
            },
        )?);
    });

    gate!("transformer_block", "attention", {
        checks.push(run_check(
            "transformer_block",
            "attention",
            tol,
            3,
            |trial, rng| {
                let (c, h, g) = [(12, 2, 2), (6, 1, 2), (12, 1, 3)][trial];
                let block = TransformerBlock::<f64>::new(c, h, 1, 2, rng)?;
                let ctx = RopeContext {
                    grid: [g, g, g],
                    freqs: RotaryFrequencies::standard(c / h)?,
                };
                let x = Tensor::<f64>::randn(&[1, c, g, g, g], rng);
                let f: Loss = Box::new(move |xs| Ok(block.forward(&xs[0], Some(&ctx))?.sum_all()));
                Ok((vec![x], f))
            },
        )?);
    });

    gate!("dice_loss", "training", {
        checks.push(run_check("dice_loss", "training", tol, 3, |trial, rng| {
            let (k, e) = [(2, 2), (3, 2), (4, 2)][trial];
            let labels = random_labels(e, k, rng);
            let x = Tensor::<f64>::randn(&[1, k, e, e, e], rng);
            let f: Loss = Box::new(move |xs| dice_loss(&xs[0], &labels, 1e-5));
            Ok((vec![x], f))
        })?);
    });
    gate!("cross_entropy", "training", {
        checks.push(run_check(
            "cross_entropy",
            "training",
            tol,
            3,
            |trial, rng| {
                let (k, e) = [(2, 2), (3, 2), (4, 2)][trial];
                let labels = random_labels(e, k, rng);
                let x = Tensor::<f64>::randn(&[1, k, e, e, e], rng);
                let f: Loss = Box::new(move |xs| cross_entropy(&xs[0], &labels));
                Ok((vec![x], f))
            },
        )?);
    });
    gate!("combined_loss", "training", {
        checks.push(run_check(
            "combined_loss",
            "training",
            tol,
            3,
            |trial, rng| {
                let (k, e) = [(2, 2), (3, 2), (4, 2)][trial];
                let labels = random_labels(e, k, rng);
                let x = Tensor::<f64>::randn(&[1, k, e, e, e], rng);
                let f: Loss = Box::new(move |xs| combined_loss(&xs[0], &labels, 1.0, 1.0, 1e-5));
                Ok((vec![x], f))
            },
        )?);
    });

    Ok(checks)
}

fn random_labels(extent: usize, classes: usize, rng: &mut ChaCha8Rng) -> Labels {
    use rand::Rng;
    let data: Vec<u8> = (0..extent * extent * extent)
        .map(|_| rng.gen_range(0..classes) as u8)
        .collect();
    Labels::new(vec![1, extent, extent, extent], data).unwrap()
}

/// Render the suite outcome as the table `grad-check` prints.
pub fn format_results(results: &[CheckResult]) -> String {
    let mut out = format!(
        "{:<22} {:<12} {:>7} {:>14} {:>10}  {}\n",
        "op", "module", "shapes", "max_rel_err", "tol", "status"
    );
    for r in results {
        out.push_str(&format!(
            "{:<22} {:<12} {:>7} {:>14.3e} {:>10.1e}  {}\n",
            r.op,
            r.module,
            r.shapes,
            r.max_rel_err,
            r.tol,
            if r.pass() { "pass" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_filter_restricts_checks() {
        let results = run_suite(Some("ssm"), 1e-4).unwrap();
        assert!(!results.is_empty());
        assert!(results.iter().all(|r| r.module == "ssm"));
        let names: Vec<&str> = results.iter().map(|r| r.op.as_str()).collect();
        assert!(names.contains(&"selective_scan"));
        assert!(names.contains(&"mamba_block"));
    }

    #[test]
    fn suite_reports_are_formatted() {
        let results = run_suite(Some("softmax"), 1e-4).unwrap();
        let text = format_results(&results);
        assert!(text.contains("softmax"));
        assert!(text.contains("pass") || text.contains("FAIL"));
    }
}
