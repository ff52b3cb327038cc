//! Finite-difference verification of every differentiable operation and of
//! the joint loss through a whole encoder.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{grad_check, max_relative_error, numeric_gradient, Tape, Tensor, Var};
use crate::encoder::{ops, BoundLayer, EncoderConfig, EncoderModel, LocalBranch};
use crate::error::Result;
use crate::losses::{
    ann_loss, batch_hard_triplet, contrastive_loss, joint_loss, softmax_xent, AnnConfig, MetricLoss,
};
use crate::seeding::{derive_rng, derive_seed};

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Worst relative error of one operation over its random cases.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.worst < GRAD_TOLERANCE
    }
}

/// A scalar test function of one flat leaf, with the point to check at.
type Case = (Box<dyn Fn(&mut Tape, Var) -> Result<Var>>, Tensor);

/// Slices a flat leaf into consecutive tensors of the given shapes.
fn split(tape: &mut Tape, x: Var, shapes: &[Vec<usize>]) -> Result<Vec<Var>> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let part = tape.narrow(x, 0, offset, n)?;
            offset += n;
            tape.reshape(part, s)
        })
        .collect()
}

/// `Σ y ⊙ r` with a fixed non-symmetric weight pattern `r`, so every output
/// element contributes a distinct amount.
fn project(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let r = (0..n)
        .map(|i| (1.3 * i as f64 + 0.7).sin() + 0.25)
        .collect();
    let r = tape.constant(Tensor::new(shape, r)?);
    let prod = tape.hadamard(y, r)?;
    tape.sum_all(prod)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero, for kinked functions.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

fn numel(shapes: &[Vec<usize>]) -> usize {
    shapes.iter().map(|s| s.iter().product::<usize>()).sum()
}

fn flat_case<F>(rng: &mut ChaCha8Rng, shapes: Vec<Vec<usize>>, f: F) -> Case
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    let x = Tensor::from_vec(uniform(rng, numel(&shapes), -1.5, 1.5));
    flat_case_at(x, shapes, f)
}

fn flat_case_at<F>(x: Tensor, shapes: Vec<Vec<usize>>, f: F) -> Case
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    (
        Box::new(move |tape: &mut Tape, x: Var| {
            let parts = split(tape, x, &shapes)?;
            let y = f(tape, &parts)?;
            if tape.shape(y).is_empty() {
                Ok(y)
            } else {
                project(tape, y)
            }
        }),
        x,
    )
}

/// Labels of `p` identities with `k` samples each, interleaved.
fn pk_labels(p: usize, k: usize) -> Vec<usize> {
    (0..p * k).map(|i| i % p).collect()
}

type CaseGen = fn(&mut ChaCha8Rng) -> Case;

fn op_table() -> Vec<(&'static str, CaseGen)> {
    vec![
        ("matmul", |rng| {
            let (m, k, n) = (
                rng.random_range(1..=4),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
            );
            flat_case(rng, vec![vec![m, k], vec![k, n]], |t, v| {
                t.matmul(v[0], v[1])
            })
        }),
        ("transpose", |rng| {
            let s = dims(rng, 2);
            flat_case(rng, vec![s], |t, v| t.transpose(v[0]))
        }),
        ("add", |rng| {
            let s = dims(rng, 2);
            flat_case(rng, vec![s.clone(), s], |t, v| t.add(v[0], v[1]))
        }),
        ("sub", |rng| {
            let s = dims(rng, 2);
            flat_case(rng, vec![s.clone(), s], |t, v| t.sub(v[0], v[1]))
        }),
        ("hadamard", |rng| {
            let s = dims(rng, 3);
            flat_case(rng, vec![s.clone(), s], |t, v| t.hadamard(v[0], v[1]))
        }),
        ("scale", |rng| {
            let alpha = rng.random_range(-2.0..2.0);
            let s = dims(rng, 2);
            flat_case(rng, vec![s], move |t, v| t.scale(v[0], alpha))
        }),
        ("add_scalar", |rng| {
            let c = rng.random_range(-2.0..2.0);
            let s = dims(rng, 2);
            flat_case(rng, vec![s], move |t, v| t.add_scalar(v[0], c))
        }),
        ("sigmoid", |rng| {
            let s = dims(rng, 2);
            flat_case(rng, vec![s], |t, v| t.sigmoid(v[0]))
        }),
        ("tanh", |rng| {
            let s = dims(rng, 2);
            flat_case(rng, vec![s], |t, v| t.tanh(v[0]))
        }),
        ("relu", |rng| {
            let s = dims(rng, 2);
            let x = Tensor::from_vec(away_from_zero(rng, numel(std::slice::from_ref(&s))));
            flat_case_at(x, vec![s], |t, v| t.relu(v[0]))
        }),
        ("sqrt", |rng| {
            let s = dims(rng, 2);
            let x = Tensor::from_vec(uniform(rng, numel(std::slice::from_ref(&s)), 0.2, 2.0));
            flat_case_at(x, vec![s], |t, v| t.sqrt(v[0]))
        }),
        ("add_bias", |rng| {
            let s = dims(rng, 3);
            let n = s[2];
            flat_case(rng, vec![s, vec![n]], |t, v| t.add_bias(v[0], v[1]))
        }),
        ("sum", |rng| {
            let s = dims(rng, 3);
            let axes: Vec<usize> = (0..3).filter(|_| rng.random_bool(0.5)).collect();
            let axes = if axes.is_empty() { vec![1] } else { axes };
            flat_case(rng, vec![s], move |t, v| t.sum(v[0], &axes))
        }),
        ("mean", |rng| {
            let s = dims(rng, 3);
            let axes: Vec<usize> = (0..3).filter(|_| rng.random_bool(0.5)).collect();
            let axes = if axes.is_empty() { vec![2] } else { axes };
            flat_case(rng, vec![s], move |t, v| t.mean(v[0], &axes))
        }),
        ("sum_all", |rng| {
            let s = dims(rng, 3);
            flat_case(rng, vec![s], |t, v| {
                let y = t.tanh(v[0])?;
                t.sum_all(y)
            })
        }),
        ("mean_all", |rng| {
            let s = dims(rng, 3);
            flat_case(rng, vec![s], |t, v| {
                let y = t.sigmoid(v[0])?;
                t.mean_all(y)
            })
        }),
        ("reshape", |rng| {
            let s = dims(rng, 2);
            let target = vec![s[1], s[0]];
            flat_case(rng, vec![s], move |t, v| t.reshape(v[0], &target))
        }),
        ("concat", |rng| {
            let axis = rng.random_range(0..3);
            let count = rng.random_range(2..=3);
            let base = dims(rng, 3);
            let shapes: Vec<Vec<usize>> = (0..count)
                .map(|_| {
                    let mut s = base.clone();
                    s[axis] = rng.random_range(1..=3);
                    s
                })
                .collect();
            flat_case(rng, shapes, move |t, v| t.concat(v, axis))
        }),
        ("narrow", |rng| {
            let s = dims(rng, 3);
            let axis = rng.random_range(0..3);
            let len = rng.random_range(1..=s[axis]);
            let start = rng.random_range(0..=s[axis] - len);
            flat_case(rng, vec![s], move |t, v| t.narrow(v[0], axis, start, len))
        }),
        ("conv2d", |rng| {
            let (b, cin, cout) = (
                rng.random_range(1..=2),
                rng.random_range(1..=2),
                rng.random_range(1..=3),
            );
            let (kh, kw) = (rng.random_range(1..=3), rng.random_range(1..=3));
            let (h, w) = (rng.random_range(kh..=6), rng.random_range(kw..=6));
            let stride = (rng.random_range(1..=2), rng.random_range(1..=2));
            let padding = (rng.random_range(0..=1), rng.random_range(0..=1));
            let shapes = vec![vec![b, cin, h, w], vec![cout, cin, kh, kw], vec![cout]];
            flat_case(rng, shapes, move |t, v| {
                t.conv2d(v[0], v[1], Some(v[2]), stride, padding)
            })
        }),
        ("log_softmax", |rng| {
            let s = dims(rng, 2);
            flat_case(rng, vec![s], |t, v| t.log_softmax(v[0]))
        }),
        ("gather", |rng| {
            let s = dims(rng, 2);
            let n: usize = s.iter().product();
            let idx: Vec<usize> = (0..rng.random_range(1..=n))
                .map(|_| rng.random_range(0..n))
                .collect();
            flat_case(rng, vec![s], move |t, v| t.gather(v[0], &idx))
        }),
        ("pairwise_sqdist", |rng| {
            let s = vec![rng.random_range(2..=5), rng.random_range(1..=4)];
            flat_case(rng, vec![s], |t, v| t.pairwise_sqdist(v[0]))
        }),
        ("l2_normalize_rows", |rng| {
            let s = dims(rng, 2);
            flat_case(rng, vec![s], |t, v| t.l2_normalize_rows(v[0]))
        }),
        ("lstm_encode", |rng| {
            let (steps, b, c, e) = (
                rng.random_range(1..=4),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
            );
            let mut shapes = vec![vec![b, c]; steps];
            shapes.push(vec![4 * e, c + e]);
            shapes.push(vec![4 * e]);
            flat_case(rng, shapes, move |t, v| {
                lstm_encode_flat(t, &v[..steps], v[steps], Some(v[steps + 1]))
            })
        }),
        ("rnn_encode", |rng| {
            let (steps, b, c, e) = (
                rng.random_range(1..=4),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
                rng.random_range(1..=3),
            );
            let mut shapes = vec![vec![b, c]; steps];
            shapes.push(vec![e, c + e]);
            shapes.push(vec![e]);
            flat_case(rng, shapes, move |t, v| {
                let layer = BoundLayer {
                    weight: v[steps],
                    bias: v[steps + 1],
                };
                ops::rnn_encode(t, &v[..steps], layer)
            })
        }),
        ("softmax_xent", |rng| {
            let (b, n) = (rng.random_range(1..=5), rng.random_range(2..=5));
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
            flat_case(rng, vec![vec![b, n]], move |t, v| {
                softmax_xent(t, v[0], &labels)
            })
        }),
        ("ann_loss", |rng| {
            let (p, k, d) = (
                rng.random_range(2..=3),
                rng.random_range(2..=3),
                rng.random_range(2..=4),
            );
            let labels = pk_labels(p, k);
            let cfg = AnnConfig {
                margin: 1.0,
                ..AnnConfig::default()
            };
            flat_case(rng, vec![vec![p * k, d], vec![p * k, p]], move |t, v| {
                ann_loss(t, v[0], v[1], &labels, &cfg).map(|(l, _)| l)
            })
        }),
        ("batch_hard_triplet", |rng| {
            let (p, k, d) = (
                rng.random_range(2..=3),
                rng.random_range(2..=3),
                rng.random_range(2..=4),
            );
            let labels = pk_labels(p, k);
            flat_case(rng, vec![vec![p * k, d]], move |t, v| {
                batch_hard_triplet(t, v[0], &labels, 1.0)
            })
        }),
        ("contrastive_loss", |rng| {
            let (p, k, d) = (
                rng.random_range(2..=3),
                rng.random_range(2..=3),
                rng.random_range(2..=4),
            );
            let labels = pk_labels(p, k);
            flat_case(rng, vec![vec![p * k, d]], move |t, v| {
                contrastive_loss(t, v[0], &labels, 1.5)
            })
        }),
        ("joint_loss", |rng| {
            let (p, k, d) = (
                rng.random_range(2..=3),
                rng.random_range(2..=3),
                rng.random_range(2..=4),
            );
            let labels = pk_labels(p, k);
            let cfg = AnnConfig {
                margin: 1.0,
                ..AnnConfig::default()
            };
            flat_case(rng, vec![vec![p * k, d], vec![p * k, p]], move |t, v| {
                joint_loss(t, v[0], v[1], &labels, MetricLoss::Ann, &cfg).map(|j| j.total)
            })
        }),
    ]
}

fn lstm_encode_flat(tape: &mut Tape, steps: &[Var], weight: Var, bias: Option<Var>) -> Result<Var> {
    ops::lstm_encode(tape, steps, weight, bias)
}

/// Names of the operations covered by [`op_suite`].
pub fn op_names() -> Vec<&'static str> {
    op_table().into_iter().map(|(n, _)| n).collect()
}

/// Checks every operation on `cases` random instances each.
pub fn op_suite(cases: usize, seed: u64) -> Result<Vec<OpCheck>> {
    op_table()
        .into_iter()
        .enumerate()
        .map(|(i, (name, make))| {
            let mut worst = 0.0f64;
            for case in 0..cases {
                let mut rng = derive_rng(seed, &[i as u64, case as u64]);
                let (f, x) = make(&mut rng);
                worst = worst.max(grad_check(f, &x, GRAD_EPS)?);
            }
            Ok(OpCheck { name, cases, worst })
        })
        .collect()
}

/// A small encoder for checking gradients through the full network.
pub fn tiny_encoder(local_branch: LocalBranch, num_classes: usize) -> EncoderConfig {
    EncoderConfig {
        input_shape: [1, 32, 8],
        backbone_channels: [3, 4],
        feature_channels: 5,
        map_height: 4,
        map_width: 1,
        reduced_channels: 3,
        lstm_hidden: 3,
        embed_dim: 4,
        num_classes,
        local_branch,
        ..EncoderConfig::default()
    }
}

/// Draws of frozen batch and parameter point tried before giving up on
/// finding one where central differences are self-consistent.
pub const FULL_CHECK_DRAWS: u64 = 16;

/// Worst relative error of the joint loss gradient with respect to every
/// parameter of a small randomly initialised encoder on a frozen batch.
///
/// The point is the initial parameters plus a small jitter, so zero biases
/// cannot park a ReLU input exactly on its kink. A draw is kept only when
/// central differences at `eps` and `2·eps` agree to a tenth of the
/// tolerance; that rejects batches with a hinge, ReLU or selection
/// breakpoint inside the stencil, and coordinates whose difference
/// quotient is lost in rounding. The analytic gradient plays no part in
/// the choice.
pub fn full_pipeline_check(
    local_branch: LocalBranch,
    metric: MetricLoss,
    seed: u64,
) -> Result<f64> {
    let mut last = None;
    for draw in 0..FULL_CHECK_DRAWS {
        let (f, start) = full_pipeline_case(local_branch, metric, seed, draw)?;
        let fine = numeric_gradient(&f, &start, GRAD_EPS)?;
        let coarse = numeric_gradient(&f, &start, 2.0 * GRAD_EPS)?;
        let smooth = max_relative_error(&fine, &coarse) < GRAD_TOLERANCE / 10.0;
        let worst = grad_check(f, &start, GRAD_EPS)?;
        if smooth {
            return Ok(worst);
        }
        last = Some(worst);
    }
    Ok(last.unwrap_or(f64::INFINITY))
}

type LossFn = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

fn full_pipeline_case(
    local_branch: LocalBranch,
    metric: MetricLoss,
    seed: u64,
    draw: u64,
) -> Result<(LossFn, Tensor)> {
    let (p, k) = (3, 2);
    let config = tiny_encoder(local_branch, p);
    let model = EncoderModel::new(config.clone(), derive_seed(seed, &[1, draw]))?;
    let mut rng = derive_rng(seed, &[2, draw]);
    let [c, h, w] = config.input_shape;
    let images = Tensor::new(
        vec![p * k, c, h, w],
        uniform(&mut rng, p * k * c * h * w, -1.0, 1.0),
    )?;
    let mut start = model.flat_parameters();
    let jitter = uniform(&mut rng, start.len(), -0.1, 0.1);
    for (v, j) in start.data_mut().iter_mut().zip(jitter) {
        *v += j;
    }
    let labels = pk_labels(p, k);
    let cfg = AnnConfig {
        margin: 1.0,
        ..AnnConfig::default()
    };
    let f = move |tape: &mut Tape, flat: Var| -> Result<Var> {
        let enc = model.bind_flat(tape, flat)?;
        let x = tape.constant(images.clone());
        let vars = ops::encoder_forward(tape, &enc, x, config.normalize_embeddings)?;
        joint_loss(tape, vars.embedding, vars.logits, &labels, metric, &cfg).map(|j| j.total)
    };
    Ok((Box::new(f), start))
}
