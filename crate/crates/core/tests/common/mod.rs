//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the crate's numeric code.

#![allow(dead_code)]

use amde::diffcore::Tensor;
use amde::losses::BatchEmbeddings;
use amde::seeding::derive_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    derive_rng(seed, &[0x7465_7374])
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(rng, n, -1.0, 1.0)).unwrap()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM step written out per unit. `w` is `[4e][c+e]` row-major with
/// gate blocks `(i, f, o, g)`.
pub fn lstm_step_scalar(
    w: &[f64],
    b: Option<&[f64]>,
    s: &[f64],
    h: &[f64],
    d: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let e = h.len();
    let c = s.len();
    let cols = c + e;
    let pre = |row: usize| -> f64 {
        let mut acc = b.map_or(0.0, |b| b[row]);
        for j in 0..c {
            acc += w[row * cols + j] * s[j];
        }
        for j in 0..e {
            acc += w[row * cols + c + j] * h[j];
        }
        acc
    };
    let mut h_new = vec![0.0; e];
    let mut d_new = vec![0.0; e];
    for u in 0..e {
        let i = sigmoid(pre(u));
        let f = sigmoid(pre(e + u));
        let o = sigmoid(pre(2 * e + u));
        let g = pre(3 * e + u).tanh();
        d_new[u] = f * d[u] + i * g;
        h_new[u] = o * d_new[u].tanh();
    }
    (h_new, d_new)
}

/// Last hidden state of the scalar LSTM over `steps`, from a zero state.
pub fn lstm_encode_scalar(w: &[f64], b: Option<&[f64]>, steps: &[Vec<f64>], e: usize) -> Vec<f64> {
    let mut h = vec![0.0; e];
    let mut d = vec![0.0; e];
    for s in steps {
        (h, d) = lstm_step_scalar(w, b, s, &h, &d);
    }
    h
}

pub fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn rows(t: &[f64], n: usize) -> Vec<Vec<f64>> {
    let d = t.len() / n;
    t.chunks(d).map(<[f64]>::to_vec).collect()
}

/// Σ_a [m + mean(k largest positive d) − mean(k smallest negative d)]_+,
/// enumerating and fully sorting every anchor's distances.
pub fn ann_oracle(emb: &[Vec<f64>], labels: &[usize], ks: &[usize], margin: f64) -> f64 {
    let mut total = 0.0;
    for a in 0..emb.len() {
        let mut pos: Vec<(f64, usize)> = Vec::new();
        let mut neg: Vec<(f64, usize)> = Vec::new();
        for j in 0..emb.len() {
            if j == a {
                continue;
            }
            let d = sqdist(&emb[a], &emb[j]);
            if labels[j] == labels[a] {
                pos.push((d, j));
            } else {
                neg.push((d, j));
            }
        }
        pos.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        neg.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let k = ks[a].min(pos.len()).min(neg.len());
        let dp: f64 = pos[..k].iter().map(|p| p.0).sum::<f64>() / k as f64;
        let dn: f64 = neg[..k].iter().map(|p| p.0).sum::<f64>() / k as f64;
        total += (margin + dp - dn).max(0.0);
    }
    total
}

pub fn contrastive_oracle(emb: &[Vec<f64>], labels: &[usize], margin: f64) -> f64 {
    let mut total = 0.0;
    for a in 0..emb.len() {
        for b in (a + 1)..emb.len() {
            let d2 = sqdist(&emb[a], &emb[b]);
            if labels[a] == labels[b] {
                total += d2;
            } else {
                total += (margin - d2.sqrt()).max(0.0).powi(2);
            }
        }
    }
    total
}

pub fn xent_oracle(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &l) in logits.iter().zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += z.ln() - row[l];
    }
    total / labels.len() as f64
}

/// Labels `0,0,..,1,1,..` for `p` identities of `k` images each.
pub fn pk_labels(p: usize, k: usize) -> Vec<usize> {
    (0..p).flat_map(|id| std::iter::repeat_n(id, k)).collect()
}

/// (H, K0, ceil K, floor K), worked by hand. Log values are rounded on
/// purpose; the expected K holds for the rounded input.
#[allow(clippy::approx_constant)]
pub const K_TABLE: [(f64, usize, usize, usize); 20] = [
    (0.0, 1, 1, 1),
    (0.05, 1, 1, 1),
    (0.5, 1, 1, 1),
    (0.999, 1, 1, 1),
    (1.0, 1, 1, 1),
    (1.001, 1, 2, 1),
    (1.5, 1, 2, 1),
    (1.9999, 1, 2, 1),
    (2.0, 1, 2, 2),
    (2.3026, 1, 3, 2),
    (2.5, 1, 3, 2),
    (3.0, 1, 3, 3),
    (3.4657, 1, 4, 3),
    (0.3, 2, 2, 2),
    (1.2, 2, 2, 2),
    (2.2, 2, 3, 2),
    (0.7, 3, 3, 3),
    (2.9, 3, 3, 3),
    (3.1, 3, 4, 3),
    (4.8, 3, 5, 4),
];

/// A configuration that trains in well under a second.
pub fn tiny_config(seed: u64) -> amde::engine::TrainConfig {
    use amde::data::{DataConfig, PkSpec};
    use amde::encoder::EncoderConfig;
    amde::engine::TrainConfig {
        encoder: EncoderConfig {
            input_shape: [1, 32, 16],
            backbone_channels: [6, 8],
            feature_channels: 12,
            map_height: 4,
            map_width: 2,
            reduced_channels: 8,
            lstm_hidden: 8,
            embed_dim: 16,
            num_classes: 8,
            ..EncoderConfig::default()
        },
        data: DataConfig {
            num_ids: 8,
            input_shape: [1, 32, 16],
            seed,
            ..DataConfig::default()
        },
        pk: PkSpec { p: 4, k: 4 },
        epochs: 2,
        steps_per_epoch: 5,
        seed,
        ..amde::engine::TrainConfig::default()
    }
}

pub fn batch(
    seed: u64,
    p: usize,
    k: usize,
    dim: usize,
    classes: usize,
    spread: f64,
) -> BatchEmbeddings {
    let mut r = rng(seed);
    let n = p * k;
    BatchEmbeddings {
        embeddings: Tensor::new(vec![n, dim], uniform(&mut r, n * dim, -1.0, 1.0)).unwrap(),
        logits: Tensor::new(
            vec![n, classes],
            uniform(&mut r, n * classes, -spread, spread),
        )
        .unwrap(),
        labels: pk_labels(p, k),
    }
}

/// Natural-log entropy of softmax(row), computed without the crate.
pub fn entropy_oracle(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    -row.iter()
        .map(|v| {
            let p = (v - max).exp() / z;
            if p > 0.0 {
                p * p.ln()
            } else {
                0.0
            }
        })
        .sum::<f64>()
}

/// Selection sort over (distance, index) pairs.
pub fn sort_oracle(query: &[f64], gallery: &[Vec<f64>]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..gallery.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (a, b) = (
                sqdist(query, &gallery[left[i]]),
                sqdist(query, &gallery[left[best]]),
            );
            if a < b || (a == b && left[i] < left[best]) {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    out
}

pub fn cmc_oracle(hits: &[Vec<bool>], k: usize) -> f64 {
    let ok = hits.iter().filter(|h| h.iter().take(k).any(|&x| x)).count();
    ok as f64 / hits.len() as f64
}

pub fn map_oracle(hits: &[Vec<bool>]) -> f64 {
    let mut total = 0.0;
    for h in hits {
        let relevant = h.iter().filter(|&&x| x).count();
        let mut ap = 0.0;
        for r in 0..h.len() {
            if h[r] {
                let above = h[..=r].iter().filter(|&&x| x).count();
                ap += above as f64 / (r + 1) as f64;
            }
        }
        total += ap / relevant as f64;
    }
    total / hits.len() as f64
}

pub struct Instance {
    pub queries: Vec<Vec<f64>>,
    pub q_labels: Vec<usize>,
    pub gallery: Vec<Vec<f64>>,
    pub g_labels: Vec<usize>,
}

/// Random instance where every query has at least one relevant item. Small
/// integer coordinates make distance ties common.
pub fn instance(seed: u64) -> Instance {
    let mut r = rng(seed);
    let g = r.random_range(2..=20);
    let q = r.random_range(1..=10);
    let ids = r.random_range(1..=g.min(5));
    let dim = r.random_range(1..=3);
    let point = |r: &mut rand_chacha::ChaCha8Rng| {
        (0..dim)
            .map(|_| r.random_range(-3..=3) as f64)
            .collect::<Vec<_>>()
    };
    let mut g_labels: Vec<usize> = (0..g).map(|i| i % ids).collect();
    for i in (1..g).rev() {
        g_labels.swap(i, r.random_range(0..=i));
    }
    Instance {
        queries: (0..q).map(|_| point(&mut r)).collect(),
        q_labels: (0..q).map(|_| r.random_range(0..ids)).collect(),
        gallery: (0..g).map(|_| point(&mut r)).collect(),
        g_labels,
    }
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(vec![rows.len(), rows[0].len()], rows.concat()).unwrap()
}
