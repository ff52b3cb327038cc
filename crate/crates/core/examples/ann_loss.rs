//! Shows how the entropy of each anchor's class distribution sets its
//! neighbourhood size, and compares the ANN loss with batch-hard triplet and
//! contrastive losses on the same batch.

use amde::diffcore::Tensor;
use amde::losses::{
    adaptive_k, class_entropy, softmax, AnnConfig, BatchEmbeddings, MetricLoss, Rounding,
};
use amde::seeding::derive_rng;
use rand::Rng;

fn main() -> amde::Result<()> {
    let cfg = AnnConfig::default();
    println!("entropy  K(ceil)  K(floor)");
    for h in [0.0, 0.4, 1.0, 1.3, 2.0, 2.7, 3.4] {
        let floor = AnnConfig {
            rounding: Rounding::Floor,
            ..cfg.clone()
        };
        println!(
            "{h:>7.2}  {:>7}  {:>8}",
            adaptive_k(h, &cfg)?,
            adaptive_k(h, &floor)?
        );
    }

    // Four identities, four images each; confident logits for the first two,
    // flat ones for the rest.
    let (p, k, dim) = (4, 4, 8);
    let mut rng = derive_rng(3, &[]);
    let labels: Vec<usize> = (0..p).flat_map(|id| std::iter::repeat_n(id, k)).collect();
    let centers: Vec<Vec<f64>> = (0..p)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let mut emb = Vec::new();
    let mut logits = Vec::new();
    for &l in &labels {
        emb.extend(centers[l].iter().map(|c| c + rng.random_range(-0.9..0.9)));
        let sharp = if l < 2 { 6.0 } else { 0.3 };
        logits.extend((0..p).map(|c| if c == l { sharp } else { 0.0 }));
    }
    let batch = BatchEmbeddings {
        embeddings: Tensor::new(vec![p * k, dim], emb)?,
        logits: Tensor::new(vec![p * k, p], logits)?,
        labels,
    };

    for a in [0, 12] {
        let h = class_entropy(&softmax(batch.logits.row(a)))?;
        println!(
            "anchor {a:>2}: entropy {h:.3}, K = {}",
            adaptive_k(h, &cfg)?
        );
    }
    println!("softmax      {:.4}", batch.softmax_xent()?);
    println!("ann          {:.4}", batch.ann_loss(&cfg)?);
    println!("triplet      {:.4}", batch.batch_hard_triplet(cfg.margin)?);
    println!("contrastive  {:.4}", batch.contrastive_loss(cfg.margin)?);
    println!(
        "joint (ann)  {:.4}",
        batch.joint_loss(MetricLoss::Ann, &cfg)?
    );
    Ok(())
}
