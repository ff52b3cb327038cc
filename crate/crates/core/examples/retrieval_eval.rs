//! Ranks a toy gallery for a few queries and reports CMC and mAP.

use amde::diffcore::Tensor;
use amde::eval::{average_precision, cmc_at_k, rank_queries, retrieval_metrics};

fn main() -> amde::Result<()> {
    // Gallery: two points per identity on a line.
    let gallery = Tensor::new(vec![6, 1], vec![0.0, 0.2, 1.0, 1.3, 2.0, 2.1])?;
    let g_labels = [0, 0, 1, 1, 2, 2];
    let queries = Tensor::new(vec![3, 1], vec![0.1, 1.6, 1.9])?;
    let q_labels = [0, 1, 2];

    let rankings = rank_queries(&queries, &q_labels, &gallery, &g_labels, 1)?;
    for (q, r) in rankings.iter().enumerate() {
        let hits: String = r
            .relevant
            .iter()
            .map(|&h| if h { 'x' } else { '-' })
            .collect();
        println!(
            "query {q}: order {:?}  hits {hits}  first hit {:?}  AP {:.3}",
            r.order,
            r.first_hit(),
            average_precision(r)
        );
    }
    for k in [1, 2, 3] {
        println!("CMC@{k} = {:.3}", cmc_at_k(&rankings, k)?);
    }
    let m = retrieval_metrics(&rankings)?;
    println!(
        "rank1 {:.3}  rank5 {:.3}  mAP {:.3}",
        m.rank1, m.rank5, m.map
    );
    Ok(())
}
