//! Ranks a toy gallery and computes AP, INP, CMC and AUC.
//!
//! `cargo run --release --example retrieval_metrics`

use csi_reid::metrics::{average_precision, evaluate_rankings, inverse_negative_penalty, rank_gallery, Item, DEFAULT_RANKS};

fn item(seg: &str, person: &str) -> Item {
    Item {
        segment_id: seg.into(),
        person_id: person.into(),
    }
}

fn main() -> csi_reid::Result<()> {
    println!(
        "[1,0,1]: AP {:.4}  INP {:.4}",
        average_precision(&[true, false, true]).unwrap(),
        inverse_negative_penalty(&[true, false, true]).unwrap()
    );
    let gallery = vec![vec![1.0, 0.1], vec![0.9, 0.5], vec![0.0, 1.0], vec![0.2, 1.0], vec![0.7, 0.7]];
    let gallery_items = vec![item("g0", "A"), item("g1", "B"), item("g2", "B"), item("g3", "C"), item("g4", "A")];
    let query = vec![vec![1.0, 0.0], vec![0.1, 1.0]];
    let query_items = vec![item("q0", "A"), item("q1", "B")];
    let rankings = rank_gallery(&query, &gallery, &query_items, &gallery_items)?;
    for r in &rankings {
        println!("{} -> {:?} relevance {:?}", r.query_id, r.gallery_ids, r.relevance);
    }
    let report = evaluate_rankings(&rankings, &DEFAULT_RANKS, 0)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
