//! Re-identification metrics over cosine-similarity rankings: CMC Rank-N,
//! mAP, mINP and ROC-AUC.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity of one embedded segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub segment_id: String,
    pub person_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    pub query_id: String,
    /// Gallery segment ids, most similar first.
    pub gallery_ids: Vec<String>,
    pub scores: Vec<f64>,
    /// Same person as the query, aligned with `gallery_ids`.
    pub relevance: Vec<bool>,
}

fn normalized(v: &[f64], what: &str) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Normalization(format!("{what} embedding has zero or non-finite norm")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Ranks the gallery for every query by descending cosine similarity; ties
/// are broken by ascending gallery segment id.
pub fn rank_gallery(
    query_embeddings: &[Vec<f64>],
    gallery_embeddings: &[Vec<f64>],
    query_items: &[Item],
    gallery_items: &[Item],
) -> Result<Vec<RankingResult>> {
    if gallery_embeddings.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if query_embeddings.len() != query_items.len() || gallery_embeddings.len() != gallery_items.len() {
        return Err(Error::shape(
            "rank_gallery",
            &[query_embeddings.len(), gallery_embeddings.len()],
            &[query_items.len(), gallery_items.len()],
        ));
    }
    let gallery: Vec<Vec<f64>> = gallery_embeddings
        .iter()
        .map(|g| normalized(g, "gallery"))
        .collect::<Result<_>>()?;
    query_embeddings
        .iter()
        .zip(query_items)
        .map(|(q, qi)| {
            let q = normalized(q, "query")?;
            if q.len() != gallery[0].len() {
                return Err(Error::shape("rank_gallery", &[q.len()], &[gallery[0].len()]));
            }
            let mut scored: Vec<(f64, usize)> = gallery
                .iter()
                .enumerate()
                .map(|(j, g)| (q.iter().zip(g).map(|(a, b)| a * b).sum(), j))
                .collect();
            scored.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then_with(|| gallery_items[a.1].segment_id.cmp(&gallery_items[b.1].segment_id))
            });
            Ok(RankingResult {
                query_id: qi.segment_id.clone(),
                gallery_ids: scored.iter().map(|&(_, j)| gallery_items[j].segment_id.clone()).collect(),
                scores: scored.iter().map(|&(s, _)| s).collect(),
                relevance: scored
                    .iter()
                    .map(|&(_, j)| gallery_items[j].person_id == qi.person_id)
                    .collect(),
            })
        })
        .collect()
}

/// Mean of precision@p over the positions `p` of the positives; `None` when
/// the list has no positive.
pub fn average_precision(relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Number of positives divided by the 1-based rank of the last positive.
pub fn inverse_negative_penalty(relevance: &[bool]) -> Option<f64> {
    let hardest = relevance.iter().rposition(|&r| r)?;
    let positives = relevance.iter().filter(|&&r| r).count();
    Some(positives as f64 / (hardest + 1) as f64)
}

/// Fraction of lists with at least one positive in their first `n` entries.
pub fn cmc_at(relevance_lists: &[Vec<bool>], n: usize) -> f64 {
    if relevance_lists.is_empty() {
        return 0.0;
    }
    let hits = relevance_lists
        .iter()
        .filter(|r| r.iter().take(n).any(|&x| x))
        .count();
    hits as f64 / relevance_lists.len() as f64
}

/// `P(pos > neg) + 0.5 P(pos == neg)` via the rank-sum statistic with
/// average ranks for ties.
pub fn roc_auc(positive_scores: &[f64], negative_scores: &[f64]) -> Result<f64> {
    if positive_scores.is_empty() || negative_scores.is_empty() {
        return Err(Error::InsufficientData(format!(
            "roc_auc needs both classes ({} positive, {} negative scores)",
            positive_scores.len(),
            negative_scores.len()
        )));
    }
    let mut all: Vec<(f64, bool)> = positive_scores
        .iter()
        .map(|&s| (s, true))
        .chain(negative_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the rank sum keeps tied average ranks integral
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let pos_in_group = all[i..=j].iter().filter(|e| e.1).count() as u128;
        // ranks i+1 ..= j+1, average (i + j + 2) / 2
        rank_sum_x2 += pos_in_group * (i + j + 2) as u128;
        i = j + 1;
    }
    let np = positive_scores.len() as u128;
    let nn = negative_scores.len() as u128;
    let u_x2 = rank_sum_x2 - np * (np + 1);
    Ok(u_x2 as f64 / (2 * np * nn) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub round: usize,
    pub query_id: String,
    pub ap: f64,
    pub inp: f64,
    /// 1-based rank of the first positive.
    pub first_hit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mINP")]
    pub minp: f64,
    pub rank_at: BTreeMap<usize, f64>,
    pub roc_auc: f64,
    pub rounds: usize,
    pub queries_evaluated: usize,
    pub queries_skipped: usize,
    pub per_query: Vec<QueryRow>,
    #[serde(default)]
    pub config: serde_json::Value,
}

pub const DEFAULT_RANKS: [usize; 3] = [1, 3, 5];

/// Metrics of one query/gallery round. Queries without any gallery positive
/// are excluded and counted in `queries_skipped`.
pub fn evaluate_rankings(rankings: &[RankingResult], ranks: &[usize], round: usize) -> Result<EvalReport> {
    let mut per_query = Vec::new();
    let mut lists = Vec::new();
    let mut pos_scores = Vec::new();
    let mut neg_scores = Vec::new();
    let mut skipped = 0;
    for r in rankings {
        for (&s, &rel) in r.scores.iter().zip(&r.relevance) {
            if rel {
                pos_scores.push(s);
            } else {
                neg_scores.push(s);
            }
        }
        match (average_precision(&r.relevance), inverse_negative_penalty(&r.relevance)) {
            (Some(ap), Some(inp)) => {
                per_query.push(QueryRow {
                    round,
                    query_id: r.query_id.clone(),
                    ap,
                    inp,
                    first_hit: r.relevance.iter().position(|&x| x).unwrap() + 1,
                });
                lists.push(r.relevance.clone());
            }
            _ => {
                log::warn!("query {} has no positive in the gallery; excluded", r.query_id);
                skipped += 1;
            }
        }
    }
    if per_query.is_empty() {
        return Err(Error::InsufficientData("no query has a gallery positive".into()));
    }
    let n = per_query.len() as f64;
    let roc = if pos_scores.is_empty() || neg_scores.is_empty() {
        log::warn!("ROC-AUC undefined without both positive and negative pairs; reporting 0.5");
        0.5
    } else {
        roc_auc(&pos_scores, &neg_scores)?
    };
    Ok(EvalReport {
        map: per_query.iter().map(|q| q.ap).sum::<f64>() / n,
        minp: per_query.iter().map(|q| q.inp).sum::<f64>() / n,
        rank_at: ranks.iter().map(|&k| (k, cmc_at(&lists, k))).collect(),
        roc_auc: roc,
        rounds: 1,
        queries_evaluated: per_query.len(),
        queries_skipped: skipped,
        per_query,
        config: serde_json::Value::Null,
    })
}

/// Unweighted mean of per-round reports; per-query rows are concatenated.
pub fn average_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InsufficientData("no evaluation rounds".into()))?;
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    Ok(EvalReport {
        map: mean(&|r| r.map),
        minp: mean(&|r| r.minp),
        rank_at: first
            .rank_at
            .keys()
            .map(|&k| (k, mean(&|r| r.rank_at[&k])))
            .collect(),
        roc_auc: mean(&|r| r.roc_auc),
        rounds: reports.iter().map(|r| r.rounds).sum(),
        queries_evaluated: reports.iter().map(|r| r.queries_evaluated).sum(),
        queries_skipped: reports.iter().map(|r| r.queries_skipped).sum(),
        per_query: reports.iter().flat_map(|r| r.per_query.clone()).collect(),
        config: first.config.clone(),
    })
}

impl EvalReport {
    pub fn rank(&self, n: usize) -> f64 {
        self.rank_at.get(&n).copied().unwrap_or(f64::NAN)
    }

    /// Per-query rows as TSV with a header line.
    pub fn per_query_tsv(&self) -> String {
        let mut s = String::from("round\tquery_id\tap\tinp\tfirst_hit\n");
        for q in &self.per_query {
            s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", q.round, q.query_id, q.ap, q.inp, q.first_hit));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(seg: &str, person: &str) -> Item {
        Item {
            segment_id: seg.into(),
            person_id: person.into(),
        }
    }

    #[test]
    fn ap_examples() {
        assert!((average_precision(&[true, false, true]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true, true, true]), Some(1.0));
        assert_eq!(average_precision(&[false, true]), Some(0.5));
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn inp_examples() {
        assert!((inverse_negative_penalty(&[true, false, true]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(inverse_negative_penalty(&[true, true, false]), Some(1.0));
        assert!((inverse_negative_penalty(&[false, false, true]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn cmc_examples() {
        let lists = vec![vec![false, true, false], vec![true, false, false]];
        assert_eq!(cmc_at(&lists, 1), 0.5);
        assert_eq!(cmc_at(&lists, 3), 1.0);
        assert_eq!(cmc_at(&[vec![true], vec![true, false]], 1), 1.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9], &[0.1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[], &[0.3]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn ranking_examples() {
        let r = rank_gallery(&[vec![1.0, 0.0]], &[vec![0.2, 1.0]], &[item("q", "a")], &[item("g", "a")]).unwrap();
        assert_eq!(r[0].gallery_ids, vec!["g"]);

        let gallery = vec![vec![0.0, 1.0, 0.0], vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]];
        let items = vec![item("g0", "b"), item("g1", "a"), item("g2", "c")];
        let r = rank_gallery(&[vec![1.0, 0.0, 0.0]], &gallery, &[item("q", "a")], &items).unwrap();
        assert_eq!(r[0].gallery_ids[0], "g1");
        assert!((r[0].scores[0] - 1.0).abs() < 1e-15);
        // tie between g0 and g2 broken by id
        assert_eq!(r[0].gallery_ids[1..], ["g0".to_string(), "g2".to_string()]);

        assert!(matches!(
            rank_gallery(&[vec![1.0]], &[], &[item("q", "a")], &[]),
            Err(Error::EmptyGallery)
        ));
    }

    #[test]
    fn perfect_ranking_fixpoint() {
        let rankings = vec![RankingResult {
            query_id: "q".into(),
            gallery_ids: vec!["a".into(), "b".into(), "c".into()],
            scores: vec![0.9, 0.8, 0.1],
            relevance: vec![true, true, false],
        }];
        let rep = evaluate_rankings(&rankings, &DEFAULT_RANKS, 0).unwrap();
        assert_eq!((rep.map, rep.minp, rep.rank(1)), (1.0, 1.0, 1.0));
        assert_eq!(rep.roc_auc, 1.0);
    }

    #[test]
    fn queries_without_positives_are_skipped() {
        let rankings = vec![
            RankingResult {
                query_id: "q0".into(),
                gallery_ids: vec!["a".into()],
                scores: vec![0.5],
                relevance: vec![false],
            },
            RankingResult {
                query_id: "q1".into(),
                gallery_ids: vec!["a".into(), "b".into()],
                scores: vec![0.5, 0.4],
                relevance: vec![false, true],
            },
        ];
        let rep = evaluate_rankings(&rankings, &DEFAULT_RANKS, 0).unwrap();
        assert_eq!(rep.queries_skipped, 1);
        assert_eq!(rep.map, 0.5);
        assert!(rep.per_query_tsv().lines().count() == 2);
    }
}
