//! Training loop, evaluation protocol and ablation drivers on small data.

use csi_reid::augment::AugmentConfig;
use csi_reid::calibration::CalibratedSegment;
use csi_reid::metrics::rank_gallery;
use csi_reid::metrics::Item;
use csi_reid::nn::{Fusion, ModelConfig};
use csi_reid::synth::{generate_dataset, SynthConfig};
use csi_reid::train::{
    ablation_matrix, calibrate_all, evaluate, evaluate_rounds, fusion_ablation, run_experiment, train, Model,
    SamplerConfig, TrainConfig, LOSS_ABLATION_ROWS,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data(identities: usize, per_identity: usize, seed: u64) -> Vec<CalibratedSegment> {
    let cfg = SynthConfig {
        num_identities: identities,
        segments_per_identity: per_identity,
        min_frames: 20,
        max_frames: 30,
        seed,
        ..Default::default()
    };
    calibrate_all(&generate_dataset(&cfg).unwrap(), Default::default()).unwrap()
}

fn small(p: usize, m: usize, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: p * m,
        sampler: SamplerConfig { p, m },
        max_time: 30,
        train_fraction: 0.5,
        model: ModelConfig {
            d_model: 16,
            heads: 2,
            d_ff: 32,
            layers: 1,
            d_embed: 16,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn items(segs: &[CalibratedSegment]) -> Vec<Item> {
    segs.iter()
        .map(|s| Item {
            segment_id: s.source_id.clone(),
            person_id: s.person_id.clone(),
        })
        .collect()
}

#[test]
fn overfits_four_segments() {
    let segs = data(2, 2, 1);
    let cfg = TrainConfig {
        augmentation: AugmentConfig::disabled(),
        steps_per_epoch: Some(1),
        optimizer: csi_reid::train::AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..small(2, 2, 200)
    };
    let model = train(&cfg, &segs, None).unwrap().model();
    let emb = model.embed_segments(&segs).unwrap();
    let all = items(&segs);
    // leave-one-out retrieval over the training set
    for q in 0..segs.len() {
        let others: Vec<usize> = (0..segs.len()).filter(|&j| j != q).collect();
        let gallery: Vec<Vec<f64>> = others.iter().map(|&j| emb[j].clone()).collect();
        let gallery_items: Vec<Item> = others.iter().map(|&j| all[j].clone()).collect();
        let r = rank_gallery(&[emb[q].clone()], &gallery, &[all[q].clone()], &gallery_items).unwrap();
        assert!(r[0].relevance[0], "query {} ranked {:?}", all[q].segment_id, r[0].gallery_ids);
    }
}

#[test]
fn shuffled_labels_give_chance_level_rank1() {
    let mut segs = data(9, 6, 2);
    let mut ids: Vec<String> = segs.iter().map(|s| s.person_id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
    for (s, id) in segs.iter_mut().zip(ids) {
        s.person_id = id;
    }
    let classes = (0..9).map(|i| format!("P{i:03}")).collect();
    let model = Model::random(&small(4, 4, 1), segs[0].channels(), classes, 4).unwrap();
    let report = evaluate_rounds(&model, &segs, 10, 5).unwrap();
    let r1 = report.rank(1);
    assert!((r1 - 1.0 / 9.0).abs() < 0.15, "Rank-1 {r1}");
}

#[test]
fn evaluation_is_deterministic_and_complete() {
    let segs = data(4, 4, 6);
    let model = Model::random(&small(4, 4, 1), segs[0].channels(), vec!["a".into()], 7).unwrap();
    let (query, gallery): (Vec<_>, Vec<_>) = segs.iter().cloned().enumerate().partition(|(i, _)| i % 4 == 0);
    let query: Vec<_> = query.into_iter().map(|(_, s)| s).collect();
    let gallery: Vec<_> = gallery.into_iter().map(|(_, s)| s).collect();
    let a = evaluate(&model, &query, &gallery).unwrap();
    let b = evaluate(&model, &query, &gallery).unwrap();
    assert_eq!(a.queries_evaluated, 4);
    assert_eq!(a, b);
    let json = serde_json::to_value(&a).unwrap();
    for key in ["mAP", "mINP", "rank_at", "roc_auc"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    for k in ["1", "3", "5"] {
        assert!(json["rank_at"].get(k).is_some(), "missing rank_at.{k}");
    }
    let r = evaluate_rounds(&model, &segs, 3, 8).unwrap();
    assert_eq!(r, evaluate_rounds(&model, &segs, 3, 8).unwrap());
    assert_eq!(r.rounds, 3);
}

#[test]
fn identical_runs_give_identical_metrics() {
    let segs = data(4, 4, 9);
    let cfg = TrainConfig {
        steps_per_epoch: Some(2),
        ..small(2, 2, 2)
    };
    let a = run_experiment(&cfg, &segs, None).unwrap();
    let b = run_experiment(&cfg, &segs, None).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.outcome.checkpoint.to_bytes().unwrap(), b.outcome.checkpoint.to_bytes().unwrap());
    let steps: Vec<usize> = a.outcome.log.iter().map(|l| l.step).collect();
    assert_eq!(steps, [2, 4]);
}

#[test]
fn ablation_drivers_emit_all_rows_in_order() {
    let segs = data(4, 4, 10);
    let cfg = TrainConfig {
        steps_per_epoch: Some(1),
        ..small(2, 2, 1)
    };
    let rows = ablation_matrix(&cfg, &segs).unwrap();
    assert_eq!(rows.len(), 6);
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(
        labels,
        ["- Tri. Cro.", "Aug Tri. Cro.", "Aug Sof. Cro.", "Aug Tri. LMCL", "- Sof. LMCL", "Aug Sof. LMCL"]
    );
    for (row, &(aug, metric, cls)) in rows.iter().zip(&LOSS_ABLATION_ROWS) {
        assert_eq!((row.augmentation, row.metric_loss, row.cls_loss), (aug, metric, cls));
    }

    let fusion = fusion_ablation(&cfg, &segs).unwrap();
    let variants: Vec<Fusion> = fusion.iter().map(|r| r.fusion).collect();
    assert_eq!(variants, [Fusion::Early, Fusion::Late, Fusion::Lateral]);
    // the lateral row is the default model
    let default_run = run_experiment(&cfg, &segs, None).unwrap();
    assert_eq!(fusion[2].report, default_run.report);
}
