use std::sync::OnceLock;

use ovmr::checkpoint::{decode_checkpoint, encode_checkpoint};
use ovmr::data::{generate_dataset, Dataset, GenConfig, Split};
use ovmr::metrics::temporal_iou;
use ovmr::ood_boundary::QueryLabel;
use ovmr::train::{evaluate, train, BoundaryMode, EpochLog, RunConfig, Stage, TrainOutcome};
use ovmr::Error;

fn small(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        epochs: 8,
        batch_size: 32,
        ..RunConfig::default()
    };
    cfg.data = GenConfig {
        seed,
        dim: 8,
        frames: 32,
        n_id: 80,
        n_ood: 80,
        n_videos: 80,
        ..GenConfig::default()
    };
    cfg.scales = vec![4, 8, 16];
    cfg.stride = 2;
    cfg
}

fn fit(cfg: &RunConfig) -> (Dataset, TrainOutcome) {
    let ds = generate_dataset(&cfg.data).unwrap();
    let out = train(cfg, &ds, &mut |_| {}).unwrap();
    (ds, out)
}

/// Default synthetic data with a wide OOD shift, trained for 60 epochs.
fn wide_shift() -> &'static (RunConfig, Dataset, TrainOutcome) {
    static RUN: OnceLock<(RunConfig, Dataset, TrainOutcome)> = OnceLock::new();
    RUN.get_or_init(|| {
        let mut cfg = RunConfig {
            epochs: 60,
            ..RunConfig::default()
        };
        cfg.data.ood_shift = 5.0;
        let (ds, out) = fit(&cfg);
        (cfg, ds, out)
    })
}

#[test]
fn logged_total_is_the_weighted_sum_of_components() {
    let cfg = small(1);
    let (_, out) = fit(&cfg);
    for l in &out.logs {
        let sum = l.l1.unwrap()
            + cfg.lambda1 * l.l2.unwrap()
            + cfg.lambda2 * l.l3.unwrap()
            + cfg.lambda3 * l.l4.unwrap();
        assert!((sum - l.total).abs() < 1e-12, "{l:?}");
    }
}

#[test]
fn zero_weights_reduce_to_flow_only_training() {
    let mut cfg = small(2);
    cfg.lambda1 = 0.0;
    cfg.lambda2 = 0.0;
    cfg.lambda3 = 0.0;
    let (_, joint) = fit(&cfg);
    cfg.stage = Stage::TwoStage;
    let (_, staged) = fit(&cfg);
    let flow_phase: Vec<&EpochLog> = staged.logs.iter().filter(|l| l.stage == "flow").collect();
    assert_eq!(flow_phase.len(), joint.logs.len());
    for (a, b) in joint.logs.iter().zip(flow_phase) {
        assert_eq!(a.l1, b.l1);
        assert_eq!(a.total, b.total);
        assert_eq!(a.total, a.l1.unwrap());
        assert_eq!(a.b_id, b.b_id);
        assert!(a.l3.is_none() && a.l4.is_none());
    }
    assert_eq!(joint.model.flow, staged.model.flow);
}

#[test]
fn two_stage_logs_both_phases() {
    let mut cfg = small(3);
    cfg.stage = Stage::TwoStage;
    cfg.epochs = 3;
    let (_, out) = fit(&cfg);
    let stages: Vec<&str> = out.logs.iter().map(|l| l.stage.as_str()).collect();
    assert_eq!(
        stages,
        [
            "flow",
            "flow",
            "flow",
            "retrieval",
            "retrieval",
            "retrieval"
        ]
    );
    assert!(out.logs[0].l3.is_none() && out.logs[0].l2.is_some());
    assert!(out.logs[3].l1.is_none() && out.logs[3].l3.is_some());
    assert_eq!(out.best_epochs.len(), 2);
}

#[test]
fn frozen_boundary_stays_put() {
    let mut cfg = small(4);
    cfg.boundary = BoundaryMode::Frozen;
    let (_, out) = fit(&cfg);
    assert!(out.logs.iter().all(|l| l.b_id == out.logs[0].b_id));
    assert_eq!(out.model.calibration.b_id, out.logs[0].b_id);
}

#[test]
fn default_config_loss_falls_by_epoch_50() {
    let cfg = RunConfig {
        epochs: 50,
        patience: 50,
        ..RunConfig::default()
    };
    let (_, out) = fit(&cfg);
    assert_eq!(out.logs.len(), 50);
    assert!(out.logs[49].total < out.logs[0].total);
}

#[test]
fn wide_shift_is_detected() {
    let (cfg, ds, out) = wide_shift();
    let (report, preds) = evaluate(&out.model, ds, cfg).unwrap();
    let a = report.auroc.unwrap();
    assert!((0.0..=1.0).contains(&a) && a >= 0.95, "{a}");
    for p in &preds {
        if p.verdict == QueryLabel::Ood {
            assert!(p.moments.is_empty());
        } else {
            assert!(!p.moments.is_empty());
            assert!(p.moments.windows(2).all(|w| w[0].score >= w[1].score));
        }
    }
}

#[test]
fn planted_moments_outscore_off_target_windows() {
    let (cfg, ds, out) = wide_shift();
    let (_, nv) = ds.check_uniform().unwrap();
    let props = cfg.proposals(nv).unwrap();
    let (mut wins, mut total) = (0, 0);
    for e in ds
        .of_split(Split::Test)
        .filter(|e| e.label == QueryLabel::Id)
    {
        let gt = e.moment.unwrap();
        let scored = out.model.score(e, &props).unwrap();
        let best = |keep: &dyn Fn(f64) -> bool| {
            scored
                .iter()
                .filter(|p| keep(temporal_iou(&p.window_label(nv), &gt)))
                .map(|p| p.score)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let on = best(&|iou| iou >= 0.5);
        let off = best(&|iou| iou == 0.0);
        if on.is_finite() && off.is_finite() {
            total += 1;
            wins += usize::from(on > off);
        }
    }
    assert!(total > 50);
    assert!(wins as f64 >= 0.9 * total as f64, "{wins}/{total}");
}

#[test]
fn checkpoint_roundtrip_preserves_the_report() {
    let cfg = small(5);
    let (ds, out) = fit(&cfg);
    let bytes = encode_checkpoint(&out.model, &out.provenance).unwrap();
    let (model, prov) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(prov, out.provenance);
    assert_eq!(prov.config_hash, cfg.hash());
    assert_eq!(
        evaluate(&model, &ds, &cfg).unwrap(),
        evaluate(&out.model, &ds, &cfg).unwrap()
    );
    let json: serde_json::Value = serde_json::from_str(&prov.json).unwrap();
    assert_eq!(json["seed"], 5);
    assert_eq!(json["config_hash"], cfg.hash_hex());
}

#[test]
fn dimension_mismatch_is_refused() {
    let cfg = small(6);
    let (_, out) = fit(&RunConfig {
        epochs: 1,
        ..cfg.clone()
    });
    let mut other = cfg.clone();
    other.data.dim = 6;
    let ds = generate_dataset(&other.data).unwrap();
    assert!(matches!(
        evaluate(&out.model, &ds, &cfg),
        Err(Error::Contract(_))
    ));
}

#[test]
fn all_ood_test_split_reports_zero_recall() {
    let cfg = small(7);
    let (mut ds, out) = fit(&RunConfig {
        epochs: 1,
        ..cfg.clone()
    });
    ds.episodes
        .retain(|e| e.split == Split::Train || e.label == QueryLabel::Ood);
    let (report, _) = evaluate(&out.model, &ds, &cfg).unwrap();
    assert_eq!(report.n_id, 0);
    assert!(report.recall.iter().all(|r| r.value == 0.0));
    assert!(report.auroc.is_none());
    assert!(report
        .notes
        .iter()
        .any(|n| n.contains("no ID test queries")));
}

#[test]
fn invalid_run_configs_are_config_errors() {
    for text in [
        r#"{"batch_size": 1}"#,
        r#"{"lambda1": -0.1}"#,
        r#"{"epochs": 0}"#,
        r#"{"alpha": 100}"#,
        r#"{"nms_iou": 1.0}"#,
        r#"{"data": {"dim": 0}}"#,
    ] {
        assert!(
            matches!(RunConfig::from_json(text), Err(Error::Config { .. })),
            "{text}"
        );
    }
    assert!(matches!(
        RunConfig::from_json(r#"{"lamda1": 1}"#),
        Err(Error::Json(_))
    ));
    let cfg = RunConfig::from_json(r#"{"stage": "two-stage", "pu_positives": "score"}"#).unwrap();
    assert_eq!(cfg.stage, Stage::TwoStage);
}
