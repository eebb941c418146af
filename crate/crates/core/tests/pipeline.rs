//! Integration tests for the full training pipeline on generated tasks.

use sldg_core::datagen::{gen_toy_domains, DomainTransform, ToyDomainSpec};
use sldg_core::numerics::Rng;
use sldg_core::trainer::{run_experiment, Mode, TrainConfig};

fn base_cfg(classes: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        m_iters: 25,
        n_iters: 0,
        classes,
        batch_classes: classes.min(4),
        per_class: 16,
        hidden_dim: 32,
        feat_dim: 32,
        bottleneck_dim: 16,
        seed,
        mode: Mode::Stage1Only,
        ..TrainConfig::default()
    }
}

#[test]
fn identity_transforms_transfer_without_gap() {
    // I.i.d. domains: a stage-1 model scores about the same on every
    // domain, up to sampling noise.
    let mut gaps = Vec::new();
    for seed in 0..5u64 {
        let mut spec = ToyDomainSpec::rotated_blobs(3, 2, 0.0, 300);
        spec.transforms = vec![DomainTransform::identity(); 2];
        let domains = gen_toy_domains(&spec, &Rng::from_seed(100 + seed)).unwrap();
        let out = run_experiment(
            &domains[0],
            &[],
            Some(&domains[1]),
            &base_cfg(3, seed),
            "",
            None,
        )
        .unwrap();
        let source = out.per_domain[0].accuracy;
        let target = out.per_domain.last().unwrap().accuracy;
        gaps.push(source - target);
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(
        mean_gap.abs() < 0.05,
        "mean source-target gap {mean_gap} on i.i.d. domains"
    );
}

#[test]
fn quarter_turn_target_defeats_stage1() {
    // With 3 classes spaced 120 degrees apart, rotating the target by 90
    // degrees moves every class mean most of the way to its neighbor:
    // supervised training on the source cannot do better than chance
    // there.
    let mut accs = Vec::new();
    for seed in 0..5u64 {
        let spec = ToyDomainSpec::rotated_blobs(3, 2, 90.0, 300);
        let domains = gen_toy_domains(&spec, &Rng::from_seed(200 + seed)).unwrap();
        let out = run_experiment(
            &domains[0],
            &[],
            Some(&domains[1]),
            &base_cfg(3, seed),
            "",
            None,
        )
        .unwrap();
        accs.push(out.per_domain.last().unwrap().accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!(mean <= 0.40, "stage-1 target accuracy {mean} should be near or below chance");
}

#[test]
fn pseudo_label_dump_writes_per_epoch_files() {
    let spec = ToyDomainSpec::rotated_blobs(3, 3, 60.0, 90);
    let mut domains = gen_toy_domains(&spec, &Rng::from_seed(300)).unwrap();
    let target = domains.pop().unwrap();
    let unlabeled = vec![domains.pop().unwrap()];
    let labeled = domains.pop().unwrap();
    let mut cfg = base_cfg(3, 1);
    cfg.mode = Mode::Sldg;
    cfg.m_iters = 2;
    cfg.n_iters = 2;
    cfg.dump_pseudo_labels = true;
    let dir = tempfile::tempdir().unwrap();
    run_experiment(
        &labeled,
        &unlabeled,
        Some(&target),
        &cfg,
        "",
        Some(dir.path()),
    )
    .unwrap();
    for epoch in 0..2 {
        let path = dir.path().join(format!("pseudo_e{epoch}_d0.csv"));
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sample_id,initial,final,min_distance"));
        // Train split of 90 samples leaves 81 rows.
        assert_eq!(text.lines().count(), 82);
    }
}

#[test]
fn stage2_loss_components_are_recorded_every_epoch() {
    let spec = ToyDomainSpec::rotated_blobs(4, 3, 70.0, 200);
    let mut domains = gen_toy_domains(&spec, &Rng::from_seed(400)).unwrap();
    let target = domains.pop().unwrap();
    let unlabeled = vec![domains.pop().unwrap()];
    let labeled = domains.pop().unwrap();
    let mut cfg = base_cfg(4, 2);
    cfg.mode = Mode::Sldg;
    cfg.m_iters = 3;
    cfg.n_iters = 4;
    let out = run_experiment(&labeled, &unlabeled, Some(&target), &cfg, "", None).unwrap();
    assert_eq!(out.metrics.records.len(), 7);
    for r in &out.metrics.records {
        assert!(r.l_cl.is_finite());
        assert!(r.acc_labeled.is_finite());
        assert!(r.acc_target.is_finite());
        assert!(r.alpha.is_finite());
        if r.stage == 2 {
            assert!(r.l_im.is_finite() && r.l_cu.is_finite());
            assert!(r.l_fp.is_finite() && r.l_bf.is_finite());
            assert!(r.pseudo_acc_mean.is_finite());
        } else {
            assert!(r.pseudo_acc_mean.is_nan());
        }
    }
    // Epoch indices are strictly increasing.
    for w in out.metrics.records.windows(2) {
        assert_eq!(w[1].epoch, w[0].epoch + 1);
    }
}

#[test]
fn cdg_with_true_labels_beats_the_supervised_baseline() {
    // When every source carries labels, stage 2 with ground truth in
    // place of clustering should bridge the rotation at least as well as
    // the supervised baseline does.
    let mut cdg_sum = 0.0;
    let mut base_sum = 0.0;
    for seed in 0..3u64 {
        let spec = ToyDomainSpec::rotated_blobs(4, 3, 70.0, 300);
        let mut domains = gen_toy_domains(&spec, &Rng::from_seed(600 + seed)).unwrap();
        let target = domains.pop().unwrap();
        let unlabeled = vec![domains.pop().unwrap()];
        let labeled = domains.pop().unwrap();
        let mut cfg = base_cfg(4, seed);
        cfg.m_iters = 20;
        cfg.n_iters = 20;
        cfg.mode = Mode::Cdg;
        let cdg = run_experiment(&labeled, &unlabeled, Some(&target), &cfg, "", None).unwrap();
        cfg.mode = Mode::Stage1Only;
        let base = run_experiment(&labeled, &unlabeled, Some(&target), &cfg, "", None).unwrap();
        cdg_sum += cdg.per_domain.last().unwrap().accuracy;
        base_sum += base.per_domain.last().unwrap().accuracy;
    }
    assert!(
        cdg_sum >= base_sum,
        "cdg mean target accuracy {} below baseline {}",
        cdg_sum / 3.0,
        base_sum / 3.0
    );
}

#[test]
fn add_cl_flag_changes_stage2_updates() {
    let spec = ToyDomainSpec::rotated_blobs(3, 3, 60.0, 150);
    let mut domains = gen_toy_domains(&spec, &Rng::from_seed(500)).unwrap();
    domains.pop();
    let unlabeled = vec![domains.pop().unwrap()];
    let labeled = domains.pop().unwrap();
    let mut cfg = base_cfg(3, 3);
    cfg.mode = Mode::Sldg;
    cfg.m_iters = 2;
    cfg.n_iters = 3;
    let plain = run_experiment(&labeled, &unlabeled, None, &cfg, "", None).unwrap();
    cfg.add_cl_to_stage2 = true;
    let with_cl = run_experiment(&labeled, &unlabeled, None, &cfg, "", None).unwrap();
    let diff = plain
        .model
        .blocks()
        .into_iter()
        .any(|b| {
            (0..plain.model.block_len(b))
                .any(|i| plain.model.param(b, i) != with_cl.model.param(b, i))
        });
    assert!(diff, "adding the labeled loss to stage 2 must change the trajectory");
}
