mod common;

use metastyle::backbone::{Arch, Optimizer, OptimizerKind, Params, SegModel};
use metastyle::config::TrainConfig;
use metastyle::data::DomainDataset;
use metastyle::fdrt::{evaluate_domains, run_fdrt, FdrtConfig};
use metastyle::meta_loop::{run_metastyle_epoch, segmentation_gradients, Batch, MetaConfig, MetaOptimizers};
use metastyle::StyleBank;

fn small_model(seed: u64) -> SegModel<f64> {
    SegModel::new(Arch { depth: 2, base_channels: 3, num_classes: 2 }, seed).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn fifty_step_trajectory_is_bitwise_reproducible() {
    let a = common::loss_trajectory(50, 7);
    let b = common::loss_trajectory(50, 7);
    assert_eq!(a.len(), 50);
    assert!(common::bitwise_equal(&a, &b));
    assert!(!common::bitwise_equal(&a, &common::loss_trajectory(50, 8)));
}

#[test]
fn epochs_are_bitwise_reproducible() {
    let cfg = {
        let mut c = MetaConfig::<f64>::from_train_config(&TrainConfig::default(), 4);
        c.batch_size = 2;
        c.episodes_per_domain = 2;
        c
    };
    let domains = vec![common::tiny_domain(0, 0.1, 0.5, 6, 16), common::tiny_domain(1, 0.6, -0.4, 6, 16)];
    let run = || {
        let mut opts = MetaOptimizers::new(cfg.optimizer);
        let (mut m, mut bank) = (small_model(4), StyleBank::new());
        let mut recs = Vec::new();
        for e in 0..3 {
            let (m2, b2, r) = run_metastyle_epoch(m, &domains, bank, &cfg, e, &mut opts).unwrap();
            (m, bank) = (m2, b2);
            recs.extend(r);
        }
        (m, bank.to_bytes(), recs)
    };
    let (m1, b1, r1) = run();
    let (m2, b2, r2) = run();
    assert_eq!(m1.params().max_abs_diff(m2.params()), 0.0);
    assert_eq!(b1, b2);
    assert_eq!(r1, r2);
}

#[test]
fn random_banks_round_trip_bitwise() {
    assert!(common::bank_round_trips(200, 31));
    let dir = tempfile::tempdir().unwrap();
    let bank = common::random_bank(&mut common::rng(32));
    let path = dir.path().join("bank.msbk");
    bank.write_file(&path).unwrap();
    assert_eq!(StyleBank::<f64>::read_file(&path).unwrap().to_bytes(), bank.to_bytes());
}

/// One image repeated, so every batch and every bank entry carries the same style.
fn copies(id: u32) -> DomainDataset<f64> {
    let mut d = common::tiny_domain(0, 0.2, 0.5, 4, 16).subset(&[1, 1, 1, 1]);
    d.domain_id = id;
    d
}

#[test]
fn identical_domains_make_recall_a_near_identity() {
    let domains = vec![copies(0), copies(1), copies(2)];
    let mut cfg = MetaConfig::<f64>::from_train_config(&TrainConfig::default(), 2);
    cfg.batch_size = 2;
    cfg.episodes_per_domain = 2;
    cfg.mka = false;
    let run = |metastyle: bool| {
        let mut c = cfg.clone();
        c.metastyle = metastyle;
        let mut opts = MetaOptimizers::new(c.optimizer);
        let (mut m, mut bank) = (small_model(9), StyleBank::new());
        let mut recs = Vec::new();
        for e in 0..2 {
            let (m2, b2, r) = run_metastyle_epoch(m, &domains, bank, &c, e, &mut opts).unwrap();
            (m, bank) = (m2, b2);
            recs.extend(r);
        }
        (m, recs)
    };
    let (m_recall, r_recall) = run(true);
    let (m_plain, r_plain) = run(false);
    assert_eq!(r_recall.len(), 6);
    for (a, b) in r_recall.iter().zip(&r_plain) {
        assert!((a.l_total - b.l_total).abs() < 1e-3, "{} vs {}", a.l_total, b.l_total);
    }
    assert!(m_recall.params().max_abs_diff(m_plain.params()) < 1e-3);
}

#[test]
fn modules_off_reduce_to_plain_episodic_loop() {
    // one image per domain, so batching is independent of shuffling
    let domains: Vec<DomainDataset<f64>> = (0..3)
        .map(|i| common::tiny_domain(i, 0.1 + 0.2 * i as f64, 0.4, 1, 16))
        .collect();
    let mut cfg = MetaConfig::<f64>::from_train_config(&TrainConfig::default(), 5);
    cfg.batch_size = 1;
    cfg.metastyle = false;
    cfg.mka = false;
    cfg.lr_decay_every = 2;
    let epochs = 5;

    let mut opts = MetaOptimizers::new(OptimizerKind::Sgd);
    let (mut m, mut bank) = (small_model(6), StyleBank::new());
    for e in 0..epochs {
        (m, bank, _) = run_metastyle_epoch(m, &domains, bank, &cfg, e, &mut opts).unwrap();
    }

    let mut reference = small_model(6);
    for e in 0..epochs {
        let decay = cfg.lr_decay_factor.powi((e / cfg.lr_decay_every) as i32);
        for t in 0..domains.len() {
            let support = Batch::from_dataset(&domains[t], &[0]).unwrap();
            let query = Batch::from_dataset(&domains[(t + 1) % domains.len()], &[0]).unwrap();
            let (_, g) = segmentation_gradients(&reference, &support).unwrap();
            let prime = reference.param_update(&g, cfg.gamma * decay).unwrap();
            let (_, g) = segmentation_gradients(&prime, &query).unwrap();
            reference = prime.param_update(&g, cfg.beta * decay).unwrap();
        }
    }
    assert_eq!(m.params(), reference.params());
}

#[test]
fn two_step_sgd_matches_closed_form() {
    // L(theta) = sum (theta - a)^2, support step at gamma then query step at beta
    let a = [0.5, -1.0, 2.0];
    let theta0 = Params::new(vec![vec![1.5, 0.25, -3.0]]);
    let grad = |p: &Params<f64>| Params::new(vec![p.tensor(0).iter().zip(a).map(|(x, ai)| 2.0 * (x - ai)).collect()]);
    let (gamma, beta) = (0.1, 0.05);
    let mut opt = Optimizer::new(OptimizerKind::Sgd);
    let theta1 = opt.step(&theta0, &grad(&theta0), gamma).unwrap();
    let theta2 = opt.step(&theta1, &grad(&theta1), beta).unwrap();
    for i in 0..3 {
        let t0 = theta0.tensor(0)[i];
        let t1 = t0 - 2.0 * gamma * (t0 - a[i]);
        let t2 = t1 - 2.0 * beta * (t1 - a[i]);
        assert!((theta1.tensor(0)[i] - t1).abs() < 1e-15);
        assert!((theta2.tensor(0)[i] - t2).abs() < 1e-15);
        // contraction toward a: (1 - 2 beta)(1 - 2 gamma)
        assert!((t2 - a[i] - (1.0 - 2.0 * beta) * (1.0 - 2.0 * gamma) * (t0 - a[i])).abs() < 1e-12);
    }
}

#[test]
fn fdrt_keeps_input_when_rounds_only_hurt() {
    let train = vec![common::tiny_domain(0, 0.1, 0.5, 6, 16), common::tiny_domain(1, 0.6, -0.4, 6, 16)];
    let val = vec![common::tiny_domain(0, 0.1, 0.5, 4, 16), common::tiny_domain(1, 0.6, -0.4, 4, 16)];
    // a briefly trained model so that random parameters are clearly worse
    let mut m = small_model(3);
    for _ in 0..30 {
        for d in &train {
            let (_, g) = segmentation_gradients(&m, &Batch::from_dataset(d, &[0, 1, 2, 3, 4, 5]).unwrap()).unwrap();
            m = m.param_update(&g, 0.5).unwrap();
        }
    }
    let mut cfg = FdrtConfig::<f64>::from_train_config(&TrainConfig::default(), 1);
    cfg.max_rounds = 3;
    cfg.epochs = 1;
    let input = mean(&evaluate_domains(&m, &val).unwrap());
    let out = run_fdrt(&m, &train, &val, &cfg, &mut |cur, r| {
        let mut p = cur.params().clone();
        p.scale(-3.0 - r as f64);
        cur.with_params(p)
    })
    .unwrap();
    let after = mean(&evaluate_domains(&out.model, &val).unwrap());
    assert!(after >= input);
    assert_eq!(out.input_score, input);
}

#[test]
fn shipped_benchmark_config_matches_code() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/benchmark.conf");
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(TrainConfig::from_text(&text).unwrap(), metastyle::experiment::benchmark_config());
}
