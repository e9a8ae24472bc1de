//! MoE layer, training protocol and prediction behaviour of the toy classifier.
#![allow(clippy::needless_range_loop)]

use vroute_core::data::{generate_domain, Dataset, DomainKind, SyntheticDomainSpec};
use vroute_core::metrics::argmax;
use vroute_core::model::{
    elbo_loss, frozen_digest, load_checkpoint, predict_with_uncertainty, save_checkpoint, stage1_train, stage2_train,
    MoEClassifier, ModelConfig, PredictOpts, TrainConfig,
};
use vroute_core::numerics::{Graph, RngStream, Role};
use vroute_core::routers::router::PhiNet;
use vroute_core::routers::{decide_top_k, GraphOpts, Mode, RouterConfig, RouterVariant};

fn config(features: usize, n: usize, k: usize, blocks: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        features,
        d: 8,
        expert_hidden: 8,
        blocks,
        classes,
        residual: true,
        router: RouterConfig::new(8, n, k, RouterVariant::Map),
    }
}

fn data(classes: usize, features: usize, n: usize, seed: u64) -> Dataset {
    let spec = SyntheticDomainSpec { num_classes: classes, feature_dim: features, seed, ..Default::default() };
    generate_domain(&spec, n, 0, DomainKind::Id).unwrap()
}

fn separable(n: usize) -> Dataset {
    let spec = SyntheticDomainSpec {
        num_classes: 2,
        modes_per_class: 1,
        feature_dim: 4,
        mode_spread: 2.0,
        noise: 0.3,
        rotation: 0.0,
        ..Default::default()
    };
    generate_domain(&spec, n, 0, DomainKind::Id).unwrap()
}

fn quick_train() -> TrainConfig {
    TrainConfig { epochs_stage1: 3, epochs_stage2: 3, ..Default::default() }
}

#[test]
fn uniform_gates_average_all_experts() {
    let model = MoEClassifier::new(config(4, 3, 3, 1, 2), 1).unwrap();
    let layer = &model.blocks[0].moe;
    let u = [0.3, -0.2, 0.9, 0.1, 0.0, 0.5, -0.7, 0.4];
    let d = decide_top_k(vec![0.0; 3], 3);
    let out = layer.combine(&u, &d).unwrap();
    for j in 0..8 {
        let mean: f64 = layer.experts.iter().map(|e| e.forward(&u).unwrap()[j]).sum::<f64>() / 3.0;
        assert!((out[j] - mean).abs() < 1e-12);
    }
}

#[test]
fn single_expert_passes_through() {
    let model = MoEClassifier::new(config(4, 1, 1, 1, 2), 2).unwrap();
    let layer = &model.blocks[0].moe;
    let u = [1.0, -1.0, 0.5, 0.0, 0.2, 0.3, -0.1, 0.8];
    let d = decide_top_k(vec![0.7], 1);
    assert_eq!(layer.combine(&u, &d).unwrap(), layer.experts[0].forward(&u).unwrap());
}

#[test]
fn two_of_four_matches_hand_assembly() {
    let model = MoEClassifier::new(config(4, 4, 2, 1, 2), 3).unwrap();
    let layer = &model.blocks[0].moe;
    let u = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6, 0.7, 0.8];
    let d = decide_top_k(vec![0.2, 1.5, -0.4, 0.9], 2);
    let (e1, e3) = (layer.experts[1].forward(&u).unwrap(), layer.experts[3].forward(&u).unwrap());
    let (a, b) = (1.5f64.exp(), 0.9f64.exp());
    let (g1, g3) = (a / (a + b), b / (a + b));
    let out = layer.combine(&u, &d).unwrap();
    for j in 0..8 {
        assert!((out[j] - (g1 * e1[j] + g3 * e3[j])).abs() < 1e-12);
    }
}

#[test]
fn zero_beta_is_cross_entropy() {
    let mut model = MoEClassifier::new(config(6, 4, 2, 2, 3), 4).unwrap();
    let cfg = model.config.router.with_variant(RouterVariant::VglrFc);
    model.attach_variational_routers(&[0, 1], &cfg, 4).unwrap();
    let d = data(3, 6, 10, 4);
    let keys: Vec<u64> = (0..10).collect();
    let g = Graph::new();
    let parts = elbo_loss(&g, &model, &d.features, &d.labels, &keys, 0.0, GraphOpts::stage2()).unwrap();
    assert_eq!(g.scalar(parts.total), g.scalar(parts.ce));
    assert!(g.scalar(parts.reg.unwrap()) > 0.0);

    let g2 = Graph::new();
    let fwd = model.forward_graph(&g2, &d.features, &keys, GraphOpts::stage2()).unwrap();
    let logits = g2.value(fwd.logits);
    let ce: f64 = (0..10)
        .map(|i| {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            lse - row[d.labels[i]]
        })
        .sum::<f64>()
        / 10.0;
    assert!((g.scalar(parts.ce) - ce).abs() < 1e-12);
}

#[test]
fn deterministic_layers_add_no_regulariser() {
    let model = MoEClassifier::new(config(6, 4, 2, 2, 3), 5).unwrap();
    let d = data(3, 6, 8, 5);
    let g = Graph::new();
    let keys: Vec<u64> = (0..8).collect();
    let parts = elbo_loss(&g, &model, &d.features, &d.labels, &keys, 1.0, GraphOpts::stage1()).unwrap();
    assert!(parts.reg.is_none());
    assert_eq!(g.scalar(parts.total), g.scalar(parts.ce));
}

/// Full-batch gradient descent on the logistic loss.
fn logistic_accuracy(d: &Dataset) -> f64 {
    let f = d.feature_dim();
    let mut w = vec![0.0; f + 1];
    for _ in 0..500 {
        let mut grad = vec![0.0; f + 1];
        for i in 0..d.len() {
            let x = d.row(i);
            let z: f64 = w[f] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - d.labels[i] as f64;
            for j in 0..f {
                grad[j] += err * x[j];
            }
            grad[f] += err;
        }
        w.iter_mut().zip(&grad).for_each(|(a, g)| *a -= 0.1 * g / d.len() as f64);
    }
    let hits = (0..d.len())
        .filter(|&i| {
            let z: f64 = w[f] + d.row(i).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            (z > 0.0) == (d.labels[i] == 1)
        })
        .count();
    hits as f64 / d.len() as f64
}

#[test]
fn separable_task_is_learned() {
    let all = separable(400);
    let (train, val, _) = all.split(300, 100).unwrap();
    assert!(logistic_accuracy(&train) >= 0.95);
    let mut model = MoEClassifier::new(config(4, 4, 2, 2, 2), 6).unwrap();
    stage1_train(&mut model, &train, &val, &TrainConfig { epochs_stage1: 10, ..Default::default() }).unwrap();
    let preds = predict_with_uncertainty(&model, &train, PredictOpts { seed: 0, samples: None }).unwrap();
    let acc =
        preds.iter().zip(&train.labels).filter(|(p, &y)| argmax(&p.probs) == y).count() as f64 / train.len() as f64;
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn zero_epochs_leave_model_unchanged() {
    let d = data(3, 6, 40, 7);
    let (train, val, _) = d.split(30, 10).unwrap();
    let mut model = MoEClassifier::new(config(6, 4, 2, 2, 3), 7).unwrap();
    let before = model.clone();
    let out = stage1_train(&mut model, &train, &val, &TrainConfig { epochs_stage1: 0, ..Default::default() }).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(model, before);
}

#[test]
fn training_is_deterministic() {
    let d = data(3, 6, 80, 8);
    let (train, val, _) = d.split(60, 20).unwrap();
    let run = || {
        let mut model = MoEClassifier::new(config(6, 4, 2, 2, 3), 8).unwrap();
        let mut log = stage1_train(&mut model, &train, &val, &quick_train()).unwrap().log;
        let cfg = model.config.router.with_variant(RouterVariant::VglrMf);
        model.attach_variational_routers(&[1], &cfg, 8).unwrap();
        log.extend(stage2_train(&mut model, &train, &val, &quick_train()).unwrap().log);
        (log, model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
}

#[test]
fn attachment_is_idempotent() {
    let mut model = MoEClassifier::new(config(6, 4, 2, 3, 3), 9).unwrap();
    let before = model.clone();
    let cfg = model.config.router.with_variant(RouterVariant::VglrFc);
    model.attach_variational_routers(&[], &cfg, 9).unwrap();
    assert_eq!(model, before);
    model.attach_variational_routers(&[0, 2], &cfg, 9).unwrap();
    let count = model.param_count(None);
    model.attach_variational_routers(&[2, 0], &cfg, 9).unwrap();
    assert_eq!(model.param_count(None), count);
    assert_eq!(model.variational_layers, vec![0, 2]);
    // 8·2+2 backbone, 2·4+4 mean, 2·10+10 Cholesky head.
    assert_eq!(model.param_count(Some(Role::Phi)), 2 * (18 + 12 + 30));
}

#[test]
fn every_variational_layer_reports_signals() {
    let mut model = MoEClassifier::new(config(6, 4, 2, 3, 3), 10).unwrap();
    let cfg = model.config.router.with_variant(RouterVariant::VglrMf);
    model.attach_variational_routers(&[0, 1, 2], &cfg, 10).unwrap();
    let d = data(3, 6, 5, 10);
    let traces = model.trace_dataset(&d, 0, &Default::default()).unwrap();
    for t in &traces {
        for dec in &t.decisions {
            assert!(dec.signals.inf_logit_var.unwrap() > 0.0);
            assert!(dec.signals.mc_logit_var.is_some());
        }
    }
}

#[test]
fn map_model_has_null_variational_signals() {
    let model = MoEClassifier::new(config(6, 4, 2, 2, 3), 11).unwrap();
    let d = data(3, 6, 5, 11);
    for p in predict_with_uncertainty(&model, &d, PredictOpts { seed: 0, samples: None }).unwrap() {
        assert!(p.signals.inf_logit_var.is_none() && p.signals.inf_temp.is_none() && p.signals.mc_logit_var.is_none());
        assert!(p.signals.gate_entropy > 0.0);
    }
}

#[test]
fn duplicate_rows_get_identical_outputs() {
    let mut model = MoEClassifier::new(config(6, 4, 2, 2, 3), 12).unwrap();
    let cfg = model.config.router.with_variant(RouterVariant::Vtsr);
    model.attach_variational_routers(&[0, 1], &cfg, 12).unwrap();
    let d = data(3, 6, 3, 12);
    let twice = d.concat(&d).unwrap();
    let p = predict_with_uncertainty(&model, &twice, PredictOpts { seed: 5, samples: None }).unwrap();
    for i in 0..3 {
        assert_eq!(p[i], p[i + 3]);
    }
}

#[test]
fn more_samples_reduce_spread() {
    let mut model = MoEClassifier::new(config(6, 4, 2, 1, 3), 13).unwrap();
    let cfg = model.config.router.with_variant(RouterVariant::VglrFc);
    model.attach_variational_routers(&[0], &cfg, 13).unwrap();
    let router = &model.blocks[0].moe.router;
    let u = [0.4, -0.3, 0.8, 0.1, -0.5, 0.2, 0.6, -0.9];
    let spread = |s: usize| {
        let runs: Vec<Vec<f64>> = (0..20)
            .map(|r| router.route_samples(&u, Mode::Eval, Some(s), &mut RngStream::new(r, 0)).unwrap().probs)
            .collect();
        (0..4)
            .map(|j| {
                let m = runs.iter().map(|p| p[j]).sum::<f64>() / 20.0;
                (runs.iter().map(|p| (p[j] - m).powi(2)).sum::<f64>() / 19.0).sqrt()
            })
            .sum::<f64>()
    };
    let one = router.route_samples(&u, Mode::Eval, Some(1), &mut RngStream::new(0, 0)).unwrap().probs;
    let many = router.route_samples(&u, Mode::Eval, Some(35), &mut RngStream::new(0, 0)).unwrap().probs;
    assert_ne!(one, many);
    assert!(spread(35) < spread(1));
}

fn collapse(model: &mut MoEClassifier, log_scale: f64) {
    for b in &mut model.blocks {
        if let Some(PhiNet::Gaussian { mean, scale, .. }) = &mut b.moe.router.phi {
            mean.w.value = mean.w.value.map(|_| 0.0);
            mean.b.value = mean.b.value.map(|_| 0.0);
            scale.w.value = scale.w.value.map(|_| 0.0);
            let n = b.moe.router.config.n;
            let raw = scale.b.value.data_mut();
            if raw.len() == n {
                raw.fill(log_scale);
            } else {
                raw.fill(0.0);
                (0..n).for_each(|i| raw[i * (i + 1) / 2 + i] = log_scale);
            }
        }
    }
}

#[test]
fn collapsed_posteriors_reproduce_map() {
    let base = MoEClassifier::new(config(6, 4, 2, 2, 3), 14).unwrap();
    let d = data(3, 6, 50, 14);
    let opts = PredictOpts { seed: 3, samples: None };
    let map = predict_with_uncertainty(&base, &d, opts).unwrap();
    for v in [RouterVariant::VglrMf, RouterVariant::VglrFc] {
        let mut model = base.clone();
        model.attach_variational_routers(&[0, 1], &base.config.router.with_variant(v), 14).unwrap();
        collapse(&mut model, 1e-8f64.ln());
        let got = predict_with_uncertainty(&model, &d, opts).unwrap();
        for (a, b) in map.iter().zip(&got) {
            assert_eq!(a.selections, b.selections);
            for (x, y) in a.probs.iter().zip(&b.probs) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn heavy_regulariser_pulls_posterior_to_prior() {
    let d = data(3, 6, 160, 15);
    let (train, val, _) = d.split(120, 40).unwrap();
    let mut model = MoEClassifier::new(config(6, 4, 2, 2, 3), 15).unwrap();
    stage1_train(&mut model, &train, &val, &quick_train()).unwrap();
    let cfg = model.config.router.with_variant(RouterVariant::VglrMf);
    model.attach_variational_routers(&[0, 1], &cfg, 15).unwrap();
    let mean_kl = |m: &MoEClassifier| {
        let traces = m.trace_dataset(&val, 0, &Default::default()).unwrap();
        traces.iter().map(|t| t.decisions.iter().map(|d| d.kl).sum::<f64>() / 2.0).sum::<f64>() / traces.len() as f64
    };
    let before = mean_kl(&model);
    let tc = TrainConfig { beta: 1e3, epochs_stage2: 40, lr_stage2: 1e-2, patience: 40, ..Default::default() };
    stage2_train(&mut model, &train, &val, &tc).unwrap();
    let after = mean_kl(&model);
    assert!(after < 0.01 && after < before, "kl {before} -> {after}");
}

#[test]
fn unregularised_temperature_sharpens() {
    let all = separable(200);
    let (train, val, _) = all.split(150, 50).unwrap();
    let mut model = MoEClassifier::new(config(4, 4, 2, 2, 2), 16).unwrap();
    stage1_train(&mut model, &train, &val, &quick_train()).unwrap();
    let cfg = model.config.router.with_variant(RouterVariant::Vtsr);
    model.attach_variational_routers(&[0, 1], &cfg, 16).unwrap();
    let mean_t = |m: &MoEClassifier| {
        let p = predict_with_uncertainty(m, &val, PredictOpts { seed: 0, samples: None }).unwrap();
        p.iter().map(|x| x.signals.inf_temp.unwrap()).sum::<f64>() / p.len() as f64
    };
    let before = mean_t(&model);
    let tc = TrainConfig { beta: 0.0, epochs_stage2: 10, lr_stage2: 1e-2, patience: 10, ..Default::default() };
    stage2_train(&mut model, &train, &val, &tc).unwrap();
    assert!(mean_t(&model) < before);
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let d = data(3, 6, 60, 17);
    let (train, val, test) = d.split(40, 10).unwrap();
    let mut model = MoEClassifier::new(config(6, 4, 2, 2, 3), 17).unwrap();
    stage1_train(&mut model, &train, &val, &quick_train()).unwrap();
    let cfg = model.config.router.with_variant(RouterVariant::VglrFc);
    model.attach_variational_routers(&[0], &cfg, 17).unwrap();
    stage2_train(&mut model, &train, &val, &quick_train()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    save_checkpoint(&path, &model).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, model);
    assert_eq!(frozen_digest(&back), frozen_digest(&model));
    let opts = PredictOpts { seed: 1, samples: None };
    assert_eq!(
        predict_with_uncertainty(&back, &test, opts).unwrap(),
        predict_with_uncertainty(&model, &test, opts).unwrap()
    );
}

#[test]
fn bad_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    std::fs::write(&path, r#"{"format_version": 99, "model": {}}"#).unwrap();
    assert!(load_checkpoint(&path).is_err());
    std::fs::write(&path, "{}").unwrap();
    assert!(load_checkpoint(&path).is_err());
}
