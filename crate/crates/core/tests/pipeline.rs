mod common;

use common::{tiny_cfg, tiny_world};
use gmail_core::data::{generate_world, Split, WorldConfig};
use gmail_core::eval::{evaluate_flows, top1_accuracy};
use gmail_core::loss::{align_loss, Temperature};
use gmail_core::model::{Graph, LoraRank, RealFlowPolicy, Trainable};
use gmail_core::train::{
    align, finetune_downstream, initialize, pretrain_real, run_pipeline, run_stage, Phase,
    PhaseSteps, Stage, TrainConfig,
};
use gmail_core::{Error, ErrorClass};

fn steps(cfg: &TrainConfig, pretrain: usize, align: usize, downstream: usize) -> TrainConfig {
    TrainConfig {
        steps: PhaseSteps {
            pretrain,
            align,
            downstream,
        },
        ..cfg.clone()
    }
}

#[test]
fn zero_pretrain_steps_keep_initialization() {
    let ds = tiny_world(0);
    let cfg = steps(&tiny_cfg(0), 0, 0, 0);
    let init = initialize(&ds, &cfg).unwrap();
    let a = pretrain_real(&ds, &cfg).unwrap();
    assert_eq!(a.checkpoint.model, init.model);
    assert_eq!(a.checkpoint.phase, Phase::Pretrained);
    assert!(a.curve.is_empty());
}

#[test]
fn pretraining_reduces_contrastive_loss_and_is_deterministic() {
    let ds = tiny_world(0);
    let cfg = tiny_cfg(0);
    let a1 = pretrain_real(&ds, &cfg).unwrap();
    let a2 = pretrain_real(&ds, &cfg).unwrap();
    assert_eq!(a1.checkpoint.encode().unwrap(), a2.checkpoint.encode().unwrap());
    let head: f64 = a1.curve[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
    let tail: f64 = a1.curve[a1.curve.len() - 5..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
    assert!(tail < head, "{tail} vs {head}");
}

#[test]
fn phase_order_is_enforced() {
    let ds = tiny_world(0);
    let cfg = tiny_cfg(0);
    let init = initialize(&ds, &cfg).unwrap();
    for err in [
        align(&ds, &init, &cfg).unwrap_err(),
        finetune_downstream(&ds, &init, &cfg).unwrap_err(),
    ] {
        assert!(matches!(err, Error::PhaseOrder { .. }), "{err}");
        assert_eq!(err.class(), ErrorClass::Config);
    }
    let a = pretrain_real(&ds, &cfg).unwrap().checkpoint;
    assert!(matches!(
        run_stage(&ds, a.clone(), &cfg, Stage::A, None),
        Err(Error::PhaseOrder { .. })
    ));
    // a stage in progress cannot be skipped
    let mid = run_stage(&ds, a, &cfg, Stage::B, Some(3)).unwrap().checkpoint;
    assert!(matches!(
        finetune_downstream(&ds, &mid, &cfg),
        Err(Error::PhaseOrder { .. })
    ));
}

#[test]
fn zero_align_steps_make_flows_agree() {
    let ds = tiny_world(2);
    let cfg = tiny_cfg(2);
    let a = pretrain_real(&ds, &cfg).unwrap().checkpoint;
    let b0 = align(&ds, &a, &steps(&cfg, 40, 0, 30)).unwrap().checkpoint;
    let all: Vec<usize> = (0..ds.len()).collect();
    let x = ds.gen(&all);
    assert_eq!(b0.model.embed_gen(&x).unwrap(), b0.model.embed_real(&x).unwrap());
}

#[test]
fn alignment_trains_only_generated_flow() {
    let ds = tiny_world(2);
    let cfg = tiny_cfg(2);
    let a = pretrain_real(&ds, &cfg).unwrap().checkpoint;
    let b = align(&ds, &a, &cfg).unwrap().checkpoint;
    let before = a.model.named_params();
    let after: std::collections::BTreeMap<_, _> = b.model.named_params().into_iter().collect();
    for (name, t) in before {
        let changed = after[&name] != t;
        let trainable = name.starts_with("image.adapter.") || name.starts_with("image.proj_gen.");
        if !trainable {
            assert!(!changed, "{name} moved during alignment");
        }
    }
    let idx = ds.indices(Split::Test);
    assert_eq!(
        a.model.embed_real(&ds.real(&idx)).unwrap(),
        b.model.embed_real(&ds.real(&idx)).unwrap()
    );
}

#[test]
fn frozen_parameters_have_no_gradient_entries() {
    let ds = tiny_world(4);
    let cfg = tiny_cfg(4);
    let a = pretrain_real(&ds, &cfg).unwrap().checkpoint;
    let b = run_stage(&ds, a, &cfg, Stage::B, Some(2)).unwrap().checkpoint;
    let mut g = Graph::new(Trainable::prefixes(["image.adapter.", "image.proj_gen."]));
    let idx: Vec<usize> = (0..8).collect();
    let xg = g.input(ds.gen(&idx));
    let xr = g.input(ds.real(&idx));
    let ge = b.model.encode_gen(&mut g, xg).unwrap();
    let re = b.model.encode_real(&mut g, xr).unwrap();
    let loss = align_loss(g.tape_mut(), ge, re, Temperature::DEFAULT).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(!grads.is_empty());
    for name in grads.keys() {
        assert!(
            name.starts_with("image.adapter.") || name.starts_with("image.proj_gen."),
            "{name}"
        );
    }
    assert_eq!(grads.len(), 2 * 2 + 2);
}

#[test]
fn forward_names_match_stored_parameters() {
    let ds = tiny_world(4);
    for rank in [LoraRank::Rank(2), LoraRank::Full] {
        let cfg = TrainConfig { lora_rank: rank, ..tiny_cfg(4) };
        let ck = initialize(&ds, &cfg).unwrap();
        let mut g = Graph::new(Trainable::prefixes([""]));
        let idx = [0, 1, 2];
        let (xr, xg, t) = (g.input(ds.real(&idx)), g.input(ds.gen(&idx)), g.input(ds.text(&idx)));
        ck.model.encode_base(&mut g, xr).unwrap();
        let e = ck.model.encode_gen(&mut g, xg).unwrap();
        ck.model.encode_text(&mut g, t).unwrap();
        ck.model.head.logits(&mut g, e).unwrap();
        let bound: Vec<&str> = g.trainable_bound().collect();
        let stored: Vec<String> = ck.model.named_params().into_iter().map(|(n, _)| n).collect();
        let mut stored_sorted = stored.clone();
        stored_sorted.sort();
        assert_eq!(bound, stored_sorted);
    }
}

#[test]
fn full_rank_trains_a_backbone_copy() {
    let ds = tiny_world(5);
    let cfg = TrainConfig { lora_rank: LoraRank::Full, ..tiny_cfg(5) };
    let a = pretrain_real(&ds, &cfg).unwrap().checkpoint;
    let a_bytes = a.encode().unwrap();
    let b = align(&ds, &a, &cfg).unwrap().checkpoint;
    assert_eq!(a.encode().unwrap(), a_bytes);
    let copy = b.model.image.gen_backbone.as_ref().unwrap();
    assert_ne!(copy, &b.model.image.backbone);
    assert_eq!(b.model.image.backbone, a.model.image.backbone);
    assert!(b.model.image.adapters.is_empty());
}

#[test]
fn resume_mid_stage_is_bit_identical() {
    let ds = tiny_world(6);
    let cfg = steps(&tiny_cfg(6), 40, 60, 30);
    let full = pretrain_real(&ds, &cfg).unwrap();
    let init = initialize(&ds, &cfg).unwrap();
    let half = run_stage(&ds, init, &cfg, Stage::A, Some(17)).unwrap();
    let reloaded = gmail_core::train::Checkpoint::decode(&half.checkpoint.encode().unwrap()).unwrap();
    let rest = run_stage(&ds, reloaded, &cfg, Stage::A, None).unwrap();
    assert_eq!(rest.checkpoint.encode().unwrap(), full.checkpoint.encode().unwrap());
    let joined: Vec<_> = half.curve.iter().chain(&rest.curve).cloned().collect();
    assert_eq!(joined, full.curve);
}

#[test]
fn resume_requires_matching_config() {
    let ds = tiny_world(6);
    let cfg = tiny_cfg(6);
    let init = initialize(&ds, &cfg).unwrap();
    let half = run_stage(&ds, init, &cfg, Stage::A, Some(5)).unwrap().checkpoint;
    let other = TrainConfig { lr: 5e-4, ..cfg };
    assert!(matches!(
        run_stage(&ds, half, &other, Stage::A, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn divergence_reports_phase_and_step() {
    let ds = tiny_world(0);
    let cfg = TrainConfig {
        temperature: Temperature::new(1e-320).unwrap(),
        ..tiny_cfg(0)
    };
    let err = pretrain_real(&ds, &cfg).unwrap_err();
    assert!(matches!(err, Error::Divergence { phase: 'A', step: 0 }), "{err}");
    assert_eq!(err.class(), ErrorClass::Numeric);
}

#[test]
fn downstream_probe_learns_generated_classes() {
    let ds = tiny_world(7);
    let cfg = steps(&tiny_cfg(7), 40, 60, 400);
    let run = run_pipeline(&ds, &cfg, false).unwrap();
    let idx = ds.indices(Split::Train);
    let emb = run.final_checkpoint.model.embed_gen(&ds.gen(&idx)).unwrap();
    let acc = top1_accuracy(&run.final_checkpoint.model.head, &emb, &ds.labels(&idx)).unwrap();
    assert!(acc > 1.0 / ds.n_concepts as f64, "{acc}");
}

#[test]
fn skip_align_shares_pretraining_and_is_flagged() {
    let ds = tiny_world(8);
    let cfg = tiny_cfg(8);
    let on = run_pipeline(&ds, &cfg, false).unwrap();
    let off = run_pipeline(&ds, &cfg, true).unwrap();
    assert!(on.report.alignment && !off.report.alignment);
    assert_eq!(on.report.phases, "ABC");
    assert_eq!(off.report.phases, "AC");
    assert_eq!(on.report.phase_a_fingerprint, off.report.phase_a_fingerprint);
    assert_eq!(on.pretrained.encode().unwrap(), off.pretrained.encode().unwrap());
    assert!(off.aligned.is_none());
}

#[test]
fn report_is_complete_ordered_and_deterministic() {
    let ds = tiny_world(9);
    let cfg = tiny_cfg(9);
    let r1 = run_pipeline(&ds, &cfg, false).unwrap().report;
    let r2 = run_pipeline(&ds, &cfg, false).unwrap().report;
    assert_eq!(r1.to_json(), r2.to_json());
    for v in [
        r1.i2t_r1, r1.i2t_r5, r1.i2t_r10, r1.t2i_r1, r1.t2i_r5, r1.t2i_r10, r1.top1_accuracy,
    ] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert!(r1.i2t_r1 <= r1.i2t_r5 && r1.i2t_r5 <= r1.i2t_r10);
    assert!(r1.t2i_r1 <= r1.t2i_r5 && r1.t2i_r5 <= r1.t2i_r10);
    assert!((-1.0..=1.0).contains(&r1.paired_cosine_mean));
    let back = gmail_core::eval::MetricsReport::from_json(&r1.to_json()).unwrap();
    assert_eq!(back.to_json(), r1.to_json());
}

#[test]
fn untrained_model_scores_at_chance() {
    let ds = generate_world(&WorldConfig::default()).unwrap();
    let ck = initialize(&ds, &TrainConfig::desk()).unwrap();
    let r = evaluate_flows(&ck, &ds, Split::Test).unwrap();
    let n = r.n_eval as f64;
    let three_sigma = |p: f64| 3.0 * (p * (1.0 - p) / n).sqrt();
    let p_recall = 1.0 / n;
    assert!((r.i2t_r1 - p_recall).abs() <= three_sigma(p_recall).max(1.0 / n), "{}", r.i2t_r1);
    assert!((r.t2i_r1 - p_recall).abs() <= three_sigma(p_recall).max(1.0 / n), "{}", r.t2i_r1);
    let p_acc = 1.0 / ds.n_concepts as f64;
    assert!((r.top1_accuracy - p_acc).abs() <= three_sigma(p_acc), "{}", r.top1_accuracy);
}

#[test]
fn real_flow_policy_with_adapters_moves_real_embeddings() {
    let ds = tiny_world(3);
    let cfg = TrainConfig {
        real_flow_policy: RealFlowPolicy::LoraWithRealProj,
        ..tiny_cfg(3)
    };
    let a = pretrain_real(&ds, &cfg).unwrap().checkpoint;
    let b = align(&ds, &a, &cfg).unwrap().checkpoint;
    let idx = ds.indices(Split::Test);
    assert_ne!(
        a.model.embed_real(&ds.real(&idx)).unwrap(),
        b.model.embed_real(&ds.real(&idx)).unwrap()
    );
}
