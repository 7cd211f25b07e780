use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{batches, Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_flows, MetricsReport};
use crate::loss::{align_loss, clip_loss, symmetric_align_loss};
use crate::model::{GmailModel, Graph, LoraRank, ModelDims, Trainable};
use crate::numerics::{Tensor, Var};
use crate::train::checkpoint::{Checkpoint, Lineage, Phase, Progress, Stage};
use crate::train::config::{lr_at, TrainConfig};
use crate::train::optim::{adamw_step, clip_grad_norm, AdamW, OptimizerState};

/// One optimizer step's loss, as written to `loss_curves.csv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub phase: char,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct StageRun {
    pub checkpoint: Checkpoint,
    pub curve: Vec<LossRecord>,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub report: MetricsReport,
    pub pretrained: Checkpoint,
    pub aligned: Option<Checkpoint>,
    pub final_checkpoint: Checkpoint,
    pub curve: Vec<LossRecord>,
}

const INIT_STREAM: u64 = 0x696e_6974;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for `(seed, stream, n)`; every random draw in training
/// comes from one of these, so any step can be replayed without history.
pub fn derive_seed(seed: u64, stream: u64, n: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream) ^ n)
}

/// Short SHA-256 of the canonical JSON of a config.
pub fn config_fingerprint(cfg: &TrainConfig) -> Result<String> {
    let json = serde_json::to_vec(cfg)?;
    Ok(hex::encode(&Sha256::digest(&json)[..8]))
}

pub fn model_dims(ds: &Dataset, cfg: &TrainConfig) -> Result<ModelDims> {
    if ds.real_dim != ds.gen_dim {
        return Err(Error::Config(format!(
            "real and generated views share a backbone and need equal dims, got {} and {}",
            ds.real_dim, ds.gen_dim
        )));
    }
    Ok(ModelDims {
        image_dim: ds.real_dim,
        text_dim: ds.text_dim,
        hidden_dim: cfg.hidden_dim,
        embed_dim: cfg.embed_dim,
        n_classes: ds.n_concepts,
        lora_rank: cfg.lora_rank,
        lora_alpha: cfg.alpha(),
    })
}

/// Freshly initialized model in phase `Init`.
pub fn initialize(ds: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let dims = model_dims(ds, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_STREAM, 0));
    let model = GmailModel::init(dims, cfg.real_flow_policy, &mut rng)?;
    Ok(Checkpoint {
        phase: Phase::Init,
        model,
        optimizer: OptimizerState::default(),
        config: cfg.clone(),
        progress: None,
        lineage: Lineage::default(),
    })
}

/// Phase A from scratch.
pub fn pretrain_real(ds: &Dataset, cfg: &TrainConfig) -> Result<StageRun> {
    run_stage(ds, initialize(ds, cfg)?, cfg, Stage::A, None)
}

/// Phase B on a pretrained checkpoint.
pub fn align(ds: &Dataset, ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<StageRun> {
    run_stage(ds, ckpt.clone(), cfg, Stage::B, None)
}

/// Phase C on an aligned checkpoint, or on a pretrained one for the
/// no-alignment baseline.
pub fn finetune_downstream(ds: &Dataset, ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<StageRun> {
    run_stage(ds, ckpt.clone(), cfg, Stage::C, None)
}

/// Full pipeline: A, then B unless `skip_align`, then C, then evaluation on
/// the real test split.
pub fn run_pipeline(ds: &Dataset, cfg: &TrainConfig, skip_align: bool) -> Result<PipelineRun> {
    let a = pretrain_real(ds, cfg)?;
    run_from_pretrained(ds, &a.checkpoint, cfg, skip_align).map(|mut run| {
        let mut curve = a.curve;
        curve.append(&mut run.curve);
        run.curve = curve;
        run
    })
}

/// Phases B (optional) and C on top of an existing Phase-A checkpoint.
pub fn run_from_pretrained(
    ds: &Dataset,
    pretrained: &Checkpoint,
    cfg: &TrainConfig,
    skip_align: bool,
) -> Result<PipelineRun> {
    let mut curve = Vec::new();
    let aligned = if skip_align {
        None
    } else {
        let b = align(ds, pretrained, cfg)?;
        curve.extend(b.curve);
        Some(b.checkpoint)
    };
    let c = finetune_downstream(ds, aligned.as_ref().unwrap_or(pretrained), cfg)?;
    curve.extend(c.curve);
    let report = evaluate_flows(&c.checkpoint, ds, Split::Test)?;
    Ok(PipelineRun {
        report,
        pretrained: pretrained.clone(),
        aligned,
        final_checkpoint: c.checkpoint,
        curve,
    })
}

fn steps_for(cfg: &TrainConfig, stage: Stage) -> usize {
    match stage {
        Stage::A => cfg.steps.pretrain,
        Stage::B => cfg.steps.align,
        Stage::C => cfg.steps.downstream,
    }
}

fn trainable_for(cfg: &TrainConfig, stage: Stage) -> Trainable {
    match stage {
        Stage::A => Trainable::prefixes(["image.backbone.", "image.proj_real.", "text."]),
        Stage::B => match cfg.lora_rank {
            LoraRank::Full => Trainable::prefixes(["image.gen_backbone.", "image.proj_gen."]),
            LoraRank::Rank(_) => Trainable::prefixes(["image.adapter.", "image.proj_gen."]),
        },
        Stage::C => Trainable::prefixes(["head."]),
    }
}

fn check_entry(phase: Phase, stage: Stage) -> Result<()> {
    let (ok, expected) = match stage {
        Stage::A => (phase == Phase::Init, "init"),
        Stage::B => (phase == Phase::Pretrained, "pretrained"),
        Stage::C => (
            matches!(phase, Phase::Pretrained | Phase::Aligned),
            "aligned or pretrained",
        ),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::PhaseOrder {
            expected: expected.into(),
            found: phase.to_string(),
        })
    }
}

fn reset_gen_flow(model: &mut GmailModel, cfg: &TrainConfig, stage: Stage) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stage.index(), u64::MAX));
    model.dims.lora_rank = cfg.lora_rank;
    model.dims.lora_alpha = cfg.alpha();
    model.image.reset_gen_flow(cfg.lora_rank, cfg.alpha(), &mut rng);
}

/// Runs (or resumes) one stage. With `stop_after = Some(n)` the stage halts
/// once `n` of its steps are done and the checkpoint records the progress, so
/// a later call picks up exactly where this one left off.
pub fn run_stage(
    ds: &Dataset,
    mut ckpt: Checkpoint,
    cfg: &TrainConfig,
    stage: Stage,
    stop_after: Option<usize>,
) -> Result<StageRun> {
    cfg.validate()?;
    let dims = &ckpt.model.dims;
    if dims.image_dim != ds.real_dim || dims.image_dim != ds.gen_dim || dims.text_dim != ds.text_dim {
        return Err(Error::Config("dataset dims do not match the checkpoint".into()));
    }
    if dims.n_classes != ds.n_concepts {
        return Err(Error::Config("dataset concept count does not match the checkpoint".into()));
    }

    let start = match ckpt.progress {
        Some(p) if p.stage == stage => {
            if ckpt.config != *cfg {
                return Err(Error::Config(
                    "config differs from the one the interrupted stage was started with".into(),
                ));
            }
            p.step
        }
        Some(p) => {
            return Err(Error::PhaseOrder {
                expected: format!("stage {} in progress", stage.tag()),
                found: format!("stage {} in progress", p.stage.tag()),
            })
        }
        None => {
            check_entry(ckpt.phase, stage)?;
            ckpt.model.image.real_flow_policy = cfg.real_flow_policy;
            match (stage, ckpt.phase) {
                (Stage::B, _) | (Stage::C, Phase::Pretrained) => {
                    reset_gen_flow(&mut ckpt.model, cfg, stage)
                }
                _ => {}
            }
            ckpt.optimizer = OptimizerState::default();
            0
        }
    };
    ckpt.config = cfg.clone();

    let total = steps_for(cfg, stage);
    let end = stop_after.map_or(total, |s| s.min(total)).max(start);
    let trainable = trainable_for(cfg, stage);
    let split = Split::Train;
    let opt = AdamW {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    };

    // The probe trains on fixed generated-flow embeddings.
    let probe_inputs = if stage == Stage::C && start < end {
        let all: Vec<usize> = (0..ds.len()).collect();
        Some(ckpt.model.embed_gen(&ds.gen(&all))?)
    } else {
        None
    };

    let mut curve = Vec::with_capacity(end - start);
    let n_batches = ds.indices(split).len().div_ceil(cfg.batch_size);
    if n_batches == 0 && start < end {
        return Err(Error::Config("train split is empty".into()));
    }
    let mut epoch_cache: Option<(usize, Vec<Vec<usize>>)> = None;
    for step in start..end {
        let epoch = step / n_batches;
        if epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let seed = derive_seed(cfg.seed, stage.index(), epoch as u64);
            epoch_cache = Some((epoch, batches(ds, split, cfg.batch_size, seed)?));
        }
        let batch = &epoch_cache.as_ref().unwrap().1[step % n_batches];

        let diverged = |e: Error| match e {
            Error::NonFinite(_) | Error::Degenerate(_) => Error::Divergence {
                phase: stage.tag(),
                step,
            },
            other => other,
        };
        let mut g = Graph::new(trainable.clone());
        let loss = stage_loss(&ckpt.model, &mut g, ds, cfg, stage, batch, probe_inputs.as_ref())
            .map_err(diverged)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Divergence {
                phase: stage.tag(),
                step,
            });
        }
        let mut grads = g.backward(loss).map_err(diverged)?;
        if stage == Stage::B {
            clip_grad_norm(&mut grads, cfg.clip_max_norm)?;
        }
        let lr = lr_at(step, &cfg.schedule, cfg.lr);
        let mut params = ckpt.model.named_params_mut();
        adamw_step(&mut params, &grads, &mut ckpt.optimizer, &opt, lr)?;

        if cfg.log_interval > 0 && step % cfg.log_interval == 0 {
            log::info!("step={step} phase={} loss={value:.6} lr={lr:.6e}", stage.tag());
        }
        curve.push(LossRecord {
            step,
            phase: stage.tag(),
            loss: value,
            lr,
        });
    }

    if end < total {
        ckpt.progress = Some(Progress { stage, step: end });
    } else {
        ckpt.progress = None;
        ckpt.optimizer = OptimizerState::default();
        ckpt.phase = stage.completes();
        ckpt.lineage.stages.push(stage);
        if stage == Stage::A {
            ckpt.lineage.phase_a_fingerprint = None;
            ckpt.lineage.phase_a_fingerprint = Some(ckpt.fingerprint()?);
        }
    }
    Ok(StageRun {
        checkpoint: ckpt,
        curve,
    })
}

fn stage_loss(
    model: &GmailModel,
    g: &mut Graph,
    ds: &Dataset,
    cfg: &TrainConfig,
    stage: Stage,
    batch: &[usize],
    probe_inputs: Option<&Tensor>,
) -> Result<Var> {
    let tau = cfg.temperature;
    match stage {
        Stage::A => {
            let x = g.input(ds.real(batch));
            let t = g.input(ds.text(batch));
            let img = model.encode_base(g, x)?;
            let txt = model.encode_text(g, t)?;
            clip_loss(g.tape_mut(), img, txt, tau)
        }
        Stage::B => {
            let xg = g.input(ds.gen(batch));
            let xr = g.input(ds.real(batch));
            let gen = model.encode_gen(g, xg)?;
            let real = model.encode_real(g, xr)?;
            if cfg.symmetric_align {
                symmetric_align_loss(g.tape_mut(), gen, real, tau)
            } else {
                align_loss(g.tape_mut(), gen, real, tau)
            }
        }
        Stage::C => {
            let emb = probe_inputs
                .ok_or_else(|| Error::Contract("probe embeddings missing".into()))?
                .select_rows(batch);
            let e = g.input(emb);
            let logits = model.head.logits(g, e)?;
            let onehot = one_hot(&ds.labels(batch), model.head.n_classes())?;
            cross_entropy(g, logits, onehot)
        }
    }
}

fn one_hot(labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * n_classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * n_classes + l] = 1.0;
    }
    Tensor::matrix(labels.len(), n_classes, data)
}

/// Mean softmax cross-entropy of `logits` against one-hot targets.
pub fn cross_entropy(g: &mut Graph, logits: Var, onehot: Tensor) -> Result<Var> {
    let t = g.tape_mut();
    let target = t.constant(onehot);
    let lse = t.logsumexp_rows(logits)?;
    let picked = t.mul(target, logits)?;
    let picked = t.sum_rows(picked)?;
    let nll = t.sub(lse, picked)?;
    t.mean(nll)
}
