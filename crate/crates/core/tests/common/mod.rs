#![allow(dead_code)]

use gmail_core::data::{generate_world, Dataset, WorldConfig};
use gmail_core::eval::{collapse_score, paired_cosine, recall_at_k, top1_accuracy};
use gmail_core::loss::{align_loss, Temperature};
use gmail_core::model::{GmailModel, Linear, LinearHead, Graph, LoraRank, ModelDims, RealFlowPolicy, Trainable};
use gmail_core::numerics::{check_gradients, Tensor};
use gmail_core::train::{PhaseSteps, Schedule, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_world(seed: u64) -> Dataset {
    generate_world(&WorldConfig {
        latent_dim: 4,
        real_dim: 10,
        gen_dim: 10,
        text_dim: 8,
        n_concepts: 5,
        samples_per_concept: 20,
        seed,
        ..Default::default()
    })
    .unwrap()
}

pub fn tiny_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        hidden_dim: 16,
        embed_dim: 8,
        schedule: Schedule {
            eta_min: 0.0,
            t0: 20,
            t_mult: 2,
        },
        steps: PhaseSteps {
            pretrain: 40,
            align: 60,
            downstream: 30,
        },
        seed,
        log_interval: 0,
        ..TrainConfig::desk()
    }
}

pub fn random_unit<R: Rng>(rng: &mut R, n: usize, d: usize) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let r: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            r.iter().map(|x| x / norm).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Rows drawn from a handful of distinct unit vectors, so ties are common.
pub fn tied_unit<R: Rng>(rng: &mut R, n: usize, d: usize) -> Tensor {
    let pool = random_unit(rng, 3, d);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| pool.row(rng.random_range(0..3)).to_vec())
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Largest finite-difference error of the generated-flow alignment loss
/// with respect to several adapter and projection parameters and the input.
pub fn full_graph_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let dims = ModelDims {
        image_dim: 12,
        text_dim: 6,
        hidden_dim: 16,
        embed_dim: 8,
        n_classes: 3,
        lora_rank: LoraRank::Rank(4),
        lora_alpha: 4.0,
    };
    let mut model = GmailModel::init(dims, RealFlowPolicy::FrozenBase, &mut r).unwrap();
    for a in &mut model.image.adapters {
        a.up = Tensor::randn(a.up.shape().to_vec(), 0.3, &mut r);
    }
    let x_gen = Tensor::randn(vec![6, 12], 1.0, &mut r);
    let x_real = Tensor::randn(vec![6, 12], 1.0, &mut r);
    let tau = Temperature::DEFAULT;

    let params: Vec<(String, Tensor)> = model
        .named_params()
        .into_iter()
        .filter(|(n, _)| n.starts_with("image.adapter.") || n.starts_with("image.proj_gen."))
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let mut worst = 0.0f64;
    for (name, value) in params.iter().map(|(n, t)| (Some(n.as_str()), t)).chain([(None, &x_gen)]) {
        let err = check_gradients(
            |t, v| {
                let mut g = Graph::from_tape(std::mem::take(t), Trainable::Nothing);
                let xg = match name {
                    Some(n) => {
                        g.bind(n, v);
                        g.input(x_gen.clone())
                    }
                    None => v,
                };
                let xr = g.input(x_real.clone());
                let ge = model.encode_gen(&mut g, xg)?;
                let re = model.encode_real(&mut g, xr)?;
                let l = align_loss(g.tape_mut(), ge, re, tau)?;
                *t = g.into_tape();
                Ok(l)
            },
            value,
            1e-6,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

/// Position of `truth` after a full sort by descending similarity, then
/// ascending index.
pub fn brute_rank(q: &[f64], gallery: &Tensor, truth: usize) -> usize {
    let mut order: Vec<(f64, usize)> = (0..gallery.rows())
        .map(|j| (q.iter().zip(gallery.row(j)).map(|(a, b)| a * b).sum(), j))
        .collect();
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    order.iter().position(|&(_, j)| j == truth).unwrap()
}

pub fn brute_recall(q: &Tensor, g: &Tensor, truth: &[usize], k: usize) -> f64 {
    let hits = (0..q.rows()).filter(|&i| brute_rank(q.row(i), g, truth[i]) < k).count();
    hits as f64 / q.rows() as f64
}

/// One randomized comparison of recall, paired cosine, collapse score and
/// top-1 accuracy against direct loops. Even trials use heavily tied rows.
pub fn oracle_trial<R: Rng>(r: &mut R, trial: usize) -> Result<(), String> {
    let n = r.random_range(2..=50);
    let m = r.random_range(10..=50);
    let d = r.random_range(2..=8);
    let (q, g) = if trial % 2 == 0 {
        (tied_unit(r, n, d), tied_unit(r, m, d))
    } else {
        (random_unit(r, n, d), random_unit(r, m, d))
    };
    let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..m)).collect();
    let ks = [1, 5, 10];
    let got = recall_at_k(&q, &g, &truth, &ks).map_err(|e| e.to_string())?;
    for (k, v) in ks.iter().zip(&got) {
        let want = brute_recall(&q, &g, &truth, *k);
        if *v != want {
            return Err(format!("trial {trial}: recall@{k} {v} vs oracle {want}"));
        }
    }

    let p = tied_unit(r, n, d);
    let (mean, std) = paired_cosine(&q, &p).map_err(|e| e.to_string())?;
    let cos: Vec<f64> = (0..n)
        .map(|i| (0..d).map(|c| q.get(i, c) * p.get(i, c)).sum())
        .collect();
    let om = cos.iter().sum::<f64>() / n as f64;
    let os = (cos.iter().map(|c| (c - om) * (c - om)).sum::<f64>() / n as f64).sqrt();
    if mean != om || std != os {
        return Err(format!("trial {trial}: paired cosine ({mean}, {std}) vs ({om}, {os})"));
    }

    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += (0..d).map(|c| q.get(i, c) * q.get(j, c)).sum::<f64>();
            }
        }
    }
    let want = total / (n * (n - 1)) as f64;
    let got = collapse_score(&q).map_err(|e| e.to_string())?;
    if got != want {
        return Err(format!("trial {trial}: collapse {got} vs {want}"));
    }

    // small integer logits produce frequent ties
    let c = r.random_range(2..6);
    let w: Vec<f64> = (0..d * c).map(|_| r.random_range(-1..=1) as f64).collect();
    let head = LinearHead {
        linear: Linear {
            weight: Tensor::matrix(d, c, w).unwrap(),
            bias: Tensor::zeros(vec![1, c]),
        },
    };
    let emb = Tensor::matrix(n, d, (0..n * d).map(|_| r.random_range(-1..=1) as f64).collect())
        .unwrap();
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let mut correct = 0;
    for i in 0..n {
        let logits: Vec<f64> = (0..c)
            .map(|k| (0..d).map(|j| emb.get(i, j) * head.linear.weight.get(j, k)).sum())
            .collect();
        let best = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pred = logits.iter().position(|&v| v == best).unwrap();
        if pred == labels[i] {
            correct += 1;
        }
    }
    let got = top1_accuracy(&head, &emb, &labels).map_err(|e| e.to_string())?;
    if got != correct as f64 / n as f64 {
        return Err(format!("trial {trial}: accuracy {got} vs {}", correct as f64 / n as f64));
    }
    Ok(())
}
