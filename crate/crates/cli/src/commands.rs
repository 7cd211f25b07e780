use std::fs;
use std::path::{Path, PathBuf};

use gmail_core::data::{generate_world, load_dataset, save_dataset, Dataset, Split, WorldConfig};
use gmail_core::eval::{paired_cosine, pca, project_2d, MetricsReport};
use gmail_core::model::LoraRank;
use gmail_core::numerics::Tensor;
use gmail_core::train::{
    fingerprint_bytes, pretrain_real, run_from_pretrained, run_pipeline, Checkpoint, LossRecord,
    PipelineRun, TrainConfig,
};
use serde_json::json;

use crate::config::RunConfig;
use crate::{Failure, Sweep};

/// Writes through a sibling temp file so a reader never sees half a file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)
        .and_then(|()| fs::rename(&tmp, path))
        .map_err(|e| Failure::io(format!("writing {}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(format!("creating {}: {e}", dir.display())))
}

fn load(path: &Path) -> Result<Dataset, Failure> {
    load_dataset(path).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    })
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>, Failure> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Failure::io(e.to_string()))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let ds = generate_world(&cfg.world)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut tmp = out.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    save_dataset(&ds, &tmp)?;
    fs::rename(&tmp, out).map_err(|e| Failure::io(format!("writing {}: {e}", out.display())))?;
    let count = |s| ds.indices(s).len();
    println!(
        "wrote {} samples to {} (train {}, val {}, test {}; {} concepts, seed {})",
        ds.len(),
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        ds.n_concepts,
        cfg.world.seed
    );
    Ok(())
}

fn curve_csv(curve: &[LossRecord]) -> Result<Vec<u8>, Failure> {
    let rows: Vec<Vec<String>> = curve
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                r.phase.to_string(),
                r.loss.to_string(),
                r.lr.to_string(),
            ]
        })
        .collect();
    csv_bytes(&["step", "phase", "loss", "lr"], &rows)
}

pub fn run(cfg: &RunConfig, data: &Path, skip_align: bool, out: &Path) -> Result<(), Failure> {
    let ds = load(data)?;
    let run = run_pipeline(&ds, &cfg.train, skip_align)?;

    // Everything is encoded before the first write.
    let mut files: Vec<(&str, Vec<u8>)> = vec![("phase_a.gmck", run.pretrained.encode()?)];
    if let Some(b) = &run.aligned {
        files.push(("phase_b.gmck", b.encode()?));
    }
    files.push(("phase_c.gmck", run.final_checkpoint.encode()?));
    files.push(("metrics.json", run.report.to_json().into_bytes()));
    files.push(("metrics.csv", run.report.to_csv().into_bytes()));
    files.push(("loss_curves.csv", curve_csv(&run.curve)?));

    create_dir(out)?;
    for (name, bytes) in &files {
        write_atomic(&out.join(name), bytes)?;
    }
    let r = &run.report;
    println!(
        "phases {} | i2t R@1 {:.4} | top-1 {:.4} | paired cosine {:.4} | gap {:.4} -> {}",
        r.phases,
        r.i2t_r1,
        r.top1_accuracy,
        r.paired_cosine_mean,
        r.modality_gap,
        out.display()
    );
    Ok(())
}

struct Row {
    setting: String,
    n_samples: usize,
    outcome: Result<(PipelineRun, String), Failure>,
}

fn update_rank(run: &PipelineRun) -> String {
    match run.final_checkpoint.model.dims.lora_rank {
        LoraRank::Rank(_) => run.final_checkpoint.model.image.max_update_rank().to_string(),
        LoraRank::Full => "full".into(),
    }
}

fn rows_csv(sweep: Sweep, rows: &[Row]) -> Result<Vec<u8>, Failure> {
    let mut header = vec!["sweep", "setting", "n_samples", "status", "update_rank"];
    header.extend(MetricsReport::field_names());
    let width = header.len();
    let name = match sweep {
        Sweep::Rank => "rank",
        Sweep::Align => "align",
        Sweep::Scale => "scale",
    };
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|row| {
            let mut r = vec![name.to_string(), row.setting.clone(), row.n_samples.to_string()];
            match &row.outcome {
                Ok((run, rank)) => {
                    r.push("ok".into());
                    r.push(rank.clone());
                    r.extend(run.report.csv_values());
                }
                Err(f) => {
                    r.push(format!("failed (exit {}): {}", f.code, f.message));
                    r.resize(width, String::new());
                }
            }
            r
        })
        .collect();
    csv_bytes(&header, &body)
}

fn shared_pretrain(ds: &Dataset, cfg: &TrainConfig, out: &Path) -> Result<(Checkpoint, String), Failure> {
    let a = pretrain_real(ds, cfg)?.checkpoint;
    let bytes = a.encode()?;
    create_dir(out)?;
    write_atomic(&out.join("phase_a.gmck"), &bytes)?;
    Ok((a, fingerprint_bytes(&bytes)))
}

fn checked_row(
    ds: &Dataset,
    pretrained: &Checkpoint,
    cfg: &TrainConfig,
    skip_align: bool,
    phase_a_hash: &str,
) -> Result<(PipelineRun, String), Failure> {
    let run = run_from_pretrained(ds, pretrained, cfg, skip_align)?;
    let after = fingerprint_bytes(&run.pretrained.encode()?);
    if after != phase_a_hash {
        return Err(Failure {
            code: 4,
            message: format!("shared pretrained checkpoint changed ({phase_a_hash} -> {after})"),
        });
    }
    let rank = update_rank(&run);
    Ok((run, rank))
}

fn log_row(row: &Row) {
    match &row.outcome {
        Ok((run, _)) => log::info!(
            "ablation {}: i2t_r1={:.4} top1={:.4} paired_cosine={:.4}",
            row.setting,
            run.report.i2t_r1,
            run.report.top1_accuracy,
            run.report.paired_cosine_mean
        ),
        Err(f) => log::error!("ablation {} failed: {f}", row.setting),
    }
}

pub const SCALE_FACTORS: [f64; 3] = [0.25, 0.5, 1.0];

fn scaled_world(world: &WorldConfig, factor: f64) -> WorldConfig {
    let mut w = world.clone();
    w.samples_per_concept = ((world.samples_per_concept as f64 * factor).round() as usize).max(1);
    w
}

pub fn ablate(cfg: &RunConfig, data: &Path, sweep: Sweep, out: &Path) -> Result<(), Failure> {
    let ds = load(data)?;
    let mut rows = Vec::new();
    let push = |rows: &mut Vec<Row>, row: Row| {
        log_row(&row);
        rows.push(row);
    };
    match sweep {
        Sweep::Rank => {
            let (pretrained, hash) = shared_pretrain(&ds, &cfg.train, out)?;
            for rank in [LoraRank::Rank(2), LoraRank::Rank(4), LoraRank::Rank(6), LoraRank::Full] {
                let mut train = cfg.train.clone();
                train.lora_rank = rank;
                let setting = match rank {
                    LoraRank::Rank(r) => format!("rank={r}"),
                    LoraRank::Full => "rank=full".into(),
                };
                let outcome = checked_row(&ds, &pretrained, &train, false, &hash);
                push(&mut rows, Row { setting, n_samples: ds.len(), outcome });
            }
        }
        Sweep::Align => {
            let (pretrained, hash) = shared_pretrain(&ds, &cfg.train, out)?;
            for (setting, skip) in [("align=on", false), ("align=off", true)] {
                let outcome = checked_row(&ds, &pretrained, &cfg.train, skip, &hash);
                push(&mut rows, Row { setting: setting.into(), n_samples: ds.len(), outcome });
            }
        }
        Sweep::Scale => {
            // Each size is regenerated from the config's world; the data file
            // only has to agree with it on shape.
            if (ds.n_concepts, ds.real_dim, ds.gen_dim, ds.text_dim)
                != (cfg.world.n_concepts, cfg.world.real_dim, cfg.world.gen_dim, cfg.world.text_dim)
            {
                return Err(Failure::config(format!(
                    "{} does not match the config world (concepts/dims)",
                    data.display()
                )));
            }
            for factor in SCALE_FACTORS {
                let world = scaled_world(&cfg.world, factor);
                let setting = format!("m={}", world.samples_per_concept);
                let n_samples = world.n_samples();
                let outcome = generate_world(&world)
                    .map_err(Failure::from)
                    .and_then(|d| run_pipeline(&d, &cfg.train, false).map_err(Failure::from))
                    .map(|run| {
                        let rank = update_rank(&run);
                        (run, rank)
                    });
                push(&mut rows, Row { setting, n_samples, outcome });
            }
        }
    }

    create_dir(out)?;
    let name = match sweep {
        Sweep::Rank => "ablation_rank.csv",
        Sweep::Align => "ablation_align.csv",
        Sweep::Scale => "ablation_scale.csv",
    };
    write_atomic(&out.join(name), &rows_csv(sweep, &rows)?)?;
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    println!("{} rows ({failed} failed) -> {}", rows.len(), out.join(name).display());
    match rows.into_iter().find_map(|r| r.outcome.err()) {
        Some(f) => Err(Failure {
            code: f.code,
            message: format!("{failed} ablation row(s) failed; first: {}", f.message),
        }),
        None => Ok(()),
    }
}

pub fn export_plot(ckpt: &Path, data: &Path, out: &Path) -> Result<(), Failure> {
    let ck = Checkpoint::load(ckpt).map_err(|e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", ckpt.display(), f.message);
        f
    })?;
    let ds = load(data)?;
    let idx = ds.indices(Split::Test);
    let real = ck.model.embed_real(&ds.real(&idx))?;
    let gen = ck.model.embed_gen(&ds.gen(&idx))?;
    let n = idx.len();

    let mut stacked = real.data().to_vec();
    stacked.extend_from_slice(gen.data());
    let all = Tensor::matrix(2 * n, real.cols(), stacked)?;
    let xy = project_2d(&all)?;
    let eigen = pca(&all)?.eigenvalues;

    let labels = ds.labels(&idx);
    let mut proj = Vec::with_capacity(2 * n);
    for (i, row) in (0..2 * n).map(|i| (i, xy.row(i))) {
        let (modality, j) = if i < n { ("real", i) } else { ("gen", i - n) };
        proj.push(vec![
            idx[j].to_string(),
            modality.to_string(),
            row[0].to_string(),
            row[1].to_string(),
            labels[j].to_string(),
        ]);
    }
    let sims: Vec<Vec<String>> = (0..n)
        .map(|j| {
            let one = |t: &Tensor| Tensor::matrix(1, t.cols(), t.row(j).to_vec());
            let c = paired_cosine(&one(&gen)?, &one(&real)?)?.0;
            Ok(vec![idx[j].to_string(), labels[j].to_string(), c.to_string()])
        })
        .collect::<gmail_core::Result<_>>()?;
    let total: f64 = eigen.iter().map(|v| v.max(0.0)).sum();
    let meta = json!({
        "method": "pca",
        "components": 2,
        "n_points": 2 * n,
        "n_real": n,
        "n_gen": n,
        "eigenvalues": [eigen[0], eigen[1]],
        "explained_variance_ratio": [eigen[0] / total, eigen[1] / total],
        "checkpoint_phase": ck.phase.to_string(),
    });

    let files = [
        ("projection.csv", csv_bytes(&["sample_id", "modality", "x", "y", "concept_id"], &proj)?),
        ("sims.csv", csv_bytes(&["sample_id", "concept_id", "cosine"], &sims)?),
        (
            "projection_meta.json",
            serde_json::to_vec_pretty(&meta).map_err(|e| Failure::io(e.to_string()))?,
        ),
    ];
    create_dir(out)?;
    for (name, bytes) in &files {
        write_atomic(&out.join(name), bytes)?;
    }
    println!("projected {} points -> {}", 2 * n, out.display());
    Ok(())
}
