//! Retrieval, classification and embedding-geometry metrics.
//!
//! Ties are broken by lowest index everywhere so results are exact and
//! reproducible.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::check_unit_rows;
use crate::model::{LinearHead, LoraRank};
use crate::numerics::linalg::symmetric_eigen;
use crate::numerics::Tensor;
use crate::train::{config_fingerprint, Checkpoint};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn same_dim(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "embedding dims differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    Ok(())
}

/// Fraction of queries whose true gallery item is among the top `k` by
/// cosine, for each `k` in `ks`. Gallery items tied with the true one count
/// as ranked ahead of it when their index is lower.
pub fn recall_at_k(query: &Tensor, gallery: &Tensor, truth: &[usize], ks: &[usize]) -> Result<Vec<f64>> {
    check_unit_rows(query, "queries")?;
    check_unit_rows(gallery, "gallery")?;
    same_dim(query, gallery)?;
    let (n, m) = (query.rows(), gallery.rows());
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if truth.len() != n {
        return Err(Error::Contract(format!("{} truth entries for {n} queries", truth.len())));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= m) {
        return Err(Error::Contract(format!("truth index {t} outside gallery of {m}")));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > m) {
        return Err(Error::Contract(format!("k = {k} outside 1..={m}")));
    }

    let mut hits = vec![0usize; ks.len()];
    for (i, &t) in truth.iter().enumerate() {
        let q = query.row(i);
        let sims: Vec<f64> = (0..m).map(|j| dot(q, gallery.row(j))).collect();
        let s_t = sims[t];
        let rank = sims
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > s_t || (s == s_t && j < t))
            .count();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if rank < k {
                *h += 1;
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / n as f64).collect())
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn top1_accuracy(head: &LinearHead, emb: &Tensor, labels: &[usize]) -> Result<f64> {
    if emb.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} embeddings",
            labels.len(),
            emb.rows()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let c = head.n_classes();
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Contract(format!("label {l} outside {c} classes")));
    }
    let logits = head.logits_of(emb)?;
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.row(i)) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean and population standard deviation of row-wise cosines.
pub fn paired_cosine(gen: &Tensor, real: &Tensor) -> Result<(f64, f64)> {
    check_unit_rows(gen, "generated embeddings")?;
    check_unit_rows(real, "real embeddings")?;
    if gen.shape() != real.shape() {
        return Err(Error::Shape(format!(
            "paired embeddings differ in shape: {:?} vs {:?}",
            gen.shape(),
            real.shape()
        )));
    }
    let n = gen.rows();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let cos: Vec<f64> = (0..n).map(|i| dot(gen.row(i), real.row(i))).collect();
    let mean = cos.iter().sum::<f64>() / n as f64;
    let var = cos.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n as f64;
    Ok((mean, var.sqrt()))
}

fn mean_row(t: &Tensor) -> Vec<f64> {
    let mut m = vec![0.0; t.cols()];
    for i in 0..t.rows() {
        for (a, x) in m.iter_mut().zip(t.row(i)) {
            *a += x;
        }
    }
    m.iter_mut().for_each(|a| *a /= t.rows() as f64);
    m
}

/// Distance between the mean rows of two embedding sets.
pub fn modality_gap(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::Shape("embeddings must be matrices".into()));
    }
    same_dim(a, b)?;
    if a.rows() == 0 || b.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let (ma, mb) = (mean_row(a), mean_row(b));
    Ok(ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
}

/// Mean cosine over distinct pairs; 1 means every row is the same.
pub fn collapse_score(emb: &Tensor) -> Result<f64> {
    check_unit_rows(emb, "embeddings")?;
    let n = emb.rows();
    if n < 2 {
        return Err(Error::Contract(format!("collapse score needs at least 2 rows, got {n}")));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += dot(emb.row(i), emb.row(j));
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// Principal directions of a point set, largest variance first.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    /// Row `k` is the `k`-th principal direction.
    pub components: Vec<Vec<f64>>,
}

/// Relative size below which the second principal variance counts as zero.
pub const PCA_DEGENERATE_TOL: f64 = 1e-12;

pub fn pca(emb: &Tensor) -> Result<Pca> {
    let (n, d) = (emb.rows(), emb.cols());
    if n < 3 {
        return Err(Error::Degenerate(format!("projection needs at least 3 points, got {n}")));
    }
    let mean = mean_row(emb);
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let c: Vec<f64> = emb.row(i).iter().zip(&mean).map(|(x, m)| x - m).collect();
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += c[a] * c[b];
            }
        }
    }
    cov.iter_mut().for_each(|v| *v /= n as f64);
    let (values, vectors) = symmetric_eigen(&Tensor::matrix(d, d, cov)?)?;
    let components = (0..d)
        .map(|k| {
            let mut v: Vec<f64> = (0..d).map(|r| vectors[r * d + k]).collect();
            let lead = argmax(&v.iter().map(|x| x.abs()).collect::<Vec<_>>());
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(Pca {
        mean,
        eigenvalues: values,
        components,
    })
}

/// Coordinates on the top two principal directions. Each direction's
/// largest-magnitude loading is made positive.
pub fn project_2d(emb: &Tensor) -> Result<Tensor> {
    if emb.cols() < 2 {
        return Err(Error::Degenerate("need at least 2 dimensions".into()));
    }
    let p = pca(emb)?;
    let top = p.eigenvalues[0].max(0.0);
    if !(p.eigenvalues[1] > PCA_DEGENERATE_TOL * top) || top == 0.0 {
        return Err(Error::Degenerate(format!(
            "covariance has rank < 2 (eigenvalues {:e}, {:e})",
            p.eigenvalues[0], p.eigenvalues[1]
        )));
    }
    let mut out = Vec::with_capacity(emb.rows() * 2);
    for i in 0..emb.rows() {
        let c: Vec<f64> = emb.row(i).iter().zip(&p.mean).map(|(x, m)| x - m).collect();
        out.push(dot(&c, &p.components[0]));
        out.push(dot(&c, &p.components[1]));
    }
    Tensor::matrix(emb.rows(), 2, out)
}

/// Everything measured after a run, flat and in a fixed field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub alignment: bool,
    pub seed: u64,
    pub phases: String,
    pub lora_rank: String,
    pub real_flow_policy: String,
    pub config_fingerprint: String,
    pub phase_a_fingerprint: String,
    pub n_eval: usize,
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub i2t_r10: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub t2i_r10: f64,
    pub top1_accuracy: f64,
    pub paired_cosine_mean: f64,
    pub paired_cosine_std: f64,
    pub modality_gap: f64,
    pub collapse_real: f64,
    pub collapse_gen: f64,
    pub collapse_text: f64,
}

enum Field<'a> {
    Bool(bool),
    Int(u64),
    Str(&'a str),
    Float(f64),
}

impl MetricsReport {
    fn fields(&self) -> Vec<(&'static str, Field<'_>)> {
        use Field::*;
        vec![
            ("alignment", Bool(self.alignment)),
            ("seed", Int(self.seed)),
            ("phases", Str(&self.phases)),
            ("lora_rank", Str(&self.lora_rank)),
            ("real_flow_policy", Str(&self.real_flow_policy)),
            ("config_fingerprint", Str(&self.config_fingerprint)),
            ("phase_a_fingerprint", Str(&self.phase_a_fingerprint)),
            ("n_eval", Int(self.n_eval as u64)),
            ("i2t_r1", Float(self.i2t_r1)),
            ("i2t_r5", Float(self.i2t_r5)),
            ("i2t_r10", Float(self.i2t_r10)),
            ("t2i_r1", Float(self.t2i_r1)),
            ("t2i_r5", Float(self.t2i_r5)),
            ("t2i_r10", Float(self.t2i_r10)),
            ("top1_accuracy", Float(self.top1_accuracy)),
            ("paired_cosine_mean", Float(self.paired_cosine_mean)),
            ("paired_cosine_std", Float(self.paired_cosine_std)),
            ("modality_gap", Float(self.modality_gap)),
            ("collapse_real", Float(self.collapse_real)),
            ("collapse_gen", Float(self.collapse_gen)),
            ("collapse_text", Float(self.collapse_text)),
        ]
    }

    pub fn field_names() -> Vec<&'static str> {
        Self::placeholder().fields().into_iter().map(|(k, _)| k).collect()
    }

    fn placeholder() -> Self {
        Self {
            alignment: false,
            seed: 0,
            phases: String::new(),
            lora_rank: String::new(),
            real_flow_policy: String::new(),
            config_fingerprint: String::new(),
            phase_a_fingerprint: String::new(),
            n_eval: 0,
            i2t_r1: 0.0,
            i2t_r5: 0.0,
            i2t_r10: 0.0,
            t2i_r1: 0.0,
            t2i_r5: 0.0,
            t2i_r10: 0.0,
            top1_accuracy: 0.0,
            paired_cosine_mean: 0.0,
            paired_cosine_std: 0.0,
            modality_gap: 0.0,
            collapse_real: 0.0,
            collapse_gen: 0.0,
            collapse_text: 0.0,
        }
    }

    /// Values in `field_names` order, floats with six decimals.
    pub fn csv_values(&self) -> Vec<String> {
        self.fields()
            .into_iter()
            .map(|(_, v)| match v {
                Field::Bool(b) => b.to_string(),
                Field::Int(i) => i.to_string(),
                Field::Str(s) => s.to_owned(),
                Field::Float(f) => format!("{f:.6}"),
            })
            .collect()
    }

    /// Flat JSON object, one key per line, fixed key order.
    pub fn to_json(&self) -> String {
        let body: Vec<String> = self
            .fields()
            .into_iter()
            .map(|(k, v)| {
                let v = match v {
                    Field::Bool(b) => b.to_string(),
                    Field::Int(i) => i.to_string(),
                    Field::Str(s) => serde_json::Value::from(s).to_string(),
                    Field::Float(f) => format!("{f:.6}"),
                };
                format!("  \"{k}\": {v}")
            })
            .collect();
        format!("{{\n{}\n}}\n", body.join(",\n"))
    }

    /// Header line plus one data row.
    pub fn to_csv(&self) -> String {
        let quote = |s: String| {
            if s.contains([',', '"', '\n']) {
                format!("\"{}\"", s.replace('"', "\"\""))
            } else {
                s
            }
        };
        let values: Vec<String> = self.csv_values().into_iter().map(quote).collect();
        format!("{}\n{}\n", Self::field_names().join(","), values.join(","))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Measures a checkpoint on one split of the real views.
///
/// Retrieval pairs real inputs through the real flow with their texts;
/// accuracy is the probe on real-flow embeddings; the paired-cosine, gap and
/// collapse diagnostics compare the generated flow on generated views with
/// the real flow on real views.
pub fn evaluate_flows(ckpt: &Checkpoint, ds: &Dataset, split: Split) -> Result<MetricsReport> {
    let idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let model = &ckpt.model;
    let real = model.embed_real(&ds.real(&idx))?;
    let gen = model.embed_gen(&ds.gen(&idx))?;
    let text = model.embed_text(&ds.text(&idx))?;
    let labels = ds.labels(&idx);
    let truth: Vec<usize> = (0..idx.len()).collect();
    let ks = [1, 5, 10];
    let i2t = recall_at_k(&real, &text, &truth, &ks)?;
    let t2i = recall_at_k(&text, &real, &truth, &ks)?;
    let (pc_mean, pc_std) = paired_cosine(&gen, &real)?;

    let phases: Vec<String> = ckpt.lineage.stages.iter().map(|s| s.tag().to_string()).collect();
    Ok(MetricsReport {
        alignment: ckpt.lineage.stages.contains(&crate::train::Stage::B),
        seed: ckpt.config.seed,
        phases: phases.join(""),
        lora_rank: match model.dims.lora_rank {
            LoraRank::Rank(r) => r.to_string(),
            LoraRank::Full => "full".into(),
        },
        real_flow_policy: serde_json::to_value(model.image.real_flow_policy)?
            .as_str()
            .unwrap_or_default()
            .to_owned(),
        config_fingerprint: config_fingerprint(&ckpt.config)?,
        phase_a_fingerprint: ckpt.lineage.phase_a_fingerprint.clone().unwrap_or_default(),
        n_eval: idx.len(),
        i2t_r1: i2t[0],
        i2t_r5: i2t[1],
        i2t_r10: i2t[2],
        t2i_r1: t2i[0],
        t2i_r5: t2i[1],
        t2i_r10: t2i[2],
        top1_accuracy: top1_accuracy(&model.head, &real, &labels)?,
        paired_cosine_mean: pc_mean,
        paired_cosine_std: pc_std,
        modality_gap: modality_gap(&gen, &real)?,
        collapse_real: collapse_score(&real)?,
        collapse_gen: collapse_score(&gen)?,
        collapse_text: collapse_score(&text)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rows(rows: &[Vec<f64>]) -> Tensor {
        let rows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.iter().map(|x| x / n).collect()
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn recall_identity_and_ties() {
        let eye = Tensor::identity(4);
        let r = recall_at_k(&eye, &eye, &[0, 1, 2, 3], &[1, 4]).unwrap();
        assert_eq!(r, vec![1.0, 1.0]);

        let same = unit_rows(&vec![vec![1.0, 1.0]; 4]);
        let r = recall_at_k(&same, &same, &[0, 1, 2, 3], &[1, 2, 4]).unwrap();
        assert_eq!(r, vec![0.25, 0.5, 1.0]);
    }

    #[test]
    fn recall_k_beyond_gallery() {
        let eye = Tensor::identity(3);
        assert!(matches!(
            recall_at_k(&eye, &eye, &[0, 1, 2], &[4]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn accuracy_tie_break() {
        let head = LinearHead::zeros(2, 3);
        let emb = unit_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, -1.0]]);
        assert_eq!(top1_accuracy(&head, &emb, &[0, 2, 0, 1]).unwrap(), 0.5);
        assert!(top1_accuracy(&head, &emb, &[0, 3, 0, 1]).is_err());
    }

    #[test]
    fn paired_cosine_extremes() {
        let a = unit_rows(&[vec![1.0, 2.0], vec![-3.0, 1.0], vec![0.5, 0.5]]);
        let (m, s) = paired_cosine(&a, &a).unwrap();
        assert!((m - 1.0).abs() < 1e-12 && s < 1e-7);
        let neg = Tensor::matrix(3, 2, a.data().iter().map(|x| -x).collect()).unwrap();
        let (m, s) = paired_cosine(&a, &neg).unwrap();
        assert!((m + 1.0).abs() < 1e-12 && s < 1e-7);
        assert!(paired_cosine(&a, &Tensor::identity(2)).is_err());
    }

    #[test]
    fn gap_translation() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![-1.0, 0.5, 3.0]]).unwrap();
        assert_eq!(modality_gap(&a, &a).unwrap(), 0.0);
        let c = [0.3, -1.2, 2.0];
        let b = Tensor::from_rows(&[
            a.row(0).iter().zip(&c).map(|(x, y)| x + y).collect(),
            a.row(1).iter().zip(&c).map(|(x, y)| x + y).collect(),
        ])
        .unwrap();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((modality_gap(&a, &b).unwrap() - norm).abs() < 1e-12);
        assert!(matches!(
            modality_gap(&a, &Tensor::zeros(vec![0, 3])),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn collapse_extremes() {
        let same = unit_rows(&vec![vec![0.3, 0.4]; 5]);
        assert!((collapse_score(&same).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(collapse_score(&Tensor::identity(4)).unwrap(), 0.0);
        assert!(collapse_score(&Tensor::identity(1)).is_err());
    }

    #[test]
    fn projection_preserves_planar_distances() {
        // points spanned by two orthonormal directions in 5 dims
        let u = [0.6, 0.0, 0.8, 0.0, 0.0];
        let v = [0.0, 1.0, 0.0, 0.0, 0.0];
        let coeffs = [(0.0, 0.0), (1.0, 2.0), (-2.0, 0.5), (3.0, -1.0), (0.5, 0.7)];
        let rows: Vec<Vec<f64>> = coeffs
            .iter()
            .map(|(a, b)| (0..5).map(|k| a * u[k] + b * v[k] + 1.0).collect())
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let p = project_2d(&x).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let d_in: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                let d_out: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                assert!((d_in.sqrt() - d_out.sqrt()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projection_rejects_collinear() {
        let x = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert!(matches!(project_2d(&x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn report_json_csv_round_trip() {
        let mut r = MetricsReport::placeholder();
        r.alignment = true;
        r.phases = "ABC".into();
        r.i2t_r1 = 0.1234567;
        let json = r.to_json();
        assert!(json.contains("\"i2t_r1\": 0.123457"));
        let back = MetricsReport::from_json(&json).unwrap();
        assert_eq!(back.i2t_r1, 0.123457);
        assert!(back.alignment);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    }
}
