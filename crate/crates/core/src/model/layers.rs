use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::graph::Graph;
use crate::numerics::linalg::numerical_rank;
use crate::numerics::tensor::matmul_values;
use crate::numerics::{Tensor, Var};

/// Relative singular-value cutoff for [`LoraAdapter::effective_update_rank`].
pub const RANK_REL_TOL: f64 = 1e-8;

/// Visits named parameters in a fixed order.
pub trait Parameterized {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);
}

/// Affine map stored input-major: `y = x·W + b` with `W: d_in×d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(vec![d_in, d_out], (1.0 / d_in as f64).sqrt(), rng),
            bias: Tensor::zeros(vec![1, d_out]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        prefix: &str,
        x: Var,
        adapter: Option<(&LoraAdapter, &str)>,
    ) -> Result<Var> {
        let w = g.param(&format!("{prefix}.weight"), &self.weight);
        let b = g.param(&format!("{prefix}.bias"), &self.bias);
        let mut y = g.tape_mut().matmul(x, w)?;
        if let Some((lora, lprefix)) = adapter {
            let delta = lora.forward(g, lprefix, x)?;
            y = g.tape_mut().add(y, delta)?;
        }
        add_bias(g, y, b)
    }
}

/// Adds a `1×n` bias to every row of `y` through an explicit ones column.
pub(crate) fn add_bias(g: &mut Graph, y: Var, bias: Var) -> Result<Var> {
    let rows = g.value(y).rows();
    let ones = g.input(Tensor::ones(vec![rows, 1]));
    let spread = g.tape_mut().matmul(ones, bias)?;
    g.tape_mut().add(y, spread)
}

impl Parameterized for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

/// Stack of linear layers with `tanh` between consecutive layers and no
/// activation after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    pub layers: Vec<Linear>,
}

impl MlpEncoder {
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Runs the stack; `adapters`, when given, supplies one adapter per layer.
    pub fn forward(
        &self,
        g: &mut Graph,
        prefix: &str,
        x: Var,
        adapters: Option<(&[LoraAdapter], &str)>,
    ) -> Result<Var> {
        let d = g.value(x).cols();
        if g.value(x).shape().len() != 2 || d != self.in_dim() {
            return Err(Error::Shape(format!(
                "{prefix}: input has {d} features, encoder expects {}",
                self.in_dim()
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let lp = format!("{prefix}.{i}");
            let adapter = adapters.map(|(a, ap)| (&a[i], format!("{ap}.{i}")));
            h = layer.forward(
                g,
                &lp,
                h,
                adapter.as_ref().map(|(a, n)| (*a, n.as_str())),
            )?;
            if i < last {
                h = g.tape_mut().tanh(h)?;
            }
        }
        Ok(h)
    }
}

impl Parameterized for MlpEncoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.{i}"), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.{i}"), out);
        }
    }
}

/// Adapter rank: a positive integer, or full fine-tuning of a cloned backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LoraRank {
    Rank(usize),
    #[serde(with = "full_tag")]
    Full,
}

mod full_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("full")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s.eq_ignore_ascii_case("full") {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!(
                "expected a positive integer or \"full\", got {s:?}"
            )))
        }
    }
}

impl std::fmt::Display for LoraRank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LoraRank::Rank(r) => write!(f, "{r}"),
            LoraRank::Full => f.write_str("full"),
        }
    }
}

/// Low-rank update `ΔW = (α/r)·down·up` added to a frozen linear layer.
///
/// Stored input-major like [`Linear`]: `down: d_in×r`, `up: r×d_out`.
/// `up` starts at zero so a fresh adapter leaves its layer unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub down: Tensor,
    pub up: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn init<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            down: Tensor::randn(vec![d_in, rank], (1.0 / d_in as f64).sqrt(), rng),
            up: Tensor::zeros(vec![rank, d_out]),
            rank,
            alpha,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(α/r)·(x·down)·up` recorded on the graph.
    pub fn forward(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let down = g.param(&format!("{prefix}.down"), &self.down);
        let up = g.param(&format!("{prefix}.up"), &self.up);
        let t = g.tape_mut();
        let h = t.matmul(x, down)?;
        let h = t.matmul(h, up)?;
        if self.scale() == 1.0 {
            Ok(h)
        } else {
            t.scale(h, self.scale())
        }
    }

    /// The dense update this adapter adds to its layer's weight.
    pub fn delta(&self) -> Tensor {
        let p = matmul_values(&self.down, &self.up).expect("adapter factors chain");
        if self.scale() == 1.0 {
            return p;
        }
        let s = self.scale();
        Tensor::new(p.shape().to_vec(), p.data().iter().map(|v| s * v).collect())
            .expect("scaled update stays finite")
    }

    /// Numerical rank of the dense update; never exceeds `rank`.
    pub fn effective_update_rank(&self) -> usize {
        numerical_rank(&self.delta(), RANK_REL_TOL)
    }
}

impl Parameterized for LoraAdapter {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.down"), &self.down));
        out.push((format!("{prefix}.up"), &self.up));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.down"), &mut self.down));
        out.push((format!("{prefix}.up"), &mut self.up));
    }
}

/// Affine projection into the embedding space followed by row normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub linear: Linear,
}

impl ProjectionHead {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_emb: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::init(d_in, d_emb, rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, h: Var) -> Result<Var> {
        let y = self.linear.forward(g, prefix, h, None)?;
        g.tape_mut().l2_normalize_rows(y)
    }
}

impl Parameterized for ProjectionHead {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.linear.visit(prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.linear.visit_mut(prefix, out);
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn fresh_adapter_has_rank_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = LoraAdapter::init(8, 6, 3, 3.0, &mut rng);
        assert_eq!(a.effective_update_rank(), 0);
    }

    #[test]
    fn unit_scale_adapter_contribution_is_up_down_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = LoraAdapter::init(5, 4, 2, 2.0, &mut rng);
        a.up = Tensor::randn(vec![2, 4], 1.0, &mut rng);
        let x = Tensor::randn(vec![3, 5], 1.0, &mut rng);

        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let out = a.forward(&mut g, "a", xv).unwrap();

        // direct evaluation: (x·down)·up, element by element
        for i in 0..3 {
            for j in 0..4 {
                let mut want = 0.0;
                for r in 0..2 {
                    let xd: f64 = (0..5).map(|k| x.get(i, k) * a.down.get(k, r)).sum();
                    want += xd * a.up.get(r, j);
                }
                assert!((g.value(out).get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_serde() {
        let r: LoraRank = serde_json::from_str("4").unwrap();
        assert_eq!(r, LoraRank::Rank(4));
        let f: LoraRank = serde_json::from_str("\"full\"").unwrap();
        assert_eq!(f, LoraRank::Full);
        assert_eq!(serde_json::to_string(&LoraRank::Full).unwrap(), "\"full\"");
        assert!(serde_json::from_str::<LoraRank>("\"half\"").is_err());
    }
}
