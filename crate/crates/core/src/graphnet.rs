//! Multivariate graph-attention forecaster.
//!
//! Node embeddings `V` define a top-K cosine-similarity graph with forced
//! self-loops. One attention layer mixes the transformed lookbacks of
//! neighbouring variables and a head shared by all nodes maps each node's
//! features, gated by its embedding, to an `H`-step forecast:
//!
//! ```text
//! x̃_i  = x_i·W + c                      g_i = v_i ⊕ x̃_i
//! Π_ij = leaky_relu(a·(g_i ⊕ g_j))       α = softmax of Π over A's ones, per row
//! z_i  = relu(Σ_j α_ij x̃_j)             ŷ_i = (v_i ∘ z_i)·U + u
//! ```

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ensure_parent, WindowBatch};
use crate::error::{Error, Result};
use crate::numcore::{Checkpoint, ParamId, ParamStore, Tape, Tensor, Var, LEAKY_RELU_SLOPE};
use crate::training::{fit, predict, Forecaster, Predictor, TrainReport, TrainingConfig};

pub const TOP_K_GRID: [usize; 6] = [1, 3, 6, 9, 12, 15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    pub width: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub top_k: usize,
    #[serde(default = "default_emb")]
    pub emb: usize,
    #[serde(default = "default_true")]
    pub input_bias: bool,
}

fn default_emb() -> usize {
    128
}
fn default_true() -> bool {
    true
}

impl GraphConfig {
    pub fn new(width: usize, lookback: usize, horizon: usize, top_k: usize) -> Self {
        Self {
            width,
            lookback,
            horizon,
            top_k,
            emb: default_emb(),
            input_bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.lookback == 0 || self.horizon == 0 || self.emb == 0 {
            return Err(Error::Data("graph width, lookback, horizon and emb must be positive".into()));
        }
        let ok = if self.width == 1 {
            self.top_k <= 1
        } else {
            (1..self.width).contains(&self.top_k)
        };
        if !ok {
            return Err(Error::Data(format!(
                "top_k {} outside 1..={} for {} variables",
                self.top_k,
                self.width.saturating_sub(1).max(1),
                self.width
            )));
        }
        Ok(())
    }

    /// `D·Emb + Emb·L (+Emb) + 4·Emb + Emb·H + H`.
    pub fn parameter_count(&self) -> usize {
        let e = self.emb;
        self.width * e
            + e * self.lookback
            + if self.input_bias { e } else { 0 }
            + 4 * e
            + e * self.horizon
            + self.horizon
    }
}

/// `e_ij = v_i·v_j / (‖v_i‖‖v_j‖)` for `V: [D, Emb]`.
pub fn cosine_similarity(v: &Tensor) -> Result<Tensor> {
    let (d, e) = (v.shape()[0], v.shape()[1]);
    let rows: Vec<&[f64]> = v.data().chunks(e).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::ZeroNorm(i));
    }
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
            out[i * d + j] = dot / (norms[i] * norms[j]);
        }
    }
    Tensor::new(vec![d, d], out)
}

/// Row `i` keeps the `top_k` most similar other nodes (ties to the lower
/// index) plus itself. Returns a row-major `D×D` mask.
pub fn build_adjacency(similarity: &Tensor, top_k: usize) -> Vec<bool> {
    let d = similarity.shape()[0];
    let k = top_k.min(d.saturating_sub(1));
    let mut mask = vec![false; d * d];
    for i in 0..d {
        let row = &similarity.data()[i * d..(i + 1) * d];
        let mut candidates: Vec<usize> = (0..d).filter(|&j| j != i).collect();
        candidates.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in &candidates[..k] {
            mask[i * d + j] = true;
        }
        mask[i * d + i] = true;
    }
    mask
}

/// Embeddings, their similarities and the adjacency derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorGraph {
    pub embeddings: Tensor,
    pub similarity: Tensor,
    pub adjacency: Vec<bool>,
}

impl SensorGraph {
    pub fn from_embeddings(embeddings: &Tensor, top_k: usize) -> Result<Self> {
        let similarity = cosine_similarity(embeddings)?;
        let adjacency = build_adjacency(&similarity, top_k);
        Ok(Self {
            embeddings: embeddings.clone(),
            similarity,
            adjacency,
        })
    }

    pub fn width(&self) -> usize {
        self.similarity.shape()[0]
    }

    pub fn neighbours(&self, i: usize) -> Vec<usize> {
        let d = self.width();
        (0..d).filter(|&j| self.adjacency[i * d + j]).collect()
    }

    /// `source,target,similarity` rows for every edge `i → j` with `j ≠ i`.
    pub fn write_edge_list<W: Write>(&self, writer: W, names: &[String]) -> Result<()> {
        let d = self.width();
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["source", "target", "similarity"])?;
        for i in 0..d {
            for j in 0..d {
                if i != j && self.adjacency[i * d + j] {
                    w.write_record([
                        names[i].as_str(),
                        names[j].as_str(),
                        &format!("{}", self.similarity.data()[i * d + j]),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Ids {
    v: ParamId,
    w: ParamId,
    w_bias: Option<ParamId>,
    a: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct GraphModel {
    config: GraphConfig,
    store: ParamStore,
    ids: Ids,
    mask: Arc<[bool]>,
}

/// Intermediate tensors of one forward pass.
pub struct GraphForward {
    pub alpha: Var,
    pub z: Var,
    pub forecast: Var,
}

impl GraphModel {
    pub fn build(config: GraphConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, e, l, h) = (config.width, config.emb, config.lookback, config.horizon);
        let mut store = ParamStore::new();
        let mut v: Vec<f64> = (0..d * e).map(|_| StandardNormal.sample(&mut rng)).collect();
        for row in v.chunks_mut(e) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let v = store.add("V", Tensor::new(vec![d, e], v)?);
        let w = store.add_uniform("W", &[l, e], l, &mut rng);
        let w_bias = config.input_bias.then(|| store.add_uniform("W.bias", &[e], l, &mut rng));
        let a = store.add_uniform("a", &[4, e], 4 * e, &mut rng);
        let head_w = store.add_uniform("head.w", &[e, h], e, &mut rng);
        let head_b = store.add_uniform("head.b", &[h], e, &mut rng);
        let mut model = Self {
            config,
            store,
            ids: Ids {
                v,
                w,
                w_bias,
                a,
                head_w,
                head_b,
            },
            mask: Arc::from(vec![true; d * d]),
        };
        model.rebuild_graph()?;
        Ok(model)
    }

    pub fn config(&self) -> &GraphConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    pub fn embeddings(&self) -> &Tensor {
        self.store.get(self.ids.v)
    }

    pub fn adjacency(&self) -> &[bool] {
        &self.mask
    }

    pub fn graph(&self) -> Result<SensorGraph> {
        SensorGraph::from_embeddings(self.embeddings(), self.config.top_k)
    }

    /// Recomputes the adjacency from the current embeddings.
    pub fn rebuild_graph(&mut self) -> Result<()> {
        let graph = self.graph()?;
        self.mask = Arc::from(graph.adjacency);
        Ok(())
    }

    /// Overrides one parameter tensor by name.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .store
            .find(name)
            .ok_or_else(|| Error::Data(format!("no parameter `{name}`")))?;
        self.store.set(id, value)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.store.find(name).map(|id| self.store.get(id))
    }

    pub fn forward_parts(&self, tape: &mut Tape, x: Var) -> Result<GraphForward> {
        let s = tape.shape(x).to_vec();
        let c = self.config;
        if s.len() != 3 || s[1] != c.width || s[2] != c.lookback {
            return Err(Error::Shape {
                op: "graph_forward",
                left: s,
                right: vec![c.width, c.lookback],
            });
        }
        let v = tape.param(&self.store, self.ids.v);
        let w = tape.param(&self.store, self.ids.w);
        let a = tape.param(&self.store, self.ids.a);
        let head_w = tape.param(&self.store, self.ids.head_w);
        let head_b = tape.param(&self.store, self.ids.head_b);

        let mut xw = tape.matmul(x, w)?;
        if let Some(bias) = self.ids.w_bias {
            let bias = tape.param(&self.store, bias);
            xw = tape.add_bcast(xw, bias)?;
        }
        let a_t = tape.transpose(a)?;
        let xa = tape.matmul(xw, a_t)?;
        let va = tape.matmul(v, a_t)?;
        let s_x = tape.select_last(xa, 1)?;
        let s_v = tape.select_last(va, 0)?;
        let t_x = tape.select_last(xa, 3)?;
        let t_v = tape.select_last(va, 2)?;
        let src = tape.add_bcast(s_x, s_v)?;
        let dst = tape.add_bcast(t_x, t_v)?;
        let pi = tape.outer_sum(src, dst)?;
        let pi = tape.leaky_relu(pi, LEAKY_RELU_SLOPE)?;
        let alpha = tape.masked_softmax(pi, self.mask.clone())?;
        let mixed = tape.matmul(alpha, xw)?;
        let z = tape.relu(mixed)?;
        let gated = tape.mul_bcast(z, v)?;
        let y = tape.matmul(gated, head_w)?;
        let forecast = tape.add_bcast(y, head_b)?;
        Ok(GraphForward { alpha, z, forecast })
    }

    /// Plain-loop evaluation of the forward pass, independent of the tape;
    /// returns `(Z, Ŷ)`.
    #[allow(clippy::needless_range_loop)]
    pub fn reference_forward(&self, x: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let c = self.config;
        let (b, d, l, e, h) = (x.shape()[0], c.width, c.lookback, c.emb, c.horizon);
        let p = |id: ParamId| self.store.get(id).data();
        let (v, w, a, hw, hb) = (p(self.ids.v), p(self.ids.w), p(self.ids.a), p(self.ids.head_w), p(self.ids.head_b));
        let bias = self.ids.w_bias.map(p);
        let mut z_out = vec![0.0; b * d * e];
        let mut y_out = vec![0.0; b * d * h];
        for n in 0..b {
            let mut xt = vec![vec![0.0; e]; d];
            for i in 0..d {
                for k in 0..e {
                    let mut acc = bias.map_or(0.0, |bb| bb[k]);
                    for t in 0..l {
                        acc += x.data()[(n * d + i) * l + t] * w[t * e + k];
                    }
                    xt[i][k] = acc;
                }
            }
            for i in 0..d {
                let mut logits = vec![f64::NEG_INFINITY; d];
                for j in 0..d {
                    if !self.mask[i * d + j] {
                        continue;
                    }
                    let mut s = 0.0;
                    for k in 0..e {
                        s += a[k] * v[i * e + k]
                            + a[e + k] * xt[i][k]
                            + a[2 * e + k] * v[j * e + k]
                            + a[3 * e + k] * xt[j][k];
                    }
                    logits[j] = if s > 0.0 { s } else { LEAKY_RELU_SLOPE * s };
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = logits
                    .iter()
                    .map(|&s| if s == f64::NEG_INFINITY { 0.0 } else { (s - max).exp() })
                    .collect();
                let total: f64 = weights.iter().sum();
                for k in 0..e {
                    let mut acc = 0.0;
                    for j in 0..d {
                        acc += weights[j] / total * xt[j][k];
                    }
                    z_out[(n * d + i) * e + k] = acc.max(0.0);
                }
                for o in 0..h {
                    let mut acc = hb[o];
                    for k in 0..e {
                        acc += v[i * e + k] * z_out[(n * d + i) * e + k] * hw[k * h + o];
                    }
                    y_out[(n * d + i) * h + o] = acc;
                }
            }
        }
        (z_out, y_out)
    }

    pub fn to_checkpoint(&self, variable_names: &[String], seed: u64) -> Checkpoint {
        let d = self.config.width;
        let neighbours: Vec<Vec<usize>> = (0..d)
            .map(|i| (0..d).filter(|&j| self.mask[i * d + j]).collect())
            .collect();
        Checkpoint::from_store(
            serde_json::json!({
                "kind": "gnn",
                "config": self.config,
                "variables": variable_names,
                "adjacency": neighbours,
            }),
            seed,
            &self.store,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, Vec<String>)> {
        let field = |name: &str| {
            ckpt.architecture
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("graph checkpoint lacks `{name}`")))
        };
        let config: GraphConfig = serde_json::from_value(field("config")?)
            .map_err(|e| Error::Checkpoint(format!("bad graph config: {e}")))?;
        let names: Vec<String> = serde_json::from_value(field("variables")?)
            .map_err(|e| Error::Checkpoint(format!("bad variable list: {e}")))?;
        let mut model = Self::build(config, 0)?;
        model.store.load_named(&ckpt.tensors)?;
        model.rebuild_graph()?;
        Ok((model, names))
    }

    pub fn save(&self, path: &Path, variable_names: &[String], seed: u64) -> Result<()> {
        self.to_checkpoint(variable_names, seed).save(path)?;
        let edges = path.with_extension("edges.csv");
        ensure_parent(&edges)?;
        self.graph()?
            .write_edge_list(std::fs::File::create(edges)?, variable_names)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl Forecaster for GraphModel {
    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, tape: &mut Tape, inputs: Var) -> Result<Var> {
        Ok(self.forward_parts(tape, inputs)?.forecast)
    }

    fn on_epoch_start(&mut self) -> Result<()> {
        self.rebuild_graph()
    }
}

impl Predictor for GraphModel {
    fn width(&self) -> usize {
        self.config.width
    }

    fn lookback(&self) -> usize {
        self.config.lookback
    }

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        predict(self, inputs)
    }
}

pub fn train(
    windows: &WindowBatch,
    config: GraphConfig,
    training: &TrainingConfig,
    seed: u64,
) -> Result<(GraphModel, TrainReport)> {
    if windows.width() != config.width
        || windows.lookback() != config.lookback
        || windows.horizon() != config.horizon
    {
        return Err(Error::Data(format!(
            "windows are {}×{}×{}, model expects {}×{}×{}",
            windows.width(),
            windows.lookback(),
            windows.horizon(),
            config.width,
            config.lookback,
            config.horizon
        )));
    }
    let mut model = GraphModel::build(config, seed)?;
    let report = fit(&mut model, windows, training, seed)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) const TABLE_COUNTS: [(usize, usize, usize); 6] = [
        (10, 3, 19_587),
        (20, 5, 21_125),
        (50, 10, 25_610),
        (100, 20, 33_300),
        (200, 50, 49_970),
        (500, 100, 94_820),
    ];

    fn v3() -> Tensor {
        Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.9, 0.1, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let e = cosine_similarity(&v3()).unwrap();
        let at = |i: usize, j: usize| e.data()[i * 3 + j];
        assert!((at(0, 1) - 0.9 / (0.82f64).sqrt()).abs() < 1e-12);
        assert!((at(0, 1) - 0.9939).abs() < 1e-4);
        assert_eq!(at(0, 2), 0.0);
        assert!((at(1, 2) - 0.1104).abs() < 1e-4);
        assert!((at(1, 1) - 1.0).abs() < 1e-15);
        let anti = Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, -2.0]).unwrap();
        assert!((cosine_similarity(&anti).unwrap().data()[1] + 1.0).abs() < 1e-15);
        let zero = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(cosine_similarity(&zero), Err(Error::ZeroNorm(1))));
    }

    #[test]
    fn adjacency_examples() {
        let g = SensorGraph::from_embeddings(&v3(), 1).unwrap();
        assert_eq!(g.neighbours(0), vec![0, 1]);
        assert_eq!(g.neighbours(1), vec![0, 1]);
        assert_eq!(g.neighbours(2), vec![1, 2]);
        assert!(build_adjacency(&cosine_similarity(&v3()).unwrap(), 2).iter().all(|&x| x));
        assert_eq!(build_adjacency(&Tensor::ones(&[1, 1]), 0), vec![true]);
        // equal similarities: lower index wins
        assert_eq!(build_adjacency(&Tensor::ones(&[3, 3]), 1)[2 * 3..], [true, false, true]);
    }

    #[test]
    fn parameter_counts() {
        for (l, h, table) in TABLE_COUNTS {
            let mut c = GraphConfig::new(131, l, h, 1);
            let biased = c.parameter_count();
            c.input_bias = false;
            let plain = c.parameter_count();
            assert_eq!(biased, plain + 128);
            assert!((biased as f64 - table as f64).abs() <= 0.05 * table as f64);
        }
        assert_eq!(GraphConfig::new(131, 10, 3, 1).parameter_count() - 128, 18_947);
        assert_eq!(GraphConfig::new(131, 500, 100, 1).parameter_count() - 128, 94_180);
        let tiny = GraphConfig {
            emb: 2,
            input_bias: false,
            ..GraphConfig::new(1, 2, 1, 0)
        };
        assert_eq!(tiny.parameter_count(), 17);
        assert_eq!(GraphModel::build(tiny, 0).unwrap().parameter_count(), 17);
        assert!(GraphConfig::new(16, 10, 3, 16).validate().is_err());
    }

    fn random_model(rng: &mut ChaCha8Rng, d: usize, e: usize, l: usize, h: usize, k: usize) -> GraphModel {
        let c = GraphConfig {
            emb: e,
            ..GraphConfig::new(d, l, h, k)
        };
        GraphModel::build(c, rng.random()).unwrap()
    }

    fn run(m: &GraphModel, x: &Tensor) -> (Tensor, Tensor, Tensor) {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = m.forward_parts(&mut tape, xv).unwrap();
        (tape.value(f.alpha).clone(), tape.value(f.z).clone(), tape.value(f.forecast).clone())
    }

    #[test]
    fn forward_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let d = rng.random_range(1..5);
            let k = if d == 1 { 0 } else { rng.random_range(1..d) };
            let (e, l, h) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..3));
            let m = random_model(&mut rng, d, e, l, h, k);
            let x = Tensor::from_fn(&[2, d, m.config.lookback], |_| rng.random_range(-1.0..1.0));
            let (alpha, z, y) = run(&m, &x);
            let (z_ref, y_ref) = m.reference_forward(&x);
            assert!(z.data().iter().zip(&z_ref).all(|(a, b)| (a - b).abs() < 1e-10));
            assert!(y.data().iter().zip(&y_ref).all(|(a, b)| (a - b).abs() < 1e-10));
            for (row_i, row) in alpha.data().chunks(d).enumerate() {
                let i = row_i % d;
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for (j, &a) in row.iter().enumerate() {
                    assert_eq!(a == 0.0 && !m.adjacency()[i * d + j], !m.adjacency()[i * d + j]);
                }
            }
        }
    }

    #[test]
    fn single_node_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_model(&mut rng, 1, 3, 2, 1, 0);
        let x = Tensor::from_fn(&[2, 1, 2], |i| i as f64 - 1.5);
        let (alpha, z, _) = run(&m, &x);
        assert!(alpha.data().iter().all(|&a| a == 1.0));
        let (w, bias) = (m.param("W").unwrap(), m.param("W.bias").unwrap());
        for n in 0..2 {
            for k in 0..3 {
                let pre = bias.data()[k] + (0..2).map(|t| x.data()[n * 2 + t] * w.data()[t * 3 + k]).sum::<f64>();
                assert!((z.data()[n * 3 + k] - pre.max(0.0)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn head_zero_and_embedding_annihilation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = random_model(&mut rng, 3, 4, 3, 2, 1);
        let x = Tensor::from_fn(&[2, 3, 3], |_| rng.random_range(-1.0..1.0));
        let bias = m.param("head.b").unwrap().clone();
        let mut zeroed = m.clone();
        zeroed.set_param("head.w", Tensor::zeros(&[4, 2])).unwrap();
        let (_, _, y) = run(&zeroed, &x);
        for row in y.data().chunks(2) {
            assert_eq!(row, bias.data());
        }
        // zeroing v_0 in the head gate: keep the graph, change only the forward
        let mut v = m.embeddings().clone().into_data();
        v[..4].iter_mut().for_each(|x| *x = 0.0);
        let mask = m.mask.clone();
        m.set_param("V", Tensor::new(vec![3, 4], v).unwrap()).unwrap();
        m.mask = mask;
        let (_, _, y) = run(&m, &x);
        for n in 0..2 {
            assert_eq!(&y.data()[n * 6..n * 6 + 2], bias.data());
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(&mut rng, 4, 3, 3, 2, 2);
        let x = Tensor::from_fn(&[2, 4, 3], |_| rng.random_range(-1.0..1.0));
        let perm = [2, 0, 3, 1];
        let mut pm = m.clone();
        let v = m.embeddings();
        let pv: Vec<f64> = perm.iter().flat_map(|&i| v.data()[i * 3..i * 3 + 3].to_vec()).collect();
        pm.set_param("V", Tensor::new(vec![4, 3], pv).unwrap()).unwrap();
        pm.rebuild_graph().unwrap();
        let px: Vec<f64> = (0..2)
            .flat_map(|n| perm.iter().flat_map(move |&i| (0..3).map(move |t| (n, i, t))))
            .map(|(n, i, t)| x.data()[(n * 4 + i) * 3 + t])
            .collect();
        let (_, _, y) = run(&m, &x);
        let (_, _, py) = run(&pm, &Tensor::new(vec![2, 4, 3], px).unwrap());
        for n in 0..2 {
            for (pi, &i) in perm.iter().enumerate() {
                for o in 0..2 {
                    let a = y.data()[(n * 4 + i) * 2 + o];
                    let b = py.data()[(n * 4 + pi) * 2 + o];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn checkpoint_and_edges_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_model(&mut rng, 3, 4, 3, 2, 1);
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let path = dir.path().join("set.gnn");
        m.save(&path, &names, 4).unwrap();
        let (back, back_names) = GraphModel::load(&path).unwrap();
        assert_eq!(back_names, names);
        let x = Tensor::from_fn(&[2, 3, 3], |i| i as f64 * 0.01);
        assert_eq!(run(&m, &x).2, run(&back, &x).2);
        let edges = std::fs::read_to_string(dir.path().join("set.edges.csv")).unwrap();
        assert_eq!(edges.lines().count(), 1 + 3);
    }
}
