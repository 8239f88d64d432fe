//! Multi-head graph attention over the variable graph at a single timestep.
//!
//! Each telemetry variable is a node; per head, node features are linearly
//! lifted, edge logits come from a learned attention vector over concatenated
//! endpoint features, neighborhoods are softmax-normalized, and aggregated
//! head outputs concatenate along the feature axis.

use crate::error::{Error, Result};
use crate::numerics::tensor::{self, Tensor};
use crate::numerics::{Tape, Var};
use rand::Rng;

/// Node set plus boolean adjacency. Self-loops are mandatory.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableGraph {
    node_count: usize,
    adjacency: Vec<bool>,
}

impl VariableGraph {
    /// Complete graph (the default: every pair of variables may interact).
    pub fn complete(node_count: usize) -> Self {
        Self { node_count, adjacency: vec![true; node_count * node_count] }
    }

    /// Self-loops only; each node attends to itself alone.
    pub fn self_loops_only(node_count: usize) -> Self {
        let mut adjacency = vec![false; node_count * node_count];
        for j in 0..node_count {
            adjacency[j * node_count + j] = true;
        }
        Self { node_count, adjacency }
    }

    pub fn from_adjacency(node_count: usize, adjacency: Vec<bool>) -> Result<Self> {
        if adjacency.len() != node_count * node_count {
            return Err(Error::Config(format!(
                "adjacency has {} entries for {} nodes",
                adjacency.len(),
                node_count
            )));
        }
        for j in 0..node_count {
            if !adjacency[j * node_count + j] {
                return Err(Error::Config(format!("node {j} lacks a self-loop")));
            }
        }
        Ok(Self { node_count, adjacency })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.adjacency[from * self.node_count + to]
    }

    pub fn neighbor_count(&self, node: usize) -> usize {
        (0..self.node_count).filter(|&m| self.has_edge(node, m)).count()
    }

    /// Additive pre-softmax mask: 0 on edges, -inf elsewhere.
    pub fn mask_tensor(&self) -> Tensor {
        let n = self.node_count;
        let data = self
            .adjacency
            .iter()
            .map(|&e| if e { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Tensor::new(vec![n, n], data).expect("square mask")
    }

    /// Apply a node permutation to the graph: perm[i] = old index at new slot i.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.node_count;
        let mut adjacency = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                adjacency[i * n + j] = self.adjacency[perm[i] * n + perm[j]];
            }
        }
        Self { node_count: n, adjacency }
    }
}

/// Layer dimensions. `hidden_dim` is the total across heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GatConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
}

impl GatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden_dim == 0 || self.heads == 0 {
            return Err(Error::Config(format!("gat dims must be positive: {self:?}")));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "gat hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Learnable graph-attention parameters.
///
/// `weight` stacks the per-head lift matrices column-wise ([in_dim, hidden]);
/// `attn_src`/`attn_dst` are the halves of each head's attention vector a_k
/// applied to the source and destination endpoint features respectively, so
/// a_k^T [h_j || h_m] = attn_src_k . h_j + attn_dst_k . h_m.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    pub config: GatConfig,
    pub leaky_slope: f64,
    pub weight: Tensor,   // [in_dim, hidden_dim]
    pub attn_src: Tensor, // [heads, head_dim]
    pub attn_dst: Tensor, // [heads, head_dim]
}

impl GatLayer {
    pub fn init<R: Rng>(config: GatConfig, leaky_slope: f64, std: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            leaky_slope,
            weight: Tensor::randn(&[config.in_dim, config.hidden_dim], std, rng),
            attn_src: Tensor::randn(&[config.heads, config.head_dim()], std, rng),
            attn_dst: Tensor::randn(&[config.heads, config.head_dim()], std, rng),
        })
    }

    /// Head k's lift matrix in [head_dim, in_dim] orientation.
    pub fn head_weight(&self, k: usize) -> Tensor {
        let d = self.config.head_dim();
        let cols = tensor::slice(&self.weight, 1, k * d, d).expect("head in range");
        tensor::transpose(&cols, 0, 1).expect("rank 2")
    }

    /// Head k's full attention vector [a_src_k || a_dst_k], length 2 * head_dim.
    pub fn attention_vector(&self, k: usize) -> Tensor {
        let src = tensor::slice(&self.attn_src, 0, k, 1).expect("head in range");
        let dst = tensor::slice(&self.attn_dst, 0, k, 1).expect("head in range");
        tensor::concat(&[&src, &dst], 1).expect("same rank").reshaped(vec![2 * self.config.head_dim()]).unwrap()
    }
}

/// Tape handles for the layer parameters, as registered by the owning model.
#[derive(Clone, Copy)]
pub struct GatVars<'t> {
    pub weight: Var<'t>,
    pub attn_src: Var<'t>,
    pub attn_dst: Var<'t>,
}

/// Recorded forward pass over a batch of graphs.
///
/// `x` is [graphs, N, in_dim]; the result is [graphs, N, hidden_dim] with the
/// per-head outputs concatenated along the feature axis.
pub fn forward_on_tape<'t>(
    tape: &'t Tape,
    params: GatVars<'t>,
    x: Var<'t>,
    graph: &VariableGraph,
    config: &GatConfig,
    leaky_slope: f64,
) -> Var<'t> {
    let n = graph.node_count();
    let (heads, dh) = (config.heads, config.head_dim());
    let graphs = x.shape()[0];

    // Lift all heads at once, then split the head axis out.
    let h = x.matmul(params.weight); // [G, N, hidden]
    let h_heads = h.reshape(vec![graphs, n, heads, dh]).transpose(1, 2); // [G, heads, N, dh]

    // Per-head endpoint scores u_j = a_src . h_j, v_m = a_dst . h_m.
    let a_src = params.attn_src.reshape(vec![heads, dh, 1]);
    let a_dst = params.attn_dst.reshape(vec![heads, dh, 1]);
    let u = h_heads.matmul(a_src); // [G, heads, N, 1]
    let v = h_heads.matmul(a_dst); // [G, heads, N, 1]

    // e[j,m] = leaky_relu(u_j + v_m), built from rank-expanding matmuls.
    let ones_row = tape.constant(Tensor::full(&[1, n], 1.0));
    let ones_col = tape.constant(Tensor::full(&[n, 1], 1.0));
    let e = u.matmul(ones_row).add(ones_col.matmul(v.transpose(2, 3))).leaky_relu(leaky_slope);

    // Mask non-edges to -inf, normalize each node's neighborhood.
    let mask = tape.constant(graph.mask_tensor());
    let alpha = e.add(mask).softmax(3); // [G, heads, N, N]

    // Aggregate neighbor features and re-concatenate heads.
    alpha.matmul(h_heads).transpose(1, 2).reshape(vec![graphs, n, heads * dh])
}

/// Row-stochastic attention matrix for one head over one graph's features.
///
/// `h` holds head-transformed node features [N, head_dim]; entry (j, m) is
/// alpha_jm, zero where no edge exists.
pub fn attention_coefficients(
    layer: &GatLayer,
    head: usize,
    h: &Tensor,
    graph: &VariableGraph,
) -> Result<Tensor> {
    let n = graph.node_count();
    if h.rank() != 2 || h.shape()[0] != n {
        return Err(Error::Shape {
            op: "attention_coefficients",
            detail: format!("features {:?} vs {} nodes", h.shape(), n),
        });
    }
    let dh = layer.config.head_dim();
    if h.shape()[1] != dh {
        return Err(Error::Shape {
            op: "attention_coefficients",
            detail: format!("feature dim {} != head_dim {}", h.shape()[1], dh),
        });
    }
    if head >= layer.config.heads {
        return Err(Error::Config(format!("head {head} out of {}", layer.config.heads)));
    }
    let a_src = tensor::slice(&layer.attn_src, 0, head, 1)?.reshaped(vec![dh, 1])?;
    let a_dst = tensor::slice(&layer.attn_dst, 0, head, 1)?.reshaped(vec![dh, 1])?;
    let u = tensor::matmul(h, &a_src)?; // [N, 1]
    let v = tensor::matmul(h, &a_dst)?; // [N, 1]
    let mut logits = Tensor::zeros(&[n, n]);
    for j in 0..n {
        for m in 0..n {
            let e = u.data()[j] + v.data()[m];
            let e = if e >= 0.0 { e } else { layer.leaky_slope * e };
            logits.data_mut()[j * n + m] = if graph.has_edge(j, m) { e } else { f64::NEG_INFINITY };
        }
    }
    tensor::softmax(&logits, 1)
}

/// Value-level forward for a single graph: x is [N, in_dim], result
/// [N, hidden_dim]. Runs the same recorded path training uses.
pub fn gat_forward(layer: &GatLayer, x: &Tensor, graph: &VariableGraph) -> Result<Tensor> {
    let n = graph.node_count();
    if x.rank() != 2 || x.shape()[0] != n || x.shape()[1] != layer.config.in_dim {
        return Err(Error::Shape {
            op: "gat_forward",
            detail: format!(
                "input {:?} vs {} nodes x in_dim {}",
                x.shape(),
                n,
                layer.config.in_dim
            ),
        });
    }
    let tape = Tape::new();
    let params = GatVars {
        weight: tape.param(layer.weight.clone()),
        attn_src: tape.param(layer.attn_src.clone()),
        attn_dst: tape.param(layer.attn_dst.clone()),
    };
    let xv = tape.constant(x.reshaped(vec![1, n, layer.config.in_dim])?);
    let out = forward_on_tape(&tape, params, xv, graph, &layer.config, layer.leaky_slope);
    out.value().reshaped(vec![n, layer.config.hidden_dim])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(in_dim: usize, hidden: usize, heads: usize, seed: u64) -> GatLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GatLayer::init(GatConfig { in_dim, hidden_dim: hidden, heads }, DEFAULT_LEAKY_SLOPE, 0.5, &mut rng)
            .unwrap()
    }

    #[test]
    fn single_node_attention_is_one() {
        let l = layer(1, 4, 1, 0);
        let g = VariableGraph::complete(1);
        let h = Tensor::new(vec![1, 4], vec![0.3, -0.7, 2.0, 0.1]).unwrap();
        let alpha = attention_coefficients(&l, 0, &h, &g).unwrap();
        assert_eq!(alpha.data(), &[1.0]);
    }

    #[test]
    fn attention_rows_sum_to_one_and_zero_off_graph(){
        let l = layer(1, 8, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 5;
        // Ring + self loops.
        let mut adj = vec![false; n * n];
        for j in 0..n {
            adj[j * n + j] = true;
            adj[j * n + (j + 1) % n] = true;
        }
        let g = VariableGraph::from_adjacency(n, adj).unwrap();
        let h = Tensor::randn(&[n, 4], 1.0, &mut rng);
        for head in 0..2 {
            let alpha = attention_coefficients(&l, head, &h, &g).unwrap();
            for j in 0..n {
                let row: f64 = (0..n).map(|m| alpha.at(&[j, m])).sum();
                assert!((row - 1.0).abs() < 1e-12);
                for m in 0..n {
                    if !g.has_edge(j, m) {
                        assert_eq!(alpha.at(&[j, m]), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_attention_vector_gives_uniform_weights() {
        let mut l = layer(1, 4, 1, 2);
        l.attn_src = Tensor::zeros(&[1, 4]);
        l.attn_dst = Tensor::zeros(&[1, 4]);
        let g = VariableGraph::complete(3);
        let h = Tensor::new(vec![3, 4], (0..12).map(|v| v as f64).collect()).unwrap();
        let alpha = attention_coefficients(&l, 0, &h, &g).unwrap();
        for v in alpha.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_node_one_head_is_plain_lift() {
        let mut l = layer(1, 1, 1, 3);
        l.weight = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let g = VariableGraph::complete(1);
        let x = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        let out = gat_forward(&l, &x, &g).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn identical_features_on_complete_graph_give_identical_rows() {
        let l = layer(2, 8, 2, 4);
        let g = VariableGraph::complete(4);
        let x = Tensor::new(vec![4, 2], vec![0.5, -1.0].repeat(4)).unwrap();
        let out = gat_forward(&l, &x, &g).unwrap();
        let first = out.data()[..8].to_vec();
        for j in 1..4 {
            assert_eq!(&out.data()[j * 8..(j + 1) * 8], &first[..], "row {j}");
        }
    }

    #[test]
    fn permutation_equivariance() {
        use rand::seq::SliceRandom;
        let l = layer(1, 8, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..20 {
            let n = 6;
            // Random adjacency with mandatory self loops, symmetric-ish.
            let mut adj = vec![false; n * n];
            for j in 0..n {
                adj[j * n + j] = true;
                for m in 0..n {
                    if rng.random::<f64>() < 0.4 {
                        adj[j * n + m] = true;
                    }
                }
            }
            let g = VariableGraph::from_adjacency(n, adj).unwrap();
            let x = Tensor::randn(&[n, 1], 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);

            let base = gat_forward(&l, &x, &g).unwrap();
            let xp_data: Vec<f64> = perm.iter().map(|&p| x.data()[p]).collect();
            let xp = Tensor::new(vec![n, 1], xp_data).unwrap();
            let out_p = gat_forward(&l, &xp, &g.permuted(&perm)).unwrap();

            let hid = l.config.hidden_dim;
            for (i, &p) in perm.iter().enumerate() {
                for d in 0..hid {
                    let a = out_p.data()[i * hid + d];
                    let b = base.data()[p * hid + d];
                    assert!((a - b).abs() < 1e-10, "trial {trial}: ({i},{d}) {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn self_loop_only_locality_is_exact() {
        let l = layer(1, 8, 2, 6);
        let g = VariableGraph::self_loops_only(5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(&[5, 1], 1.0, &mut rng);
        let base = gat_forward(&l, &x, &g).unwrap();
        // Zero all rows but row 2; row 2's output must be bit-identical.
        let mut x2 = Tensor::zeros(&[5, 1]);
        x2.data_mut()[2] = x.data()[2];
        let out2 = gat_forward(&l, &x2, &g).unwrap();
        assert_eq!(&out2.data()[2 * 8..3 * 8], &base.data()[2 * 8..3 * 8]);
    }

    #[test]
    fn gradients_flow_through_gat() {
        use crate::numerics::finite_diff_check_multi;
        let l = layer(1, 4, 2, 8);
        let g = VariableGraph::complete(3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(&[1, 3, 1], 1.0, &mut rng);
        let cfg = l.config;
        let graph = g.clone();
        let xs = vec![l.weight.clone(), l.attn_src.clone(), l.attn_dst.clone(), x];
        let errs = finite_diff_check_multi(
            move |tape, vars| {
                let params = GatVars { weight: vars[0], attn_src: vars[1], attn_dst: vars[2] };
                let out = forward_on_tape(tape, params, vars[3], &graph, &cfg, DEFAULT_LEAKY_SLOPE);
                out.mul(out).sum_all()
            },
            &xs,
            1e-5,
        );
        for (i, e) in errs.iter().enumerate() {
            assert!(*e < 1e-6, "input {i}: fd error {e}");
        }
    }
}
