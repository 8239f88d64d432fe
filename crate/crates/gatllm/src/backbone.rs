//! Decoder-only transformer over the per-timestep token sequence.
//!
//! Pre-normalization residual blocks (norm -> masked self-attention ->
//! residual; norm -> feed-forward -> residual) with a learnable position
//! table and a final normalization after the stack. Trains from random
//! initialization at whatever size the config asks for.

use crate::error::{Error, Result};
use crate::numerics::tensor::{Tensor, LAYER_NORM_EPS};
use crate::numerics::{Tape, Var};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.ff_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::Config(format!("backbone dims must be positive: {self:?}")));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// One decoder block's parameters. The query/key/value projections are stored
/// fused along the output axis, GPT-2 style.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_qkv: Tensor, // [d_model, 3 * d_model]
    pub b_qkv: Tensor,
    pub w_out: Tensor, // [d_model, d_model]
    pub b_out: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w_ff1: Tensor, // [d_model, ff_dim]
    pub b_ff1: Tensor,
    pub w_ff2: Tensor, // [ff_dim, d_model]
    pub b_ff2: Tensor,
}

impl DecoderBlock {
    pub fn init<R: Rng>(cfg: &BackboneConfig, std: f64, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            ln1_gain: Tensor::full(&[d], 1.0),
            ln1_bias: Tensor::zeros(&[d]),
            w_qkv: Tensor::randn(&[d, 3 * d], std, rng),
            b_qkv: Tensor::zeros(&[3 * d]),
            w_out: Tensor::randn(&[d, d], std, rng),
            b_out: Tensor::zeros(&[d]),
            ln2_gain: Tensor::full(&[d], 1.0),
            ln2_bias: Tensor::zeros(&[d]),
            w_ff1: Tensor::randn(&[d, cfg.ff_dim], std, rng),
            b_ff1: Tensor::zeros(&[cfg.ff_dim]),
            w_ff2: Tensor::randn(&[cfg.ff_dim, d], std, rng),
            b_ff2: Tensor::zeros(&[d]),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'static str, &'a Tensor)) {
        f("ln1_gain", &self.ln1_gain);
        f("ln1_bias", &self.ln1_bias);
        f("w_qkv", &self.w_qkv);
        f("b_qkv", &self.b_qkv);
        f("w_out", &self.w_out);
        f("b_out", &self.b_out);
        f("ln2_gain", &self.ln2_gain);
        f("ln2_bias", &self.ln2_bias);
        f("w_ff1", &self.w_ff1);
        f("b_ff1", &self.b_ff1);
        f("w_ff2", &self.w_ff2);
        f("b_ff2", &self.b_ff2);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&'static str, &mut Tensor)) {
        f("ln1_gain", &mut self.ln1_gain);
        f("ln1_bias", &mut self.ln1_bias);
        f("w_qkv", &mut self.w_qkv);
        f("b_qkv", &mut self.b_qkv);
        f("w_out", &mut self.w_out);
        f("b_out", &mut self.b_out);
        f("ln2_gain", &mut self.ln2_gain);
        f("ln2_bias", &mut self.ln2_bias);
        f("w_ff1", &mut self.w_ff1);
        f("b_ff1", &mut self.b_ff1);
        f("w_ff2", &mut self.w_ff2);
        f("b_ff2", &mut self.b_ff2);
    }

    /// Mutable borrows of all tensors, in `visit` order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let DecoderBlock {
            ln1_gain,
            ln1_bias,
            w_qkv,
            b_qkv,
            w_out,
            b_out,
            ln2_gain,
            ln2_bias,
            w_ff1,
            b_ff1,
            w_ff2,
            b_ff2,
        } = self;
        vec![
            ln1_gain, ln1_bias, w_qkv, b_qkv, w_out, b_out, ln2_gain, ln2_bias, w_ff1, b_ff1,
            w_ff2, b_ff2,
        ]
    }
}

/// Learnable position table, one row per sequence slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionEmbedding {
    pub table: Tensor, // [max_seq_len, d_model]
}

impl PositionEmbedding {
    pub fn init<R: Rng>(cfg: &BackboneConfig, std: f64, rng: &mut R) -> Self {
        Self { table: Tensor::randn(&[cfg.max_seq_len, cfg.d_model], std, rng) }
    }
}

/// Decoder stack plus the final normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub config: BackboneConfig,
    pub blocks: Vec<DecoderBlock>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

impl Decoder {
    pub fn init<R: Rng>(config: BackboneConfig, std: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.layers).map(|_| DecoderBlock::init(&config, std, rng)).collect();
        Ok(Self {
            config,
            blocks,
            final_gain: Tensor::full(&[config.d_model], 1.0),
            final_bias: Tensor::zeros(&[config.d_model]),
        })
    }
}

/// Additive causal mask: 0 at or before the query position, -inf after.
pub fn causal_mask(seq_len: usize) -> Tensor {
    let mut data = vec![0.0; seq_len * seq_len];
    for i in 0..seq_len {
        for j in i + 1..seq_len {
            data[i * seq_len + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(vec![seq_len, seq_len], data).expect("square mask")
}

pub struct DecoderBlockVars<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> DecoderBlockVars<'t> {
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn register(tape: &'t Tape, block: &DecoderBlock) -> Self {
        let mut vars = Vec::with_capacity(12);
        block.visit(&mut |_, t| vars.push(tape.param(t.clone())));
        Self { vars }
    }

    pub fn list(&self) -> &[Var<'t>] {
        &self.vars
    }

    fn get(&self, i: usize) -> Var<'t> {
        self.vars[i]
    }
}

/// One pre-norm residual block. `mask` is the additive causal mask for the
/// current sequence length; `attn_capture` receives the post-softmax
/// attention tensor when probing.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<'t>(
    tape: &'t Tape,
    vars: &DecoderBlockVars<'t>,
    x: Var<'t>,
    cfg: &BackboneConfig,
    mask: Var<'t>,
    attn_capture: Option<&mut Vec<Tensor>>,
) -> Var<'t> {
    let shape = x.shape();
    let (batch, seq, d) = (shape[0], shape[1], shape[2]);
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let (ln1_g, ln1_b) = (vars.get(0), vars.get(1));
    let (w_qkv, b_qkv) = (vars.get(2), vars.get(3));
    let (w_out, b_out) = (vars.get(4), vars.get(5));
    let (ln2_g, ln2_b) = (vars.get(6), vars.get(7));
    let (w_ff1, b_ff1) = (vars.get(8), vars.get(9));
    let (w_ff2, b_ff2) = (vars.get(10), vars.get(11));
    let _ = tape;

    let h = x.layer_norm(2, ln1_g, ln1_b, LAYER_NORM_EPS);
    let qkv = h.matmul(w_qkv).add(b_qkv); // [B, T, 3d]
    let split = |i: usize| {
        qkv.slice(2, i * d, d).reshape(vec![batch, seq, heads, dh]).transpose(1, 2)
    };
    let (q, k, v) = (split(0), split(1), split(2)); // [B, H, T, dh]

    let scores = q.matmul(k.transpose(2, 3)).scale(1.0 / (dh as f64).sqrt()); // [B, H, T, T]
    let attn = scores.add(mask).softmax(3);
    if let Some(out) = attn_capture {
        out.push(attn.value());
    }
    let gathered = attn.matmul(v).transpose(1, 2).reshape(vec![batch, seq, d]);
    let x = x.add(gathered.matmul(w_out).add(b_out));

    let h2 = x.layer_norm(2, ln2_g, ln2_b, LAYER_NORM_EPS);
    let ff = h2.matmul(w_ff1).add(b_ff1).gelu().matmul(w_ff2).add(b_ff2);
    x.add(ff)
}

pub struct DecoderVars<'t> {
    pub blocks: Vec<DecoderBlockVars<'t>>,
    pub final_gain: Var<'t>,
    pub final_bias: Var<'t>,
}

impl<'t> DecoderVars<'t> {
    pub fn register(tape: &'t Tape, decoder: &Decoder) -> Self {
        Self {
            blocks: decoder.blocks.iter().map(|b| DecoderBlockVars::register(tape, b)).collect(),
            final_gain: tape.param(decoder.final_gain.clone()),
            final_bias: tape.param(decoder.final_bias.clone()),
        }
    }

    pub fn list(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend_from_slice(b.list());
        }
        out.push(self.final_gain);
        out.push(self.final_bias);
        out
    }
}

/// Run the full stack over `x` [batch, seq, d_model].
pub fn decoder_forward<'t>(
    tape: &'t Tape,
    vars: &DecoderVars<'t>,
    x: Var<'t>,
    cfg: &BackboneConfig,
    mut attn_capture: Option<&mut Vec<Tensor>>,
) -> Var<'t> {
    let seq = x.shape()[1];
    let mask = tape.constant(causal_mask(seq));
    let mut h = x;
    for block in &vars.blocks {
        h = block_forward(tape, block, h, cfg, mask, attn_capture.as_deref_mut());
    }
    h.layer_norm(2, vars.final_gain, vars.final_bias, LAYER_NORM_EPS)
}

/// Value-level decoder pass; validates shapes, then runs the recorded path.
pub fn decoder_apply(decoder: &Decoder, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 || x.shape()[2] != decoder.config.d_model {
        return Err(Error::Shape {
            op: "decoder_forward",
            detail: format!("input {:?} vs d_model {}", x.shape(), decoder.config.d_model),
        });
    }
    if x.shape()[1] > decoder.config.max_seq_len {
        return Err(Error::Shape {
            op: "decoder_forward",
            detail: format!("sequence {} exceeds max {}", x.shape()[1], decoder.config.max_seq_len),
        });
    }
    let tape = Tape::new();
    let vars = DecoderVars::register(&tape, decoder);
    let xv = tape.constant(x.clone());
    Ok(decoder_forward(&tape, &vars, xv, &decoder.config, None).value())
}

/// Project per-timestep features into tokens: token_t = flatten(x_t) W + b.
pub fn embed_tokens<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Var<'t> {
    x.matmul(w).add(b)
}

/// Add the first `seq` position rows to every sequence in the batch.
pub fn add_positions<'t>(tokens: Var<'t>, table: Var<'t>, seq: usize) -> Result<Var<'t>> {
    let rows = table.shape()[0];
    if seq > rows {
        return Err(Error::Shape {
            op: "add_positions",
            detail: format!("sequence length {seq} exceeds position table rows {rows}"),
        });
    }
    let indices: Vec<usize> = (0..seq).collect();
    Ok(tokens.add(table.embedding_lookup(&indices)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check::finite_diff_check_multi_with_atol;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig { layers: 1, d_model: 8, heads: 2, ff_dim: 16, max_seq_len: 6 }
    }

    #[test]
    fn shape_preserved_and_sequence_cap_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dec = Decoder::init(tiny_cfg(), 0.1, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 5, 8], 1.0, &mut rng);
        let y = decoder_apply(&dec, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        let too_long = Tensor::randn(&[1, 7, 8], 1.0, &mut rng);
        assert!(decoder_apply(&dec, &too_long).is_err());
    }

    #[test]
    fn zero_layers_is_final_norm_of_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = BackboneConfig { layers: 0, ..tiny_cfg() };
        let dec = Decoder::init(cfg, 0.1, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 4, 8], 1.0, &mut rng);
        let y = decoder_apply(&dec, &x).unwrap();
        let expect = crate::numerics::tensor::layer_norm(
            &x,
            2,
            &dec.final_gain,
            &dec.final_bias,
            LAYER_NORM_EPS,
        )
        .unwrap();
        assert_eq!(y, expect);
    }

    #[test]
    fn causal_mask_blocks_future_positions_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = BackboneConfig { layers: 2, d_model: 8, heads: 2, ff_dim: 16, max_seq_len: 8 };
        let dec = Decoder::init(cfg, 0.2, &mut rng).unwrap();
        for trial in 0..20 {
            let x = Tensor::randn(&[1, 6, 8], 1.0, &mut rng);
            let base = decoder_apply(&dec, &x).unwrap();
            let t_perturb = 1 + (trial % 5); // positions 1..=5
            let mut x2 = x.clone();
            for tt in t_perturb..6 {
                for d in 0..8 {
                    let i = tt * 8 + d;
                    x2.data_mut()[i] += 0.5 + trial as f64 * 0.1;
                }
            }
            let out2 = decoder_apply(&dec, &x2).unwrap();
            // Outputs strictly before the perturbed position are bit-identical.
            let upto = t_perturb * 8;
            assert_eq!(&out2.data()[..upto], &base.data()[..upto], "trial {trial}");
        }
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = tiny_cfg();
        let dec = Decoder::init(cfg, 0.3, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 5, 8], 1.0, &mut rng);
        let tape = Tape::new();
        let vars = DecoderVars::register(&tape, &dec);
        let xv = tape.constant(x);
        let mut captured = Vec::new();
        let _ = decoder_forward(&tape, &vars, xv, &cfg, Some(&mut captured));
        assert_eq!(captured.len(), 1);
        let attn = &captured[0]; // [B, H, T, T]
        for b in 0..2 {
            for h in 0..2 {
                for t in 0..5 {
                    let mut sum = 0.0;
                    for m in 0..5 {
                        let a = attn.at(&[b, h, t, m]);
                        assert!(a >= 0.0);
                        if m > t {
                            assert_eq!(a, 0.0, "future weight at ({t},{m})");
                        }
                        sum += a;
                    }
                    assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn add_positions_identities() {
        let tape = Tape::new();
        let tokens = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let table = tape.param(Tensor::new(vec![5, 4], (0..20).map(|v| v as f64).collect()).unwrap());
        let out = add_positions(tokens, table, 3).unwrap().value();
        for b in 0..2 {
            for t in 0..3 {
                for d in 0..4 {
                    assert_eq!(out.at(&[b, t, d]), (t * 4 + d) as f64);
                }
            }
        }
        assert!(add_positions(tape.constant(Tensor::zeros(&[1, 6, 4])), table, 6).is_err());
    }

    #[test]
    fn embed_tokens_affine_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let w0 = tape.param(Tensor::zeros(&[3, 2]));
        let b = tape.param(Tensor::new(vec![2], vec![0.5, -0.5]).unwrap());
        let out = embed_tokens(x, w0, b).value();
        assert_eq!(out.data(), &[0.5, -0.5, 0.5, -0.5]);

        let eye = tape.param(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
        let zb = tape.param(Tensor::zeros(&[3]));
        let out = embed_tokens(x, eye, zb).value();
        assert_eq!(out.data(), &[1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn every_block_parameter_gets_nonzero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_cfg();
        let dec = Decoder::init(cfg, 0.3, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 4, 8], 1.0, &mut rng);
        let tape = Tape::new();
        let vars = DecoderVars::register(&tape, &dec);
        let xv = tape.constant(x);
        let out = decoder_forward(&tape, &vars, xv, &cfg, None);
        let loss = out.mul(out).mean_all();
        let grads = tape.backward(loss).unwrap();
        for (i, v) in vars.list().into_iter().enumerate() {
            let g = grads.wrt(v);
            assert!(g.data().iter().any(|&x| x != 0.0), "parameter {i} has all-zero gradient");
        }
    }

    #[test]
    fn finite_difference_through_one_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny_cfg();
        let dec = Decoder::init(cfg, 0.3, &mut rng).unwrap();
        let x = Tensor::randn(&[1, 3, 8], 0.7, &mut rng);
        let mut inputs: Vec<Tensor> = vec![x];
        dec.blocks[0].visit(&mut |_, t| inputs.push(t.clone()));
        let errs = finite_diff_check_multi_with_atol(
            move |tape, vars| {
                let block = DecoderBlockVars::from_vars(vars[1..].to_vec());
                let mask = tape.constant(causal_mask(3));
                let out = block_forward(tape, &block, vars[0], &cfg, mask, None);
                out.mul(out).mean_all()
            },
            &inputs,
            1e-5,
            1e-8,
        );
        for (i, e) in errs.iter().enumerate() {
            assert!(*e < 1e-6, "input {i}: fd error {e}");
        }
    }

}
