//! Transformer building blocks shared by the planner, the generator, and
//! the annotation classifiers.
//!
//! Parameters live in a [`ParamStore`] under dotted names and are bound to
//! a fresh [`Tape`] at the start of every forward pass. Blocks are pre-norm
//! with a final layer norm on top of each stack.

use dgd_autodiff::{GradMap, ParamStore, Tape, Var};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::tokenizer::TokenId;

pub const INIT_STD: f64 = 0.02;

/// Shape of one attention stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct StackConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

impl StackConfig {
    pub fn head_dim(&self) -> usize {
        assert!(
            self.dim % self.heads == 0,
            "dim {} not divisible by heads {}",
            self.dim,
            self.heads
        );
        self.dim / self.heads
    }

    pub fn ff_dim(&self) -> usize {
        self.dim * self.ff_mult
    }
}

/// Parameters of a store bound to a tape for one pass, with the name->Var
/// map kept for gradient extraction.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: std::collections::BTreeMap<String, Var>,
}

impl<'t> Bound<'t> {
    pub fn new(tape: &'t Tape, store: &ParamStore) -> Self {
        let vars = store
            .iter()
            .map(|(name, value)| (name.to_string(), tape.leaf(value.clone())))
            .collect();
        Bound { tape, vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Collect gradients for every bound parameter that received one.
    pub fn grads(&self) -> GradMap {
        let mut out = GradMap::new();
        for (name, var) in &self.vars {
            if let Some(g) = self.tape.grad(*var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

fn init_attention(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) {
    for part in ["wq", "wk", "wv", "wo"] {
        store.insert_normal(&format!("{prefix}.{part}"), dim, dim, INIT_STD, rng);
    }
    for part in ["bq", "bk", "bv", "bo"] {
        store.insert_zeros(&format!("{prefix}.{part}"), 1, dim);
    }
}

fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert_ones(&format!("{prefix}.g"), 1, dim);
    store.insert_zeros(&format!("{prefix}.b"), 1, dim);
}

fn init_ffn(store: &mut ParamStore, prefix: &str, dim: usize, ff: usize, rng: &mut ChaCha8Rng) {
    store.insert_normal(&format!("{prefix}.w1"), dim, ff, INIT_STD, rng);
    store.insert_zeros(&format!("{prefix}.b1"), 1, ff);
    store.insert_normal(&format!("{prefix}.w2"), ff, dim, INIT_STD, rng);
    store.insert_zeros(&format!("{prefix}.b2"), 1, dim);
}

/// Encoder stack: self-attention (bidirectional) + feed-forward per layer.
pub fn init_encoder(store: &mut ParamStore, cfg: &StackConfig, rng: &mut ChaCha8Rng) {
    for l in 0..cfg.layers {
        init_attention(store, &format!("enc.{l}.attn"), cfg.dim, rng);
        init_layer_norm(store, &format!("enc.{l}.ln1"), cfg.dim);
        init_ffn(store, &format!("enc.{l}.ffn"), cfg.dim, cfg.ff_dim(), rng);
        init_layer_norm(store, &format!("enc.{l}.ln2"), cfg.dim);
    }
    init_layer_norm(store, "enc.ln", cfg.dim);
}

/// Decoder stack: causal self-attention + cross-attention + feed-forward.
pub fn init_decoder(store: &mut ParamStore, cfg: &StackConfig, rng: &mut ChaCha8Rng) {
    for l in 0..cfg.layers {
        init_attention(store, &format!("dec.{l}.self"), cfg.dim, rng);
        init_layer_norm(store, &format!("dec.{l}.ln1"), cfg.dim);
        init_attention(store, &format!("dec.{l}.cross"), cfg.dim, rng);
        init_layer_norm(store, &format!("dec.{l}.ln2"), cfg.dim);
        init_ffn(store, &format!("dec.{l}.ffn"), cfg.dim, cfg.ff_dim(), rng);
        init_layer_norm(store, &format!("dec.{l}.ln3"), cfg.dim);
    }
    init_layer_norm(store, "dec.ln", cfg.dim);
}

/// Two-layer MLP head over a single vector.
pub fn init_mlp_head(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    out: usize,
    rng: &mut ChaCha8Rng,
) {
    store.insert_normal(&format!("{prefix}.w1"), dim, dim, INIT_STD, rng);
    store.insert_zeros(&format!("{prefix}.b1"), 1, dim);
    store.insert_normal(&format!("{prefix}.w2"), dim, out, INIT_STD, rng);
    store.insert_zeros(&format!("{prefix}.b2"), 1, out);
}

// ---------------------------------------------------------------------------
// Forward blocks
// ---------------------------------------------------------------------------

pub fn linear(tape: &Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let y = tape.matmul(x, p.var(&format!("{prefix}.w")));
    tape.add_row(y, p.var(&format!("{prefix}.b")))
}

fn layer_norm(tape: &Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    tape.layer_norm(
        x,
        p.var(&format!("{prefix}.g")),
        p.var(&format!("{prefix}.b")),
    )
}

fn causal_mask(tape: &Tape, len: usize) -> Var {
    let mut m = Array2::zeros((len, len));
    for i in 0..len {
        for j in i + 1..len {
            m[(i, j)] = -1e30;
        }
    }
    tape.leaf(m)
}

/// Scaled dot-product attention for one head: softmax of `q kᵀ / sqrt(d)`
/// (optionally masked), then an optional positive `[1, keys]` bias row
/// multiplied into the post-softmax distribution and renormalized so every
/// row sums to one again, then the weighted sum over `values`.
pub fn attention_core(
    tape: &Tape,
    queries: Var,
    keys: Var,
    values: Var,
    mask: Option<Var>,
    bias: Option<Var>,
) -> Var {
    let d = tape.shape(queries).1;
    if let Some(b) = bias {
        assert_eq!(
            tape.shape(b).1,
            tape.shape(keys).0,
            "bias length must equal key count"
        );
    }
    let mut scores = tape.scale(
        tape.matmul(queries, tape.transpose(keys)),
        1.0 / (d as f64).sqrt(),
    );
    if let Some(m) = mask {
        scores = tape.add(scores, m);
    }
    let probs = tape.softmax_rows(scores);
    let probs = match bias {
        Some(b) => {
            let weighted = tape.mul_row(probs, b);
            let sums = tape.sum_cols(weighted);
            tape.div_col(weighted, sums)
        }
        None => probs,
    };
    tape.matmul(probs, values)
}

/// Multi-head attention. `bias`, when given, is a `[1, keys]` row of
/// positive weights multiplied into every head's post-softmax attention
/// distribution, which is then renormalized to sum to one.
pub fn attention(
    tape: &Tape,
    p: &Bound,
    prefix: &str,
    x_q: Var,
    x_kv: Var,
    heads: usize,
    causal: bool,
    bias: Option<Var>,
) -> Var {
    let d = tape.shape(x_q).1;
    assert!(d % heads == 0);
    let dh = d / heads;
    let q = tape.add_row(
        tape.matmul(x_q, p.var(&format!("{prefix}.wq"))),
        p.var(&format!("{prefix}.bq")),
    );
    let k = tape.add_row(
        tape.matmul(x_kv, p.var(&format!("{prefix}.wk"))),
        p.var(&format!("{prefix}.bk")),
    );
    let v = tape.add_row(
        tape.matmul(x_kv, p.var(&format!("{prefix}.wv"))),
        p.var(&format!("{prefix}.bv")),
    );

    let mask = if causal {
        Some(causal_mask(tape, tape.shape(x_q).0))
    } else {
        None
    };

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.cols(q, h * dh, dh);
        let kh = tape.cols(k, h * dh, dh);
        let vh = tape.cols(v, h * dh, dh);
        head_outs.push(attention_core(tape, qh, kh, vh, mask, bias));
    }
    let cat = if heads == 1 {
        head_outs[0]
    } else {
        tape.concat_cols(&head_outs)
    };
    tape.add_row(
        tape.matmul(cat, p.var(&format!("{prefix}.wo"))),
        p.var(&format!("{prefix}.bo")),
    )
}

fn ffn(tape: &Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let h = tape.add_row(
        tape.matmul(x, p.var(&format!("{prefix}.w1"))),
        p.var(&format!("{prefix}.b1")),
    );
    let h = tape.gelu(h);
    tape.add_row(
        tape.matmul(h, p.var(&format!("{prefix}.w2"))),
        p.var(&format!("{prefix}.b2")),
    )
}

/// Bidirectional encoder stack over pre-summed input embeddings.
pub fn encoder_forward(tape: &Tape, p: &Bound, cfg: &StackConfig, mut x: Var) -> Var {
    for l in 0..cfg.layers {
        let normed = layer_norm(tape, p, &format!("enc.{l}.ln1"), x);
        let attn = attention(
            tape,
            p,
            &format!("enc.{l}.attn"),
            normed,
            normed,
            cfg.heads,
            false,
            None,
        );
        x = tape.add(x, attn);
        let normed = layer_norm(tape, p, &format!("enc.{l}.ln2"), x);
        let f = ffn(tape, p, &format!("enc.{l}.ffn"), normed);
        x = tape.add(x, f);
    }
    layer_norm(tape, p, "enc.ln", x)
}

/// Decoder stack: causal self-attention over the response prefix, then
/// cross-attention into `memory` in every layer (bias applied there), then
/// feed-forward.
pub fn decoder_forward(
    tape: &Tape,
    p: &Bound,
    cfg: &StackConfig,
    mut x: Var,
    memory: Var,
    bias: Option<Var>,
) -> Var {
    for l in 0..cfg.layers {
        let normed = layer_norm(tape, p, &format!("dec.{l}.ln1"), x);
        let self_attn = attention(
            tape,
            p,
            &format!("dec.{l}.self"),
            normed,
            normed,
            cfg.heads,
            true,
            None,
        );
        x = tape.add(x, self_attn);
        let normed = layer_norm(tape, p, &format!("dec.{l}.ln2"), x);
        let cross = attention(
            tape,
            p,
            &format!("dec.{l}.cross"),
            normed,
            memory,
            cfg.heads,
            false,
            bias,
        );
        x = tape.add(x, cross);
        let normed = layer_norm(tape, p, &format!("dec.{l}.ln3"), x);
        let f = ffn(tape, p, &format!("dec.{l}.ffn"), normed);
        x = tape.add(x, f);
    }
    layer_norm(tape, p, "dec.ln", x)
}

/// MLP head over a `[1, d]` vector.
pub fn mlp_head(tape: &Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let h = tape.add_row(
        tape.matmul(x, p.var(&format!("{prefix}.w1"))),
        p.var(&format!("{prefix}.b1")),
    );
    let h = tape.tanh(h);
    tape.add_row(
        tape.matmul(h, p.var(&format!("{prefix}.w2"))),
        p.var(&format!("{prefix}.b2")),
    )
}

/// Mean cross-entropy of row-wise logits against integer targets.
pub fn cross_entropy(tape: &Tape, logits: Var, targets: &[usize]) -> Var {
    let ls = tape.log_softmax_rows(logits);
    let picked = tape.pick_per_row(ls, targets);
    let total = tape.sum_all(picked);
    tape.scale(total, -1.0 / targets.len() as f64)
}

/// Gather position rows `0..len` from a position table.
pub fn position_rows(tape: &Tape, p: &Bound, name: &str, len: usize) -> Var {
    tape.rows(p.var(name), 0, len)
}

/// Embed token ids from a table.
pub fn embed_tokens(tape: &Tape, p: &Bound, name: &str, tokens: &[TokenId]) -> Var {
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    tape.gather_rows(p.var(name), &idx)
}
