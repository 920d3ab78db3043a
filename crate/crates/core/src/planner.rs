//! The policy planner: a bidirectional encoder that selects the grounding
//! knowledge sentence via span prediction (with sentence snapping) and
//! predicts the response policy from the `<cls>` vector.
//!
//! Each context token is embedded as the sum of five tables: word,
//! dialogue act, topic intent, position, and segment. Knowledge tokens get
//! word + position + segment only. Three objectives (span start/end CE,
//! DA CE, topic CE) are balanced by learned uncertainty weights.

use dgd_autodiff::{Adam, AdamConfig, ParamStore, Tape, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    assemble_planner_chunks, DaLabel, PlannerInput, PolicyLabel, Span, TopicIntent,
    TrainingExample,
};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, StackConfig};

pub const NUM_DA: usize = 4;
pub const NUM_TOPIC: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub stack: StackConfig,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub max_span_len: usize,
    /// Restrict the end head to entry-final positions and imply the start
    /// (single-position selection ablation).
    pub sentence_mode: bool,
}

impl PlannerConfig {
    pub fn desk(vocab_size: usize) -> Self {
        PlannerConfig {
            stack: StackConfig {
                dim: 64,
                layers: 2,
                heads: 2,
                ff_mult: 4,
            },
            vocab_size,
            max_positions: 512,
            max_span_len: 90,
            sentence_mode: false,
        }
    }
}

pub struct PlannerModel {
    pub cfg: PlannerConfig,
    pub store: ParamStore,
}

impl PlannerModel {
    pub fn new(cfg: PlannerConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.stack.dim;
        store.insert_normal("emb.tok", cfg.vocab_size, d, nn::INIT_STD, &mut rng);
        store.insert_normal("emb.pos", cfg.max_positions, d, nn::INIT_STD, &mut rng);
        store.insert_normal("emb.seg", 2, d, nn::INIT_STD, &mut rng);
        store.insert_normal("emb.da", NUM_DA, d, nn::INIT_STD, &mut rng);
        store.insert_normal("emb.ti", NUM_TOPIC, d, nn::INIT_STD, &mut rng);
        nn::init_encoder(&mut store, &cfg.stack, &mut rng);
        store.insert_normal("span.start.w", d, 1, nn::INIT_STD, &mut rng);
        store.insert_zeros("span.start.b", 1, 1);
        store.insert_normal("span.end.w", d, 1, nn::INIT_STD, &mut rng);
        store.insert_zeros("span.end.b", 1, 1);
        nn::init_mlp_head(&mut store, "head.da", d, NUM_DA, &mut rng);
        nn::init_mlp_head(&mut store, "head.ti", d, NUM_TOPIC, &mut rng);
        store.insert_zeros("uw.log_mu1", 1, 1);
        store.insert_zeros("uw.log_mu2", 1, 1);
        PlannerModel { cfg, store }
    }

    pub fn uncertainty_weights(&self) -> UncertaintyWeights {
        UncertaintyWeights {
            log_mu1: self.store.get("uw.log_mu1")[(0, 0)],
            log_mu2: self.store.get("uw.log_mu2")[(0, 0)],
        }
    }
}

/// Learned task-balance parameters; the weights are `exp(log_mu)` so they
/// stay positive by construction.
#[derive(Clone, Copy, Debug)]
pub struct UncertaintyWeights {
    pub log_mu1: f64,
    pub log_mu2: f64,
}

impl UncertaintyWeights {
    pub fn mu1(&self) -> f64 {
        self.log_mu1.exp()
    }

    pub fn mu2(&self) -> f64 {
        self.log_mu2.exp()
    }
}

/// All head outputs for one assembled input.
pub struct PlannerForward {
    /// `[1, len]` per-position start scores.
    pub start_logits: Var,
    /// `[1, len]` per-position end scores.
    pub end_logits: Var,
    /// `[1, 4]`.
    pub da_logits: Var,
    /// `[1, 3]`.
    pub topic_logits: Var,
}

/// Run the encoder and heads on one assembled input.
pub fn planner_forward(
    tape: &Tape,
    p: &Bound,
    cfg: &PlannerConfig,
    input: &PlannerInput,
) -> Result<PlannerForward> {
    let len = input.len();
    if len > cfg.max_positions {
        return Err(Error::model(format!(
            "sequence of {len} tokens exceeds the model maximum of {}; chunk the knowledge",
            cfg.max_positions
        )));
    }
    let tok = nn::embed_tokens(tape, p, "emb.tok", &input.tokens);
    let pos = nn::position_rows(tape, p, "emb.pos", len);
    let seg_idx: Vec<usize> = input.segments.iter().map(|&s| s as usize).collect();
    let seg = tape.gather_rows(p.var("emb.seg"), &seg_idx);

    // policy embeddings are added on labeled (context) rows only
    let mut da_idx = vec![0usize; len];
    let mut ti_idx = vec![0usize; len];
    let mut mask = ndarray::Array2::zeros((len, 1));
    for (i, pol) in input.policies.iter().enumerate() {
        if let Some(pl) = pol {
            da_idx[i] = pl.da.index();
            ti_idx[i] = pl.topic_intent.index();
            mask[(i, 0)] = 1.0;
        }
    }
    let mask = tape.leaf(mask);
    let da = tape.mul_col(tape.gather_rows(p.var("emb.da"), &da_idx), mask);
    let ti = tape.mul_col(tape.gather_rows(p.var("emb.ti"), &ti_idx), mask);

    let x = tape.add(tape.add(tape.add(tape.add(tok, pos), seg), da), ti);
    let enc = nn::encoder_forward(tape, p, &cfg.stack, x);

    let start = tape.transpose(nn::linear(tape, p, "span.start", enc));
    let end = tape.transpose(nn::linear(tape, p, "span.end", enc));
    let cls = tape.rows(enc, 0, 1);
    let da_logits = nn::mlp_head(tape, p, "head.da", cls);
    let topic_logits = nn::mlp_head(tape, p, "head.ti", cls);
    Ok(PlannerForward {
        start_logits: start,
        end_logits: end,
        da_logits,
        topic_logits,
    })
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Span cross-entropy: `-(log P(start) + log P(end))` averaged over the
/// batch, with per-position softmaxes over each sequence.
pub fn ks_loss(tape: &Tape, batch: &[(&PlannerForward, Span)]) -> Result<Var> {
    assert!(!batch.is_empty(), "ks_loss on an empty batch");
    let mut terms = Vec::with_capacity(batch.len() * 2);
    for (fwd, gold) in batch {
        let len = tape.shape(fwd.start_logits).1;
        if gold.start >= len || gold.end >= len {
            return Err(Error::model(format!(
                "gold span ({}, {}) out of range for sequence of {len}",
                gold.start, gold.end
            )));
        }
        let ls_start = tape.log_softmax_rows(fwd.start_logits);
        let ls_end = tape.log_softmax_rows(fwd.end_logits);
        terms.push(tape.pick_per_row(ls_start, &[gold.start]));
        terms.push(tape.pick_per_row(ls_end, &[gold.end]));
    }
    let total = tape.sum_all(tape.concat_rows(&terms));
    Ok(tape.scale(total, -1.0 / batch.len() as f64))
}

/// Sentence-selection variant: one cross-entropy over entry-final
/// positions of the end head.
pub fn ks_loss_sentence(
    tape: &Tape,
    batch: &[(&PlannerForward, &PlannerInput, usize)],
) -> Result<Var> {
    assert!(!batch.is_empty());
    let mut terms = Vec::with_capacity(batch.len());
    for (fwd, input, gold_entry) in batch {
        let finals: Vec<usize> = input.entry_offsets.iter().map(|(_, s)| s.end).collect();
        let gold_pos = input
            .entry_offsets
            .iter()
            .position(|(idx, _)| idx == gold_entry)
            .ok_or_else(|| Error::model("gold entry missing from input".to_string()))?;
        let ends = tape.transpose(fwd.end_logits);
        let gathered = tape.transpose(tape.gather_rows(ends, &finals));
        let ls = tape.log_softmax_rows(gathered);
        terms.push(tape.pick_per_row(ls, &[gold_pos]));
    }
    let total = tape.sum_all(tape.concat_rows(&terms));
    Ok(tape.scale(total, -1.0 / batch.len() as f64))
}

/// Batch-averaged cross-entropy for the two policy heads.
pub fn policy_losses(
    tape: &Tape,
    batch: &[(&PlannerForward, PolicyLabel)],
) -> (Var, Var) {
    assert!(!batch.is_empty(), "policy_losses on an empty batch");
    let da_logits: Vec<Var> = batch.iter().map(|(f, _)| f.da_logits).collect();
    let ti_logits: Vec<Var> = batch.iter().map(|(f, _)| f.topic_logits).collect();
    let da_targets: Vec<usize> = batch.iter().map(|(_, p)| p.da.index()).collect();
    let ti_targets: Vec<usize> = batch.iter().map(|(_, p)| p.topic_intent.index()).collect();
    let l_da = nn::cross_entropy(tape, tape.concat_rows(&da_logits), &da_targets);
    let l_topic = nn::cross_entropy(tape, tape.concat_rows(&ti_logits), &ti_targets);
    (l_da, l_topic)
}

/// Uncertainty-weighted combination:
/// `(1/mu1^2)(L_DA + L_Topic) + (1/mu2^2) L_KS + log(mu1 mu2)`
/// with `mu = exp(log_mu)`.
pub fn combined_loss(
    tape: &Tape,
    l_da: Var,
    l_topic: Var,
    l_ks: Var,
    log_mu1: Var,
    log_mu2: Var,
) -> Var {
    let inv_mu1_sq = tape.exp(tape.scale(log_mu1, -2.0));
    let inv_mu2_sq = tape.exp(tape.scale(log_mu2, -2.0));
    let policy_term = tape.mul(inv_mu1_sq, tape.add(l_da, l_topic));
    let ks_term = tape.mul(inv_mu2_sq, l_ks);
    let log_term = tape.add(log_mu1, log_mu2);
    tape.add(tape.add(policy_term, ks_term), log_term)
}

// ---------------------------------------------------------------------------
// Span selection and revision
// ---------------------------------------------------------------------------

/// A raw span decision with its score.
#[derive(Clone, Debug)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub start_logits: Vec<f64>,
    pub end_logits: Vec<f64>,
    /// `log P(start) + log P(end)` under per-position softmaxes.
    pub score: f64,
}

fn log_softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|v| v - lse).collect()
}

/// Argmax over `(s, e)` pairs with `s <= e` and length at most
/// `max_span_len`, restricted to the knowledge region. Ties break to the
/// earliest pair. When no valid pair exists in the region the decision
/// falls back to the unconstrained per-head argmaxes, which revision
/// resolves (including `start > end`).
pub fn select_span(
    start_logits: &[f64],
    end_logits: &[f64],
    max_span_len: usize,
    region: Span,
) -> Result<SpanPrediction> {
    assert_eq!(start_logits.len(), end_logits.len());
    let len = start_logits.len();
    if region.start >= len || region.end >= len || region.start > region.end {
        return Err(Error::model(format!(
            "empty or out-of-range knowledge region ({}, {}) for length {len}",
            region.start, region.end
        )));
    }

    let mut best: Option<(usize, usize, f64)> = None;
    for s in region.start..=region.end {
        let e_hi = region.end.min(s + max_span_len.saturating_sub(1));
        for e in s..=e_hi {
            if e.saturating_sub(s) + 1 > max_span_len {
                break;
            }
            let score = start_logits[s] + end_logits[e];
            if best.map(|(_, _, b)| score > b).unwrap_or(true) {
                best = Some((s, e, score));
            }
        }
    }

    let (start, end) = match best {
        Some((s, e, _)) => (s, e),
        None => {
            let argmax = |xs: &[f64]| {
                let mut bi = 0;
                for (i, &v) in xs.iter().enumerate() {
                    if v > xs[bi] {
                        bi = i;
                    }
                }
                bi
            };
            (argmax(start_logits), argmax(end_logits))
        }
    };

    let ls = log_softmax_slice(start_logits);
    let le = log_softmax_slice(end_logits);
    Ok(SpanPrediction {
        start,
        end,
        score: ls[start] + le[end],
        start_logits: start_logits.to_vec(),
        end_logits: end_logits.to_vec(),
    })
}

/// Snap a raw span onto a whole knowledge entry. `entry_offsets` must
/// partition the knowledge region; spans and offsets share one coordinate
/// system.
///
/// Cases: a span equal to an entry keeps it; a span inside one entry
/// expands to it; a span crossing entries truncates to the one with the
/// largest token overlap (earlier entry on ties); an inverted span
/// (`start > end`) moves to the entry containing its start.
pub fn revise_span(start: usize, end: usize, entry_offsets: &[Span]) -> Result<usize> {
    if entry_offsets.is_empty() {
        return Err(Error::model("no knowledge entries to revise onto"));
    }
    if start > end {
        return entry_offsets
            .iter()
            .position(|o| o.contains(start))
            .ok_or_else(|| {
                Error::model(format!(
                    "inverted span start {start} lies outside the knowledge region"
                ))
            });
    }
    let span = Span::new(start, end);
    for (i, o) in entry_offsets.iter().enumerate() {
        if *o == span {
            return Ok(i);
        }
    }
    let mut best: Option<(usize, usize)> = None;
    for (i, o) in entry_offsets.iter().enumerate() {
        let ov = o.overlap(&span);
        if ov > 0 && best.map(|(_, b)| ov > b).unwrap_or(true) {
            best = Some((i, ov));
        }
    }
    best.map(|(i, _)| i).ok_or_else(|| {
        Error::model(format!(
            "span ({start}, {end}) lies fully outside the knowledge region"
        ))
    })
}

/// Planner decision for one example.
#[derive(Clone, Debug)]
pub struct PlannerDecision {
    pub entry: usize,
    pub span: SpanPrediction,
    pub policy: PolicyLabel,
    pub da_probs: Vec<f64>,
    pub topic_probs: Vec<f64>,
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    log_softmax_slice(x).iter().map(|v| v.exp()).collect()
}

fn row_to_vec(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).row(0).to_vec()
}

/// Run selection over knowledge chunks: the knowledge is split at entry
/// boundaries, the context is repeated per chunk, and the chunk whose
/// revised span scores highest wins. Policy logits come from the winning
/// chunk. Ties keep the earlier chunk.
pub fn select_knowledge_over_chunks(
    model: &PlannerModel,
    example: &TrainingExample,
    max_len: usize,
    context_budget: usize,
) -> Result<PlannerDecision> {
    let chunks = assemble_planner_chunks(example, max_len.min(model.cfg.max_positions), context_budget)?;
    let mut best: Option<PlannerDecision> = None;
    for input in &chunks {
        if input.entry_offsets.is_empty() {
            continue;
        }
        let tape = Tape::new();
        let p = Bound::new(&tape, &model.store);
        let fwd = planner_forward(&tape, &p, &model.cfg, input)?;
        let start_logits = row_to_vec(&tape, fwd.start_logits);
        let end_logits = row_to_vec(&tape, fwd.end_logits);

        let offsets: Vec<Span> = input.entry_offsets.iter().map(|(_, s)| *s).collect();
        let (local_entry, span) = if model.cfg.sentence_mode {
            let finals: Vec<usize> = offsets.iter().map(|s| s.end).collect();
            let scores = log_softmax_slice(
                &finals.iter().map(|&i| end_logits[i]).collect::<Vec<f64>>(),
            );
            let mut bi = 0;
            for (i, &v) in scores.iter().enumerate() {
                if v > scores[bi] {
                    bi = i;
                }
            }
            let o = offsets[bi];
            let span = SpanPrediction {
                start: o.start,
                end: o.end,
                score: scores[bi],
                start_logits: start_logits.clone(),
                end_logits: end_logits.clone(),
            };
            (bi, span)
        } else {
            let span = select_span(
                &start_logits,
                &end_logits,
                model.cfg.max_span_len,
                input.knowledge_region,
            )?;
            let local = revise_span(span.start, span.end, &offsets)?;
            (local, span)
        };
        let entry = input.entry_offsets[local_entry].0;

        let da_probs = softmax_slice(&row_to_vec(&tape, fwd.da_logits));
        let topic_probs = softmax_slice(&row_to_vec(&tape, fwd.topic_logits));
        let da = DaLabel::from_index(argmax(&da_probs)).expect("4-way head");
        let ti = TopicIntent::from_index(argmax(&topic_probs)).expect("3-way head");
        let decision = PlannerDecision {
            entry,
            span,
            policy: PolicyLabel::new(da, ti),
            da_probs,
            topic_probs,
        };
        let better = match &best {
            None => true,
            Some(b) => decision.span.score > b.span.score,
        };
        if better {
            best = Some(decision);
        }
    }
    best.ok_or_else(|| Error::model("empty knowledge collection"))
}

fn argmax(xs: &[f64]) -> usize {
    let mut bi = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[bi] {
            bi = i;
        }
    }
    bi
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PlannerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub max_len: usize,
    pub context_budget: usize,
    pub shuffle: bool,
}

impl Default for PlannerTrainConfig {
    fn default() -> Self {
        PlannerTrainConfig {
            epochs: 3,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
            max_len: 512,
            context_budget: 60,
            shuffle: true,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Mean combined loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Pick the chunk containing the gold entry (whole), preferring the
/// earliest.
fn gold_chunk(
    example: &TrainingExample,
    max_len: usize,
    context_budget: usize,
) -> Result<PlannerInput> {
    let chunks = assemble_planner_chunks(example, max_len, context_budget)?;
    chunks
        .into_iter()
        .find(|c| c.gold.is_some())
        .ok_or_else(|| Error::model("gold entry missing from every chunk"))
}

/// Minimize the uncertainty-weighted combined loss with Adam.
pub fn train_planner(
    model: &mut PlannerModel,
    examples: &[TrainingExample],
    cfg: &PlannerTrainConfig,
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(Error::data("no training examples for the planner"));
    }
    let max_len = cfg.max_len.min(model.cfg.max_positions);
    let inputs: Vec<PlannerInput> = examples
        .iter()
        .map(|ex| gold_chunk(ex, max_len, cfg.context_budget))
        .collect::<Result<_>>()?;

    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();

    for _epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let p = Bound::new(&tape, &model.store);
            let mut fwds = Vec::with_capacity(batch_idx.len());
            for &i in batch_idx {
                fwds.push((i, planner_forward(&tape, &p, &model.cfg, &inputs[i])?));
            }
            let ks_in: Vec<(&PlannerForward, Span)> = fwds
                .iter()
                .map(|(i, f)| (f, inputs[*i].gold.expect("gold chunk")))
                .collect();
            let l_ks = if model.cfg.sentence_mode {
                let items: Vec<(&PlannerForward, &PlannerInput, usize)> = fwds
                    .iter()
                    .map(|(i, f)| (f, &inputs[*i], examples[*i].gold_entry))
                    .collect();
                ks_loss_sentence(&tape, &items)?
            } else {
                ks_loss(&tape, &ks_in)?
            };
            let pol_in: Vec<(&PlannerForward, PolicyLabel)> = fwds
                .iter()
                .map(|(i, f)| (f, examples[*i].response_policy))
                .collect();
            let (l_da, l_topic) = policy_losses(&tape, &pol_in);
            let loss = combined_loss(
                &tape,
                l_da,
                l_topic,
                l_ks,
                p.var("uw.log_mu1"),
                p.var("uw.log_mu2"),
            );
            tape.backward(loss);
            adam.step(&mut model.store, &p.grads());
            epoch_loss += tape.scalar_value(loss);
            batches += 1;
        }
        report.epoch_losses.push(epoch_loss / batches as f64);
    }
    Ok(report)
}
