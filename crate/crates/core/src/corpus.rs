//! Corpus data model: dialogues, knowledge collections, training examples,
//! and the assembly of model-ready token sequences.
//!
//! A corpus file is JSONL with one dialogue per line:
//!
//! ```text
//! {"id": str, "initial_topic": str,
//!  "knowledge": [{"topic": str, "text": str}],
//!  "turns": [{"speaker": "user"|"agent", "text": str,
//!             "grounding": int|null, "da": str|null, "topic_intent": str|null}]}
//! ```
//!
//! Unknown fields are ignored. All span and offset ranges in this crate are
//! inclusive on both ends.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Tokenizer, CLS, ESP};

/// Inclusive token range.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false // inclusive ranges always cover at least one token
    }

    pub fn contains(&self, pos: usize) -> bool {
        pos >= self.start && pos <= self.end
    }

    /// Number of overlapping tokens with `other`.
    pub fn overlap(&self, other: &Span) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        if lo > hi {
            0
        } else {
            hi - lo + 1
        }
    }

    pub fn shift(&self, by: usize) -> Span {
        Span::new(self.start + by, self.end + by)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

/// Utterance function: the 4-way coarse dialogue-act label.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DaLabel {
    Inform,
    Question,
    Directive,
    Commissive,
}

impl DaLabel {
    pub const ALL: [DaLabel; 4] = [
        DaLabel::Inform,
        DaLabel::Question,
        DaLabel::Directive,
        DaLabel::Commissive,
    ];

    pub fn index(&self) -> usize {
        match self {
            DaLabel::Inform => 0,
            DaLabel::Question => 1,
            DaLabel::Directive => 2,
            DaLabel::Commissive => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<DaLabel> {
        DaLabel::ALL.get(i).copied()
    }

    pub fn parse(s: &str) -> Option<DaLabel> {
        match s {
            "inform" => Some(DaLabel::Inform),
            "question" => Some(DaLabel::Question),
            "directive" => Some(DaLabel::Directive),
            "commissive" => Some(DaLabel::Commissive),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DaLabel::Inform => "inform",
            DaLabel::Question => "question",
            DaLabel::Directive => "directive",
            DaLabel::Commissive => "commissive",
        }
    }
}

impl fmt::Display for DaLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Topic-transfer intent: how an utterance moves among knowledge topics.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicIntent {
    MiningInitial,
    StartingNew,
    FollowingNew,
}

impl TopicIntent {
    pub const ALL: [TopicIntent; 3] = [
        TopicIntent::MiningInitial,
        TopicIntent::StartingNew,
        TopicIntent::FollowingNew,
    ];

    pub fn index(&self) -> usize {
        match self {
            TopicIntent::MiningInitial => 0,
            TopicIntent::StartingNew => 1,
            TopicIntent::FollowingNew => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<TopicIntent> {
        TopicIntent::ALL.get(i).copied()
    }

    pub fn parse(s: &str) -> Option<TopicIntent> {
        match s {
            "mining_initial" => Some(TopicIntent::MiningInitial),
            "starting_new" => Some(TopicIntent::StartingNew),
            "following_new" => Some(TopicIntent::FollowingNew),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TopicIntent::MiningInitial => "mining_initial",
            TopicIntent::StartingNew => "starting_new",
            TopicIntent::FollowingNew => "following_new",
        }
    }
}

impl fmt::Display for TopicIntent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The dialogue policy of an utterance: (utterance function, topic intent).
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct PolicyLabel {
    pub da: DaLabel,
    pub topic_intent: TopicIntent,
}

impl PolicyLabel {
    pub fn new(da: DaLabel, topic_intent: TopicIntent) -> Self {
        PolicyLabel { da, topic_intent }
    }
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub da: Option<DaLabel>,
    /// Original label string when it was not one of the four coarse labels
    /// (a fine-grained label awaiting mapping).
    pub da_raw: Option<String>,
    pub topic_intent: Option<TopicIntent>,
    /// Index into the dialogue's knowledge collection.
    pub grounding: Option<usize>,
}

impl Utterance {
    pub fn policy(&self) -> Option<PolicyLabel> {
        Some(PolicyLabel::new(self.da?, self.topic_intent?))
    }
}

#[derive(Clone, Debug)]
pub struct KnowledgeEntry {
    pub topic: String,
    pub text: String,
    pub tokens: Vec<TokenId>,
}

/// Ordered candidate sentences with a token-offset table over their
/// concatenation.
#[derive(Clone, Debug)]
pub struct KnowledgeCollection {
    pub entries: Vec<KnowledgeEntry>,
    /// `offsets[i]` bounds entry `i` in the concatenated token stream;
    /// consecutive offsets partition the stream exactly.
    pub offsets: Vec<Span>,
}

impl KnowledgeCollection {
    pub fn from_entries(entries: Vec<KnowledgeEntry>) -> Self {
        let mut offsets = Vec::with_capacity(entries.len());
        let mut pos = 0usize;
        for e in &entries {
            debug_assert!(!e.tokens.is_empty());
            offsets.push(Span::new(pos, pos + e.tokens.len() - 1));
            pos += e.tokens.len();
        }
        KnowledgeCollection { entries, offsets }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.offsets.last().map(|s| s.end + 1).unwrap_or(0)
    }

    pub fn concat_tokens(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.total_tokens());
        for e in &self.entries {
            out.extend_from_slice(&e.tokens);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Dialogue {
    pub id: String,
    pub initial_topic: String,
    pub turns: Vec<Utterance>,
    pub knowledge: Arc<KnowledgeCollection>,
}

/// The unit consumed by both the policy planner and the generator.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    /// Up to the last three turns before the modeled response, in
    /// chronological order.
    pub context: Vec<Vec<TokenId>>,
    pub context_policies: Vec<PolicyLabel>,
    pub candidates: Arc<KnowledgeCollection>,
    pub gold_entry: usize,
    /// Offsets of the gold entry in the concatenated knowledge stream.
    pub gold_span: Span,
    pub response: Vec<TokenId>,
    pub response_policy: PolicyLabel,
    /// `(dialogue id, turn index)` of the modeled response.
    pub source: (String, usize),
}

// ---------------------------------------------------------------------------
// JSONL records
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    id: String,
    initial_topic: String,
    knowledge: Vec<KnowledgeRecord>,
    turns: Vec<TurnRecord>,
}

#[derive(Serialize, Deserialize)]
struct KnowledgeRecord {
    topic: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    speaker: Speaker,
    text: String,
    #[serde(default)]
    grounding: Option<usize>,
    #[serde(default)]
    da: Option<String>,
    #[serde(default)]
    topic_intent: Option<String>,
}

/// Load and validate a JSONL corpus. Dialogue order equals file order.
pub fn load_corpus(path: &Path, tokenizer: &dyn Tokenizer) -> Result<Vec<Dialogue>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut dialogues = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DialogueRecord = serde_json::from_str(&line).map_err(|source| Error::Json {
            line: lineno + 1,
            source,
        })?;
        dialogues.push(dialogue_from_record(record, lineno + 1, tokenizer)?);
    }
    Ok(dialogues)
}

fn dialogue_from_record(
    record: DialogueRecord,
    lineno: usize,
    tokenizer: &dyn Tokenizer,
) -> Result<Dialogue> {
    if record.turns.is_empty() {
        return Err(Error::validation(format!(
            "line {lineno}: dialogue {:?} has no turns",
            record.id
        )));
    }
    let mut entries = Vec::with_capacity(record.knowledge.len());
    for (i, k) in record.knowledge.into_iter().enumerate() {
        if k.topic.trim().is_empty() {
            return Err(Error::validation(format!(
                "line {lineno}: dialogue {:?} knowledge entry {i} has an empty topic",
                record.id
            )));
        }
        let tokens = tokenizer.encode_nonempty(&k.text);
        entries.push(KnowledgeEntry {
            topic: k.topic,
            text: k.text,
            tokens,
        });
    }
    let knowledge = Arc::new(KnowledgeCollection::from_entries(entries));

    let mut turns = Vec::with_capacity(record.turns.len());
    for (i, t) in record.turns.into_iter().enumerate() {
        if let Some(g) = t.grounding {
            if g >= knowledge.len() {
                return Err(Error::validation(format!(
                    "line {lineno}: dialogue {:?} turn {i} grounding {g} out of range \
                     ({} knowledge entries)",
                    record.id,
                    knowledge.len()
                )));
            }
        }
        let (da, da_raw) = match t.da {
            None => (None, None),
            Some(s) => match DaLabel::parse(&s) {
                Some(l) => (Some(l), None),
                None => (None, Some(s)),
            },
        };
        let topic_intent = match t.topic_intent {
            None => None,
            Some(s) => Some(TopicIntent::parse(&s).ok_or_else(|| {
                Error::validation(format!(
                    "line {lineno}: dialogue {:?} turn {i} has unknown topic_intent {s:?}"
                ,
                    record.id
                ))
            })?),
        };
        let tokens = tokenizer.encode_nonempty(&t.text);
        turns.push(Utterance {
            speaker: t.speaker,
            text: t.text,
            tokens,
            da,
            da_raw,
            topic_intent,
            grounding: t.grounding,
        });
    }

    Ok(Dialogue {
        id: record.id,
        initial_topic: record.initial_topic,
        turns,
        knowledge,
    })
}

/// Write dialogues back out as JSONL, preserving the declared format.
pub fn write_corpus(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    let mut file = File::create(path)?;
    for d in dialogues {
        let record = DialogueRecord {
            id: d.id.clone(),
            initial_topic: d.initial_topic.clone(),
            knowledge: d
                .knowledge
                .entries
                .iter()
                .map(|e| KnowledgeRecord {
                    topic: e.topic.clone(),
                    text: e.text.clone(),
                })
                .collect(),
            turns: d
                .turns
                .iter()
                .map(|t| TurnRecord {
                    speaker: t.speaker,
                    text: t.text.clone(),
                    grounding: t.grounding,
                    da: t
                        .da
                        .map(|l| l.as_str().to_string())
                        .or_else(|| t.da_raw.clone()),
                    topic_intent: t.topic_intent.map(|l| l.as_str().to_string()),
                })
                .collect(),
        };
        let line = serde_json::to_string(&record).expect("serializable record");
        writeln!(file, "{line}")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Example construction
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct BuildStats {
    /// Agent turns skipped because they carry no grounding.
    pub skipped_ungrounded: usize,
}

/// Build one training example per grounded agent turn.
///
/// The context is the up-to-`window` turns preceding the response. An agent
/// turn that opens the dialogue gets a pseudo context turn holding the
/// initial topic, so the context is never empty.
pub fn build_examples(
    dialogue: &Dialogue,
    window: usize,
    tokenizer: &dyn Tokenizer,
    stats: &mut BuildStats,
) -> Result<Vec<TrainingExample>> {
    assert!(window >= 1, "window must be at least 1");
    let mut examples = Vec::new();
    for (i, turn) in dialogue.turns.iter().enumerate() {
        if turn.speaker != Speaker::Agent {
            continue;
        }
        let gold_entry = match turn.grounding {
            Some(g) => g,
            None => {
                stats.skipped_ungrounded += 1;
                continue;
            }
        };
        let response_policy = turn.policy().ok_or_else(|| {
            Error::data(format!(
                "dialogue {:?} turn {i}: modeled agent turn is missing da/topic_intent labels; \
                 run annotation first",
                dialogue.id
            ))
        })?;

        let lo = i.saturating_sub(window);
        let mut context: Vec<Vec<TokenId>> = Vec::new();
        let mut context_policies: Vec<PolicyLabel> = Vec::new();
        for (j, prev) in dialogue.turns[lo..i].iter().enumerate() {
            let policy = prev.policy().ok_or_else(|| {
                Error::data(format!(
                    "dialogue {:?} turn {}: context turn is missing da/topic_intent labels; \
                     run annotation first",
                    dialogue.id,
                    lo + j
                ))
            })?;
            context.push(prev.tokens.clone());
            context_policies.push(policy);
        }
        if context.is_empty() {
            // dialogue-opening agent turn: the initial topic stands in as
            // the one-turn context
            context.push(tokenizer.encode_nonempty(&dialogue.initial_topic));
            context_policies.push(PolicyLabel::new(
                DaLabel::Inform,
                TopicIntent::MiningInitial,
            ));
        }

        examples.push(TrainingExample {
            context,
            context_policies,
            candidates: Arc::clone(&dialogue.knowledge),
            gold_entry,
            gold_span: dialogue.knowledge.offsets[gold_entry],
            response: turn.tokens.clone(),
            response_policy,
            source: (dialogue.id.clone(), i),
        });
    }
    Ok(examples)
}

// ---------------------------------------------------------------------------
// Planner input assembly
// ---------------------------------------------------------------------------

/// A model-ready planner sequence:
/// `[<cls>; context turns; <esp>; knowledge tokens]`.
#[derive(Clone, Debug)]
pub struct PlannerInput {
    pub tokens: Vec<TokenId>,
    /// 0 for `<cls>` and context, 1 for `<esp>` and knowledge.
    pub segments: Vec<u8>,
    /// Context tokens carry their turn's policy; specials and knowledge
    /// tokens carry none.
    pub policies: Vec<Option<PolicyLabel>>,
    /// Bounds of the knowledge portion, in assembled coordinates.
    pub knowledge_region: Span,
    /// `(global entry index, assembled span)` for every entry with at
    /// least one token in this sequence.
    pub entry_offsets: Vec<(usize, Span)>,
    /// Gold span in assembled coordinates, when the gold entry is fully
    /// contained in this sequence.
    pub gold: Option<Span>,
}

impl PlannerInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Truncate context turns to at most `budget` tokens: whole oldest turns
/// are dropped first, then the oldest surviving turn loses tokens from its
/// left.
fn truncate_context(
    context: &[Vec<TokenId>],
    policies: &[PolicyLabel],
    budget: usize,
) -> Vec<(Vec<TokenId>, PolicyLabel)> {
    let mut kept: Vec<(Vec<TokenId>, PolicyLabel)> = Vec::new();
    let mut used = 0usize;
    for (toks, pol) in context.iter().zip(policies).rev() {
        if used + toks.len() <= budget {
            kept.push((toks.clone(), *pol));
            used += toks.len();
        } else {
            let remaining = budget - used;
            if remaining > 0 {
                let tail = toks[toks.len() - remaining..].to_vec();
                kept.push((tail, *pol));
            }
            break;
        }
    }
    kept.reverse();
    kept
}

/// Assemble a single planner input, hard-capped at `max_len` tokens.
/// Knowledge beyond the cap is left for chunked assembly.
pub fn assemble_planner_input(
    example: &TrainingExample,
    max_len: usize,
    context_budget: usize,
) -> PlannerInput {
    let chunks = assemble_chunks(example, max_len, context_budget, false)
        .expect("unchunked assembly cannot fail");
    chunks.into_iter().next().expect("at least one chunk")
}

/// Assemble one input per knowledge chunk, splitting at entry boundaries
/// only. Errors when a single entry cannot fit the knowledge budget.
pub fn assemble_planner_chunks(
    example: &TrainingExample,
    max_len: usize,
    context_budget: usize,
) -> Result<Vec<PlannerInput>> {
    assemble_chunks(example, max_len, context_budget, true)
}

fn assemble_chunks(
    example: &TrainingExample,
    max_len: usize,
    context_budget: usize,
    entry_boundaries: bool,
) -> Result<Vec<PlannerInput>> {
    let kept = truncate_context(&example.context, &example.context_policies, context_budget);
    let ctx_len: usize = kept.iter().map(|(t, _)| t.len()).sum();
    assert!(
        max_len >= ctx_len + 3,
        "max_len too small for context plus specials"
    );
    let budget = max_len - ctx_len - 2; // <cls> and <esp>

    let knowledge = &example.candidates;
    let mut chunks: Vec<Vec<(usize, Span, Vec<TokenId>)>> = Vec::new();

    if entry_boundaries {
        let mut current: Vec<(usize, Span, Vec<TokenId>)> = Vec::new();
        let mut used = 0usize;
        for (idx, entry) in knowledge.entries.iter().enumerate() {
            let len = entry.tokens.len();
            if len > budget {
                return Err(Error::data(format!(
                    "knowledge entry {idx} ({:?}) has {len} tokens, exceeding the \
                     per-chunk budget of {budget}",
                    entry.topic
                )));
            }
            if used + len > budget {
                chunks.push(std::mem::take(&mut current));
                used = 0;
            }
            current.push((idx, knowledge.offsets[idx], entry.tokens.clone()));
            used += len;
        }
        if !current.is_empty() || chunks.is_empty() {
            chunks.push(current);
        }
    } else {
        // single sequence, hard cap: the last entry may be clipped
        let mut current: Vec<(usize, Span, Vec<TokenId>)> = Vec::new();
        let mut used = 0usize;
        for (idx, entry) in knowledge.entries.iter().enumerate() {
            if used == budget {
                break;
            }
            let len = entry.tokens.len().min(budget - used);
            let clipped = entry.tokens[..len].to_vec();
            let full = knowledge.offsets[idx];
            current.push((idx, Span::new(full.start, full.start + len - 1), clipped));
            used += len;
        }
        chunks.push(current);
    }

    let mut out = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let mut tokens = vec![CLS];
        let mut segments = vec![0u8];
        let mut policies: Vec<Option<PolicyLabel>> = vec![None];
        for (toks, pol) in &kept {
            for &t in toks {
                tokens.push(t);
                segments.push(0);
                policies.push(Some(*pol));
            }
        }
        tokens.push(ESP);
        segments.push(1);
        policies.push(None);

        let region_start = tokens.len();
        let mut entry_offsets = Vec::with_capacity(chunk.len());
        let mut gold = None;
        for (idx, stream_span, toks) in &chunk {
            let start = tokens.len();
            for &t in toks {
                tokens.push(t);
                segments.push(1);
                policies.push(None);
            }
            let span = Span::new(start, tokens.len() - 1);
            entry_offsets.push((*idx, span));
            let full = example.candidates.offsets[*idx];
            if *idx == example.gold_entry && stream_span == &full {
                gold = Some(span);
            }
        }
        let region_end = tokens.len().saturating_sub(1);
        out.push(PlannerInput {
            tokens,
            segments,
            policies,
            knowledge_region: Span::new(region_start, region_end.max(region_start)),
            entry_offsets,
            gold,
        });
    }
    Ok(out)
}
