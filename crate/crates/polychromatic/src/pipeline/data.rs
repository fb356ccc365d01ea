//! Token streams, batch packing with document masks, and chat samples.
//!
//! Token files are raw little-endian u32, no header. Documents are separated
//! by a single EOS token and every document ends with exactly one.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;

use crate::layers::AttentionMask;

use super::PipelineError;

/// Byte-level vocabulary: 256 raw bytes, EOS, and four chat-control tokens.
pub const EOS_ID: u32 = 256;
pub const ROLE_SYSTEM: u32 = 257;
pub const ROLE_USER: u32 = 258;
pub const ROLE_ASSISTANT: u32 = 259;
pub const END_TURN: u32 = 260;
pub const BYTE_VOCAB_SIZE: usize = 261;

/// Tokenizer that maps text to its raw bytes. Control ids sit above 255.
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn encode(text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    pub fn decode(tokens: &[u32]) -> String {
        let mut out = String::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, out: &mut String| {
            if !bytes.is_empty() {
                out.push_str(&String::from_utf8_lossy(bytes));
                bytes.clear();
            }
        };
        for &t in tokens {
            if t < 256 {
                bytes.push(t as u8);
            } else {
                flush(&mut bytes, &mut out);
                out.push_str(match t {
                    EOS_ID => "<|eos|>",
                    ROLE_SYSTEM => "<|system|>",
                    ROLE_USER => "<|user|>",
                    ROLE_ASSISTANT => "<|assistant|>",
                    END_TURN => "<|end|>",
                    _ => "<|unk|>",
                });
            }
        }
        flush(&mut bytes, &mut out);
        out
    }
}

/// An in-memory token stream with its derived document-boundary index.
pub struct TokenStream {
    tokens: Vec<u32>,
    doc_starts: Vec<usize>,
    eos_id: u32,
}

impl TokenStream {
    pub fn from_tokens(tokens: Vec<u32>, eos_id: u32) -> Result<Self, PipelineError> {
        if tokens.is_empty() {
            return Err(PipelineError::Data("token stream is empty".into()));
        }
        if *tokens.last().unwrap() != eos_id {
            return Err(PipelineError::Data(
                "token stream must end with an EOS token".into(),
            ));
        }
        let mut doc_starts = vec![0usize];
        for (i, &t) in tokens.iter().enumerate() {
            if t == eos_id && i + 1 < tokens.len() {
                doc_starts.push(i + 1);
            }
        }
        Ok(TokenStream {
            tokens,
            doc_starts,
            eos_id,
        })
    }

    /// Reads a raw little-endian u32 file.
    pub fn from_file(path: &Path, eos_id: u32) -> Result<Self, PipelineError> {
        let bytes = fs::read(path)?;
        if bytes.len() % 4 != 0 {
            return Err(PipelineError::Data(format!(
                "{}: length {} is not a multiple of 4",
                path.display(),
                bytes.len()
            )));
        }
        let tokens = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_tokens(tokens, eos_id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn doc_starts(&self) -> &[usize] {
        &self.doc_starts
    }

    pub fn eos_id(&self) -> u32 {
        self.eos_id
    }

    /// Document mask for the window [start, start+seq_len): boundaries are
    /// re-based to the window, which always opens a span at 0.
    pub fn window_mask(
        &self,
        start: usize,
        seq_len: usize,
    ) -> Result<AttentionMask, PipelineError> {
        let mut rel = vec![0usize];
        for &d in &self.doc_starts {
            if d > start && d < start + seq_len {
                rel.push(d - start);
            }
        }
        AttentionMask::new(rel, seq_len).map_err(|e| PipelineError::Data(e.to_string()))
    }
}

/// Writes tokens as a raw little-endian u32 file.
pub fn write_token_file(path: &Path, tokens: &[u32]) -> Result<(), PipelineError> {
    let mut f = fs::File::create(path)?;
    let mut buf = Vec::with_capacity(tokens.len() * 4);
    for &t in tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

/// One packed training batch: `batch` rows of `seq_len` inputs, next-token
/// targets, one document mask per row, and a per-position loss mask.
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub masks: Vec<AttentionMask>,
    pub loss_mask: Vec<bool>,
}

/// Packs `batch` contiguous windows starting at `cursor`; the target for
/// position i is token i+1. Returns the advanced cursor, wrapping to 0 when
/// the stream is exhausted.
pub fn load_batch(
    stream: &TokenStream,
    batch: usize,
    seq_len: usize,
    mut cursor: usize,
) -> Result<(Batch, usize), PipelineError> {
    if seq_len + 1 > stream.len() {
        return Err(PipelineError::Data(format!(
            "seq_len {} needs {} tokens but the stream holds {}",
            seq_len,
            seq_len + 1,
            stream.len()
        )));
    }
    let mut tokens = Vec::with_capacity(batch * seq_len);
    let mut targets = Vec::with_capacity(batch * seq_len);
    let mut masks = Vec::with_capacity(batch);
    for _ in 0..batch {
        if cursor + seq_len + 1 > stream.len() {
            cursor = 0;
        }
        let window = &stream.tokens()[cursor..cursor + seq_len + 1];
        tokens.extend_from_slice(&window[..seq_len]);
        targets.extend_from_slice(&window[1..]);
        masks.push(stream.window_mask(cursor, seq_len)?);
        cursor += seq_len;
    }
    if cursor + seq_len + 1 > stream.len() {
        cursor = 0;
    }
    let loss_mask = vec![true; batch * seq_len];
    Ok((
        Batch {
            batch,
            seq_len,
            tokens,
            targets,
            masks,
            loss_mask,
        },
        cursor,
    ))
}

/// Several domain streams with a two-phase sampling-weight schedule: weights
/// switch from `phase1` to `phase2` once `step / total_steps` reaches
/// `switch_frac`.
pub struct MixedStreams {
    streams: Vec<TokenStream>,
    cursors: Vec<usize>,
    phase1: Vec<f64>,
    phase2: Vec<f64>,
    switch_frac: f64,
    rng: ChaCha20Rng,
}

impl MixedStreams {
    pub fn new(
        streams: Vec<TokenStream>,
        phase1: Vec<f64>,
        phase2: Vec<f64>,
        switch_frac: f64,
        seed: u64,
    ) -> Result<Self, PipelineError> {
        if streams.is_empty() {
            return Err(PipelineError::Data("no token streams supplied".into()));
        }
        if phase1.len() != streams.len() || phase2.len() != streams.len() {
            return Err(PipelineError::Data(
                "sampling weights must match the number of streams".into(),
            ));
        }
        let cursors = vec![0usize; streams.len()];
        Ok(MixedStreams {
            streams,
            cursors,
            phase1,
            phase2,
            switch_frac,
            rng: ChaCha20Rng::seed_from_u64(seed),
        })
    }

    /// Uniform single-stream mix.
    pub fn single(stream: TokenStream, seed: u64) -> Self {
        MixedStreams::new(vec![stream], vec![1.0], vec![1.0], 1.0, seed)
            .expect("single stream is always valid")
    }

    pub fn streams(&self) -> &[TokenStream] {
        &self.streams
    }

    /// Samples one stream per row under the phase weights, then packs from it.
    pub fn next_batch(
        &mut self,
        batch: usize,
        seq_len: usize,
        step: usize,
        total_steps: usize,
    ) -> Result<Batch, PipelineError> {
        let weights = if (step as f64) < self.switch_frac * total_steps as f64 {
            &self.phase1
        } else {
            &self.phase2
        };
        let dist = WeightedIndex::new(weights)
            .map_err(|e| PipelineError::Data(format!("bad sampling weights: {e}")))?;
        let mut merged: Option<Batch> = None;
        for _ in 0..batch {
            let idx = if self.streams.len() == 1 {
                0
            } else {
                dist.sample(&mut self.rng)
            };
            let (row, next) = load_batch(&self.streams[idx], 1, seq_len, self.cursors[idx])?;
            self.cursors[idx] = next;
            merged = Some(match merged {
                None => row,
                Some(mut acc) => {
                    acc.batch += 1;
                    acc.tokens.extend_from_slice(&row.tokens);
                    acc.targets.extend_from_slice(&row.targets);
                    acc.masks.extend(row.masks);
                    acc.loss_mask.extend_from_slice(&row.loss_mask);
                    acc
                }
            });
        }
        Ok(merged.expect("batch >= 1"))
    }
}

#[derive(Debug, Deserialize)]
pub struct ChatTurn {
    pub role: String,
    pub text: String,
}

#[derive(Debug, Deserialize)]
struct ChatSampleJson {
    turns: Vec<ChatTurn>,
}

/// An encoded conversation with a per-token loss mask (true only on
/// assistant-span tokens).
pub struct ChatSample {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

/// Frames each turn as `[role] text-bytes [end-of-turn]`. The loss mask
/// covers assistant text bytes and the assistant turn's end token; role
/// delimiters and non-assistant turns are excluded.
pub fn encode_chat(turns: &[ChatTurn]) -> Result<ChatSample, PipelineError> {
    let mut tokens = Vec::new();
    let mut loss_mask = Vec::new();
    for turn in turns {
        let role_id = match turn.role.as_str() {
            "system" => ROLE_SYSTEM,
            "user" => ROLE_USER,
            "assistant" => ROLE_ASSISTANT,
            other => {
                return Err(PipelineError::Data(format!("unknown chat role {other:?}")));
            }
        };
        let is_assistant = role_id == ROLE_ASSISTANT;
        tokens.push(role_id);
        loss_mask.push(false);
        for b in turn.text.bytes() {
            tokens.push(u32::from(b));
            loss_mask.push(is_assistant);
        }
        tokens.push(END_TURN);
        loss_mask.push(is_assistant);
    }
    if !loss_mask.iter().any(|&m| m) {
        return Err(PipelineError::Data(
            "chat sample has no assistant tokens".into(),
        ));
    }
    Ok(ChatSample { tokens, loss_mask })
}

/// Loads one JSON object per line: `{"turns": [{"role", "text"}, ...]}`.
/// Samples without assistant tokens are rejected here, not at training time.
pub fn load_chat_samples(path: &Path) -> Result<Vec<ChatSample>, PipelineError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ChatSampleJson = serde_json::from_str(line)
            .map_err(|e| PipelineError::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let sample = encode_chat(&parsed.turns)
            .map_err(|e| PipelineError::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(sample);
    }
    if out.is_empty() {
        return Err(PipelineError::Data(format!(
            "{}: no chat samples",
            path.display()
        )));
    }
    Ok(out)
}

/// Deterministic synthetic prose: grammatical filler sentences drawn from a
/// fixed lexicon. Low-entropy enough for a byte model to learn quickly, which
/// is all the smoke runs need. Returns documents of a few sentences each.
pub fn synthetic_documents(target_bytes: usize, seed: u64) -> Vec<String> {
    const SUBJECTS: &[&str] = &[
        "the gradient",
        "a tensor",
        "the optimizer",
        "the router",
        "the model",
        "a neuron",
        "the schedule",
        "the dataset",
        "the decoder",
        "an expert",
    ];
    const VERBS: &[&str] = &[
        "updates",
        "shrinks",
        "routes",
        "normalizes",
        "samples",
        "tracks",
        "predicts",
        "encodes",
        "anneals",
        "balances",
    ];
    const OBJECTS: &[&str] = &[
        "the hidden state",
        "every logit",
        "a residual branch",
        "the loss",
        "each document",
        "the palette",
        "its momentum",
        "the temperature",
        "a byte stream",
        "the vocabulary",
    ];
    const TAILS: &[&str] = &[
        "during training",
        "after warmup",
        "without drift",
        "in fixed point",
        "at every step",
        "across layers",
        "before the update",
        "on schedule",
    ];
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    let mut written = 0usize;
    while written < target_bytes {
        let sentences = rng.gen_range(3..8);
        let mut doc = String::new();
        for _ in 0..sentences {
            let s = format!(
                "{} {} {} {}. ",
                SUBJECTS[rng.gen_range(0..SUBJECTS.len())],
                VERBS[rng.gen_range(0..VERBS.len())],
                OBJECTS[rng.gen_range(0..OBJECTS.len())],
                TAILS[rng.gen_range(0..TAILS.len())],
            );
            doc.push_str(&s);
        }
        written += doc.len();
        docs.push(doc);
    }
    docs
}

/// Byte-tokenizes documents and joins them with EOS separators.
pub fn tokenize_documents(docs: &[String]) -> Vec<u32> {
    let mut out = Vec::new();
    for doc in docs {
        out.extend(ByteTokenizer::encode(doc));
        out.push(EOS_ID);
    }
    out
}
