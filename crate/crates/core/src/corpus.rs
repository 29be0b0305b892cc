//! Persona-dialogue corpora: JSONL loading, vocabulary and batching.
//!
//! Each JSONL line holds one `(persona, query, response)` triple:
//!
//! ```json
//! {"persona": ["i like music", "i teach"], "query": "hi", "response": "hello"}
//! ```
//!
//! Persona sentences are joined with a single space. Unknown fields are ignored.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ClvError, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueExample {
    pub persona_text: String,
    pub query: String,
    pub response: String,
}

impl DialogueExample {
    pub fn new(persona: &[&str], query: &str, response: &str) -> Self {
        DialogueExample {
            persona_text: persona.join(" "),
            query: query.to_string(),
            response: response.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
}

pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat) -> Result<Vec<DialogueExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    match format {
        CorpusFormat::Jsonl => parse_jsonl(path, &text),
    }
}

fn parse_jsonl(path: &Path, text: &str) -> Result<Vec<DialogueExample>> {
    let tokenizer = WhitespaceTokenizer;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| ClvError::CorpusLine {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let missing = |field: &str| ClvError::MissingField {
            path: path.to_path_buf(),
            line: line_no,
            field: field.to_string(),
        };
        let value: Value =
            serde_json::from_str(line).map_err(|e| err(format!("malformed JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| err("expected a JSON object".into()))?;
        let persona = obj.get("persona").ok_or_else(|| missing("persona"))?;
        let persona = persona
            .as_array()
            .ok_or_else(|| err("`persona` must be an array of strings".into()))?
            .iter()
            .map(|s| {
                s.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| err("`persona` must be an array of strings".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let field = |name: &str| -> Result<String> {
            obj.get(name)
                .ok_or_else(|| missing(name))?
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| err(format!("`{name}` must be a string")))
        };
        let query = field("query")?;
        let response = field("response")?;
        if tokenizer.tokenize(&query).is_empty() {
            return Err(err("`query` is empty after tokenization".into()));
        }
        if tokenizer.tokenize(&response).is_empty() {
            return Err(err("`response` is empty after tokenization".into()));
        }
        out.push(DialogueExample {
            persona_text: persona.join(" "),
            query,
            response,
        });
    }
    Ok(out)
}

/// One line of generation input. Only `query` is required; persona and
/// response feed the recognition path when present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationInput {
    pub query: String,
    pub persona: Option<String>,
    pub response: Option<String>,
}

/// Reads generation inputs: JSON objects with `query` and optional `persona`
/// (array of strings, or one string) and `response`.
pub fn load_generation_inputs(path: impl AsRef<Path>) -> Result<Vec<GenerationInput>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| ClvError::CorpusLine {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let value: Value = serde_json::from_str(line).map_err(|e| err(format!("malformed JSON: {e}")))?;
        let obj = value.as_object().ok_or_else(|| err("expected a JSON object".into()))?;
        let query = obj
            .get("query")
            .ok_or_else(|| ClvError::MissingField {
                path: path.to_path_buf(),
                line: i + 1,
                field: "query".into(),
            })?
            .as_str()
            .ok_or_else(|| err("`query` must be a string".into()))?
            .to_string();
        let persona = match obj.get("persona") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Array(items)) => Some(
                items
                    .iter()
                    .map(|s| s.as_str().ok_or_else(|| err("`persona` must hold strings".into())))
                    .collect::<Result<Vec<_>>>()?
                    .join(" "),
            ),
            Some(_) => return Err(err("`persona` must be a string or an array of strings".into())),
        };
        let response = match obj.get("response") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(err("`response` must be a string".into())),
        };
        out.push(GenerationInput { query, persona, response });
    }
    if out.is_empty() {
        return Err(ClvError::EmptyCorpus);
    }
    Ok(out)
}

/// Splits text into tokens and joins them back.
pub trait Tokenizer {
    fn tokenize(&self, text: &str) -> Vec<String>;
    fn detokenize(&self, tokens: &[String]) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }

    fn detokenize(&self, tokens: &[String]) -> String {
        tokens.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary over persona, query and response text. Tokens are
    /// ordered by descending frequency, then lexicographically.
    pub fn build(examples: &[DialogueExample], min_count: usize) -> Result<Self> {
        Self::build_with(&WhitespaceTokenizer, examples, min_count)
    }

    pub fn build_with(
        tokenizer: &dyn Tokenizer,
        examples: &[DialogueExample],
        min_count: usize,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(ClvError::EmptyCorpus);
        }
        if min_count == 0 {
            return Err(ClvError::InvalidArgument("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for ex in examples {
            for text in [&ex.persona_text, &ex.query, &ex.response] {
                for tok in tokenizer.tokenize(text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let token_to_id = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            token_to_id,
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_with(&WhitespaceTokenizer, text)
    }

    pub fn encode_with(&self, tokenizer: &dyn Tokenizer, text: &str) -> Vec<usize> {
        tokenizer.tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Inverse of [`encode`](Self::encode); pad, bos and eos are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        self.decode_with(&WhitespaceTokenizer, ids)
    }

    pub fn decode_with(&self, tokenizer: &dyn Tokenizer, ids: &[usize]) -> String {
        let toks: Vec<String> = ids
            .iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect();
        tokenizer.detokenize(&toks)
    }

    /// Encodes `text` and appends eos, truncating to `max_len` with eos kept last.
    pub fn encode_sequence(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids = self.encode(text);
        ids.push(EOS);
        truncate_keep_eos(ids, max_len)
    }
}

fn truncate_keep_eos(mut ids: Vec<usize>, max_len: usize) -> Vec<usize> {
    if ids.len() > max_len && max_len > 0 {
        ids.truncate(max_len);
        ids[max_len - 1] = EOS;
    }
    ids
}

/// One padded mini-batch. Every sequence ends with eos; `decoder_input_ids`
/// is the response with bos prepended and its final token dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub persona_ids: Array2<usize>,
    pub query_ids: Array2<usize>,
    pub response_ids: Array2<usize>,
    pub decoder_input_ids: Array2<usize>,
    pub persona_lengths: Vec<usize>,
    pub query_lengths: Vec<usize>,
    pub response_lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn persona(&self, i: usize) -> Vec<usize> {
        row_prefix(&self.persona_ids, i, self.persona_lengths[i])
    }

    pub fn query(&self, i: usize) -> Vec<usize> {
        row_prefix(&self.query_ids, i, self.query_lengths[i])
    }

    pub fn response(&self, i: usize) -> Vec<usize> {
        row_prefix(&self.response_ids, i, self.response_lengths[i])
    }

    pub fn decoder_input(&self, i: usize) -> Vec<usize> {
        row_prefix(&self.decoder_input_ids, i, self.response_lengths[i])
    }
}

fn row_prefix(m: &Array2<usize>, row: usize, len: usize) -> Vec<usize> {
    m.row(row).iter().take(len).copied().collect()
}

fn pad(rows: &[Vec<usize>]) -> Array2<usize> {
    let width = rows.iter().map(Vec::len).max().unwrap_or(0);
    Array2::from_shape_fn((rows.len(), width), |(r, c)| rows[r].get(c).copied().unwrap_or(PAD))
}

/// Shuffles (deterministically under `seed`) and cuts into batches. The final
/// batch may be short.
pub fn make_batches(
    examples: &[DialogueExample],
    vocab: &Vocabulary,
    batch_size: usize,
    seed: u64,
    max_len: usize,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(ClvError::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks(batch_size)
        .map(|idx| batch_from_indices(examples, vocab, idx, max_len))
        .collect())
}

pub fn batch_from_indices(
    examples: &[DialogueExample],
    vocab: &Vocabulary,
    indices: &[usize],
    max_len: usize,
) -> Batch {
    let mut persona = Vec::with_capacity(indices.len());
    let mut query = Vec::with_capacity(indices.len());
    let mut response = Vec::with_capacity(indices.len());
    let mut decoder = Vec::with_capacity(indices.len());
    for &i in indices {
        let ex = &examples[i];
        persona.push(vocab.encode_sequence(&ex.persona_text, max_len));
        query.push(vocab.encode_sequence(&ex.query, max_len));
        let r = vocab.encode_sequence(&ex.response, max_len);
        let mut d = Vec::with_capacity(r.len());
        d.push(BOS);
        d.extend_from_slice(&r[..r.len() - 1]);
        decoder.push(d);
        response.push(r);
    }
    Batch {
        indices: indices.to_vec(),
        persona_lengths: persona.iter().map(Vec::len).collect(),
        query_lengths: query.iter().map(Vec::len).collect(),
        response_lengths: response.iter().map(Vec::len).collect(),
        persona_ids: pad(&persona),
        query_ids: pad(&query),
        response_ids: pad(&response),
        decoder_input_ids: pad(&decoder),
    }
}
