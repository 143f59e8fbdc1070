//! Textual semantic prototypes: task-specific prompts built from
//! learnable context tokens plus fixed FACS-derived templates, encoded
//! into per-class prototype vectors by a frozen text-encoder provider.
//!
//! The provider is either a seeded surrogate (frozen embedding table, a
//! frozen affine map over the mean-pooled sequence, elementwise tanh) or
//! file-backed rows precomputed by a real encoder offline. Gradients
//! flow only into the prepended context embeddings.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::facs::FacsTable;
use crate::numerics::{fnv1a64, seeded_gaussian, Tape, Tensor, VarId};

pub const DEFAULT_VOCAB: usize = 8192;
pub const DEFAULT_MAX_TOKENS: usize = 77;

/// Which task a prompt belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Expression,
    Au,
}

/// Description style for expression prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStyle {
    Compound,
    Standalone,
    Words,
}

/// Tokenized template text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub token_ids: Vec<usize>,
    pub source_text: String,
    pub truncated: bool,
}

/// Deterministic hash tokenizer: lowercase, split on whitespace and
/// punctuation, word -> id via a fixed 64-bit hash modulo vocabulary.
pub fn tokenize(text: &str, vocab: usize, max_tokens: usize) -> Result<TokenSequence> {
    if text.is_empty() {
        return Err(Error::InvalidArgument("empty prompt text".into()));
    }
    let lower = text.to_lowercase();
    let mut ids: Vec<usize> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| (fnv1a64(w.as_bytes()) % vocab as u64) as usize)
        .collect();
    let truncated = ids.len() > max_tokens;
    if truncated {
        ids.truncate(max_tokens);
    }
    Ok(TokenSequence {
        token_ids: ids,
        source_text: text.to_string(),
        truncated,
    })
}

/// Pick the template text for an expression label in the given style.
pub fn description_variant(table: &FacsTable, label: &str, style: PromptStyle) -> Result<String> {
    let e = table.expression(label)?;
    Ok(match style {
        PromptStyle::Compound => e.compound_description.clone(),
        PromptStyle::Standalone => e.standalone_description.clone(),
        PromptStyle::Words => e.word_description.clone(),
    })
}

/// Frozen seeded surrogate for the text encoder.
///
/// Holds a token embedding table (vocab x d_tok), an affine map
/// d_tok -> d, and a bias; all drawn once from the seed and never
/// updated. Identical input is bitwise reproducible.
#[derive(Clone, Debug)]
pub struct SurrogateEncoder {
    pub d_tok: usize,
    pub d: usize,
    pub vocab: usize,
    pub max_tokens: usize,
    embedding: Tensor,
    enc_w: Tensor,
    enc_b: Tensor,
}

impl SurrogateEncoder {
    pub fn new(seed: u64, d_tok: usize, d: usize, vocab: usize, max_tokens: usize) -> Self {
        SurrogateEncoder {
            d_tok,
            d,
            vocab,
            max_tokens,
            embedding: seeded_gaussian(seed, "text_encoder.embedding", vocab, d_tok, 1.0),
            enc_w: seeded_gaussian(seed, "text_encoder.affine_w", d_tok, d, 1.0 / (d_tok as f64).sqrt()),
            enc_b: seeded_gaussian(seed, "text_encoder.affine_b", 1, d, 0.1),
        }
    }

    /// Frozen embedding rows for a token sequence, as a constant tensor.
    pub fn embed_template(&self, seq: &TokenSequence) -> Tensor {
        let mut rows = Tensor::zeros(seq.token_ids.len(), self.d_tok);
        for (r, &id) in seq.token_ids.iter().enumerate() {
            for c in 0..self.d_tok {
                rows.set(r, c, self.embedding.at(id, c));
            }
        }
        rows
    }

    /// Tape-free encoding of a bare template (no context): weighted
    /// mean-pool, frozen affine, tanh. Matches the differentiable path
    /// for context-free prompts.
    pub fn encode_pooled(&self, seq: &TokenSequence, weights: Option<&[f64]>) -> Result<Tensor> {
        let rows = self.embed_template(seq);
        let l = rows.rows();
        let mut w = match weights {
            Some(ws) => {
                if ws.len() != l {
                    return Err(Error::Shape(format!(
                        "{} pooling weights for {} template tokens",
                        ws.len(),
                        l
                    )));
                }
                ws.to_vec()
            }
            None => vec![1.0; l],
        };
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("pooling weights sum to zero".into()));
        }
        for x in &mut w {
            *x /= total;
        }
        let mut out = Tensor::zeros(1, self.d);
        for c in 0..self.d {
            let mut acc = 0.0;
            for t in 0..self.d_tok {
                let pooled: f64 = (0..l).map(|r| w[r] * rows.at(r, t)).sum();
                acc += pooled * self.enc_w.at(t, c);
            }
            out.set(0, c, (acc + self.enc_b.at(0, c)).tanh());
        }
        Ok(out)
    }

    /// A snapshot of the frozen internals, used to assert they never move.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0;
        for t in [&self.embedding, &self.enc_w, &self.enc_b] {
            for &x in t.data() {
                h = h.wrapping_mul(0x100000001b3) ^ x.to_bits();
            }
        }
        h
    }
}

/// One prompt: optional learnable context (a tape var of shape c x d_tok)
/// followed by the frozen embedded template.
pub struct PromptSpec {
    pub context: Option<VarId>,
    pub template: TokenSequence,
    /// Per-token pooling weights (same length as the template); uniform
    /// when absent.
    pub weights: Option<Vec<f64>>,
    pub task: Task,
}

/// Inverse-document-frequency pooling weights over a prompt set:
/// a token appearing in `df` of the templates gets weight 1/df, so the
/// boilerplate shared by every prompt stops dominating the pooled
/// embedding and the class-specific words carry the prototype.
pub fn idf_weights(templates: &[TokenSequence]) -> Vec<Vec<f64>> {
    templates
        .iter()
        .map(|t| {
            t.token_ids
                .iter()
                .map(|id| {
                    let df = templates
                        .iter()
                        .filter(|u| u.token_ids.contains(id))
                        .count();
                    1.0 / df.max(1) as f64
                })
                .collect()
        })
        .collect()
}

/// Assemble the embedded prompt sequence: context rows first, then the
/// frozen template token embeddings. Output shape (c + l) x d_tok.
pub fn compose_prompt(tape: &mut Tape, spec: &PromptSpec, enc: &SurrogateEncoder) -> VarId {
    let template = tape.constant(enc.embed_template(&spec.template));
    match spec.context {
        Some(ctx) => tape.concat_rows(&[ctx, template]),
        None => template,
    }
}

/// Encode one prototype row per prompt: mean-pool the embedded sequence,
/// apply the frozen affine map, then tanh. Differentiable only through
/// the context embeddings. Returns a (num_prompts x d) tape var.
pub fn encode_prototypes(
    tape: &mut Tape,
    specs: &[PromptSpec],
    enc: &SurrogateEncoder,
) -> Result<VarId> {
    if specs.is_empty() {
        return Err(Error::Config("no prompts to encode".into()));
    }
    let w = tape.constant(enc.enc_w.clone());
    let b = tape.constant(enc.enc_b.clone());
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        if let Some(ctx) = spec.context {
            if tape.value(ctx).cols() != enc.d_tok {
                return Err(Error::Config(format!(
                    "context width {} does not match provider d_tok {}",
                    tape.value(ctx).cols(),
                    enc.d_tok
                )));
            }
        }
        let seq = compose_prompt(tape, spec, enc);
        // weighted pooling: the context block counts as one token's worth
        // of weight in total, template tokens carry their own weights
        let n_ctx = spec.context.map(|c| tape.value(c).rows()).unwrap_or(0);
        let l = spec.template.token_ids.len();
        let mut w_row = Vec::with_capacity(n_ctx + l);
        w_row.extend(std::iter::repeat(1.0 / n_ctx.max(1) as f64).take(n_ctx));
        match &spec.weights {
            Some(ws) => {
                if ws.len() != l {
                    return Err(Error::Shape(format!(
                        "{} pooling weights for {} template tokens",
                        ws.len(),
                        l
                    )));
                }
                w_row.extend_from_slice(ws);
            }
            None => w_row.extend(std::iter::repeat(1.0).take(l)),
        }
        let total: f64 = w_row.iter().sum();
        for w in &mut w_row {
            *w /= total;
        }
        let wv = tape.constant(Tensor::new(1, n_ctx + l, w_row)?);
        let pooled = tape.matmul(wv, seq);
        let affine = tape.matmul(pooled, w);
        let shifted = tape.add_row_broadcast(affine, b);
        rows.push(tape.tanh(shifted));
    }
    Ok(tape.concat_rows(&rows))
}

/// File-backed per-class embeddings produced by an external encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FileBackedEmbeddings {
    pub class_names: Vec<String>,
    pub rows: Tensor,
}

const EMB_MAGIC: &[u8; 7] = b"SSMEMB1";

/// Write embeddings in the binary container plus the `.names` sidecar.
pub fn write_embeddings(path: &Path, names: &[String], rows: &Tensor) -> Result<()> {
    if names.len() != rows.rows() {
        return Err(Error::Shape(format!(
            "{} names for {} rows",
            names.len(),
            rows.rows()
        )));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(EMB_MAGIC);
    buf.extend_from_slice(&(rows.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(rows.cols() as u32).to_le_bytes());
    for &x in rows.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    let sidecar = sidecar_path(path);
    fs::write(sidecar, names.join("\n") + "\n")?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<FileBackedEmbeddings> {
    let buf = fs::read(path)?;
    if buf.len() < 15 || &buf[0..7] != EMB_MAGIC {
        return Err(Error::Format(format!(
            "{}: missing SSMEMB1 magic",
            path.display()
        )));
    }
    let classes = u32::from_le_bytes(buf[7..11].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(buf[11..15].try_into().unwrap()) as usize;
    let expect = 15 + classes * d * 8;
    if buf.len() != expect {
        return Err(Error::Format(format!(
            "{}: expected {expect} bytes, found {}",
            path.display(),
            buf.len()
        )));
    }
    let mut data = Vec::with_capacity(classes * d);
    for i in 0..classes * d {
        let off = 15 + i * 8;
        data.push(f64::from_le_bytes(buf[off..off + 8].try_into().unwrap()));
    }
    let names_text = fs::read_to_string(sidecar_path(path))?;
    let class_names: Vec<String> = names_text.lines().map(|s| s.to_string()).collect();
    if class_names.len() != classes {
        return Err(Error::Format(format!(
            "sidecar lists {} names for {} classes",
            class_names.len(),
            classes
        )));
    }
    Ok(FileBackedEmbeddings {
        class_names,
        rows: Tensor::new(classes, d, data)?,
    })
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".names");
    std::path::PathBuf::from(s)
}
