//! The resolution-annotated prompt micro-language.
//!
//! Grammar:
//!
//! ```text
//! prompt ::= term (WS term)* ;
//! term   ::= word | pseudo ;
//! pseudo ::= "<" name annot? ">" ;
//! annot  ::= "|" num "|" | "(" num ")" | "[" num "]" ;
//! num    ::= decimal in [0, 1] (contains ".") | integer bucket index in [0, T-1] ;
//! ```
//!
//! Integer annotations index resolution buckets and normalize to the bucket
//! center `(k + 0.5) / T`; a bare `<name>` normalizes to full
//! resolution-dependent sampling at 0. Annotation kinds map `|.|` to fixed,
//! `(.)` to semi, and `[.]` to fully resolution-dependent sampling.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use serde_json::json;

use crate::conditioning::{ConceptRegistry, MultiResEmbeddingSet};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::sampler::{policy_embedding_with_null, CondSource, ConditioningPolicy, PolicyKind};

/// Resolution annotation on a pseudo-word, normalized to continuous time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Annotation {
    /// `|t|`: fixed conditioning at resolution `t` throughout sampling.
    Fixed(f64),
    /// `(t)`: time-dependent conditioning above `t`, none below.
    Semi(f64),
    /// `[t]`: time-dependent conditioning above `t`, frozen at `t` below.
    Full(f64),
}

impl Annotation {
    pub fn t_fixed(&self) -> f64 {
        match self {
            Annotation::Fixed(t) | Annotation::Semi(t) | Annotation::Full(t) => *t,
        }
    }

    pub fn policy(&self) -> ConditioningPolicy {
        let (kind, t) = match self {
            Annotation::Fixed(t) => (PolicyKind::Fixed, *t),
            Annotation::Semi(t) => (PolicyKind::Semi, *t),
            Annotation::Full(t) => (PolicyKind::Full, *t),
        };
        ConditioningPolicy { kind, t_fixed: t }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Word(String),
    Pseudo { name: String, annot: Annotation },
}

/// A parsed prompt: an ordered list of words and annotated pseudo-words.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct PromptAst {
    pub nodes: Vec<Node>,
}

fn err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        reason: reason.into(),
    }
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '-'
}

struct Scanner<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.bump();
            } else {
                break;
            }
        }
    }

    fn take_while(&mut self, pred: impl Fn(char) -> bool) -> &'a str {
        let start = self.pos;
        while let Some(c) = self.peek() {
            if pred(c) {
                self.bump();
            } else {
                break;
            }
        }
        &self.src[start..self.pos]
    }
}

fn parse_num(text: &str, offset: usize, buckets: usize) -> Result<f64> {
    if text.is_empty() {
        return Err(err(offset, "empty annotation"));
    }
    if text.contains('.') {
        let t: f64 = text
            .parse()
            .map_err(|_| err(offset, format!("malformed annotation {text:?}")))?;
        if !t.is_finite() || !(0.0..=1.0).contains(&t) {
            return Err(err(
                offset,
                format!("decimal annotation {text} outside [0, 1]"),
            ));
        }
        Ok(t)
    } else {
        let k: usize = text
            .parse()
            .map_err(|_| err(offset, format!("malformed annotation {text:?}")))?;
        if k >= buckets {
            return Err(err(
                offset,
                format!(
                    "integer bucket index {k} outside [0, {}]",
                    buckets.saturating_sub(1)
                ),
            ));
        }
        Ok((k as f64 + 0.5) / buckets as f64)
    }
}

fn parse_pseudo(sc: &mut Scanner, registry: &BTreeSet<String>, buckets: usize) -> Result<Node> {
    let open = sc.pos;
    sc.bump(); // '<'
    let name_start = sc.pos;
    let name = sc.take_while(is_name_char).to_string();
    if name.is_empty() {
        return Err(err(name_start, "empty pseudo-token name"));
    }
    if !registry.contains(&name) {
        return Err(err(
            name_start,
            format!("unknown pseudo-token name {name:?}"),
        ));
    }
    let annot = match sc.peek() {
        Some('>') => {
            sc.bump();
            return Ok(Node::Pseudo {
                name,
                annot: Annotation::Full(0.0),
            });
        }
        Some(open_ch @ ('|' | '(' | '[')) => {
            let annot_open = sc.pos;
            sc.bump();
            let close_ch = match open_ch {
                '|' => '|',
                '(' => ')',
                _ => ']',
            };
            let num_start = sc.pos;
            let num_text = sc.take_while(|c| c != close_ch && c != '>').to_string();
            if sc.peek() != Some(close_ch) {
                return Err(err(
                    annot_open,
                    format!("unbalanced annotation bracket {open_ch:?}"),
                ));
            }
            sc.bump();
            let t = parse_num(&num_text, num_start, buckets)?;
            match open_ch {
                '|' => Annotation::Fixed(t),
                '(' => Annotation::Semi(t),
                _ => Annotation::Full(t),
            }
        }
        _ => {
            return Err(err(
                open,
                "unbalanced pseudo-token bracket '<' (expected annotation or '>')",
            ))
        }
    };
    if sc.peek() != Some('>') {
        return Err(err(open, "unbalanced pseudo-token bracket '<'"));
    }
    sc.bump();
    Ok(Node::Pseudo { name, annot })
}

/// Parses a prompt against the set of registered pseudo-token names and the
/// bucket count used to normalize integer annotations.
pub fn parse(prompt: &str, registry: &BTreeSet<String>, buckets: usize) -> Result<PromptAst> {
    if buckets == 0 {
        return Err(Error::Config("bucket count must be at least 1".into()));
    }
    if prompt.trim().is_empty() {
        return Err(err(0, "empty prompt"));
    }
    let mut sc = Scanner {
        src: prompt,
        pos: 0,
    };
    let mut nodes = Vec::new();
    loop {
        sc.skip_ws();
        match sc.peek() {
            None => break,
            Some('<') => nodes.push(parse_pseudo(&mut sc, registry, buckets)?),
            Some('>') => return Err(err(sc.pos, "unbalanced '>' outside a pseudo-token")),
            Some(_) => {
                let word = sc.take_while(|c| !c.is_whitespace() && c != '<' && c != '>');
                nodes.push(Node::Word(word.to_string()));
            }
        }
    }
    Ok(PromptAst { nodes })
}

fn render_time(t: f64) -> String {
    if t == t.trunc() {
        format!("{t:.1}")
    } else {
        format!("{t}")
    }
}

/// Renders an AST back to prompt text. `parse(render(ast))` is the identity
/// on ASTs whose words are non-empty and free of whitespace and brackets.
pub fn render(ast: &PromptAst) -> String {
    ast.nodes
        .iter()
        .map(|node| match node {
            Node::Word(w) => w.clone(),
            Node::Pseudo { name, annot } => match annot {
                Annotation::Fixed(t) => format!("<{name}|{}|>", render_time(*t)),
                Annotation::Semi(t) => format!("<{name}({})>", render_time(*t)),
                Annotation::Full(t) => format!("<{name}[{}]>", render_time(*t)),
            },
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Compile-time options resolving the underdetermined readings of the
/// sampling methods (see the CLI flags of the same names).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CompileOptions {
    /// Drop the whole prompt, not just the pseudo slot, while a semi policy
    /// is in its unconditional phase.
    pub uncond_full_prompt: bool,
    /// Use raw bucket rows instead of interpolated embeddings for the
    /// time-dependent lookups of semi/full policies.
    pub bucketed_lookup: bool,
}

enum RowSpec {
    /// A constant embedding row (vocabulary word).
    Static(Array1<f64>),
    /// A pseudo-word slot resolved per policy at each sampling time.
    Slot {
        name: String,
        set: MultiResEmbeddingSet,
        policy: ConditioningPolicy,
    },
}

/// A compiled prompt: per-sampling-time recipe for the full embedding-row
/// matrix fed to the conditioning encoder. Immutable and tied to the
/// checkpoint it was compiled against.
pub struct PromptSchedule {
    rows: Vec<RowSpec>,
    tokens: Vec<String>,
    seq_len: usize,
    embed_dim: usize,
    null_row: Array1<f64>,
    opts: CompileOptions,
}

/// Compiles an AST against loaded concepts and a model checkpoint.
///
/// Words resolve through the base table; words absent from the vocabulary
/// fall back to the null token. Each pseudo slot delegates to its policy at
/// resolve time.
pub fn compile(
    ast: &PromptAst,
    registry: &ConceptRegistry,
    params: &ModelParams,
    opts: CompileOptions,
) -> Result<PromptSchedule> {
    if ast.nodes.len() > params.arch.seq_len {
        return Err(Error::Compile(format!(
            "prompt has {} terms, model supports {}",
            ast.nodes.len(),
            params.arch.seq_len
        )));
    }
    let mut rows = Vec::with_capacity(ast.nodes.len());
    let mut tokens = Vec::with_capacity(ast.nodes.len());
    for node in &ast.nodes {
        match node {
            Node::Word(w) => {
                let id = params.vocab.id(w).unwrap_or(params.vocab.null_id());
                rows.push(RowSpec::Static(params.table.row(id).to_owned()));
                tokens.push(w.clone());
            }
            Node::Pseudo { name, annot } => {
                let set = registry
                    .get(name)
                    .ok_or_else(|| Error::Compile(format!("unresolvable pseudo-token {name:?}")))?;
                if set.dim() != params.arch.embed_dim {
                    return Err(Error::Compile(format!(
                        "concept {name:?} has embedding width {}, model expects {}",
                        set.dim(),
                        params.arch.embed_dim
                    )));
                }
                rows.push(RowSpec::Slot {
                    name: name.clone(),
                    set: set.clone(),
                    policy: annot.policy(),
                });
                tokens.push(format!("<{name}>"));
            }
        }
    }
    Ok(PromptSchedule {
        rows,
        tokens,
        seq_len: params.arch.seq_len,
        embed_dim: params.arch.embed_dim,
        null_row: params.null_row(),
        opts,
    })
}

impl PromptSchedule {
    /// The all-null schedule: unconditional sampling.
    pub fn unconditional(params: &ModelParams) -> Self {
        PromptSchedule {
            rows: Vec::new(),
            tokens: Vec::new(),
            seq_len: params.arch.seq_len,
            embed_dim: params.arch.embed_dim,
            null_row: params.null_row(),
            opts: CompileOptions::default(),
        }
    }

    pub fn has_slots(&self) -> bool {
        self.rows.iter().any(|r| matches!(r, RowSpec::Slot { .. }))
    }

    /// The full `seq_len x d` embedding-row matrix at sampling time `t`,
    /// plus one conditioning-source tag per pseudo slot (a single static tag
    /// when the prompt has none).
    pub fn resolve(&self, t: f64) -> Result<(Array2<f64>, Vec<CondSource>)> {
        let mut rows = Array2::zeros((self.seq_len, self.embed_dim));
        let mut sources = Vec::new();
        let mut any_null_slot = false;
        for (i, spec) in self.rows.iter().enumerate() {
            match spec {
                RowSpec::Static(v) => rows.row_mut(i).assign(v),
                RowSpec::Slot { set, policy, .. } => {
                    let (v, source) = policy_embedding_with_null(
                        set,
                        *policy,
                        t,
                        &self.null_row,
                        self.opts.bucketed_lookup,
                    )?;
                    any_null_slot |= source == CondSource::Null;
                    rows.row_mut(i).assign(&v);
                    sources.push(source);
                }
            }
        }
        for i in self.rows.len()..self.seq_len {
            rows.row_mut(i).assign(&self.null_row);
        }
        if sources.is_empty() {
            sources.push(CondSource::Static);
        }
        if self.opts.uncond_full_prompt && any_null_slot {
            // literal reading of the unconditional phase: the whole prompt
            // drops out, not just the slot
            for i in 0..self.seq_len {
                rows.row_mut(i).assign(&self.null_row);
            }
            for s in sources.iter_mut() {
                *s = CondSource::Null;
            }
        }
        Ok((rows, sources))
    }

    /// JSON description for external inspection: tokens, per-slot policies,
    /// and the largest bucket count among referenced concepts.
    pub fn emit_json(&self) -> serde_json::Value {
        let slots: Vec<_> = self
            .rows
            .iter()
            .filter_map(|r| match r {
                RowSpec::Slot { name, set, policy } => Some(json!({
                    "name": name,
                    "policy": policy.kind.as_str(),
                    "t_fixed": policy.t_fixed,
                    "buckets": set.buckets(),
                })),
                RowSpec::Static(_) => None,
            })
            .collect();
        let t = self
            .rows
            .iter()
            .filter_map(|r| match r {
                RowSpec::Slot { set, .. } => Some(set.buckets()),
                RowSpec::Static(_) => None,
            })
            .max()
            .unwrap_or(1);
        json!({
            "tokens": self.tokens,
            "slots": slots,
            "T": t,
        })
    }
}
