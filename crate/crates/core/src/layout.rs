//! Interleaved sequence layout and the dynamic causal attention mask.
//!
//! A sequence is an input prefix followed by text tokens, with blocks of
//! learnable query slots bracketed by `<img>` / `</img>`. The mask lets
//! queries read everything before them while text never reads queries, so
//! adding or removing query blocks cannot change any text-side output.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Id of the end-of-plan token.
pub const END_OF_PLAN: u32 = 0;
/// Id of the `<img>` delimiter.
pub const IMG_OPEN: u32 = 1;
/// Id of the `</img>` delimiter.
pub const IMG_CLOSE: u32 = 2;
/// Id of the begin-of-plan token that opens every text stream.
pub const BEGIN_PLAN: u32 = 3;
/// Placeholder id for text runs given only by length (mask inspection).
pub const FILLER_TOKEN: u32 = BEGIN_PLAN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenRole {
    /// Position `index` of the multimodal input prefix.
    Input { index: usize },
    /// A text-vocabulary token, delimiters included.
    Text { token: u32 },
    /// A learnable query slot; `slot` is its offset inside block `block`.
    Query { block: usize, slot: usize },
}

impl TokenRole {
    pub fn is_input(&self) -> bool {
        matches!(self, TokenRole::Input { .. })
    }

    pub fn is_text(&self) -> bool {
        matches!(self, TokenRole::Text { .. })
    }

    pub fn is_query(&self) -> bool {
        matches!(self, TokenRole::Query { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryBlock {
    pub start: usize,
    pub len: usize,
}

/// One event of [`build_layout`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Input(usize),
    Text(Vec<u32>),
    Query(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    roles: Vec<TokenRole>,
    n_input: usize,
    n_text: usize,
    query_blocks: Vec<QueryBlock>,
}

impl SequenceLayout {
    /// A layout holding only an input prefix of `n_input` positions.
    pub fn with_input(n_input: usize) -> Result<Self> {
        if n_input == 0 {
            return Err(Error::Layout("input prefix must be non-empty".into()));
        }
        Ok(Self {
            roles: (0..n_input).map(|index| TokenRole::Input { index }).collect(),
            n_input,
            n_text: 0,
            query_blocks: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    pub fn n_input(&self) -> usize {
        self.n_input
    }

    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn query_blocks(&self) -> &[QueryBlock] {
        &self.query_blocks
    }

    pub fn last_token(&self) -> Option<u32> {
        match self.roles.last() {
            Some(TokenRole::Text { token }) => Some(*token),
            _ => None,
        }
    }

    /// Appends a text token. Text may not follow a query block directly
    /// unless it is the closing `</img>`.
    pub fn push_text(&mut self, token: u32) -> Result<()> {
        if matches!(self.roles.last(), Some(TokenRole::Query { .. })) && token != IMG_CLOSE {
            return Err(Error::Layout(format!(
                "query block at {} must be closed by </img>",
                self.query_blocks.last().map_or(0, |b| b.start)
            )));
        }
        self.roles.push(TokenRole::Text { token });
        self.n_text += 1;
        Ok(())
    }

    /// Appends a block of `m` query slots; the previous token must be `<img>`.
    pub fn push_query_block(&mut self, m: usize) -> Result<()> {
        if m == 0 {
            return Err(Error::Layout("query block needs at least one slot".into()));
        }
        if self.last_token() != Some(IMG_OPEN) {
            return Err(Error::Layout("query block must follow <img>".into()));
        }
        let block = self.query_blocks.len();
        let start = self.roles.len();
        self.roles.extend((0..m).map(|slot| TokenRole::Query { block, slot }));
        self.query_blocks.push(QueryBlock { start, len: m });
        Ok(())
    }

    /// Position ids for learned positional embeddings.
    ///
    /// Non-query positions are numbered densely while skipping query slots;
    /// each query slot takes the id of the next non-query position. Input and
    /// text positions therefore get the same ids with or without queries.
    pub fn position_ids(&self) -> Vec<usize> {
        let mut next = 0;
        self.roles
            .iter()
            .map(|r| {
                if r.is_query() {
                    next
                } else {
                    next += 1;
                    next - 1
                }
            })
            .collect()
    }

    /// Indices of text positions, in order.
    pub fn text_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i].is_text()).collect()
    }

    /// Indices of query positions, in order.
    pub fn query_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i].is_query()).collect()
    }

    pub fn text_tokens(&self) -> Vec<u32> {
        self.roles
            .iter()
            .filter_map(|r| match r {
                TokenRole::Text { token } => Some(*token),
                _ => None,
            })
            .collect()
    }

    /// Checks the structural invariants. A trailing query block may still be
    /// open (its `</img>` not yet decoded).
    pub fn validate(&self) -> Result<()> {
        if self.n_input == 0 {
            return Err(Error::Layout("input prefix must be non-empty".into()));
        }
        for (i, r) in self.roles.iter().enumerate() {
            let in_prefix = i < self.n_input;
            if in_prefix != r.is_input() {
                return Err(Error::Layout(format!("input positions must form a prefix (at {i})")));
            }
        }
        let mut expected_block = 0;
        for (bi, b) in self.query_blocks.iter().enumerate() {
            if bi != expected_block || b.len == 0 || b.start == 0 {
                return Err(Error::Layout(format!("malformed query block {bi}")));
            }
            expected_block += 1;
            if self.roles[b.start - 1] != (TokenRole::Text { token: IMG_OPEN }) {
                return Err(Error::Layout(format!("query block {bi} not preceded by <img>")));
            }
            for (s, pos) in (b.start..b.start + b.len).enumerate() {
                if self.roles.get(pos) != Some(&TokenRole::Query { block: bi, slot: s }) {
                    return Err(Error::Layout(format!("query block {bi} not contiguous")));
                }
            }
            let after = b.start + b.len;
            if after < self.len() && self.roles[after] != (TokenRole::Text { token: IMG_CLOSE }) {
                return Err(Error::Layout(format!("query block {bi} not followed by </img>")));
            }
        }
        let n_queries: usize = self.query_blocks.iter().map(|b| b.len).sum();
        if self.n_input + self.n_text + n_queries != self.len() {
            return Err(Error::Layout("role counts do not add up".into()));
        }
        Ok(())
    }
}

/// Builds a layout from segment events, inserting `<img>` before and
/// `</img>` after each query block.
pub fn build_layout(events: &[Segment]) -> Result<SequenceLayout> {
    let (first, rest) = events
        .split_first()
        .ok_or_else(|| Error::Layout("empty event list".into()))?;
    let Segment::Input(n) = first else {
        return Err(Error::Layout("the input segment must come first".into()));
    };
    let mut layout = SequenceLayout::with_input(*n)?;
    for ev in rest {
        match ev {
            Segment::Input(_) => {
                return Err(Error::Layout("only one input segment is allowed".into()))
            }
            Segment::Text(tokens) => {
                for &t in tokens {
                    layout.push_text(t)?;
                }
            }
            Segment::Query(m) => {
                layout.push_text(IMG_OPEN)?;
                layout.push_query_block(*m)?;
                layout.push_text(IMG_CLOSE)?;
            }
        }
    }
    Ok(layout)
}

/// How input-prefix positions attend to each other.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputAttention {
    #[default]
    Causal,
    Bidirectional,
}

/// Boolean visibility matrix; `allowed(i, j)` means row `i` may read column `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self { rows, cols, allowed: vec![true; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Self { rows, cols, allowed }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    /// Rows of `0`/`1` separated by single spaces, one line per query row.
    pub fn to_text_grid(&self) -> String {
        let mut s = String::with_capacity(self.rows * (2 * self.cols + 1));
        for i in 0..self.rows {
            for j in 0..self.cols {
                if j > 0 {
                    s.push(' ');
                }
                s.push(if self.allowed(i, j) { '1' } else { '0' });
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text_grid(text: &str) -> Result<Self> {
        let mut rows = 0;
        let mut cols = None;
        let mut allowed = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let row: Vec<bool> = line
                .split_whitespace()
                .map(|c| match c {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(Error::Format(format!("mask cell {other:?}"))),
                })
                .collect::<Result<_>>()?;
            if *cols.get_or_insert(row.len()) != row.len() {
                return Err(Error::Format("ragged mask grid".into()));
            }
            allowed.extend(row);
            rows += 1;
        }
        Ok(Self { rows, cols: cols.unwrap_or(0), allowed })
    }
}

/// The dynamic causal mask with the default causal input prefix.
pub fn build_mask(layout: &SequenceLayout) -> Result<AttentionMask> {
    build_mask_with(layout, InputAttention::Causal)
}

/// Visibility rules:
/// * input rows see input columns (causally, or all of them when bidirectional);
/// * text rows see all input and text at or before themselves, never queries;
/// * query rows of block `n` see all input, text before block `n` starts,
///   every query of earlier blocks, and every query of block `n`.
pub fn build_mask_with(layout: &SequenceLayout, input: InputAttention) -> Result<AttentionMask> {
    layout.validate()?;
    let roles = layout.roles();
    let starts: Vec<usize> = layout.query_blocks().iter().map(|b| b.start).collect();
    let n = roles.len();
    Ok(AttentionMask::from_fn(n, n, |i, j| match (roles[i], roles[j]) {
        (TokenRole::Input { .. }, TokenRole::Input { .. }) => {
            j <= i || input == InputAttention::Bidirectional
        }
        (TokenRole::Input { .. }, _) => false,
        (TokenRole::Text { .. }, TokenRole::Input { .. }) => true,
        (TokenRole::Text { .. }, TokenRole::Text { .. }) => j <= i,
        (TokenRole::Text { .. }, TokenRole::Query { .. }) => false,
        (TokenRole::Query { .. }, TokenRole::Input { .. }) => true,
        (TokenRole::Query { block, .. }, TokenRole::Text { .. }) => j < starts[block],
        (TokenRole::Query { block: n, .. }, TokenRole::Query { block: k, .. }) => k <= n,
    }))
}

/// Removes every query slot, keeping delimiters. Block structure is dropped.
pub fn strip_queries(layout: &SequenceLayout) -> SequenceLayout {
    SequenceLayout {
        roles: layout.roles.iter().copied().filter(|r| !r.is_query()).collect(),
        n_input: layout.n_input,
        n_text: layout.n_text,
        query_blocks: Vec::new(),
    }
}

/// Compact textual form `input:2,text:2,query:2,text:1` used on the command
/// line. Text runs given by length use [`FILLER_TOKEN`]; explicit ids may be
/// written as `text=5/6/7`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutSpec(pub Vec<Segment>);

impl FromStr for LayoutSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut segs = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let bad = || Error::Layout(format!("bad layout segment {part:?}"));
            if let Some(ids) = part.strip_prefix("text=") {
                let toks = ids
                    .split('/')
                    .map(|t| t.parse::<u32>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                segs.push(Segment::Text(toks));
                continue;
            }
            let (kind, n) = part.split_once(':').ok_or_else(bad)?;
            let n: usize = n.parse().map_err(|_| bad())?;
            segs.push(match kind {
                "input" => Segment::Input(n),
                "text" => Segment::Text(vec![FILLER_TOKEN; n]),
                "query" => Segment::Query(n),
                _ => return Err(bad()),
            });
        }
        Ok(LayoutSpec(segs))
    }
}

impl fmt::Display for LayoutSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|s| match s {
                Segment::Input(n) => format!("input:{n}"),
                Segment::Text(t) => format!(
                    "text={}",
                    t.iter().map(u32::to_string).collect::<Vec<_>>().join("/")
                ),
                Segment::Query(m) => format!("query:{m}"),
            })
            .collect();
        f.write_str(&parts.join(","))
    }
}
