//! Memory bank of generated-frame features with geometrically decaying
//! pooled views, and assembly of the generator's conditioning signal.
//!
//! The frame at lag `k` (1 = most recent) is average-pooled with window
//! `λ^(k-1)`, so the retained history length is bounded by `l·λ/(λ-1)`
//! (plus at most one extra row per lag for lengths that do not divide).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{avg_pool_rows, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameFeature {
    pub feature: Tensor,
    pub frame_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeature {
    pub feature: Tensor,
    pub source_frame_index: usize,
    pub lag: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    capacity: usize,
    frames: VecDeque<FrameFeature>,
    shape: Option<(usize, usize)>,
}

impl MemoryBank {
    /// A bank retaining the `capacity` most recent frames.
    pub fn new(capacity: usize) -> Self {
        Self { capacity, frames: VecDeque::new(), shape: None }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Oldest first.
    pub fn frames(&self) -> impl Iterator<Item = &FrameFeature> {
        self.frames.iter()
    }

    pub fn push(&mut self, frame: FrameFeature) -> Result<()> {
        let shape = (frame.feature.rows(), frame.feature.cols());
        if let Some(expected) = self.shape {
            if expected != shape {
                return Err(Error::MemoryBank(format!(
                    "frame shape {shape:?} differs from bank shape {expected:?}"
                )));
            }
        }
        if let Some(last) = self.frames.back() {
            if frame.frame_index <= last.frame_index {
                return Err(Error::MemoryBank(format!(
                    "frame index {} does not follow {}",
                    frame.frame_index, last.frame_index
                )));
            }
        }
        self.shape = Some(shape);
        self.frames.push_back(frame);
        while self.frames.len() > self.capacity {
            self.frames.pop_front();
        }
        Ok(())
    }

    /// Pooled views of the `depth` most recent frames, most recent first.
    /// Fewer frames yield a shorter list.
    pub fn pooled_history(&self, depth: usize, lambda: usize) -> Result<Vec<PooledFeature>> {
        check_decay(lambda)?;
        if depth == 0 {
            return Err(Error::InvalidArgument("history depth must be at least 1".into()));
        }
        self.frames
            .iter()
            .rev()
            .take(depth)
            .enumerate()
            .map(|(i, f)| {
                let lag = i + 1;
                Ok(PooledFeature {
                    feature: avg_pool_rows(&f.feature, pool_window(lambda, lag))?,
                    source_frame_index: f.frame_index,
                    lag,
                })
            })
            .collect()
    }
}

fn check_decay(lambda: usize) -> Result<()> {
    if lambda < 2 {
        Err(Error::DecayFactor(lambda))
    } else {
        Ok(())
    }
}

/// `λ^(lag-1)`, saturating.
pub fn pool_window(lambda: usize, lag: usize) -> usize {
    lambda.checked_pow((lag - 1) as u32).unwrap_or(usize::MAX)
}

/// `Σ_{k=1..depth} ceil(l / λ^(k-1))`.
pub fn total_memory_length(l: usize, lambda: usize, depth: usize) -> Result<usize> {
    check_decay(lambda)?;
    if l == 0 || depth == 0 {
        return Err(Error::InvalidArgument("l and depth must be at least 1".into()));
    }
    Ok((1..=depth).map(|k| l.div_ceil(pool_window(lambda, k))).sum())
}

/// Upper bound `l·λ/(λ-1) + (depth-1)` that holds for every length.
pub fn memory_length_bound(l: usize, lambda: usize, depth: usize) -> f64 {
    geometric_limit(l, lambda) + (depth as f64 - 1.0)
}

/// `l·λ/(λ-1)`, the limit of the un-rounded geometric sum.
pub fn geometric_limit(l: usize, lambda: usize) -> f64 {
    l as f64 * lambda as f64 / (lambda as f64 - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionPart {
    Query,
    Reference,
    Memory { lag: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub part: ConditionPart,
    pub start: usize,
    pub end: usize,
}

/// Row-concatenated conditioning `[q_n; f_cond; f̂_{n-1}; …; f̂_{n-T}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSignal {
    pub rows: Tensor,
    pub spans: Vec<Span>,
}

impl ConditionSignal {
    /// Query rows only; the form used before the reference and memory
    /// branches are trained.
    pub fn query_only(query: &Tensor) -> Self {
        Self {
            rows: query.clone(),
            spans: vec![Span { part: ConditionPart::Query, start: 0, end: query.rows() }],
        }
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn width(&self) -> usize {
        self.rows.cols()
    }

    /// Per-row part labels, in row order.
    pub fn row_parts(&self) -> Vec<ConditionPart> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.spans {
            out.extend(std::iter::repeat_n(s.part, s.end - s.start));
        }
        out
    }

    /// Row offset of each row inside its own part.
    pub fn row_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.spans {
            out.extend(0..s.end - s.start);
        }
        out
    }
}

/// Concatenates the query, the reference features and the pooled history in
/// that order. All parts must share the channel width.
pub fn assemble_condition(
    query: &Tensor,
    reference: &Tensor,
    pooled: &[PooledFeature],
) -> Result<ConditionSignal> {
    let width = query.cols();
    let mut parts = vec![(ConditionPart::Query, query), (ConditionPart::Reference, reference)];
    parts.extend(pooled.iter().map(|p| (ConditionPart::Memory { lag: p.lag }, &p.feature)));
    let mut spans = Vec::with_capacity(parts.len());
    let mut start = 0;
    for (part, t) in &parts {
        if t.cols() != width {
            return Err(Error::Shape(format!(
                "condition part {part:?} has {} channels, expected {width}",
                t.cols()
            )));
        }
        spans.push(Span { part: *part, start, end: start + t.rows() });
        start += t.rows();
    }
    let tensors: Vec<&Tensor> = parts.iter().map(|(_, t)| *t).collect();
    Ok(ConditionSignal { rows: Tensor::concat_rows(&tensors)?, spans })
}
