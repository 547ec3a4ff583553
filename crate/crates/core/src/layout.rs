//! Role-labeled segment layouts, position IDs and cascade attention masks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub type ModelId = u8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SegmentRole {
    SharedContent,
    Prompt(ModelId),
    UniqueInput(ModelId),
    Output(ModelId),
}

impl SegmentRole {
    /// Model owning the segment; `None` for shared content.
    pub fn model(self) -> Option<ModelId> {
        match self {
            SegmentRole::SharedContent => None,
            SegmentRole::Prompt(m) | SegmentRole::UniqueInput(m) | SegmentRole::Output(m) => Some(m),
        }
    }

    /// Compact tag used by the cache file format.
    pub fn tag(self) -> (u8, u8) {
        match self {
            SegmentRole::SharedContent => (0, 0),
            SegmentRole::Prompt(m) => (1, m),
            SegmentRole::UniqueInput(m) => (2, m),
            SegmentRole::Output(m) => (3, m),
        }
    }

    pub fn from_tag(tag: u8, model: u8) -> Option<Self> {
        Some(match tag {
            0 => SegmentRole::SharedContent,
            1 => SegmentRole::Prompt(model),
            2 => SegmentRole::UniqueInput(model),
            3 => SegmentRole::Output(model),
            _ => return None,
        })
    }
}

impl fmt::Display for SegmentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentRole::SharedContent => write!(f, "shared"),
            SegmentRole::Prompt(m) => write!(f, "prompt:{m}"),
            SegmentRole::UniqueInput(m) => write!(f, "input:{m}"),
            SegmentRole::Output(m) => write!(f, "output:{m}"),
        }
    }
}

impl FromStr for SegmentRole {
    type Err = LayoutError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "shared" {
            return Ok(SegmentRole::SharedContent);
        }
        let bad = || LayoutError::BadRole(s.to_string());
        let (kind, id) = s.split_once(':').ok_or_else(bad)?;
        let id: ModelId = id.parse().map_err(|_| bad())?;
        match kind {
            "prompt" => Ok(SegmentRole::Prompt(id)),
            "input" => Ok(SegmentRole::UniqueInput(id)),
            "output" => Ok(SegmentRole::Output(id)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for SegmentRole {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SegmentRole {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayoutError {
    #[error("unknown segment role `{0}`")]
    BadRole(String),
    #[error("prompt segment for model {0} has zero length")]
    ZeroLengthPrompt(ModelId),
    #[error("layout has no output segment for model {0}")]
    NoOutput(ModelId),
    #[error("layout of {len} tokens exceeds max sequence {max}")]
    TooLong { len: usize, max: usize },
    #[error("row {0} has no visible key")]
    EmptyRow(usize),
}

/// Which prompts a query may see.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPolicy {
    pub mask_foreign_prompts: bool,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            mask_foreign_prompts: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub role: SegmentRole,
    pub len: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub start_position: u32,
    pub segments: Vec<Segment>,
}

impl SegmentLayout {
    pub fn new(start_position: u32) -> Self {
        Self {
            start_position,
            segments: Vec::new(),
        }
    }

    /// Appends a segment; zero-length segments are dropped.
    pub fn push(&mut self, role: SegmentRole, len: usize) -> &mut Self {
        if len > 0 {
            self.segments.push(Segment { role, len });
        }
        self
    }

    pub fn with(mut self, role: SegmentRole, len: usize) -> Self {
        self.push(role, len);
        self
    }

    pub fn total_len(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    /// Position following the last token.
    pub fn end_position(&self) -> u32 {
        self.start_position + self.total_len() as u32
    }

    /// Role of each token in order.
    pub fn roles(&self) -> Vec<SegmentRole> {
        self.segments
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.role, s.len))
            .collect()
    }

    pub fn check_max(&self, max_seq: usize) -> Result<(), LayoutError> {
        let len = self.total_len();
        if len > max_seq {
            return Err(LayoutError::TooLong { len, max: max_seq });
        }
        Ok(())
    }

    /// Token offset range of the k-th segment with this role.
    pub fn span_of(&self, role: SegmentRole, nth: usize) -> Option<std::ops::Range<usize>> {
        let mut off = 0;
        let mut seen = 0;
        for s in &self.segments {
            if s.role == role {
                if seen == nth {
                    return Some(off..off + s.len);
                }
                seen += 1;
            }
            off += s.len;
        }
        None
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("layout serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

pub fn assign_positions(layout: &SegmentLayout) -> Vec<u32> {
    (0..layout.total_len() as u32).map(|i| layout.start_position + i).collect()
}

/// Uniform cross-model prompt-masking rule.
pub fn visible(query: SegmentRole, key: SegmentRole) -> bool {
    visible_with(query, key, MaskPolicy::default())
}

/// With `mask_foreign_prompts` off, only shared content keeps prompts hidden.
pub fn visible_with(query: SegmentRole, key: SegmentRole, policy: MaskPolicy) -> bool {
    let SegmentRole::Prompt(owner) = key else {
        return true;
    };
    match query.model() {
        None => false,
        Some(m) => m == owner || !policy.mask_foreign_prompts,
    }
}

/// Square boolean matrix; `true` means the row may attend to the column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    data: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<bool> {
        self.data
    }
}

pub fn build_mask(layout: &SegmentLayout) -> AttentionMask {
    build_mask_with(layout, MaskPolicy::default())
}

pub fn build_mask_with(layout: &SegmentLayout, policy: MaskPolicy) -> AttentionMask {
    let roles = layout.roles();
    let n = roles.len();
    let mut data = vec![false; n * n];
    for (i, &q) in roles.iter().enumerate() {
        for (j, &k) in roles[..=i].iter().enumerate() {
            data[i * n + j] = visible_with(q, k, policy);
        }
        // the diagonal is always visible: own prompt, or a non-prompt key
        assert!(data[i * n + i], "{}", LayoutError::EmptyRow(i));
    }
    AttentionMask { n, data }
}

pub fn loss_mask(layout: &SegmentLayout, trained: ModelId) -> Result<Vec<bool>, LayoutError> {
    let mask: Vec<bool> = layout
        .roles()
        .into_iter()
        .map(|r| r == SegmentRole::Output(trained))
        .collect();
    if !mask.iter().any(|&b| b) {
        return Err(LayoutError::NoOutput(trained));
    }
    Ok(mask)
}

/// Shared, P(A), x(A), Y(A), P(B), x(B), Y(B) with A = 0 and B = 1.
pub fn single_round_online_layout(
    shared_len: usize,
    prompt_a: usize,
    input_a: usize,
    output_a: usize,
    prompt_b: usize,
    input_b: usize,
    output_b: usize,
) -> Result<SegmentLayout, LayoutError> {
    if prompt_a == 0 {
        return Err(LayoutError::ZeroLengthPrompt(0));
    }
    if prompt_b == 0 {
        return Err(LayoutError::ZeroLengthPrompt(1));
    }
    Ok(SegmentLayout::new(0)
        .with(SegmentRole::SharedContent, shared_len)
        .with(SegmentRole::Prompt(0), prompt_a)
        .with(SegmentRole::UniqueInput(0), input_a)
        .with(SegmentRole::Output(0), output_a)
        .with(SegmentRole::Prompt(1), prompt_b)
        .with(SegmentRole::UniqueInput(1), input_b)
        .with(SegmentRole::Output(1), output_b))
}
