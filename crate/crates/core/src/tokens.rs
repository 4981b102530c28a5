//! Token accounting, truncation of oversized documents, and greedy packing of
//! documents into prompt-sized batches.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Dataset;

/// Inserted between the kept head and tail of a truncated document.
pub const TRUNCATION_MARKER: &str = "[...]";

/// Splits text into tokens. Implementations must be deterministic and must
/// report at least one token for any non-empty text.
pub trait TokenCounter: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    /// Byte ranges of the tokens of `text`, in order and non-overlapping.
    fn token_spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> usize {
        self.token_spans(text).len()
    }
}

/// Approximate counter: one token per four characters, rounded up.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicCounter;

impl HeuristicCounter {
    const CHARS_PER_TOKEN: usize = 4;
}

impl TokenCounter for HeuristicCounter {
    fn name(&self) -> &str {
        "heuristic-chars/4"
    }

    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::with_capacity(text.len() / Self::CHARS_PER_TOKEN + 1);
        let mut start = 0;
        for (n, (idx, _)) in text.char_indices().enumerate() {
            if n > 0 && n % Self::CHARS_PER_TOKEN == 0 {
                spans.push(start..idx);
                start = idx;
            }
        }
        if !text.is_empty() {
            spans.push(start..text.len());
        }
        spans
    }

    fn count(&self, text: &str) -> usize {
        text.chars().count().div_ceil(Self::CHARS_PER_TOKEN)
    }
}

/// One token per whitespace-separated word. Text made only of whitespace
/// counts as a single token.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordCounter;

impl TokenCounter for WordCounter {
    fn name(&self) -> &str {
        "words"
    }

    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut start: Option<usize> = None;
        for (idx, ch) in text.char_indices() {
            match (ch.is_whitespace(), start) {
                (false, None) => start = Some(idx),
                (true, Some(s)) => {
                    spans.push(s..idx);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push(s..text.len());
        }
        if spans.is_empty() && !text.is_empty() {
            spans.push(0..text.len());
        }
        spans
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TruncateError {
    #[error("limit of {limit} tokens cannot hold the truncation marker ({marker} tokens)")]
    LimitTooSmall { limit: usize, marker: usize },
}

/// Keeps the beginning and the end of `text` so that the result fits in
/// `limit` tokens, joined by [`TRUNCATION_MARKER`].
///
/// With `m` the marker cost, the head keeps `floor((limit - m) / 2)` tokens
/// and the tail the remaining `limit - m - head` tokens. Text that already
/// fits is returned unchanged.
pub fn truncate_to_fit(
    counter: &dyn TokenCounter,
    text: &str,
    limit: usize,
) -> Result<String, TruncateError> {
    let marker = counter.count(TRUNCATION_MARKER);
    if limit <= marker {
        return Err(TruncateError::LimitTooSmall { limit, marker });
    }
    let spans = counter.token_spans(text);
    let n = spans.len();
    if n <= limit {
        return Ok(text.to_string());
    }
    let mut head = (limit - marker) / 2;
    let mut tail = limit - marker - head;
    loop {
        let out = splice(text, &spans, head, tail);
        // Counters that are not subadditive over concatenation may need a
        // smaller cut; shrink the longer side until the result fits.
        if counter.count(&out) <= limit || head + tail == 0 {
            return Ok(out);
        }
        if tail >= head {
            tail -= 1;
        } else {
            head -= 1;
        }
    }
}

fn splice(text: &str, spans: &[Range<usize>], head: usize, tail: usize) -> String {
    let n = spans.len();
    let head_end = if head == 0 { 0 } else { spans[head].start };
    // The gap before the first kept tail token stays with the tail.
    let tail_start = if tail == 0 {
        text.len()
    } else {
        spans[n - tail - 1].end
    };
    let mut out =
        String::with_capacity(head_end + TRUNCATION_MARKER.len() + text.len() - tail_start);
    out.push_str(&text[..head_end]);
    out.push_str(TRUNCATION_MARKER);
    out.push_str(&text[tail_start..]);
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BudgetError {
    #[error(
        "no room for content: context {context_limit} - completion {completion_reserve} - overhead {fixed_overhead} <= 0"
    )]
    NoCapacity {
        context_limit: usize,
        completion_reserve: usize,
        fixed_overhead: usize,
    },
    #[error("content capacity {capacity} cannot hold a truncated item (item overhead {per_item_overhead}, marker {marker})")]
    CapacityTooSmall {
        capacity: usize,
        per_item_overhead: usize,
        marker: usize,
    },
    #[error("a completion of {completion_reserve} tokens cannot hold the reply for one item ({per_item_reply} tokens)")]
    NoReplyRoom {
        completion_reserve: usize,
        per_item_reply: usize,
    },
}

/// How many tokens a batch of documents may occupy in one prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenBudget {
    pub context_limit: usize,
    pub completion_reserve: usize,
    pub fixed_overhead: usize,
    pub per_item_overhead: usize,
    /// Most items per batch, so the reply fits in the completion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_items: Option<usize>,
}

impl TokenBudget {
    pub fn new(
        context_limit: usize,
        completion_reserve: usize,
        fixed_overhead: usize,
        per_item_overhead: usize,
    ) -> Result<Self, BudgetError> {
        let budget = Self {
            context_limit,
            completion_reserve,
            fixed_overhead,
            per_item_overhead,
            max_items: None,
        };
        if context_limit <= completion_reserve + fixed_overhead {
            return Err(BudgetError::NoCapacity {
                context_limit,
                completion_reserve,
                fixed_overhead,
            });
        }
        Ok(budget)
    }

    /// A budget whose content capacity is exactly `capacity`.
    pub fn with_capacity(capacity: usize, per_item_overhead: usize) -> Result<Self, BudgetError> {
        Self::new(capacity + 1, 1, 0, per_item_overhead)
    }

    pub fn content_capacity(&self) -> usize {
        self.context_limit
            .saturating_sub(self.completion_reserve + self.fixed_overhead)
    }

    /// Caps the batch size at the number of `per_item_reply`-token answers
    /// that fit in the completion, after `reply_frame` tokens of framing.
    pub fn with_reply_room(mut self, reply_frame: usize, per_item_reply: usize) -> Result<Self, BudgetError> {
        let room = self.completion_reserve.saturating_sub(reply_frame);
        let n = room / per_item_reply.max(1);
        if n == 0 {
            return Err(BudgetError::NoReplyRoom {
                completion_reserve: self.completion_reserve,
                per_item_reply,
            });
        }
        self.max_items = Some(n);
        Ok(self)
    }

    /// Largest text a single item may carry.
    pub fn item_limit(&self) -> usize {
        self.content_capacity().saturating_sub(self.per_item_overhead)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub index: usize,
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|i| i.id.clone()).collect()
    }

    /// Content cost of the batch: item tokens plus per-item overhead.
    pub fn cost(&self, counter: &dyn TokenCounter, per_item_overhead: usize) -> usize {
        self.items
            .iter()
            .map(|i| counter.count(&i.text) + per_item_overhead)
            .sum()
    }
}

/// Packs a dataset's texts shortest-first into batches. Only ids and texts
/// are carried forward.
pub fn pack_batches(
    ds: &Dataset,
    budget: &TokenBudget,
    counter: &dyn TokenCounter,
) -> Result<Vec<Batch>, BudgetError> {
    pack_items(
        ds.points().iter().map(|p| (p.id.clone(), p.text.clone())),
        budget,
        counter,
    )
}

/// Sorts items by token count (ties by id) and fills batches greedily, up to
/// the budget's item cap if it has one. An item too large for an empty batch
/// is truncated with [`truncate_to_fit`].
pub fn pack_items<I>(
    items: I,
    budget: &TokenBudget,
    counter: &dyn TokenCounter,
) -> Result<Vec<Batch>, BudgetError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let capacity = budget.content_capacity();
    let marker = counter.count(TRUNCATION_MARKER);
    if budget.item_limit() <= marker {
        return Err(BudgetError::CapacityTooSmall {
            capacity,
            per_item_overhead: budget.per_item_overhead,
            marker,
        });
    }

    let mut costed: Vec<(usize, String, String)> = items
        .into_iter()
        .map(|(id, text)| (counter.count(&text), id, text))
        .collect();
    costed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));

    let mut batches: Vec<Batch> = Vec::new();
    let mut current: Vec<BatchItem> = Vec::new();
    let mut used = 0;
    for (tokens, id, text) in costed {
        let (text, tokens, truncated) = if tokens + budget.per_item_overhead > capacity {
            let cut = truncate_to_fit(counter, &text, budget.item_limit())
                .expect("item limit exceeds marker cost");
            let n = counter.count(&cut);
            (cut, n, true)
        } else {
            (text, tokens, false)
        };
        let cost = tokens + budget.per_item_overhead;
        let full = budget.max_items.is_some_and(|m| current.len() >= m);
        if !current.is_empty() && (used + cost > capacity || full) {
            batches.push(Batch {
                index: batches.len(),
                items: std::mem::take(&mut current),
            });
            used = 0;
        }
        used += cost;
        current.push(BatchItem {
            id,
            text,
            truncated,
        });
    }
    if !current.is_empty() {
        batches.push(Batch {
            index: batches.len(),
            items: current,
        });
    }
    Ok(batches)
}
