use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;

/// Counts tokens in text. Budgets throughout the crate are expressed in the
/// units of whichever counter is active.
pub trait TokenCounter: Send + Sync {
    /// Byte spans of each token, in order.
    fn token_spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> usize {
        self.token_spans(text).len()
    }

    /// Whether `count(a + b) <= count(a) + count(b)` holds for every split
    /// point. Lets the splitter skip recounting merged spans.
    fn is_subadditive(&self) -> bool {
        false
    }
}

/// Default counter: runs of word characters, and every other
/// non-whitespace character on its own.
#[derive(Debug, Clone, Copy, Default)]
pub struct RegexTokenCounter;

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\w+|[^\w\s]").expect("static regex"))
}

impl TokenCounter for RegexTokenCounter {
    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        token_regex().find_iter(text).map(|m| m.range()).collect()
    }

    fn count(&self, text: &str) -> usize {
        token_regex().find_iter(text).count()
    }

    fn is_subadditive(&self) -> bool {
        true
    }
}

/// Whitespace-delimited word count, shared by corpus and dataset statistics.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}
