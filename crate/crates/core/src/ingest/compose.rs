//! Greedy allocation of comment windows into token-budgeted documents.

use serde::{Deserialize, Serialize};

use super::KbPost;
use crate::tokenize::Tokenizer;

pub const DEFAULT_BUDGET: usize = 3000;
pub const DEFAULT_MIN_COMMENTS: usize = 10;

pub const POST_PREFIX: &str = "Post : ";
pub const COMMENT_PREFIX: &str = "Comment: ";

/// A post plus a consecutive run of its comments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbDocument {
    pub doc_id: String,
    pub post_id: u64,
    pub window_start: usize,
    pub text: String,
    pub token_count: usize,
    pub comment_count: usize,
}

/// A half-open range `[start, start + len)` of comment indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub len: usize,
}

/// One window per starting comment: starting from the post's cost, append
/// consecutive comments while the running total stays strictly below
/// `budget`; keep the window if it holds at least `min_comments` comments.
pub fn allocate_windows(
    post_cost: usize,
    comment_costs: &[usize],
    budget: usize,
    min_comments: usize,
) -> Vec<Window> {
    let mut windows = Vec::new();
    for start in 0..comment_costs.len() {
        let mut length = post_cost;
        let mut count = 0;
        for &cost in &comment_costs[start..] {
            if length + cost < budget {
                length += cost;
                count += 1;
            } else {
                break;
            }
        }
        if count >= min_comments {
            windows.push(Window { start, len: count });
        }
    }
    windows
}

pub fn post_line(body: &str) -> String {
    format!("{POST_PREFIX}{body}")
}

pub fn comment_line(comment: &str) -> String {
    format!("{COMMENT_PREFIX}{comment}")
}

/// Split a post into knowledge documents.
///
/// Costs are measured on the formatted lines, so a document's
/// `token_count` is the tokenizer's count over its full text.
pub fn compose_documents(
    post: &KbPost,
    budget: usize,
    min_comments: usize,
    tokenizer: &dyn Tokenizer,
) -> Vec<KbDocument> {
    assert!(budget > 0 && min_comments >= 1, "budget and min_comments must be positive");
    let head = post_line(&post.body);
    let lines: Vec<String> = post.comments.iter().map(|c| comment_line(c)).collect();
    let post_cost = tokenizer.count(&head);
    let costs: Vec<usize> = lines.iter().map(|l| tokenizer.count(l)).collect();

    allocate_windows(post_cost, &costs, budget, min_comments)
        .into_iter()
        .map(|w| {
            let mut text = head.clone();
            for line in &lines[w.start..w.start + w.len] {
                text.push('\n');
                text.push_str(line);
            }
            let token_count = post_cost + costs[w.start..w.start + w.len].iter().sum::<usize>();
            KbDocument {
                doc_id: format!("{}-{}", post.post_id, w.start),
                post_id: post.post_id,
                window_start: w.start,
                text,
                token_count,
                comment_count: w.len,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::RuleTokenizer;
    use proptest::prelude::*;

    /// Enumerate every (start, extent) window, keep those within budget,
    /// take the widest per start, then apply the comment floor.
    fn oracle(post: usize, costs: &[usize], budget: usize, min: usize) -> Vec<Window> {
        let mut out = Vec::new();
        for start in 0..costs.len() {
            let mut best = None;
            for len in 0..=costs.len() - start {
                let total: usize = post + costs[start..start + len].iter().sum::<usize>();
                if total < budget {
                    best = Some(len);
                }
            }
            if let Some(len) = best {
                if len >= min {
                    out.push(Window { start, len });
                }
            }
        }
        out
    }

    #[test]
    fn twelve_comments_three_windows() {
        let costs = vec![50; 12];
        let got = allocate_windows(100, &costs, 3000, 10);
        assert_eq!(got, oracle(100, &costs, 3000, 10));
        assert_eq!(
            got,
            [Window { start: 0, len: 12 }, Window { start: 1, len: 11 }, Window { start: 2, len: 10 }]
        );
    }

    #[test]
    fn below_min_comments() {
        let post = KbPost { post_id: 7, body: "q".into(), comments: vec!["c".into(); 5] };
        assert!(compose_documents(&post, 3000, 10, &RuleTokenizer).is_empty());
    }

    #[test]
    fn post_consumes_budget() {
        assert!(allocate_windows(2990, &[10; 20], 3000, 1).is_empty());
        assert!(allocate_windows(3000, &[0; 20], 3000, 1).is_empty());
    }

    #[test]
    fn budget_is_strict() {
        // 10 + 5*2 == 20 is not < 20
        assert_eq!(allocate_windows(10, &[2; 5], 20, 1)[0].len, 4);
    }

    #[test]
    fn document_text_layout() {
        let post = KbPost {
            post_id: 42,
            body: "how to merge".into(),
            comments: vec!["use concat".into(), "or join".into()],
        };
        let docs = compose_documents(&post, 3000, 1, &RuleTokenizer);
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].text, "Post : how to merge\nComment: use concat\nComment: or join");
        assert_eq!(docs[0].doc_id, "42-0");
        assert_eq!(docs[1].text, "Post : how to merge\nComment: or join");
        for d in &docs {
            assert_eq!(d.token_count, RuleTokenizer.count(&d.text));
        }
    }

    proptest! {
        #[test]
        fn matches_enumeration_oracle(
            post in 0usize..120,
            costs in prop::collection::vec(0usize..40, 0..30),
            budget in 1usize..300,
            min in 1usize..=3,
        ) {
            prop_assert_eq!(allocate_windows(post, &costs, budget, min), oracle(post, &costs, budget, min));
        }

        #[test]
        fn more_budget_never_fewer_documents(
            post in 0usize..120,
            costs in prop::collection::vec(0usize..40, 0..30),
            budget in 1usize..300,
            extra in 0usize..300,
            min in 1usize..=3,
        ) {
            let a = allocate_windows(post, &costs, budget, min).len();
            let b = allocate_windows(post, &costs, budget + extra, min).len();
            prop_assert!(b >= a);
        }
    }
}
