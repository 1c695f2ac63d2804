//! Token vocabulary and the report grammar.
//!
//! A report is a sequence of three-token sentences `qualifier name .`, one
//! per active condition in ascending condition id, followed by [`END`]. A
//! report without conditions is `no acute findings .` followed by [`END`].
//!
//! [`extract_labels`] inverts the grammar. On free text it falls back to a
//! per-sentence keyword rule: condition `j` is reported iff some sentence
//! (tokens between periods) contains both its qualifier and its name token.
//! Grammar-conforming sentences are a special case of that rule.

use std::collections::BTreeSet;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const BOS: u32 = 2;
pub const END: u32 = 3;
pub const WITH_HISTORY: u32 = 4;
pub const NO_HISTORY: u32 = 5;
pub const PERIOD: u32 = 6;
pub const NO: u32 = 7;
pub const ACUTE: u32 = 8;
pub const FINDINGS: u32 = 9;
const CONDITION_BASE: u32 = 10;

pub const NUM_CONDITIONS: usize = 14;
pub const VOCAB_SIZE: usize = 200;

/// `(qualifier, name)` per condition id.
pub const CONDITIONS: [(&str, &str); NUM_CONDITIONS] = [
    ("basilar", "atelectasis"),
    ("enlarged", "cardiomegaly"),
    ("lobar", "consolidation"),
    ("interstitial", "edema"),
    ("pleural", "effusion"),
    ("hyperinflated", "emphysema"),
    ("reticular", "fibrosis"),
    ("rib", "fracture"),
    ("hiatal", "hernia"),
    ("patchy", "infiltrate"),
    ("hilar", "mass"),
    ("pulmonary", "nodule"),
    ("focal", "pneumonia"),
    ("apical", "pneumothorax"),
];

/// Set of condition ids, kept sorted.
pub type LabelSet = BTreeSet<u8>;

pub fn qualifier_token(condition: u8) -> u32 {
    CONDITION_BASE + 2 * condition as u32
}

pub fn name_token(condition: u8) -> u32 {
    CONDITION_BASE + 2 * condition as u32 + 1
}

/// Tokens that only carry control information and never report content.
pub fn is_control(token: u32) -> bool {
    matches!(token, PAD | CLS | BOS | END | WITH_HISTORY | NO_HISTORY)
}

pub fn token_str(token: u32) -> String {
    match token {
        PAD => "<pad>".into(),
        CLS => "<cls>".into(),
        BOS => "<bos>".into(),
        END => "<end>".into(),
        WITH_HISTORY => "<with_history>".into(),
        NO_HISTORY => "<no_history>".into(),
        PERIOD => ".".into(),
        NO => "no".into(),
        ACUTE => "acute".into(),
        FINDINGS => "findings".into(),
        t if t >= CONDITION_BASE && t < CONDITION_BASE + 2 * NUM_CONDITIONS as u32 => {
            let j = ((t - CONDITION_BASE) / 2) as usize;
            let (q, n) = CONDITIONS[j];
            if (t - CONDITION_BASE) % 2 == 0 { q } else { n }.into()
        }
        t => format!("w{t}"),
    }
}

pub fn to_text(tokens: &[u32]) -> String {
    tokens
        .iter()
        .map(|&t| token_str(t))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Report tokens for an active label set, terminated by [`END`].
pub fn render_labels(labels: &LabelSet) -> Vec<u32> {
    let mut out = Vec::with_capacity(3 * labels.len().max(2) + 1);
    if labels.is_empty() {
        out.extend([NO, ACUTE, FINDINGS, PERIOD]);
    }
    for &j in labels {
        out.extend([qualifier_token(j), name_token(j), PERIOD]);
    }
    out.push(END);
    out
}

/// Tokens up to (not including) the first [`END`], control tokens removed.
pub fn content_tokens(tokens: &[u32]) -> Vec<u32> {
    tokens
        .iter()
        .take_while(|&&t| t != END)
        .filter(|&&t| !is_control(t))
        .copied()
        .collect()
}

pub fn extract_labels(tokens: &[u32]) -> LabelSet {
    let content = content_tokens(tokens);
    let mut labels = LabelSet::new();
    for sentence in content.split(|&t| t == PERIOD) {
        for j in 0..NUM_CONDITIONS as u8 {
            if sentence.contains(&qualifier_token(j)) && sentence.contains(&name_token(j)) {
                labels.insert(j);
            }
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_set_renders_no_findings() {
        let r = render_labels(&LabelSet::new());
        assert_eq!(r, vec![NO, ACUTE, FINDINGS, PERIOD, END]);
        assert_eq!(to_text(&r), "no acute findings . <end>");
        assert!(extract_labels(&r).is_empty());
        assert!(extract_labels(&[]).is_empty());
    }

    #[test]
    fn sentences_sorted_by_condition() {
        let labels: LabelSet = [7, 3].into_iter().collect();
        let r = render_labels(&labels);
        assert_eq!(to_text(&r), "interstitial edema . rib fracture . <end>");
    }

    #[test]
    fn longest_report_fits_context() {
        let all: LabelSet = (0..NUM_CONDITIONS as u8).collect();
        assert_eq!(render_labels(&all).len(), 3 * NUM_CONDITIONS + 1);
        assert!(3 * NUM_CONDITIONS + 1 <= 48);
    }

    #[test]
    fn grammar_tokens_fit_vocabulary() {
        assert!((name_token(13) as usize) < VOCAB_SIZE);
        assert_eq!(token_str(199), "w199");
    }

    #[test]
    fn keyword_rule_ignores_text_after_end() {
        let labels: LabelSet = [2].into_iter().collect();
        let mut r = render_labels(&labels);
        r.extend([qualifier_token(5), name_token(5), PERIOD]);
        assert_eq!(extract_labels(&r), labels);
    }

    #[test]
    fn keyword_rule_tolerates_free_text() {
        let toks = vec![
            150,
            name_token(4),
            151,
            qualifier_token(4),
            PERIOD,
            name_token(9),
        ];
        assert_eq!(extract_labels(&toks), [4].into_iter().collect());
    }
}
