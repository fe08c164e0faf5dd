//! Article and NLI corpora: segmentation, JSONL I/O, leak-free splits and
//! class-ratio resampling.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// A sentence located in an article. `sent_id` counts sentences across the
/// whole article in document order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub sent_id: usize,
    pub para_idx: usize,
    pub text: String,
}

impl Sentence {
    pub fn sent_ref(&self) -> SentRef {
        SentRef {
            para: self.para_idx,
            idx: self.sent_id,
        }
    }
}

/// `(para_idx, sent_id)`, ordered lexicographically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SentRef {
    pub para: usize,
    pub idx: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Article {
    pub page_id: u64,
    pub rev_id: u64,
    pub title: String,
    pub label: u8,
    pub paragraphs: Vec<Vec<Sentence>>,
}

impl Article {
    /// Builds an article from raw paragraph text, normalizing whitespace and
    /// dropping empty paragraphs.
    pub fn new(
        page_id: u64,
        rev_id: u64,
        title: impl Into<String>,
        label: u8,
        paragraphs: Vec<Vec<String>>,
    ) -> Result<Self> {
        if label > 1 {
            return Err(Error::Config(format!("label must be 0 or 1, got {label}")));
        }
        let mut out = Vec::with_capacity(paragraphs.len());
        let mut sent_id = 0;
        for para in paragraphs {
            let mut sents = Vec::with_capacity(para.len());
            for text in para {
                let text = normalize_ws(&text);
                if text.is_empty() {
                    return Err(Error::EmptyInput);
                }
                sents.push(Sentence {
                    sent_id,
                    para_idx: out.len(),
                    text,
                });
                sent_id += 1;
            }
            if !sents.is_empty() {
                out.push(sents);
            }
        }
        if out.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(Self {
            page_id,
            rev_id,
            title: title.into(),
            label,
            paragraphs: out,
        })
    }

    /// Builds an article from plain text, segmenting it into paragraphs and
    /// sentences.
    pub fn from_text(
        page_id: u64,
        rev_id: u64,
        title: impl Into<String>,
        label: u8,
        raw: &str,
    ) -> Result<Self> {
        let paragraphs = segment(raw)?
            .into_iter()
            .map(|p| p.into_iter().map(|s| s.text).collect())
            .collect();
        Self::new(page_id, rev_id, title, label, paragraphs)
    }

    pub fn sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.paragraphs.iter().flatten()
    }

    pub fn n_sentences(&self) -> usize {
        self.paragraphs.iter().map(Vec::len).sum()
    }

    pub fn paragraph_sizes(&self) -> Vec<usize> {
        self.paragraphs.iter().map(Vec::len).collect()
    }

    pub fn to_record(&self) -> ArticleRecord {
        ArticleRecord {
            page_id: self.page_id,
            rev_id: self.rev_id,
            title: self.title.clone(),
            label: i64::from(self.label),
            paragraphs: self
                .paragraphs
                .iter()
                .map(|p| p.iter().map(|s| s.text.clone()).collect())
                .collect(),
        }
    }
}

/// On-disk corpus record, one per JSONL line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArticleRecord {
    pub page_id: u64,
    pub rev_id: u64,
    pub title: String,
    pub label: i64,
    pub paragraphs: Vec<Vec<String>>,
}

impl ArticleRecord {
    pub fn into_article(self) -> std::result::Result<Article, String> {
        let label = match self.label {
            0 => 0,
            1 => 1,
            other => return Err(format!("unknown label value {other} (expected 0 or 1)")),
        };
        if self.paragraphs.iter().all(Vec::is_empty) {
            return Err("article has no sentences".into());
        }
        if let Some((p, s)) = self.paragraphs.iter().enumerate().find_map(|(p, para)| {
            para.iter()
                .position(|s| s.trim().is_empty())
                .map(|s| (p, s))
        }) {
            return Err(format!("empty sentence at paragraph {p}, position {s}"));
        }
        Article::new(self.page_id, self.rev_id, self.title, label, self.paragraphs)
            .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pos_ratio: Option<f64>,
}

impl SplitSpec {
    /// Training ratios used by the balanced evaluation protocol.
    pub const PROTOCOL_RATIOS: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

    pub fn new(train_ratio: f64, seed: u64) -> Self {
        Self {
            train_ratio,
            seed,
            pos_ratio: None,
        }
    }
}

fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

const ABBREVIATIONS: &[&str] = &[
    "dr.", "mr.", "mrs.", "ms.", "prof.", "st.", "jr.", "sr.", "mt.", "ft.", "gen.", "col.",
    "lt.", "sgt.", "capt.", "gov.", "rev.", "hon.", "inc.", "ltd.", "co.", "corp.", "no.",
    "vol.", "fig.", "vs.", "etc.", "e.g.", "i.e.", "approx.", "u.s.", "u.k.", "jan.", "feb.",
    "mar.", "apr.", "jun.", "jul.", "aug.", "sep.", "sept.", "oct.", "nov.", "dec.", "ca.",
    "c.", "p.", "pp.",
];

const CLOSERS: &[char] = &['"', '\'', ')', ']', '\u{201d}', '\u{2019}'];

fn is_abbreviation(word: &str) -> bool {
    let lower = word
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    ABBREVIATIONS.contains(&lower.as_str())
}

fn is_initial(word: &str) -> bool {
    let mut chars = word.chars();
    matches!((chars.next(), chars.next(), chars.next()), (Some(c), Some('.'), None) if c.is_alphabetic())
}

/// A single-letter initial ("J.") continues the sentence when a word
/// precedes it in the sentence ("Mr. J. Jones"), or when another initial
/// follows and is itself followed by more text ("J. K. Rowling").
fn initial_continues(word: &str, first_in_sentence: bool, rest: &[char]) -> bool {
    if !is_initial(word) {
        return false;
    }
    if !first_in_sentence {
        return true;
    }
    let rest: String = rest.iter().collect();
    let mut tokens = rest.split(' ').filter(|t| !t.is_empty());
    matches!((tokens.next(), tokens.next()), (Some(next), Some(_)) if is_initial(next))
}

fn split_sentences(para: &str) -> Vec<String> {
    let chars: Vec<char> = para.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut end = i + 1;
            while end < chars.len() && (matches!(chars[end], '.' | '!' | '?') || CLOSERS.contains(&chars[end])) {
                end += 1;
            }
            let boundary = end + 1 < chars.len()
                && chars[end] == ' '
                && {
                    let next = chars[end + 1..]
                        .iter()
                        .find(|ch| !matches!(ch, '"' | '\'' | '(' | '[' | '\u{201c}' | '\u{2018}'));
                    next.is_some_and(|ch| ch.is_uppercase() || ch.is_ascii_digit())
                };
            if boundary {
                let word_start = chars[start..i]
                    .iter()
                    .rposition(|ch| *ch == ' ')
                    .map_or(start, |p| start + p + 1);
                let word: String = chars[word_start..=i].iter().collect();
                let first_in_sentence = word_start == start;
                let keep = c == '.'
                    && (is_abbreviation(&word)
                        || initial_continues(&word, first_in_sentence, &chars[end..]));
                if !keep {
                    out.push(chars[start..end].iter().collect::<String>().trim().to_string());
                    start = end + 1;
                }
            }
            i = end;
        } else {
            i += 1;
        }
    }
    let tail: String = chars[start..].iter().collect();
    let tail = tail.trim();
    if !tail.is_empty() {
        out.push(tail.to_string());
    }
    out.retain(|s| !s.is_empty());
    out
}

/// Splits plain text into paragraphs (blank-line separated) of sentences.
pub fn segment(raw_text: &str) -> Result<Vec<Vec<Sentence>>> {
    let mut paragraphs: Vec<String> = Vec::new();
    let mut current = String::new();
    for line in raw_text.lines() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                paragraphs.push(std::mem::take(&mut current));
            }
        } else {
            if !current.is_empty() {
                current.push(' ');
            }
            current.push_str(line);
        }
    }
    if !current.is_empty() {
        paragraphs.push(current);
    }

    let mut out: Vec<Vec<Sentence>> = Vec::new();
    let mut sent_id = 0;
    for para in paragraphs {
        let sents = split_sentences(&normalize_ws(&para));
        if sents.is_empty() {
            continue;
        }
        let para_idx = out.len();
        out.push(
            sents
                .into_iter()
                .map(|text| {
                    let s = Sentence {
                        sent_id,
                        para_idx,
                        text,
                    };
                    sent_id += 1;
                    s
                })
                .collect(),
        );
    }
    if out.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(out)
}

/// Loads a JSONL corpus. Blank lines are skipped; line numbers are 1-based.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Article>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| Error::Schema {
            path: path.to_path_buf(),
            line: lineno,
            message,
        };
        let record: ArticleRecord =
            serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        let article = record.into_article().map_err(schema)?;
        if !seen.insert((article.page_id, article.rev_id)) {
            return Err(Error::DuplicateArticle {
                path: path.to_path_buf(),
                line: lineno,
                page_id: article.page_id,
                rev_id: article.rev_id,
            });
        }
        out.push(article);
    }
    Ok(out)
}

pub fn write_corpus(path: impl AsRef<Path>, articles: &[Article]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for a in articles {
        serde_json::to_writer(&mut w, &a.to_record())?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Result of a page-grouped split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Article>,
    pub test: Vec<Article>,
    pub train_pages: Vec<u64>,
    pub test_pages: Vec<u64>,
}

impl Split {
    pub fn has_empty_partition(&self) -> bool {
        self.train.is_empty() || self.test.is_empty()
    }
}

/// Page-grouped train/test split: every revision of a page lands in the same
/// partition. The number of training pages is `round(train_ratio * pages)`.
pub fn split_train_test(articles: &[Article], spec: &SplitSpec) -> Split {
    let pages: BTreeSet<u64> = articles.iter().map(|a| a.page_id).collect();
    let mut pages: Vec<u64> = pages.into_iter().collect();
    pages.shuffle(&mut seed::rng(spec.seed));
    let n_train = ((spec.train_ratio * pages.len() as f64).round() as usize).min(pages.len());
    let (train_pages, test_pages) = pages.split_at(n_train);
    let train_set: HashSet<u64> = train_pages.iter().copied().collect();
    let (train, test): (Vec<_>, Vec<_>) = articles
        .iter()
        .cloned()
        .partition(|a| train_set.contains(&a.page_id));
    let mut train_pages = train_pages.to_vec();
    let mut test_pages = test_pages.to_vec();
    train_pages.sort_unstable();
    test_pages.sort_unstable();
    Split {
        train,
        test,
        train_pages,
        test_pages,
    }
}

/// Class counts `(positives, negatives)` of the largest sample whose positive
/// count is `round(pos_ratio * size)` and which fits in the available pool.
pub fn imbalanced_counts(n_pos: usize, n_neg: usize, pos_ratio: f64) -> Result<(usize, usize)> {
    if !(pos_ratio > 0.0 && pos_ratio <= 1.0) {
        return Err(Error::InfeasibleSample(format!(
            "pos_ratio {pos_ratio} outside (0, 1]"
        )));
    }
    if n_pos == 0 {
        return Err(Error::InfeasibleSample(format!(
            "pos_ratio {pos_ratio} needs at least 1 positive article, corpus has 0"
        )));
    }
    if pos_ratio < 1.0 && n_neg == 0 {
        return Err(Error::InfeasibleSample(format!(
            "pos_ratio {pos_ratio} needs at least 1 negative article, corpus has 0"
        )));
    }
    for size in (1..=n_pos + n_neg).rev() {
        let pos = (pos_ratio * size as f64).round() as usize;
        let neg = size - pos.min(size);
        let want_neg = pos_ratio < 1.0;
        if pos >= 1 && pos <= n_pos && neg <= n_neg && (!want_neg || neg >= 1) {
            return Ok((pos, neg));
        }
    }
    Err(Error::InfeasibleSample(format!(
        "no sample with pos_ratio {pos_ratio} fits {n_pos} positives and {n_neg} negatives"
    )))
}

/// Samples without replacement so that the positive fraction matches
/// `pos_ratio`. The majority class is downsampled. Output keeps corpus order.
pub fn sample_imbalanced(articles: &[Article], pos_ratio: f64, seed: u64) -> Result<Vec<Article>> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, a) in articles.iter().enumerate() {
        if a.label == 1 {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    let (n_pos, n_neg) = imbalanced_counts(pos.len(), neg.len(), pos_ratio)?;
    let mut rng = seed::rng(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut chosen: Vec<usize> = pos[..n_pos].iter().chain(&neg[..n_neg]).copied().collect();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| articles[i].clone()).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliCounts {
    pub contradiction: usize,
    pub entailment: usize,
    pub neutral: usize,
    pub dropped: usize,
}

impl NliCounts {
    pub fn positives(&self) -> usize {
        self.contradiction
    }

    pub fn negatives(&self) -> usize {
        self.entailment + self.neutral
    }
}

#[derive(Debug, Clone)]
pub struct NliDataset {
    pub examples: Vec<NliExample>,
    pub counts: NliCounts,
}

#[derive(Deserialize)]
struct NliLine {
    #[serde(default)]
    gold_label: Option<String>,
    #[serde(default)]
    sentence1: Option<String>,
    #[serde(default)]
    sentence2: Option<String>,
}

/// Reads one file in the public SNLI/MNLI JSONL layout and maps it to binary
/// labels: contradiction → 1, entailment and neutral → 0, anything else
/// dropped.
pub fn read_nli_source(path: impl AsRef<Path>, counts: &mut NliCounts) -> Result<Vec<NliExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NliLine = serde_json::from_str(&line).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        let premise = rec.sentence1.as_deref().map(normalize_ws).unwrap_or_default();
        let hypothesis = rec.sentence2.as_deref().map(normalize_ws).unwrap_or_default();
        let label = match rec.gold_label.as_deref() {
            Some("contradiction") => Some(1),
            Some("entailment") | Some("neutral") => Some(0),
            _ => None,
        };
        match label {
            Some(label) if !premise.is_empty() && !hypothesis.is_empty() => {
                match rec.gold_label.as_deref() {
                    Some("contradiction") => counts.contradiction += 1,
                    Some("entailment") => counts.entailment += 1,
                    _ => counts.neutral += 1,
                }
                out.push(NliExample {
                    premise,
                    hypothesis,
                    label,
                });
            }
            _ => counts.dropped += 1,
        }
    }
    Ok(out)
}

/// Merges SNLI and MNLI into one binary contradiction dataset.
pub fn build_nli(snli_path: impl AsRef<Path>, mnli_path: impl AsRef<Path>) -> Result<NliDataset> {
    let mut counts = NliCounts::default();
    let mut examples = read_nli_source(snli_path.as_ref(), &mut counts)?;
    examples.extend(read_nli_source(mnli_path.as_ref(), &mut counts)?);
    if examples.is_empty() {
        return Err(Error::NoUsableExamples(format!(
            "{} + {}",
            snli_path.as_ref().display(),
            mnli_path.as_ref().display()
        )));
    }
    Ok(NliDataset { examples, counts })
}

pub fn write_nli(path: impl AsRef<Path>, examples: &[NliExample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads the binary NLI file written by [`write_nli`].
pub fn load_nli(path: impl AsRef<Path>) -> Result<Vec<NliExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| Error::Schema {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let ex: NliExample = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        if ex.label > 1 {
            return Err(schema(format!("unknown label value {}", ex.label)));
        }
        if ex.premise.trim().is_empty() || ex.hypothesis.trim().is_empty() {
            return Err(schema("empty premise or hypothesis".into()));
        }
        out.push(ex);
    }
    if out.is_empty() {
        return Err(Error::NoUsableExamples(path.display().to_string()));
    }
    Ok(out)
}

/// Per-label article counts.
pub fn label_counts(articles: &[Article]) -> BTreeMap<u8, usize> {
    let mut m = BTreeMap::new();
    for a in articles {
        *m.entry(a.label).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(paras: &[Vec<Sentence>]) -> Vec<Vec<&str>> {
        paras
            .iter()
            .map(|p| p.iter().map(|s| s.text.as_str()).collect())
            .collect()
    }

    #[test]
    fn segment_two_paragraphs() {
        let p = segment("A. B.\n\nC.").unwrap();
        assert_eq!(texts(&p), vec![vec!["A.", "B."], vec!["C."]]);
        assert_eq!(p[1][0].sent_id, 2);
        assert_eq!(p[1][0].para_idx, 1);
    }

    #[test]
    fn segment_empty_is_error() {
        assert!(matches!(segment(""), Err(Error::EmptyInput)));
        assert!(matches!(segment("  \n\n \t"), Err(Error::EmptyInput)));
    }

    #[test]
    fn segment_abbreviation_fixture() {
        // Hand-segmented: 3 + 2 + 3 sentences.
        let raw = "Dr. Smith arrived. He met Mr. J. Jones at 5 p.m. on Friday. \
                   They talked for an hour.\n\n\
                   The town, e.g. the old quarter, was quiet! Was it always so?\n\n\
                   In 1990 the mill closed. 2001 saw it reopen. \"It is back,\" said St. Clair.";
        let p = segment(raw).unwrap();
        assert_eq!(
            texts(&p),
            vec![
                vec![
                    "Dr. Smith arrived.",
                    "He met Mr. J. Jones at 5 p.m. on Friday.",
                    "They talked for an hour."
                ],
                vec!["The town, e.g. the old quarter, was quiet!", "Was it always so?"],
                vec![
                    "In 1990 the mill closed.",
                    "2001 saw it reopen.",
                    "\"It is back,\" said St. Clair."
                ],
            ]
        );
    }

    #[test]
    fn segment_initials() {
        let p = segment("J. K. Rowling wrote it. A. B.").unwrap();
        assert_eq!(
            texts(&p),
            vec![vec!["J. K. Rowling wrote it.", "A.", "B."]]
        );
    }

    #[test]
    fn segment_lowercase_continuation_does_not_split() {
        let p = segment("Version 2.5 was released. it was fine.").unwrap();
        assert_eq!(texts(&p), vec![vec!["Version 2.5 was released. it was fine."]]);
    }

    #[test]
    fn split_pages_together() {
        let mk = |page, rev, label| {
            Article::new(page, rev, "t", label, vec![vec!["x.".into()]]).unwrap()
        };
        let arts = vec![mk(1, 1, 1), mk(1, 2, 0), mk(2, 3, 1), mk(2, 4, 0)];
        let s = split_train_test(&arts, &SplitSpec::new(0.5, 3));
        assert_eq!(s.train.len(), 2);
        assert_eq!(s.test.len(), 2);
        assert_eq!(s.train[0].page_id, s.train[1].page_id);
        assert_ne!(s.train[0].page_id, s.test[0].page_id);
    }

    #[test]
    fn imbalanced_counting_rule() {
        assert_eq!(imbalanced_counts(100, 100, 0.5).unwrap(), (100, 100));
        assert_eq!(imbalanced_counts(100, 100, 0.1).unwrap(), (11, 100));
        assert_eq!(imbalanced_counts(5, 100, 0.5).unwrap(), (5, 5));
        assert_eq!(imbalanced_counts(100, 100, 0.3).unwrap(), (43, 100));
        assert!(matches!(
            imbalanced_counts(0, 100, 0.5),
            Err(Error::InfeasibleSample(_))
        ));
    }

    #[test]
    fn record_rejects_bad_label() {
        let rec: ArticleRecord = serde_json::from_str(
            r#"{"page_id":1,"rev_id":1,"title":"t","label":2,"paragraphs":[["a."]]}"#,
        )
        .unwrap();
        assert!(rec.into_article().unwrap_err().contains("label"));
    }
}
