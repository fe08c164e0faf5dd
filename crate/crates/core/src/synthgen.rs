//! Synthetic corpora with planted contradictions.
//!
//! Every article is about one entity. One attribute of that entity is stated
//! twice: with conflicting values in positive articles, with the same value
//! in negative ones. The remaining sentences are single fact statements and
//! attribute-free filler. With a balanced spec, articles come in page pairs:
//! a contradictory revision and its resolved revision share a `page_id`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Article, NliExample, SentRef};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactTemplate {
    pub attribute: String,
    /// Sentence pattern with `{e}` (entity) and `{v}` (value) placeholders.
    pub pattern: String,
    pub values: Vec<String>,
}

impl FactTemplate {
    fn new(attribute: &str, pattern: &str, values: &[&str]) -> Self {
        Self {
            attribute: attribute.into(),
            pattern: pattern.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
        }
    }

    pub fn render(&self, entity: &str, value: &str) -> String {
        self.pattern.replace("{e}", entity).replace("{v}", value)
    }

    /// Inverse of [`FactTemplate::render`]: recovers `(entity, value)` from a
    /// sentence, ignoring a leading restatement prefix.
    pub fn parse(&self, sentence: &str) -> Option<(String, String)> {
        let (before_e, rest) = self.pattern.split_once("{e}")?;
        let (between, after_v) = rest.split_once("{v}")?;
        let body = strip_prefix(sentence);
        let body = body.strip_prefix(before_e)?;
        let body = body.strip_suffix(after_v)?;
        let (entity, value) = body.split_once(between)?;
        if entity.is_empty() || value.is_empty() || entity.contains(' ') {
            return None;
        }
        self.values
            .iter()
            .any(|v| v == value)
            .then(|| (entity.to_string(), value.to_string()))
    }
}

const PREFIXES: &[&str] = &[
    "Records show that",
    "According to the biography,",
    "It is documented that",
    "Sources confirm that",
];

fn strip_prefix(sentence: &str) -> &str {
    for p in PREFIXES {
        if let Some(rest) = sentence.strip_prefix(p) {
            return rest.trim_start();
        }
    }
    sentence
}

fn with_prefix(prefix: &str, sentence: &str) -> String {
    format!("{prefix} {sentence}")
}

pub fn default_templates() -> Vec<FactTemplate> {
    vec![
        FactTemplate::new(
            "birthplace",
            "{e} was born in {v}.",
            &["Lakewood", "Renton", "Tacoma", "Olympia", "Spokane", "Everett"],
        ),
        FactTemplate::new(
            "occupation",
            "{e} worked as a {v}.",
            &["carpenter", "teacher", "pilot", "chemist", "banker"],
        ),
        FactTemplate::new(
            "founding",
            "{e} founded the company in {v}.",
            &["1975", "1987", "1992", "2003", "2011"],
        ),
        FactTemplate::new(
            "instrument",
            "{e} played the {v} professionally.",
            &["violin", "cello", "piano", "trumpet"],
        ),
        FactTemplate::new(
            "residence",
            "{e} lived in {v} for a decade.",
            &["Boston", "Denver", "Chicago", "Austin"],
        ),
    ]
}

pub fn default_entities() -> Vec<String> {
    ["Ada", "Bram", "Celia", "Dorian", "Elsa", "Felix", "Greta", "Hugo"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

pub fn default_fillers() -> Vec<String> {
    [
        "The region has a mild maritime climate.",
        "Local markets open early on weekends.",
        "The valley is known for its orchards.",
        "A railway line crosses the northern district.",
        "The library holds several rare manuscripts.",
        "Winters there are short and wet.",
        "The harbor was expanded during the last century.",
        "Tourism remains an important source of income.",
        "Several bridges span the river near the center.",
        "The annual festival attracts many visitors.",
        "The museum exhibits regional pottery.",
        "Public parks cover much of the eastern shore.",
        "A small airport serves the surrounding area.",
        "The cathedral dates from the medieval period.",
        "Farmers grow wheat and barley on the plains.",
        "The old town features narrow cobbled streets.",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_articles: usize,
    pub pos_fraction: f64,
    /// Inclusive range.
    pub paragraphs_per_article: (usize, usize),
    /// Inclusive range.
    pub sentences_per_paragraph: (usize, usize),
    pub seed: u64,
    pub templates: Vec<FactTemplate>,
    pub entities: Vec<String>,
    pub fillers: Vec<String>,
    /// Place the two conflicting statements in different paragraphs.
    pub cross_paragraph: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_articles: 200,
            pos_fraction: 0.5,
            paragraphs_per_article: (2, 3),
            sentences_per_paragraph: (3, 5),
            seed: 0,
            templates: default_templates(),
            entities: default_entities(),
            fillers: default_fillers(),
            cross_paragraph: false,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.pos_fraction) {
            return bad(format!("pos_fraction {} outside [0, 1]", self.pos_fraction));
        }
        let (p0, p1) = self.paragraphs_per_article;
        let (s0, s1) = self.sentences_per_paragraph;
        if p0 == 0 || p0 > p1 || s0 == 0 || s0 > s1 {
            return bad("empty paragraph or sentence range".into());
        }
        if self.cross_paragraph && p0 < 2 {
            return bad("cross_paragraph needs at least 2 paragraphs per article".into());
        }
        if !self.cross_paragraph && s0 < 2 {
            return bad("planted pairs need paragraphs of at least 2 sentences".into());
        }
        if self.templates.len() < 2 || self.templates.iter().any(|t| t.values.len() < 2) {
            return bad("need >= 2 templates, each with >= 2 distinct values".into());
        }
        if self.entities.is_empty() {
            return bad("no entities".into());
        }
        let min_sentences = p0 * s0;
        if min_sentences < 2 || self.fillers.len() + 2 < p1 * s1 {
            return bad("not enough filler sentences for the largest article".into());
        }
        Ok(())
    }
}

/// Ground truth for one article.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedRecord {
    pub page_id: u64,
    pub rev_id: u64,
    pub planted: Vec<(SentRef, SentRef)>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub articles: Vec<Article>,
    /// Planted conflicting pair per positive article, keyed by
    /// `(page_id, rev_id)`.
    pub planted: BTreeMap<(u64, u64), (SentRef, SentRef)>,
}

impl SynthCorpus {
    pub fn planted_records(&self) -> Vec<PlantedRecord> {
        self.articles
            .iter()
            .map(|a| PlantedRecord {
                page_id: a.page_id,
                rev_id: a.rev_id,
                planted: self
                    .planted
                    .get(&(a.page_id, a.rev_id))
                    .map(|p| vec![*p])
                    .unwrap_or_default(),
            })
            .collect()
    }

    pub fn planted_for(&self, article: &Article) -> Option<(SentRef, SentRef)> {
        self.planted.get(&(article.page_id, article.rev_id)).copied()
    }
}

/// Layout of one page shared by its positive and negative revisions.
struct PageDraft {
    entity: String,
    sizes: Vec<usize>,
    /// `(template, value)` per sentence slot; `None` is filler.
    slots: Vec<Option<(usize, usize)>>,
    fillers: Vec<String>,
    first: usize,
    second: usize,
    value: usize,
    conflicting_value: usize,
    prefix: &'static str,
}

fn draft_page(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> PageDraft {
    let n_paras = rng.gen_range(spec.paragraphs_per_article.0..=spec.paragraphs_per_article.1);
    let sizes: Vec<usize> = (0..n_paras)
        .map(|_| rng.gen_range(spec.sentences_per_paragraph.0..=spec.sentences_per_paragraph.1))
        .collect();
    let total: usize = sizes.iter().sum();
    let starts: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &s| {
            let start = *acc;
            *acc += s;
            Some(start)
        })
        .collect();

    let (first, second) = if spec.cross_paragraph {
        let mut paras: Vec<usize> = (0..n_paras).collect();
        paras.shuffle(rng);
        let (mut pa, mut pb) = (paras[0], paras[1]);
        if pa > pb {
            std::mem::swap(&mut pa, &mut pb);
        }
        (
            starts[pa] + rng.gen_range(0..sizes[pa]),
            starts[pb] + rng.gen_range(0..sizes[pb]),
        )
    } else {
        let eligible: Vec<usize> = (0..n_paras).filter(|&p| sizes[p] >= 2).collect();
        let p = *eligible.choose(rng).expect("validated: paragraph with >= 2 sentences");
        let mut pos: Vec<usize> = (0..sizes[p]).collect();
        pos.shuffle(rng);
        let (a, b) = (pos[0].min(pos[1]), pos[0].max(pos[1]));
        (starts[p] + a, starts[p] + b)
    };

    let focus = rng.gen_range(0..spec.templates.len());
    let n_values = spec.templates[focus].values.len();
    let value = rng.gen_range(0..n_values);
    let conflicting_value = (value + rng.gen_range(1..n_values)) % n_values;

    let mut slots: Vec<Option<(usize, usize)>> = vec![None; total];
    slots[first] = Some((focus, value));
    slots[second] = Some((focus, value));

    // One or two other attributes, each stated once.
    let mut others: Vec<usize> = (0..spec.templates.len()).filter(|&t| t != focus).collect();
    others.shuffle(rng);
    let n_other = rng.gen_range(1..=2).min(others.len()).min(total - 2);
    let mut free: Vec<usize> = (0..total).filter(|&i| i != first && i != second).collect();
    free.shuffle(rng);
    for (&t, &slot) in others.iter().take(n_other).zip(&free) {
        slots[slot] = Some((t, rng.gen_range(0..spec.templates[t].values.len())));
    }

    let mut fillers = spec.fillers.clone();
    fillers.shuffle(rng);
    PageDraft {
        entity: spec.entities.choose(rng).expect("validated").clone(),
        sizes,
        slots,
        fillers,
        first,
        second,

        value,
        conflicting_value,
        prefix: PREFIXES.choose(rng).expect("non-empty"),
    }
}

fn realize(spec: &SynthSpec, d: &PageDraft, page_id: u64, rev_id: u64, positive: bool) -> Result<(Article, Option<(SentRef, SentRef)>)> {
    let mut fillers = d.fillers.iter();
    let mut texts = Vec::with_capacity(d.slots.len());
    for (i, slot) in d.slots.iter().enumerate() {
        let text = match slot {
            Some((t, v)) => {
                let tpl = &spec.templates[*t];
                if i == d.second {
                    let v = if positive { d.conflicting_value } else { d.value };
                    with_prefix(d.prefix, &tpl.render(&d.entity, &tpl.values[v]))
                } else {
                    tpl.render(&d.entity, &tpl.values[*v])
                }
            }
            None => fillers.next().expect("validated filler supply").clone(),
        };
        texts.push(text);
    }
    let mut it = texts.into_iter();
    let paragraphs: Vec<Vec<String>> = d
        .sizes
        .iter()
        .map(|&n| it.by_ref().take(n).collect())
        .collect();
    let article = Article::new(page_id, rev_id, d.entity.clone(), u8::from(positive), paragraphs)?;
    let refs: Vec<SentRef> = article.sentences().map(|s| s.sent_ref()).collect();
    let planted = positive.then(|| (refs[d.first], refs[d.second]));
    Ok((article, planted))
}

/// Generates a corpus. Positive and negative revisions are paired on one
/// page as far as the class counts allow.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive(spec.seed, "synth-articles"));
    let n_pos = (spec.pos_fraction * spec.n_articles as f64).round() as usize;
    let n_neg = spec.n_articles - n_pos;
    let paired = n_pos.min(n_neg);
    let mut articles = Vec::with_capacity(spec.n_articles);
    let mut planted = BTreeMap::new();
    let mut page_id = 0u64;
    let mut rev_id = 0u64;
    let mut emit = |d: &PageDraft, page_id: u64, positive: bool, articles: &mut Vec<Article>| -> Result<()> {
        rev_id += 1;
        let (a, p) = realize(spec, d, page_id, rev_id, positive)?;
        if let Some(p) = p {
            planted.insert((a.page_id, a.rev_id), p);
        }
        articles.push(a);
        Ok(())
    };
    for _ in 0..paired {
        page_id += 1;
        let d = draft_page(spec, &mut rng);
        emit(&d, page_id, true, &mut articles)?;
        emit(&d, page_id, false, &mut articles)?;
    }
    for _ in paired..n_pos {
        page_id += 1;
        let d = draft_page(spec, &mut rng);
        emit(&d, page_id, true, &mut articles)?;
    }
    for _ in paired..n_neg {
        page_id += 1;
        let d = draft_page(spec, &mut rng);
        emit(&d, page_id, false, &mut articles)?;
    }
    let corpus = SynthCorpus { articles, planted };
    check_planted_realizable(spec, &corpus)?;
    Ok(corpus)
}

fn check_planted_realizable(spec: &SynthSpec, corpus: &SynthCorpus) -> Result<()> {
    for ((page, rev), (a, b)) in &corpus.planted {
        let same_para = a.para == b.para;
        if same_para == spec.cross_paragraph {
            return Err(Error::Config(format!(
                "planted pair of page {page} rev {rev} violates placement rule"
            )));
        }
    }
    Ok(())
}

/// All `(entity, attribute, value)` facts stated in an article.
pub fn scan_facts(templates: &[FactTemplate], article: &Article) -> Vec<(SentRef, String, String, String)> {
    let mut out = Vec::new();
    for s in article.sentences() {
        for t in templates {
            if let Some((e, v)) = t.parse(&s.text) {
                out.push((s.sent_ref(), e, t.attribute.clone(), v));
            }
        }
    }
    out
}

/// Pairs of sentences asserting different values for one (entity,
/// attribute).
pub fn conflicting_pairs(templates: &[FactTemplate], article: &Article) -> Vec<(SentRef, SentRef)> {
    let facts = scan_facts(templates, article);
    let mut out = Vec::new();
    for (i, a) in facts.iter().enumerate() {
        for b in &facts[i + 1..] {
            if a.1 == b.1 && a.2 == b.2 && a.3 != b.3 {
                out.push((a.0, b.0));
            }
        }
    }
    out
}

/// Balanced binary NLI pairs built from the same templates.
///
/// Contradictions restate a fact with a different value. Non-contradictions
/// are consistent restatements, facts about different attributes, the same
/// attribute of a different entity, a fact against filler, or two filler
/// sentences.
pub fn generate_nli(spec: &SynthSpec, n_examples: usize) -> Result<Vec<NliExample>> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive(spec.seed, "synth-nli"));
    let n_pos = n_examples / 2 + n_examples % 2 * usize::from(rng.gen_bool(0.5));
    let mut out = Vec::with_capacity(n_examples);
    let pick_fact = |rng: &mut ChaCha8Rng| {
        let t = rng.gen_range(0..spec.templates.len());
        let v = rng.gen_range(0..spec.templates[t].values.len());
        (t, v)
    };
    let maybe_prefix = |rng: &mut ChaCha8Rng, s: String| {
        if rng.gen_bool(0.5) {
            with_prefix(PREFIXES.choose(rng).expect("non-empty"), &s)
        } else {
            s
        }
    };
    for i in 0..n_examples {
        let entity = spec.entities.choose(&mut rng).expect("validated").clone();
        let (t, v) = pick_fact(&mut rng);
        let tpl = &spec.templates[t];
        let mut premise = maybe_prefix(&mut rng, tpl.render(&entity, &tpl.values[v]));
        let (hypothesis, label) = if i < n_pos {
            let n = tpl.values.len();
            let w = (v + rng.gen_range(1..n)) % n;
            (maybe_prefix(&mut rng, tpl.render(&entity, &tpl.values[w])), 1)
        } else {
            let kind = rng.gen_range(0..6);
            let h = match kind {
                0 | 1 => tpl.render(&entity, &tpl.values[v]),
                2 => {
                    let mut u = rng.gen_range(0..spec.templates.len() - 1);
                    if u >= t {
                        u += 1;
                    }
                    let other = &spec.templates[u];
                    other.render(&entity, &other.values[rng.gen_range(0..other.values.len())])
                }
                3 if spec.entities.len() > 1 => {
                    let mut e = spec.entities.choose(&mut rng).expect("validated");
                    while *e == entity {
                        e = spec.entities.choose(&mut rng).expect("validated");
                    }
                    tpl.render(e, &tpl.values[rng.gen_range(0..tpl.values.len())])
                }
                5 if spec.fillers.len() > 1 => {
                    let pair: Vec<&String> = spec.fillers.choose_multiple(&mut rng, 2).collect();
                    premise = pair[0].clone();
                    pair[1].clone()
                }
                _ => spec.fillers.choose(&mut rng).expect("validated").clone(),
            };
            (maybe_prefix(&mut rng, h), 0)
        };
        if rng.gen_bool(0.5) && label == 0 {
            out.push(NliExample {
                premise: hypothesis,
                hypothesis: premise,
                label,
            });
        } else {
            out.push(NliExample {
                premise,
                hypothesis,
                label,
            });
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Writes NLI examples in the public SNLI/MNLI JSONL layout.
pub fn write_nli_source(path: impl AsRef<Path>, examples: &[NliExample]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for ex in examples {
        let gold = if ex.label == 1 { "contradiction" } else { "neutral" };
        serde_json::to_writer(
            &mut w,
            &serde_json::json!({
                "gold_label": gold,
                "sentence1": ex.premise,
                "sentence2": ex.hypothesis,
            }),
        )?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_planted(path: impl AsRef<Path>, corpus: &SynthCorpus) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for rec in corpus.planted_records() {
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_planted(path: impl AsRef<Path>) -> Result<BTreeMap<(u64, u64), (SentRef, SentRef)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PlantedRecord = serde_json::from_str(line).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        if let Some(p) = rec.planted.first() {
            out.insert((rec.page_id, rec.rev_id), *p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_parse_inverts_render() {
        let t = &default_templates()[0];
        let s = t.render("Ada", "Renton");
        assert_eq!(t.parse(&s), Some(("Ada".into(), "Renton".into())));
        let p = with_prefix(PREFIXES[1], &s);
        assert_eq!(t.parse(&p), Some(("Ada".into(), "Renton".into())));
        assert_eq!(t.parse("Ada was born in Paris."), None);
    }

    #[test]
    fn all_positive_spec() {
        let spec = SynthSpec {
            n_articles: 2,
            pos_fraction: 1.0,
            ..SynthSpec::default()
        };
        let c = generate(&spec).unwrap();
        assert_eq!(c.articles.len(), 2);
        assert_eq!(c.planted.len(), 2);
        assert!(c.articles.iter().all(|a| a.label == 1));
    }

    #[test]
    fn all_negative_spec() {
        let spec = SynthSpec {
            n_articles: 5,
            pos_fraction: 0.0,
            ..SynthSpec::default()
        };
        let c = generate(&spec).unwrap();
        assert!(c.planted.is_empty());
        assert!(c.articles.iter().all(|a| a.label == 0));
    }

    #[test]
    fn nli_construction_rules() {
        let spec = SynthSpec::default();
        let nli = generate_nli(&spec, 1000).unwrap();
        assert_eq!(nli.iter().filter(|e| e.label == 1).count(), 500);
        let t = &spec.templates;
        for ex in &nli {
            let a = t.iter().find_map(|tp| tp.parse(&ex.premise).map(|f| (tp.attribute.clone(), f)));
            let b = t.iter().find_map(|tp| tp.parse(&ex.hypothesis).map(|f| (tp.attribute.clone(), f)));
            let conflict = match (a, b) {
                (Some((ta, (ea, va))), Some((tb, (eb, vb)))) => ta == tb && ea == eb && va != vb,
                _ => false,
            };
            assert_eq!(u8::from(conflict), ex.label, "{ex:?}");
        }
    }

    #[test]
    fn cross_paragraph_placement() {
        let spec = SynthSpec {
            n_articles: 20,
            cross_paragraph: true,
            ..SynthSpec::default()
        };
        let c = generate(&spec).unwrap();
        assert!(c.planted.values().all(|(a, b)| a.para != b.para));
    }
}
