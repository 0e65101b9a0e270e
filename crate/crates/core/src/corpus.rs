//! Dataset model: license records with reference summaries and per-term
//! attitude labels, the JSONL on-disk format, and cross-validation fold
//! planning.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 23 license terms, in the fixed order every checkpoint and report uses.
pub const TERM_NAMES: [&str; 23] = [
    "Distribute",
    "Modify",
    "Commercial Use",
    "Hold Liable",
    "Include Copyright",
    "Include License",
    "Sublicense",
    "Use Trademark",
    "Private Use",
    "Disclose Source",
    "State Changes",
    "Place Warranty",
    "Include Notice",
    "Include Original",
    "Give Credit",
    "Use Patent Claims",
    "Rename",
    "Relicense",
    "Contact Author",
    "Include Install Instructions",
    "Compensate for Damages",
    "Statically Link",
    "Pay Above Use Threshold",
];

/// Number of license terms classified per record.
pub const NUM_TERMS: usize = 23;

/// Number of attitude classes per term.
pub const NUM_ATTITUDES: usize = 4;

/// Ordered term-name vocabulary with a name -> index bijection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TermVocabulary {
    terms: Vec<String>,
}

impl Default for TermVocabulary {
    fn default() -> Self {
        TermVocabulary {
            terms: TERM_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TermVocabulary {
    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.terms.iter().position(|t| t == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.terms[index]
    }
}

/// Attitude a license conveys towards one term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attitude {
    #[serde(rename = "can")]
    Can,
    #[serde(rename = "cannot")]
    Cannot,
    #[serde(rename = "must")]
    Must,
    #[serde(rename = "not mentioned")]
    NotMentioned,
}

impl Attitude {
    pub const ALL: [Attitude; 4] = [
        Attitude::Can,
        Attitude::Cannot,
        Attitude::Must,
        Attitude::NotMentioned,
    ];

    /// Class index, fixed for the life of a checkpoint.
    pub fn index(self) -> usize {
        match self {
            Attitude::Can => 0,
            Attitude::Cannot => 1,
            Attitude::Must => 2,
            Attitude::NotMentioned => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Attitude> {
        Attitude::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Attitude::Can => "can",
            Attitude::Cannot => "cannot",
            Attitude::Must => "must",
            Attitude::NotMentioned => "not mentioned",
        }
    }

    pub fn parse(s: &str) -> Option<Attitude> {
        match s {
            "can" => Some(Attitude::Can),
            "cannot" => Some(Attitude::Cannot),
            "must" => Some(Attitude::Must),
            "not mentioned" => Some(Attitude::NotMentioned),
            _ => None,
        }
    }
}

impl fmt::Display for Attitude {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Complete attitude assignment over the 23 terms, indexed in vocabulary order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TermLabelSet {
    labels: [Attitude; NUM_TERMS],
}

impl Default for TermLabelSet {
    fn default() -> Self {
        TermLabelSet {
            labels: [Attitude::NotMentioned; NUM_TERMS],
        }
    }
}

impl TermLabelSet {
    pub fn new(labels: [Attitude; NUM_TERMS]) -> Self {
        TermLabelSet { labels }
    }

    pub fn get(&self, term_index: usize) -> Attitude {
        self.labels[term_index]
    }

    pub fn set(&mut self, term_index: usize, attitude: Attitude) {
        self.labels[term_index] = attitude;
    }

    pub fn as_slice(&self) -> &[Attitude; NUM_TERMS] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = Attitude> + '_ {
        self.labels.iter().copied()
    }
}

/// One license document with its reference summary and term labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LicenseRecord {
    pub id: String,
    pub name: String,
    pub text: String,
    pub summary: String,
    pub labels: TermLabelSet,
}

impl LicenseRecord {
    pub fn new(
        id: String,
        name: String,
        text: String,
        summary: String,
        labels: TermLabelSet,
    ) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::data(format!("record '{id}': empty license text")));
        }
        if summary.trim().is_empty() {
            return Err(Error::data(format!("record '{id}': empty reference summary")));
        }
        Ok(LicenseRecord { id, name, text, summary, labels })
    }
}

/// An immutable, validated collection of license records.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    records: Vec<LicenseRecord>,
    pub source_path: Option<String>,
}

impl Corpus {
    pub fn from_records(records: Vec<LicenseRecord>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for r in &records {
            if !seen.insert(r.id.clone()) {
                return Err(Error::data(format!("duplicate record id '{}'", r.id)));
            }
        }
        Ok(Corpus { records, source_path: None })
    }

    pub fn records(&self) -> &[LicenseRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&LicenseRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Subset of records by id, in the given order.
    pub fn select(&self, ids: &[String]) -> Result<Vec<LicenseRecord>> {
        ids.iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::data(format!("unknown record id '{id}'")))
            })
            .collect()
    }

    /// Write the corpus back out in the canonical JSONL format (all 23
    /// labels explicit).
    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let vocab = TermVocabulary::default();
        let mut out = std::fs::File::create(path)?;
        for r in &self.records {
            let labels: BTreeMap<&str, &str> = vocab
                .terms()
                .iter()
                .enumerate()
                .map(|(i, t)| (t.as_str(), r.labels.get(i).as_str()))
                .collect();
            let line = serde_json::json!({
                "id": r.id,
                "name": r.name,
                "text": r.text,
                "summary": r.summary,
                "labels": labels,
            });
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Raw JSONL line shape; labels may be partial and id may be absent.
#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    name: Option<String>,
    text: String,
    summary: String,
    #[serde(default)]
    labels: BTreeMap<String, String>,
}

/// Loader side-channel: what was fixed up or worth flagging.
#[derive(Debug, Clone, Default)]
pub struct CorpusReport {
    pub warnings: Vec<String>,
    /// Records whose label map already covered all 23 terms.
    pub complete_label_records: usize,
    /// Records with at least one label completed to "not mentioned".
    pub completed_label_records: usize,
}

/// Load and validate a JSONL corpus. Warnings go to the log; use
/// [`load_corpus_with_report`] to inspect them programmatically.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let (corpus, report) = load_corpus_with_report(path)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok(corpus)
}

/// As [`load_corpus`], returning the warning report alongside the corpus.
pub fn load_corpus_with_report(path: &Path) -> Result<(Corpus, CorpusReport)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::data(format!("cannot open corpus {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    let vocab = TermVocabulary::default();
    let mut report = CorpusReport::default();
    let mut records = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("line {lineno}: malformed JSON: {e}")))?;

        let id = raw.id.unwrap_or_else(|| format!("{:06}", lineno - 1));
        let name = raw.name.unwrap_or_else(|| id.clone());

        let mut labels = TermLabelSet::default();
        let mut given = 0usize;
        for (term, attitude) in &raw.labels {
            let idx = vocab.index_of(term).ok_or_else(|| {
                Error::data(format!("line {lineno}: unknown license term '{term}'"))
            })?;
            let att = Attitude::parse(attitude).ok_or_else(|| {
                Error::data(format!(
                    "line {lineno}: unknown attitude '{attitude}' for term '{term}' \
                     (expected can, cannot, must, or not mentioned)"
                ))
            })?;
            labels.set(idx, att);
            given += 1;
        }
        if given < NUM_TERMS {
            report.completed_label_records += 1;
            report.warnings.push(format!(
                "line {lineno} (record '{id}'): {} of 23 term labels missing, \
                 completed to 'not mentioned'",
                NUM_TERMS - given
            ));
        } else {
            report.complete_label_records += 1;
        }

        let record = LicenseRecord::new(id, name, raw.text, raw.summary, labels)
            .map_err(|e| Error::data(format!("line {lineno}: {e}")))?;
        records.push(record);
    }

    if records.is_empty() {
        report.warnings.push(format!("corpus {} is empty", path.display()));
    }

    let mut corpus = Corpus::from_records(records)?;
    corpus.source_path = Some(path.display().to_string());
    Ok((corpus, report))
}

/// One cross-validation fold: disjoint train/val/test id lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// A k-fold plan over a corpus; test sets partition the record ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Plan k folds: shuffle ids once for the test partition, then per fold
/// reshuffle the remainder (continuing the same seed stream) and carve
/// val = floor(remaining / 4) off the front, train = the rest.
pub fn make_folds(corpus: &Corpus, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::config(format!("fold count k={k} must be at least 2")));
    }
    if corpus.len() < k {
        return Err(Error::config(format!(
            "fold count k={k} exceeds corpus size {}",
            corpus.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<String> = corpus.records().iter().map(|r| r.id.clone()).collect();
    ids.shuffle(&mut rng);

    // contiguous test chunks; the first n % k folds take one extra record
    let n = ids.len();
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut offset = 0usize;
    for fold_idx in 0..k {
        let size = base + usize::from(fold_idx < extra);
        let test: Vec<String> = ids[offset..offset + size].to_vec();
        offset += size;

        let mut rest: Vec<String> = ids
            .iter()
            .filter(|id| !test.contains(id))
            .cloned()
            .collect();
        rest.shuffle(&mut rng);
        let val_size = rest.len() / 4;
        if val_size == 0 {
            log::warn!("fold {fold_idx}: validation set is empty ({} remaining records)", rest.len());
        }
        let val: Vec<String> = rest[..val_size].to_vec();
        let train: Vec<String> = rest[val_size..].to_vec();
        folds.push(Fold { train, val, test });
    }

    Ok(FoldPlan { k, seed, folds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str) -> LicenseRecord {
        LicenseRecord::new(
            id.to_string(),
            format!("license {id}"),
            format!("you may use and distribute item {id}"),
            format!("summary {id}"),
            TermLabelSet::default(),
        )
        .unwrap()
    }

    fn corpus_of(n: usize) -> Corpus {
        Corpus::from_records((0..n).map(|i| record(&format!("{i:03}"))).collect()).unwrap()
    }

    fn write_jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn term_vocabulary_is_a_bijection_of_23() {
        let v = TermVocabulary::default();
        assert_eq!(v.len(), 23);
        let unique: std::collections::BTreeSet<_> = v.terms().iter().collect();
        assert_eq!(unique.len(), 23);
        for (i, t) in v.terms().iter().enumerate() {
            assert_eq!(v.index_of(t), Some(i));
        }
        assert_eq!(v.index_of("Distribute"), Some(0));
        assert_eq!(v.index_of("Pay Above Use Threshold"), Some(22));
    }

    #[test]
    fn attitude_round_trips_and_orders() {
        for a in Attitude::ALL {
            assert_eq!(Attitude::parse(a.as_str()), Some(a));
            assert_eq!(Attitude::from_index(a.index()), Some(a));
        }
        assert_eq!(Attitude::parse("maybe"), None);
        assert!(Attitude::Can < Attitude::NotMentioned);
    }

    #[test]
    fn loads_well_formed_lines() {
        let f = write_jsonl(&[
            r#"{"id":"mit","name":"MIT","text":"permission is hereby granted","summary":"do what you want","labels":{"Distribute":"can","Hold Liable":"cannot"}}"#,
            r#"{"name":"X","text":"some text","summary":"some summary","labels":{}}"#,
        ]);
        let (corpus, report) = load_corpus_with_report(f.path()).unwrap();
        assert_eq!(corpus.len(), 2);
        let mit = corpus.get("mit").unwrap();
        assert_eq!(mit.labels.get(0), Attitude::Can);
        assert_eq!(mit.labels.get(3), Attitude::Cannot);
        assert_eq!(mit.labels.get(5), Attitude::NotMentioned);
        // second record has a synthesized zero-padded id from its line index
        assert!(corpus.get("000001").is_some());
        assert_eq!(report.completed_label_records, 2);
    }

    #[test]
    fn loads_210_records() {
        let lines: Vec<String> = (0..210)
            .map(|i| {
                format!(
                    r#"{{"id":"l{i}","name":"n{i}","text":"text {i}","summary":"sum {i}","labels":{{"Distribute":"can"}}}}"#
                )
            })
            .collect();
        let refs: Vec<&str> = lines.iter().map(|s| s.as_str()).collect();
        let f = write_jsonl(&refs);
        let corpus = load_corpus(f.path()).unwrap();
        assert_eq!(corpus.len(), 210);
    }

    #[test]
    fn empty_file_gives_empty_corpus_with_warning() {
        let f = write_jsonl(&[]);
        let (corpus, report) = load_corpus_with_report(f.path()).unwrap();
        assert!(corpus.is_empty());
        assert!(report.warnings.iter().any(|w| w.contains("empty")));
    }

    #[test]
    fn partial_labels_complete_to_not_mentioned_with_warning() {
        let f = write_jsonl(&[
            r#"{"id":"a","name":"a","text":"t","summary":"s","labels":{"Distribute":"can"}}"#,
        ]);
        let (corpus, report) = load_corpus_with_report(f.path()).unwrap();
        let rec = corpus.get("a").unwrap();
        assert_eq!(rec.labels.get(0), Attitude::Can);
        for i in 1..NUM_TERMS {
            assert_eq!(rec.labels.get(i), Attitude::NotMentioned);
        }
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("22 of 23"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_jsonl(&[
            r#"{"id":"ok","name":"n","text":"t","summary":"s","labels":{}}"#,
            r#"{"id":"broken","#,
        ]);
        let err = load_corpus(f.path()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn unknown_term_and_attitude_are_named() {
        let f = write_jsonl(&[
            r#"{"id":"a","name":"a","text":"t","summary":"s","labels":{"Fly To The Moon":"can"}}"#,
        ]);
        let err = load_corpus(f.path()).unwrap_err();
        assert!(err.to_string().contains("Fly To The Moon"), "{err}");

        let f = write_jsonl(&[
            r#"{"id":"a","name":"a","text":"t","summary":"s","labels":{"Distribute":"perhaps"}}"#,
        ]);
        let err = load_corpus(f.path()).unwrap_err();
        assert!(err.to_string().contains("perhaps"), "{err}");
    }

    #[test]
    fn empty_text_or_summary_rejected() {
        let f = write_jsonl(&[r#"{"id":"a","name":"a","text":"  ","summary":"s","labels":{}}"#]);
        assert!(load_corpus(f.path()).is_err());
        let f = write_jsonl(&[r#"{"id":"a","name":"a","text":"t","summary":"","labels":{}}"#]);
        assert!(load_corpus(f.path()).is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = write_jsonl(&[
            r#"{"id":"a","name":"a","text":"t","summary":"s","labels":{}}"#,
            r#"{"id":"a","name":"b","text":"t2","summary":"s2","labels":{}}"#,
        ]);
        assert!(load_corpus(f.path()).is_err());
    }

    #[test]
    fn corpus_round_trips_through_jsonl() {
        let mut labels = TermLabelSet::default();
        labels.set(0, Attitude::Can);
        labels.set(3, Attitude::Must);
        let rec = LicenseRecord::new(
            "x".into(),
            "X License".into(),
            "the text".into(),
            "the summary".into(),
            labels,
        )
        .unwrap();
        let corpus = Corpus::from_records(vec![rec, record("y")]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        corpus.save_jsonl(&path).unwrap();
        let reloaded = load_corpus(&path).unwrap();
        assert_eq!(corpus.records(), reloaded.records());
    }

    #[test]
    fn folds_210_records_into_70_105_35() {
        let plan = make_folds(&corpus_of(210), 3, 17).unwrap();
        assert_eq!(plan.folds.len(), 3);
        for fold in &plan.folds {
            assert_eq!(fold.test.len(), 70);
            assert_eq!(fold.train.len(), 105);
            assert_eq!(fold.val.len(), 35);
        }
    }

    #[test]
    fn three_records_three_folds_floor_rule() {
        let plan = make_folds(&corpus_of(3), 3, 0).unwrap();
        for fold in &plan.folds {
            assert_eq!(fold.test.len(), 1);
            assert_eq!(fold.train.len(), 2);
            assert_eq!(fold.val.len(), 0);
        }
    }

    #[test]
    fn folds_deterministic_and_seed_sensitive() {
        let c = corpus_of(24);
        assert_eq!(make_folds(&c, 3, 9).unwrap(), make_folds(&c, 3, 9).unwrap());
        assert_ne!(make_folds(&c, 3, 9).unwrap(), make_folds(&c, 3, 10).unwrap());
    }

    #[test]
    fn invalid_fold_counts_rejected() {
        assert!(make_folds(&corpus_of(5), 1, 0).is_err());
        assert!(make_folds(&corpus_of(2), 3, 0).is_err());
    }

    #[test]
    fn fold_sets_are_disjoint_within_each_fold() {
        let plan = make_folds(&corpus_of(23), 4, 3).unwrap();
        for fold in &plan.folds {
            let mut all: Vec<&String> =
                fold.train.iter().chain(&fold.val).chain(&fold.test).collect();
            let before = all.len();
            all.sort();
            all.dedup();
            assert_eq!(before, all.len());
            assert_eq!(before, 23);
        }
    }
}
