//! Data model for QA instances, retrieved documents, and perturbation labels,
//! plus the line-oriented JSONL interchange every pipeline stage shares.
//!
//! All files are UTF-8 JSONL, one record per line. Files written by this
//! module start with a meta header record (`{"type":"meta",...}`) carrying
//! the seed and generator version; every reader skips such lines.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// NER type of a gold answer. `NA` marks instances whose answers carry no
/// named-entity type and are therefore never perturbable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnswerType {
    PER,
    ORG,
    LOC,
    DATE,
    NUM,
    NA,
}

impl AnswerType {
    /// The five typed variants, in a fixed order.
    pub const TYPED: [AnswerType; 5] = [
        AnswerType::PER,
        AnswerType::ORG,
        AnswerType::LOC,
        AnswerType::DATE,
        AnswerType::NUM,
    ];

    pub fn is_typed(self) -> bool {
        self != AnswerType::NA
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerType::PER => "PER",
            AnswerType::ORG => "ORG",
            AnswerType::LOC => "LOC",
            AnswerType::DATE => "DATE",
            AnswerType::NUM => "NUM",
            AnswerType::NA => "NA",
        }
    }
}

impl std::fmt::Display for AnswerType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a document was perturbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbMethod {
    Entity,
    Macnoise,
}

/// Manual taxonomy of rewrite styles: Additional Context, Global Revision,
/// Local Revision, Entity Replacement with context match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbationType {
    AC,
    GR,
    LR,
    ER,
}

/// Provenance of one perturbation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub method: PerturbMethod,
    pub original_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation_type: Option<PerturbationType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_id: Option<String>,
}

impl PerturbationRecord {
    pub fn validate(&self) -> Result<(), CorpusError> {
        match self.method {
            PerturbMethod::Entity => {
                if self.replacement.is_none() {
                    return Err(CorpusError::Validation(
                        "entity perturbation record lacks a replacement".into(),
                    ));
                }
                if self.perturbation_type != Some(PerturbationType::ER) {
                    return Err(CorpusError::Validation(
                        "entity perturbation record must carry perturbation_type ER".into(),
                    ));
                }
            }
            PerturbMethod::Macnoise => {
                if self.generator_id.is_none() {
                    return Err(CorpusError::Validation(
                        "macnoise perturbation record lacks a generator_id".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// One question with its gold answer aliases and typed-answer metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAInstance {
    pub id: String,
    pub question: String,
    /// Gold aliases, stored raw; normalization happens at evaluation time.
    pub answers: Vec<String>,
    pub answer_type: AnswerType,
}

impl QAInstance {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.answers.is_empty() {
            return Err(CorpusError::Validation(format!(
                "instance {}: answers list is empty",
                self.id
            )));
        }
        if self.answers.iter().any(|a| a.trim().is_empty()) {
            return Err(CorpusError::Validation(format!(
                "instance {}: blank answer alias",
                self.id
            )));
        }
        Ok(())
    }

    /// First alias, the canonical surface form.
    pub fn primary_answer(&self) -> &str {
        &self.answers[0]
    }
}

/// A retrieved passage with its rank and perturbation label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub text: String,
    pub rank: u32,
    #[serde(default)]
    pub perturbed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<PerturbationRecord>,
}

impl Document {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.rank == 0 {
            return Err(CorpusError::Validation(format!(
                "document {}: rank must be positive",
                self.doc_id
            )));
        }
        if self.perturbed != self.record.is_some() {
            return Err(CorpusError::Validation(format!(
                "document {}: perturbed flag and record presence disagree",
                self.doc_id
            )));
        }
        if let Some(record) = &self.record {
            record.validate()?;
        }
        Ok(())
    }
}

/// Rank-ordered documents retrieved for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievedSet {
    pub question_id: String,
    pub documents: Vec<Document>,
}

impl RetrievedSet {
    /// Enforces rank contiguity (exactly 1..=M in order) and per-document
    /// invariants.
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.documents.is_empty() {
            return Err(CorpusError::Validation(format!(
                "question {}: empty document set",
                self.question_id
            )));
        }
        for (i, doc) in self.documents.iter().enumerate() {
            doc.validate()?;
            if doc.rank as usize != i + 1 {
                return Err(CorpusError::Validation(format!(
                    "question {}: rank {} at position {} breaks 1..M contiguity",
                    self.question_id,
                    doc.rank,
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// Header record written as the first line of every split file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitMeta {
    #[serde(rename = "type")]
    pub record_type: String,
    pub seed: u64,
    pub generator: String,
}

impl SplitMeta {
    pub fn new(seed: u64) -> Self {
        SplitMeta {
            record_type: "meta".to_string(),
            seed,
            generator: format!("conflictqa-core {}", env!("CARGO_PKG_VERSION")),
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("line {line}: duplicate rank {rank} for question {question_id}")]
    DuplicateRank {
        line: usize,
        question_id: String,
        rank: u32,
    },
}

fn is_meta_line(value: &serde_json::Value) -> bool {
    value.get("type").and_then(|t| t.as_str()) == Some("meta")
}

/// Iterates data lines of a JSONL file, skipping meta headers and blank
/// lines, yielding `(line_number, value)`.
fn read_jsonl(path: &Path) -> Result<Vec<(usize, serde_json::Value)>, CorpusError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
                line: lineno,
                source,
            })?;
        if is_meta_line(&value) {
            continue;
        }
        out.push((lineno, value));
    }
    Ok(out)
}

/// Loads a QA dataset, in file order.
pub fn load_qa_dataset(path: impl AsRef<Path>) -> Result<Vec<QAInstance>, CorpusError> {
    let mut instances = Vec::new();
    for (lineno, value) in read_jsonl(path.as_ref())? {
        let instance: QAInstance =
            serde_json::from_value(value).map_err(|source| CorpusError::Parse {
                line: lineno,
                source,
            })?;
        instance
            .validate()
            .map_err(|e| CorpusError::Validation(format!("line {lineno}: {e}")))?;
        instances.push(instance);
    }
    Ok(instances)
}

/// Writes a QA dataset with a meta header.
pub fn write_qa_dataset(
    path: impl AsRef<Path>,
    instances: &[QAInstance],
    seed: u64,
) -> Result<(), CorpusError> {
    for instance in instances {
        instance.validate()?;
    }
    let mut writer = BufWriter::new(File::create(path.as_ref())?);
    write_line(&mut writer, &SplitMeta::new(seed))?;
    for instance in instances {
        write_line(&mut writer, instance)?;
    }
    writer.flush()?;
    Ok(())
}

/// Flat per-document record as stored in retrieval and labeled files.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DocumentLine {
    question_id: String,
    rank: u32,
    doc_id: String,
    title: String,
    text: String,
    #[serde(default)]
    perturbed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    record: Option<PerturbationRecord>,
}

/// Loads retrieval results grouped per question, truncated to `top_k`
/// documents each, rank order preserved.
pub fn load_retrievals(
    path: impl AsRef<Path>,
    top_k: usize,
) -> Result<BTreeMap<String, RetrievedSet>, CorpusError> {
    assert!(top_k >= 1, "top_k must be at least 1");
    let mut grouped: BTreeMap<String, Vec<(usize, DocumentLine)>> = BTreeMap::new();
    for (lineno, value) in read_jsonl(path.as_ref())? {
        let record: DocumentLine =
            serde_json::from_value(value).map_err(|source| CorpusError::Parse {
                line: lineno,
                source,
            })?;
        grouped
            .entry(record.question_id.clone())
            .or_default()
            .push((lineno, record));
    }

    let mut sets = BTreeMap::new();
    for (question_id, mut lines) in grouped {
        lines.sort_by_key(|(_, r)| r.rank);
        for pair in lines.windows(2) {
            if pair[0].1.rank == pair[1].1.rank {
                return Err(CorpusError::DuplicateRank {
                    line: pair[1].0,
                    question_id,
                    rank: pair[1].1.rank,
                });
            }
        }
        let documents: Vec<Document> = lines
            .into_iter()
            .take(top_k)
            .map(|(_, r)| Document {
                doc_id: r.doc_id,
                title: r.title,
                text: r.text,
                rank: r.rank,
                perturbed: r.perturbed,
                record: r.record,
            })
            .collect();
        let set = RetrievedSet {
            question_id: question_id.clone(),
            documents,
        };
        set.validate()?;
        sets.insert(question_id, set);
    }
    Ok(sets)
}

/// Writes plain (unlabeled) retrievals: one `{question_id, rank, doc_id,
/// title, text}` record per document.
pub fn write_retrievals(
    path: impl AsRef<Path>,
    sets: &[RetrievedSet],
    seed: u64,
) -> Result<(), CorpusError> {
    #[derive(Serialize)]
    struct RetrievalLine<'a> {
        question_id: &'a str,
        rank: u32,
        doc_id: &'a str,
        title: &'a str,
        text: &'a str,
    }
    for set in sets {
        set.validate()?;
    }
    let mut writer = BufWriter::new(File::create(path.as_ref())?);
    write_line(&mut writer, &SplitMeta::new(seed))?;
    for set in sets {
        for doc in &set.documents {
            write_line(
                &mut writer,
                &RetrievalLine {
                    question_id: &set.question_id,
                    rank: doc.rank,
                    doc_id: &doc.doc_id,
                    title: &doc.title,
                    text: &doc.text,
                },
            )?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Writes a labeled (or plain) split. Output is byte-deterministic for
/// identical inputs: struct field order is fixed and ranks are integers.
pub fn write_labeled_split(
    path: impl AsRef<Path>,
    sets: &[RetrievedSet],
    seed: u64,
) -> Result<(), CorpusError> {
    for set in sets {
        set.validate()?;
    }
    let mut writer = BufWriter::new(File::create(path.as_ref())?);
    write_line(&mut writer, &SplitMeta::new(seed))?;
    for set in sets {
        for doc in &set.documents {
            let line = DocumentLine {
                question_id: set.question_id.clone(),
                rank: doc.rank,
                doc_id: doc.doc_id.clone(),
                title: doc.title.clone(),
                text: doc.text.clone(),
                perturbed: doc.perturbed,
                record: doc.record.clone(),
            };
            write_line(&mut writer, &line)?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Loads a labeled split in first-appearance order, returning the meta
/// header when present.
pub fn load_labeled_split(
    path: impl AsRef<Path>,
) -> Result<(Vec<RetrievedSet>, Option<SplitMeta>), CorpusError> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut meta = None;
    let mut order: Vec<String> = Vec::new();
    let mut grouped: BTreeMap<String, Vec<Document>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|source| CorpusError::Parse {
                line: lineno,
                source,
            })?;
        if is_meta_line(&value) {
            meta = serde_json::from_value(value).ok();
            continue;
        }
        let record: DocumentLine =
            serde_json::from_value(value).map_err(|source| CorpusError::Parse {
                line: lineno,
                source,
            })?;
        if !grouped.contains_key(&record.question_id) {
            order.push(record.question_id.clone());
        }
        let docs = grouped.entry(record.question_id.clone()).or_default();
        if docs.iter().any(|d| d.rank == record.rank) {
            return Err(CorpusError::DuplicateRank {
                line: lineno,
                question_id: record.question_id,
                rank: record.rank,
            });
        }
        docs.push(Document {
            doc_id: record.doc_id,
            title: record.title,
            text: record.text,
            rank: record.rank,
            perturbed: record.perturbed,
            record: record.record,
        });
    }
    let mut sets = Vec::with_capacity(order.len());
    for question_id in order {
        let mut documents = grouped.remove(&question_id).unwrap();
        documents.sort_by_key(|d| d.rank);
        let set = RetrievedSet {
            question_id,
            documents,
        };
        set.validate()?;
        sets.push(set);
    }
    Ok((sets, meta))
}

fn write_line<W: Write, T: Serialize>(writer: &mut W, value: &T) -> Result<(), CorpusError> {
    let json = serde_json::to_string(value).expect("serialization of owned data cannot fail");
    writer.write_all(json.as_bytes())?;
    writer.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn instance(id: &str, answer: &str, answer_type: AnswerType) -> QAInstance {
        QAInstance {
            id: id.to_string(),
            question: format!("who {id}"),
            answers: vec![answer.to_string()],
            answer_type,
        }
    }

    fn doc(qid: &str, rank: u32) -> Document {
        Document {
            doc_id: format!("{qid}-d{rank}"),
            title: format!("title {rank}"),
            text: format!("text for {qid} rank {rank}"),
            rank,
            perturbed: false,
            record: None,
        }
    }

    #[test]
    fn loads_single_line_qa_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"q1\",\"question\":\"who won in 1995\",\"answers\":[\"1995\"],\"answer_type\":\"DATE\"}\n",
        )
        .unwrap();
        let instances = load_qa_dataset(&path).unwrap();
        assert_eq!(instances.len(), 1);
        assert_eq!(instances[0].answer_type, AnswerType::DATE);
        assert_eq!(instances[0].answers, vec!["1995"]);
    }

    #[test]
    fn count_matches_line_count_at_test_split_scale() {
        // Mirrors the 3,610-instance test split shape.
        let dir = tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        let instances: Vec<QAInstance> = (0..3610)
            .map(|i| instance(&format!("q{i}"), &format!("answer {i}"), AnswerType::PER))
            .collect();
        write_qa_dataset(&path, &instances, 0).unwrap();
        let loaded = load_qa_dataset(&path).unwrap();
        assert_eq!(loaded.len(), 3610);
    }

    #[test]
    fn malformed_line_names_line_number() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"q1\",\"question\":\"q\",\"answers\":[\"a\"],\"answer_type\":\"PER\"}\nnot json\n",
        )
        .unwrap();
        let err = load_qa_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "got: {err}");
    }

    #[test]
    fn empty_answers_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"q1\",\"question\":\"q\",\"answers\":[],\"answer_type\":\"PER\"}\n",
        )
        .unwrap();
        let err = load_qa_dataset(&path).unwrap_err();
        assert!(matches!(err, CorpusError::Validation(_)));
    }

    #[test]
    fn retrieval_truncates_to_top_k() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("retr.jsonl");
        let sets = vec![RetrievedSet {
            question_id: "q1".into(),
            documents: (1..=10).map(|r| doc("q1", r)).collect(),
        }];
        write_labeled_split(&path, &sets, 0).unwrap();

        let top5 = load_retrievals(&path, 5).unwrap();
        let ranks: Vec<u32> = top5["q1"].documents.iter().map(|d| d.rank).collect();
        assert_eq!(ranks, vec![1, 2, 3, 4, 5]);

        let top1 = load_retrievals(&path, 1).unwrap();
        assert_eq!(top1["q1"].documents.len(), 1);
        assert_eq!(top1["q1"].documents[0].rank, 1);

        // top_k beyond the stored count returns everything: min(k, n).
        let top99 = load_retrievals(&path, 99).unwrap();
        assert_eq!(top99["q1"].documents.len(), 10);
    }

    #[test]
    fn duplicate_rank_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("retr.jsonl");
        let line = "{\"question_id\":\"q1\",\"rank\":1,\"doc_id\":\"d\",\"title\":\"t\",\"text\":\"x\"}\n";
        std::fs::write(&path, format!("{line}{line}")).unwrap();
        let err = load_retrievals(&path, 5).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateRank { rank: 1, .. }));
    }

    #[test]
    fn labeled_split_write_is_byte_deterministic_and_round_trips() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        let mut sets = vec![
            RetrievedSet {
                question_id: "q1".into(),
                documents: (1..=3).map(|r| doc("q1", r)).collect(),
            },
            RetrievedSet {
                question_id: "q2".into(),
                documents: (1..=2).map(|r| doc("q2", r)).collect(),
            },
        ];
        sets[0].documents[1].perturbed = true;
        sets[0].documents[1].record = Some(PerturbationRecord {
            method: PerturbMethod::Entity,
            original_answer: "Michael Jordan".into(),
            replacement: Some("Kobe Bryant".into()),
            perturbation_type: Some(PerturbationType::ER),
            generator_id: None,
        });

        write_labeled_split(&a, &sets, 42).unwrap();
        write_labeled_split(&b, &sets, 42).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let (loaded, meta) = load_labeled_split(&a).unwrap();
        assert_eq!(loaded, sets);
        assert_eq!(meta.unwrap().seed, 42);
    }

    #[test]
    fn header_carries_seed() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("split.jsonl");
        write_labeled_split(
            &path,
            &[RetrievedSet {
                question_id: "q1".into(),
                documents: vec![doc("q1", 1)],
            }],
            42,
        )
        .unwrap();
        let first = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string();
        let value: serde_json::Value = serde_json::from_str(&first).unwrap();
        assert_eq!(value["type"], "meta");
        assert_eq!(value["seed"], 42);
    }

    #[test]
    fn label_consistency_enforced_on_write() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        let mut d = doc("q1", 1);
        d.perturbed = true; // no record attached
        let err = write_labeled_split(
            &path,
            &[RetrievedSet {
                question_id: "q1".into(),
                documents: vec![d],
            }],
            0,
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::Validation(_)));
    }

    #[test]
    fn rank_gap_is_rejected_on_load() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("gap.jsonl");
        std::fs::write(
            &path,
            "{\"question_id\":\"q1\",\"rank\":1,\"doc_id\":\"a\",\"title\":\"t\",\"text\":\"x\"}\n\
             {\"question_id\":\"q1\",\"rank\":3,\"doc_id\":\"b\",\"title\":\"t\",\"text\":\"x\"}\n",
        )
        .unwrap();
        assert!(load_labeled_split(&path).is_err());
    }
}
