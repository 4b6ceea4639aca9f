//! Entity corpus-substitution perturbation: swap a typed gold answer inside
//! a retrieved document for another entity of the same type, at a controlled
//! rate, with full provenance labels.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    AnswerType, Document, PerturbMethod, PerturbationRecord, PerturbationType, QAInstance,
    RetrievedSet,
};

/// Typed pools of replacement entities, built from a dataset's answers.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EntityPools {
    pools: BTreeMap<AnswerType, Vec<String>>,
}

impl EntityPools {
    /// Entities of one type, in first-seen order.
    pub fn pool(&self, answer_type: AnswerType) -> &[String] {
        self.pools
            .get(&answer_type)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Samples a replacement of the given type that differs from every
    /// excluded alias and does not itself contain one.
    pub fn sample_replacement(
        &self,
        answer_type: AnswerType,
        exclude: &[String],
        rng: &mut impl Rng,
    ) -> Result<String, PerturbError> {
        let pool = self.pool(answer_type);
        if pool.len() < 2 {
            return Err(PerturbError::PoolExhausted(answer_type));
        }
        let candidates: Vec<&String> = pool
            .iter()
            .filter(|entry| {
                !exclude.iter().any(|alias| {
                    alias == *entry || !guarded_occurrences(entry, alias).is_empty()
                })
            })
            .collect();
        if candidates.is_empty() {
            return Err(PerturbError::PoolExhausted(answer_type));
        }
        Ok(candidates[rng.gen_range(0..candidates.len())].clone())
    }
}

/// Builds per-type pools from the first alias of every typed instance.
/// Entries are case-preserving and deduplicated case-sensitively.
pub fn build_entity_pools(instances: &[QAInstance]) -> EntityPools {
    let mut pools: BTreeMap<AnswerType, Vec<String>> = BTreeMap::new();
    let mut seen: BTreeMap<AnswerType, HashSet<String>> = BTreeMap::new();
    for instance in instances {
        if !instance.answer_type.is_typed() {
            continue;
        }
        let answer = instance.primary_answer().to_string();
        if seen
            .entry(instance.answer_type)
            .or_default()
            .insert(answer.clone())
        {
            pools.entry(instance.answer_type).or_default().push(answer);
        }
    }
    EntityPools { pools }
}

/// Classifies an answer string into one of the typed categories, or NA.
///
/// Deterministic for a fixed client instance.
pub trait NerClient {
    fn classify(&self, text: &str) -> AnswerType;
}

/// Desk-scale NER stand-in: year and number patterns plus small keyword
/// gazetteers for organizations and locations; capitalized multi-word
/// strings default to PER.
#[derive(Debug, Clone, Default)]
pub struct GazetteerNer;

const ORG_MARKERS: &[&str] = &[
    "Inc", "Corp", "Corporation", "Company", "University", "Institute", "Association",
    "Committee", "Club", "FC", "Ltd", "Secret", "Records", "Studios",
];
const LOC_MARKERS: &[&str] = &[
    "Island", "City", "Lake", "Mountain", "River", "County", "Republic", "Bay", "Valley",
    "Canada", "Ontario", "Francisco", "Peninsula",
];
const MONTHS: &[&str] = &[
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December",
];

impl NerClient for GazetteerNer {
    fn classify(&self, text: &str) -> AnswerType {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return AnswerType::NA;
        }
        let words: Vec<&str> = trimmed.split_whitespace().collect();
        let is_year = |w: &str| w.len() == 4 && w.chars().all(|c| c.is_ascii_digit());
        if words.len() == 1 && is_year(words[0]) {
            return AnswerType::DATE;
        }
        if words.iter().any(|w| MONTHS.contains(w)) || words.iter().any(|w| is_year(w)) {
            return AnswerType::DATE;
        }
        if trimmed
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, ',' | '.' | '-'))
        {
            return AnswerType::NUM;
        }
        fn bare(w: &str) -> &str {
            w.trim_matches(|c: char| c.is_ascii_punctuation())
        }
        if words.iter().any(|w| ORG_MARKERS.contains(&bare(w))) {
            return AnswerType::ORG;
        }
        if words.iter().any(|w| LOC_MARKERS.contains(&bare(w))) {
            return AnswerType::LOC;
        }
        let capitalized = words
            .iter()
            .all(|w| w.chars().next().map(char::is_uppercase).unwrap_or(false));
        if capitalized && (1..=3).contains(&words.len()) {
            return AnswerType::PER;
        }
        AnswerType::NA
    }
}

/// Assigns answer types to untyped instances using a NER client; typed
/// instances are left unchanged.
pub fn tag_instances(instances: &mut [QAInstance], ner: &dyn NerClient) {
    for instance in instances {
        if instance.answer_type == AnswerType::NA {
            instance.answer_type = ner.classify(instance.primary_answer());
        }
    }
}

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("no same-type replacement candidate for {0}")]
    PoolExhausted(AnswerType),
    #[error("document is not perturbable for this instance")]
    NotPerturbable,
    #[error("alias survived substitution in document {0}")]
    AliasRetained(String),
}

/// Byte offsets of occurrences of `needle` in `haystack` that respect token
/// boundaries: a match must not sit strictly inside a longer alphanumeric
/// token (so "1995" does not match inside "21995").
pub fn guarded_occurrences(haystack: &str, needle: &str) -> Vec<usize> {
    if needle.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (start, _) in haystack.match_indices(needle) {
        let before_ok = haystack[..start]
            .chars()
            .next_back()
            .map(|c| !c.is_alphanumeric())
            .unwrap_or(true);
        let after_ok = haystack[start + needle.len()..]
            .chars()
            .next()
            .map(|c| !c.is_alphanumeric())
            .unwrap_or(true);
        if before_ok && after_ok {
            out.push(start);
        }
    }
    out
}

/// Replaces every guarded occurrence of `needle` with `replacement`,
/// returning the new string and the replacement count.
fn replace_guarded(haystack: &str, needle: &str, replacement: &str) -> (String, usize) {
    let offsets = guarded_occurrences(haystack, needle);
    if offsets.is_empty() {
        return (haystack.to_string(), 0);
    }
    let mut out = String::with_capacity(haystack.len());
    let mut cursor = 0;
    let mut count = 0;
    for start in offsets {
        if start < cursor {
            continue; // overlapped by a previous replacement
        }
        out.push_str(&haystack[cursor..start]);
        out.push_str(replacement);
        cursor = start + needle.len();
        count += 1;
    }
    out.push_str(&haystack[cursor..]);
    (out, count)
}

/// True iff the instance has a typed answer and at least one alias occurs
/// (boundary-guarded, case-sensitive) in the document title or text.
pub fn is_perturbable(instance: &QAInstance, doc: &Document) -> bool {
    instance.answer_type.is_typed()
        && instance.answers.iter().any(|alias| {
            !guarded_occurrences(&doc.title, alias).is_empty()
                || !guarded_occurrences(&doc.text, alias).is_empty()
        })
}

/// Substitutes the gold answer in one document with a same-type entity.
///
/// Every alias occurrence (longest alias first) in both title and text is
/// replaced with the single sampled replacement, so no alias survives.
pub fn perturb_document(
    instance: &QAInstance,
    doc: &Document,
    pools: &EntityPools,
    rng: &mut impl Rng,
) -> Result<(Document, PerturbationRecord), PerturbError> {
    if !is_perturbable(instance, doc) {
        return Err(PerturbError::NotPerturbable);
    }
    // first alias in list order with a hit, for provenance
    let matched_alias = instance
        .answers
        .iter()
        .find(|alias| {
            !guarded_occurrences(&doc.title, alias).is_empty()
                || !guarded_occurrences(&doc.text, alias).is_empty()
        })
        .expect("perturbable implies a matched alias")
        .clone();

    let replacement = pools.sample_replacement(instance.answer_type, &instance.answers, rng)?;

    // longest-match-first so nested aliases cannot leave fragments behind
    let mut by_length: Vec<&String> = instance.answers.iter().collect();
    by_length.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));

    let mut title = doc.title.clone();
    let mut text = doc.text.clone();
    for alias in &by_length {
        title = replace_guarded(&title, alias, &replacement).0;
        text = replace_guarded(&text, alias, &replacement).0;
    }

    for alias in &instance.answers {
        if !guarded_occurrences(&title, alias).is_empty()
            || !guarded_occurrences(&text, alias).is_empty()
        {
            return Err(PerturbError::AliasRetained(doc.doc_id.clone()));
        }
    }

    let record = PerturbationRecord {
        method: PerturbMethod::Entity,
        original_answer: matched_alias,
        replacement: Some(replacement),
        perturbation_type: Some(PerturbationType::ER),
        generator_id: None,
    };
    let perturbed = Document {
        doc_id: doc.doc_id.clone(),
        title,
        text,
        rank: doc.rank,
        perturbed: true,
        record: Some(record.clone()),
    };
    Ok((perturbed, record))
}

/// Counts emitted by a perturbation pass, serialized as the perturbation
/// report.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PerturbReport {
    pub method: String,
    pub probability: f64,
    pub total_documents: usize,
    pub perturbable: usize,
    pub perturbed: usize,
    pub pool_exhausted_skips: usize,
    pub missing_instances: usize,
    pub per_type: BTreeMap<String, usize>,
}

impl PerturbReport {
    pub fn perturbed_fraction(&self) -> f64 {
        if self.total_documents == 0 {
            0.0
        } else {
            self.perturbed as f64 / self.total_documents as f64
        }
    }
}

/// Stable seed derivation (FNV-1a over seed bytes then key bytes), so a
/// set's randomness depends only on `(seed, question_id)` and never on
/// scheduling order.
pub fn derive_seed(seed: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(key.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Perturbs each perturbable document independently with probability `p`.
///
/// Pool-exhausted documents are left unperturbed and counted in the report
/// rather than failing the split.
pub fn perturb_split(
    sets: &[RetrievedSet],
    instances: &[QAInstance],
    pools: &EntityPools,
    p: f64,
    seed: u64,
) -> (Vec<RetrievedSet>, PerturbReport) {
    assert!((0.0..=1.0).contains(&p), "probability must be in [0, 1]");
    let by_id: HashMap<&str, &QAInstance> =
        instances.iter().map(|i| (i.id.as_str(), i)).collect();

    let mut report = PerturbReport {
        method: "entity".to_string(),
        probability: p,
        ..PerturbReport::default()
    };
    let mut out = Vec::with_capacity(sets.len());
    for set in sets {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &set.question_id));
        let instance = by_id.get(set.question_id.as_str());
        let mut documents = Vec::with_capacity(set.documents.len());
        for doc in &set.documents {
            report.total_documents += 1;
            let Some(instance) = instance else {
                report.missing_instances += 1;
                documents.push(doc.clone());
                continue;
            };
            if !is_perturbable(instance, doc) {
                documents.push(doc.clone());
                continue;
            }
            report.perturbable += 1;
            if rng.gen::<f64>() >= p {
                documents.push(doc.clone());
                continue;
            }
            match perturb_document(instance, doc, pools, &mut rng) {
                Ok((perturbed, _)) => {
                    report.perturbed += 1;
                    *report
                        .per_type
                        .entry(instance.answer_type.to_string())
                        .or_default() += 1;
                    documents.push(perturbed);
                }
                Err(PerturbError::PoolExhausted(_)) => {
                    log::warn!(
                        "pool exhausted for question {}, leaving document {} unperturbed",
                        set.question_id,
                        doc.doc_id
                    );
                    report.pool_exhausted_skips += 1;
                    documents.push(doc.clone());
                }
                Err(err) => {
                    // NotPerturbable/AliasRetained cannot happen after the
                    // is_perturbable gate; treat like a skip if they do.
                    log::warn!("unexpected perturbation failure: {err}");
                    report.pool_exhausted_skips += 1;
                    documents.push(doc.clone());
                }
            }
        }
        out.push(RetrievedSet {
            question_id: set.question_id.clone(),
            documents,
        });
    }
    (out, report)
}

/// Fresh perturbation draw for one training epoch. `sets` must be the
/// unperturbed base corpus; distinct `epoch_seed` values yield independent
/// label patterns.
pub fn resample_for_training(
    sets: &[RetrievedSet],
    instances: &[QAInstance],
    pools: &EntityPools,
    p: f64,
    epoch_seed: u64,
) -> (Vec<RetrievedSet>, PerturbReport) {
    perturb_split(sets, instances, pools, p, epoch_seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AnswerType;

    fn instance(id: &str, answers: &[&str], answer_type: AnswerType) -> QAInstance {
        QAInstance {
            id: id.to_string(),
            question: format!("q {id}"),
            answers: answers.iter().map(|s| s.to_string()).collect(),
            answer_type,
        }
    }

    fn document(id: &str, title: &str, text: &str) -> Document {
        Document {
            doc_id: id.to_string(),
            title: title.to_string(),
            text: text.to_string(),
            rank: 1,
            perturbed: false,
            record: None,
        }
    }

    #[test]
    fn pools_collect_first_aliases_by_type() {
        let instances = vec![
            instance("q1", &["Michael Jordan", "MJ"], AnswerType::PER),
            instance("q2", &["Kobe Bryant"], AnswerType::PER),
        ];
        let pools = build_entity_pools(&instances);
        assert_eq!(pools.pool(AnswerType::PER), ["Michael Jordan", "Kobe Bryant"]);
    }

    #[test]
    fn all_na_instances_leave_pools_empty() {
        let instances = vec![instance("q1", &["whatever"], AnswerType::NA)];
        let pools = build_entity_pools(&instances);
        for t in AnswerType::TYPED {
            assert!(pools.pool(t).is_empty());
        }
    }

    #[test]
    fn pool_sizes_match_counting_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        let types = AnswerType::TYPED;
        let instances: Vec<QAInstance> = (0..500)
            .map(|i| {
                let t = types[rng.gen_range(0..types.len())];
                let answer = format!("{} entity {}", t, rng.gen_range(0..40));
                instance(&format!("q{i}"), &[&answer], t)
            })
            .collect();
        let pools = build_entity_pools(&instances);
        for t in types {
            let distinct: HashSet<&str> = instances
                .iter()
                .filter(|i| i.answer_type == t)
                .map(|i| i.answers[0].as_str())
                .collect();
            assert_eq!(pools.pool(t).len(), distinct.len(), "type {t}");
        }
    }

    #[test]
    fn perturbable_when_alias_in_text() {
        let inst = instance("q", &["Middle Island"], AnswerType::LOC);
        let doc = document("d", "Geography", "The southernmost point is Middle Island, in Lake Erie.");
        assert!(is_perturbable(&inst, &doc));
    }

    #[test]
    fn na_type_is_never_perturbable() {
        let inst = instance("q", &["Middle Island"], AnswerType::NA);
        let doc = document("d", "Geography", "The southernmost point is Middle Island.");
        assert!(!is_perturbable(&inst, &doc));
    }

    #[test]
    fn boundary_guard_rejects_embedded_token() {
        assert!(guarded_occurrences("in 21995 there", "1995").is_empty());
        assert_eq!(guarded_occurrences("in 1995 there", "1995"), vec![3]);
        assert_eq!(guarded_occurrences("(1995)", "1995"), vec![1]);
    }

    #[test]
    fn replaces_every_span_with_one_replacement() {
        let inst = instance("q", &["Michael Jordan"], AnswerType::PER);
        let doc = document(
            "d",
            "Michael Jordan",
            "Michael Jordan played basketball. Michael Jordan retired in 2003.",
        );
        let pools = build_entity_pools(&[
            instance("a", &["Michael Jordan"], AnswerType::PER),
            instance("b", &["Kobe Bryant"], AnswerType::PER),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, record) = perturb_document(&inst, &doc, &pools, &mut rng).unwrap();
        assert_eq!(record.replacement.as_deref(), Some("Kobe Bryant"));
        assert_eq!(out.title, "Kobe Bryant");
        assert_eq!(
            out.text,
            "Kobe Bryant played basketball. Kobe Bryant retired in 2003."
        );
        assert_eq!(record.original_answer, "Michael Jordan");
        assert_eq!(record.perturbation_type, Some(PerturbationType::ER));
    }

    #[test]
    fn title_and_text_both_rewritten() {
        let inst = instance("q", &["1995"], AnswerType::DATE);
        let doc = document("d", "1995 Buffalo Bills season", "the 1995 Bills won the AFC East");
        let pools = build_entity_pools(&[
            instance("a", &["1995"], AnswerType::DATE),
            instance("b", &["2003"], AnswerType::DATE),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (out, _) = perturb_document(&inst, &doc, &pools, &mut rng).unwrap();
        assert!(!out.title.contains("1995"));
        assert!(!out.text.contains("1995"));
        assert!(out.title.contains("2003"));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let inst = instance("q", &["Roy Raymond"], AnswerType::PER);
        let doc = document("d", "Victoria's Secret", "Victoria's Secret was founded by Roy Raymond.");
        let names = ["Roy Raymond", "Patrick Denham", "John Thompson", "Gaye Brown"];
        let pool_instances: Vec<QAInstance> = names
            .iter()
            .enumerate()
            .map(|(i, n)| instance(&format!("p{i}"), &[n], AnswerType::PER))
            .collect();
        let pools = build_entity_pools(&pool_instances);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            perturb_document(&inst, &doc, &pools, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pool_exhausted_when_only_candidate_is_original() {
        let inst = instance("q", &["Roy Raymond"], AnswerType::PER);
        let doc = document("d", "t", "founded by Roy Raymond");
        let pools = build_entity_pools(&[instance("a", &["Roy Raymond"], AnswerType::PER)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = perturb_document(&inst, &doc, &pools, &mut rng).unwrap_err();
        assert!(matches!(err, PerturbError::PoolExhausted(AnswerType::PER)));
    }

    #[test]
    fn not_perturbable_is_a_precondition_error() {
        let inst = instance("q", &["Roy Raymond"], AnswerType::PER);
        let doc = document("d", "t", "no mention at all");
        let pools = build_entity_pools(&[
            instance("a", &["Roy Raymond"], AnswerType::PER),
            instance("b", &["Kobe Bryant"], AnswerType::PER),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            perturb_document(&inst, &doc, &pools, &mut rng),
            Err(PerturbError::NotPerturbable)
        ));
    }

    #[test]
    fn replacement_containing_an_alias_is_excluded() {
        let inst = instance("q", &["Raymond"], AnswerType::PER);
        let doc = document("d", "t", "founded by Raymond in 1977");
        // "Roy Raymond" contains the alias "Raymond" and must not be drawn
        let pools = build_entity_pools(&[
            instance("a", &["Raymond"], AnswerType::PER),
            instance("b", &["Roy Raymond"], AnswerType::PER),
            instance("c", &["John Thompson"], AnswerType::PER),
        ]);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, record) = perturb_document(&inst, &doc, &pools, &mut rng).unwrap();
            assert_eq!(record.replacement.as_deref(), Some("John Thompson"));
            assert!(guarded_occurrences(&out.text, "Raymond").is_empty());
        }
    }

    #[test]
    fn gazetteer_is_deterministic_and_types_obvious_cases() {
        let ner = GazetteerNer;
        assert_eq!(ner.classify("1995"), AnswerType::DATE);
        assert_eq!(ner.classify("June 12, 1977"), AnswerType::DATE);
        assert_eq!(ner.classify("3,610"), AnswerType::NUM);
        assert_eq!(ner.classify("Stanford University"), AnswerType::ORG);
        assert_eq!(ner.classify("Middle Island"), AnswerType::LOC);
        assert_eq!(ner.classify("Michael Jordan"), AnswerType::PER);
        assert_eq!(ner.classify("the quick brown fox"), AnswerType::NA);
        for _ in 0..3 {
            assert_eq!(ner.classify("Michael Jordan"), AnswerType::PER);
        }
    }

    #[test]
    fn zero_probability_perturbs_nothing() {
        let instances = vec![
            instance("q1", &["Michael Jordan"], AnswerType::PER),
            instance("q2", &["Kobe Bryant"], AnswerType::PER),
        ];
        let pools = build_entity_pools(&instances);
        let sets = vec![RetrievedSet {
            question_id: "q1".into(),
            documents: vec![document("d1", "t", "Michael Jordan plays")],
        }];
        let (out, report) = perturb_split(&sets, &instances, &pools, 0.0, 9);
        assert_eq!(report.perturbed, 0);
        assert_eq!(out, sets);
    }
}
