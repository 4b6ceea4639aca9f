//! Synthetic corpora for controlled experiments: a typed QA corpus with a
//! tunable fraction of answer-bearing documents, and a compact conflict
//! task whose perturbed documents carry a same-type decoy answer with a
//! mismatched context cue.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    AnswerType, Document, PerturbMethod, PerturbationRecord, PerturbationType, QAInstance,
    RetrievedSet,
};
use crate::entity::{build_entity_pools, derive_seed, EntityPools};
use crate::reader::{EpochData, EpochSampler, Vocab};

const FIRST_NAMES: &[&str] = &[
    "Avery", "Blake", "Casey", "Devon", "Ellis", "Finley", "Harper", "Jordan", "Kendall",
    "Logan", "Morgan", "Noel", "Parker", "Quinn", "Reese", "Rowan", "Sawyer", "Skyler",
    "Taylor", "Winter",
];
const LAST_NAMES: &[&str] = &[
    "Abbott", "Barlow", "Calder", "Draper", "Easton", "Fairfax", "Granger", "Holloway",
    "Ivers", "Jennings", "Keller", "Lockwood", "Mercer", "Norwood", "Ogden", "Prescott",
    "Quimby", "Radcliffe", "Sutton", "Thatcher",
];
const ORG_BASES: &[&str] = &[
    "Apex", "Borealis", "Cascade", "Drift", "Ember", "Fathom", "Gossamer", "Harbor", "Ion",
    "Juniper", "Krypton", "Lumen", "Meridian", "Nimbus", "Orchid", "Pinnacle",
];
const ORG_SUFFIXES: &[&str] = &["Institute", "Company", "University", "Collective"];
const LOC_BASES: &[&str] = &[
    "Alder", "Briar", "Cinder", "Dune", "Elm", "Fern", "Gale", "Hazel", "Iron", "Jade",
    "Kestrel", "Larch", "Maple", "Nettle", "Oak", "Pine",
];
const LOC_KINDS: &[&str] = &["Island", "Valley", "Lake", "City"];
const FILLER_WORDS: &[&str] = &[
    "the", "town", "records", "show", "that", "during", "this", "period", "local",
    "chronicles", "describe", "events", "surrounding", "it", "in", "great", "detail",
    "archives", "mention", "several", "sources", "agree", "on", "many", "points", "while",
    "others", "remain", "disputed", "among", "historians",
];

fn entity_surface(ty: AnswerType, idx: usize) -> String {
    match ty {
        AnswerType::PER => format!(
            "{} {}",
            FIRST_NAMES[idx % FIRST_NAMES.len()],
            LAST_NAMES[(idx / FIRST_NAMES.len() + idx) % LAST_NAMES.len()]
        ),
        AnswerType::ORG => format!(
            "{} {}",
            ORG_BASES[idx % ORG_BASES.len()],
            ORG_SUFFIXES[(idx / ORG_BASES.len()) % ORG_SUFFIXES.len()]
        ),
        AnswerType::LOC => format!(
            "{} {}",
            LOC_BASES[idx % LOC_BASES.len()],
            LOC_KINDS[(idx / LOC_BASES.len()) % LOC_KINDS.len()]
        ),
        AnswerType::DATE => format!("{}", 1800 + (idx % 220)),
        AnswerType::NUM => format!("{}", 3000 + 7 * idx),
        AnswerType::NA => "unknown".to_string(),
    }
}

/// Parameters of the typed synthetic corpus.
#[derive(Debug, Clone)]
pub struct TypedCorpusSpec {
    pub questions: usize,
    pub docs_per_question: usize,
    /// Probability that a document embeds the gold answer (and is therefore
    /// perturbable).
    pub answer_presence_prob: f64,
    pub seed: u64,
}

impl Default for TypedCorpusSpec {
    fn default() -> Self {
        TypedCorpusSpec {
            questions: 1024,
            docs_per_question: 5,
            answer_presence_prob: 0.4805,
            seed: 42,
        }
    }
}

/// Instances plus clean retrieved sets.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub instances: Vec<QAInstance>,
    pub sets: Vec<RetrievedSet>,
}

/// Generates a typed QA corpus where roughly `answer_presence_prob` of all
/// documents contain the gold answer span.
pub fn typed_corpus(spec: &TypedCorpusSpec) -> SynthCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let types = AnswerType::TYPED;
    let mut instances = Vec::with_capacity(spec.questions);
    let mut sets = Vec::with_capacity(spec.questions);

    for qi in 0..spec.questions {
        let ty = types[qi % types.len()];
        let answer = entity_surface(ty, rng.gen_range(0..64));
        let id = format!("q{qi:05}");
        instances.push(QAInstance {
            id: id.clone(),
            question: format!("what is recorded as entry {qi} of the {ty} register"),
            answers: vec![answer.clone()],
            answer_type: ty,
        });

        let documents = (0..spec.docs_per_question)
            .map(|d| {
                let mut words: Vec<&str> = (0..10)
                    .map(|_| FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())])
                    .collect();
                let text = if rng.gen::<f64>() < spec.answer_presence_prob {
                    let insert_at = rng.gen_range(0..=words.len());
                    let mut parts: Vec<String> =
                        words.iter().map(|w| w.to_string()).collect();
                    parts.insert(insert_at, answer.clone());
                    parts.join(" ")
                } else {
                    words.shuffle(&mut rng);
                    words.join(" ")
                };
                Document {
                    doc_id: format!("{id}-d{}", d + 1),
                    title: format!("Register volume {}", qi / 7 + 1),
                    text,
                    rank: d as u32 + 1,
                    perturbed: false,
                    record: None,
                }
            })
            .collect();
        sets.push(RetrievedSet {
            question_id: id,
            documents,
        });
    }
    SynthCorpus { instances, sets }
}


/// Relations of the conflict task, one per answer type.
const RELATIONS: &[(&str, AnswerType)] = &[
    ("founder", AnswerType::PER),
    ("operator", AnswerType::ORG),
    ("origin", AnswerType::LOC),
    ("year", AnswerType::DATE),
    ("count", AnswerType::NUM),
];

/// Parameters of the conflict task.
#[derive(Debug, Clone)]
pub struct ConflictTaskSpec {
    pub subjects: usize,
    /// Coordinate count n: each type has n first tokens and n second
    /// tokens, so the entity pool per type is the n x n pair grid.
    pub entities_per_type: usize,
    pub docs_per_question: usize,
    pub filler_vocab: usize,
    /// Second-coordinate tokens sharing one context cue. The cue narrows
    /// an entity's second token down to its group without constraining the
    /// first token at all, so a consistent document can be recognized while
    /// the cue alone cannot recover the answer; decoys whose second token
    /// falls in the same group remain undetectable, keeping discriminator
    /// recall below 100%.
    pub cue_group_size: usize,
    pub seed: u64,
}

impl Default for ConflictTaskSpec {
    fn default() -> Self {
        ConflictTaskSpec {
            subjects: 40,
            entities_per_type: 12,
            docs_per_question: 5,
            filler_vocab: 6,
            cue_group_size: 3,
            seed: 42,
        }
    }
}

/// Token inventory of one answer type.
#[derive(Debug, Clone)]
struct TypeTokens {
    first: Vec<String>,
    second: Vec<String>,
    /// Cue token per second-coordinate group.
    cues: Vec<String>,
    group_size: usize,
}

impl TypeTokens {
    fn new(ty: AnswerType, n: usize, group_size: usize) -> Self {
        // cue names must never contain an entity token, or answer removal
        // would leave answer fragments embedded in the cue
        let (tag, cue_tag) = match ty {
            AnswerType::PER => ("p", "cp"),
            AnswerType::ORG => ("g", "cg"),
            AnswerType::LOC => ("l", "cl"),
            AnswerType::DATE => ("d", "cd"),
            AnswerType::NUM => ("n", "cn"),
            AnswerType::NA => ("x", "cx"),
        };
        let groups = n.div_ceil(group_size.max(1));
        TypeTokens {
            first: (0..n).map(|i| format!("{tag}f{i:02}")).collect(),
            second: (0..n).map(|i| format!("{tag}s{i:02}")).collect(),
            cues: (0..groups).map(|g| format!("{cue_tag}{g:02}")).collect(),
            group_size: group_size.max(1),
        }
    }

    fn surface(&self, k: usize, l: usize) -> String {
        format!("{} {}", self.first[k], self.second[l])
    }

    fn cue_of(&self, l: usize) -> &str {
        &self.cues[l / self.group_size]
    }
}

/// One question slot of the conflict task; the gold fact is drawn per
/// split, so nothing about the facts can be memorized across epochs.
#[derive(Debug, Clone)]
pub struct ConflictQuestion {
    pub id: String,
    pub subject: String,
    pub relation: String,
    pub answer_type: AnswerType,
    /// Fixed filler words per document slot.
    pub fillers: Vec<Vec<String>>,
}

/// A generated conflict-task template. Every document of every draw carries
/// an answer span, so all documents are perturbable.
#[derive(Debug, Clone)]
pub struct ConflictTask {
    pub questions: Vec<ConflictQuestion>,
    pub docs_per_question: usize,
    entities_per_type: usize,
    tokens: BTreeMap<AnswerType, TypeTokens>,
}

/// One materialized split of the task: gold facts plus labeled documents.
#[derive(Debug, Clone)]
pub struct ConflictDraw {
    pub instances: Vec<QAInstance>,
    pub sets: Vec<RetrievedSet>,
}

/// Builds the task template: subjects x relations question slots with
/// deterministic filler words.
pub fn conflict_task(spec: &ConflictTaskSpec) -> ConflictTask {
    assert!(
        spec.entities_per_type >= 2,
        "need at least two tokens per coordinate"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut tokens = BTreeMap::new();
    for &(_, ty) in RELATIONS {
        tokens.insert(
            ty,
            TypeTokens::new(ty, spec.entities_per_type, spec.cue_group_size),
        );
    }

    let mut questions = Vec::new();
    for s in 0..spec.subjects {
        let subject = format!("subj{s:02}");
        for (r, &(relation, ty)) in RELATIONS.iter().enumerate() {
            let fillers = (0..spec.docs_per_question)
                .map(|_| {
                    (0..3)
                        .map(|_| format!("w{}", rng.gen_range(0..spec.filler_vocab)))
                        .collect()
                })
                .collect();
            questions.push(ConflictQuestion {
                id: format!("c{s:02}_{r}"),
                subject: subject.clone(),
                relation: relation.to_string(),
                answer_type: ty,
                fillers,
            });
        }
    }

    ConflictTask {
        questions,
        docs_per_question: spec.docs_per_question,
        entities_per_type: spec.entities_per_type,
        tokens,
    }
}

impl ConflictTask {
    /// Materializes one split: each question draws a gold pair and a single
    /// same-type decoy pair; each document is independently perturbed with
    /// probability `p`. Perturbed documents carry the decoy answer while
    /// the context cue of the gold answer stays behind (the detectable
    /// mismatch). Derived per-question seeding makes draws independent of
    /// processing order.
    pub fn draw(&self, p: f64, seed: u64) -> ConflictDraw {
        assert!((0.0..=1.0).contains(&p));
        let n = self.entities_per_type;
        let mut instances = Vec::with_capacity(self.questions.len());
        let mut sets = Vec::with_capacity(self.questions.len());
        for q in &self.questions {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &q.id));
            let tokens = &self.tokens[&q.answer_type];
            let gold = (rng.gen_range(0..n), rng.gen_range(0..n));
            let decoy = loop {
                let candidate = (rng.gen_range(0..n), rng.gen_range(0..n));
                if candidate != gold {
                    break candidate;
                }
            };
            let gold_surface = tokens.surface(gold.0, gold.1);
            let decoy_surface = tokens.surface(decoy.0, decoy.1);
            let cue = tokens.cue_of(gold.1).to_string();

            instances.push(QAInstance {
                id: q.id.clone(),
                question: format!("{} of {}", q.relation, q.subject),
                answers: vec![gold_surface.clone()],
                answer_type: q.answer_type,
            });

            let documents = (0..self.docs_per_question)
                .map(|d| {
                    let perturbed = rng.gen::<f64>() < p;
                    let answer = if perturbed { &decoy_surface } else { &gold_surface };
                    // answer span, cue, and fillers land at shuffled
                    // positions, so consistency must be read from content
                    // rather than from a fixed slot
                    let mut body: Vec<&str> = vec![answer, &cue];
                    body.extend(q.fillers[d].iter().map(String::as_str));
                    body.shuffle(&mut rng);
                    let text =
                        format!("{} {} {}", q.subject, q.relation, body.join(" "));
                    Document {
                        doc_id: format!("{}-d{}", q.id, d + 1),
                        title: String::new(),
                        text,
                        rank: d as u32 + 1,
                        perturbed,
                        record: perturbed.then(|| PerturbationRecord {
                            method: PerturbMethod::Entity,
                            original_answer: gold_surface.clone(),
                            replacement: Some(decoy_surface.clone()),
                            perturbation_type: Some(PerturbationType::ER),
                            generator_id: None,
                        }),
                    }
                })
                .collect();
            sets.push(RetrievedSet {
                question_id: q.id.clone(),
                documents,
            });
        }
        ConflictDraw { instances, sets }
    }

    /// Texts for vocabulary building: every question surface, answer token,
    /// cue, and filler, so no draw ever steps outside the vocabulary.
    pub fn training_texts(&self) -> Vec<String> {
        let mut texts = Vec::new();
        for q in &self.questions {
            texts.push(format!("{} of {}", q.relation, q.subject));
            for fillers in &q.fillers {
                texts.push(fillers.join(" "));
            }
        }
        for tokens in self.tokens.values() {
            texts.push(tokens.first.join(" "));
            texts.push(tokens.second.join(" "));
            texts.push(tokens.cues.join(" "));
        }
        texts
    }

    /// Vocabulary covering the whole task.
    pub fn vocab(&self, max_size: usize) -> Vocab {
        Vocab::build(self.training_texts(), max_size)
    }

    /// Entity pools over every pair surface of the task.
    pub fn pools(&self) -> EntityPools {
        let n = self.entities_per_type;
        let instances: Vec<QAInstance> = self
            .tokens
            .iter()
            .flat_map(|(ty, tokens)| {
                (0..n * n).map(move |i| QAInstance {
                    id: format!("pool_{ty}_{i}"),
                    question: String::new(),
                    answers: vec![tokens.surface(i / n, i % n)],
                    answer_type: *ty,
                })
            })
            .collect();
        build_entity_pools(&instances)
    }
}

/// Per-epoch fact and perturbation resampling for training: facts are
/// redrawn every epoch, so the only stationary structure is the
/// answer/context relation inside the documents.
pub struct ConflictResampler {
    pub task: ConflictTask,
    pub probability: f64,
    pub seed: u64,
}

impl EpochSampler for ConflictResampler {
    fn base_instances(&self) -> &[QAInstance] {
        &[]
    }
    fn epoch(&self, epoch: usize) -> EpochData {
        let draw = self
            .task
            .draw(self.probability, self.seed.wrapping_add(epoch as u64 * 7919));
        EpochData {
            instances: draw.instances,
            sets: draw.sets,
        }
    }
}
