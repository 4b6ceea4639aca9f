//! Instructed counterfactual document generation and its rule-based
//! validator: a generation backend rewrites answer-bearing documents so they
//! no longer support the gold answer, and every accepted rewrite is checked
//! for answer absence and length similarity.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientError, Completion, CompletionRequest, GenerationClient, RetryPolicy};
use crate::corpus::{
    Document, PerturbMethod, PerturbationRecord, QAInstance, RetrievedSet,
};
use crate::entity::{derive_seed, is_perturbable};

/// Instruction block placed at the top of every rewrite prompt.
pub const MACNOISE_INSTRUCTION: &str = "You are a novel writing AI. Your job is to make up a story based on the following information.
You will be given a question (preceded by \"Question:\"), a document (preceded by \"Document:\") and
the corresponding answer (\"Answer:\"), and you will be asked to create a novel story after (\"Revised Document:\"). Note, there can be multiple answers (['answer1', 'answer2', ...]) to a given question and document pair.
Now, you should creatively rewrite the document so that the document has a different answer than the given answer(s).

The rewritten document must adhere to all of the following rules:
1) The rewritten document must be answerable by the question.
The information (e.g., entities, phrases) explicitly in the question should not be changed from the original document.
2) The rewritten document should be similar in length to the given original document above.
3) The rewritten document should not contain the original answer.
If the original answer cannot be removed from the document, rewrite the document so the semantics negate / do not support the answer.

The following are the possible rewriting strategies:
1) Rewrite the document so the passage no longer supports the answer.
2) Replace the entity in the passage.
3) Negate the sentence the answer span exists so that the original answer span is no longer the answer.
Make sure that the rewritten document is in a completely different style than the original document, and correctly generate punctuations like periods (\".\") and commas (\",\").

You must give your rewritten document only after \"Revised Document:\".";

/// Marker separating the rewrite from the rest of a completion.
pub const REVISED_MARKER: &str = "Revised Document:";

/// Character-ratio band a rewrite must fall into to count as
/// length-similar.
pub const DEFAULT_LENGTH_BAND: (f64, f64) = (0.5, 2.0);

/// A worked example appended to the prompt (three are used when present).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub instance: QAInstance,
    pub doc: Document,
    pub rewritten: String,
}

#[derive(Debug, Error)]
pub enum MacnoiseError {
    #[error("prompt demos must number 0 or 3, got {0}")]
    DemoCount(usize),
    #[error("completion lacked the '{REVISED_MARKER}' marker after {attempts} attempts")]
    MarkerMissing { attempts: usize },
    #[error(transparent)]
    Client(#[from] ClientError),
}

fn answers_list(answers: &[String]) -> String {
    let items: Vec<String> = answers
        .iter()
        .map(|a| format!("'{}'", a.replace('\\', "\\\\").replace('\'', "\\'")))
        .collect();
    format!("[{}]", items.join(", "))
}

fn target_block(instance: &QAInstance, doc: &Document) -> String {
    format!(
        "Question: {}\nDocument: title: {} context: {}\nAnswer: {}\n{REVISED_MARKER}",
        instance.question,
        doc.title,
        doc.text,
        answers_list(&instance.answers),
    )
}

/// Renders the rewrite prompt: instruction, then demos (zero-shot or
/// three-shot), then the target blocks, ending with the literal
/// `Revised Document:` suffix. Byte-deterministic.
pub fn render_macnoise_prompt(
    instance: &QAInstance,
    doc: &Document,
    demos: &[Demo],
) -> Result<String, MacnoiseError> {
    if demos.len() != 0 && demos.len() != 3 {
        return Err(MacnoiseError::DemoCount(demos.len()));
    }
    let mut prompt = String::new();
    prompt.push_str(MACNOISE_INSTRUCTION);
    prompt.push_str("\n\n");
    for demo in demos {
        prompt.push_str(&target_block(&demo.instance, &demo.doc));
        prompt.push(' ');
        prompt.push_str(&demo.rewritten);
        prompt.push_str("\n\n");
    }
    prompt.push_str(&target_block(instance, doc));
    Ok(prompt)
}

/// Calls the backend and extracts the text after the final
/// `Revised Document:` marker, whitespace-trimmed. Retryable client errors
/// back off per the policy; missing markers are retried against the same
/// budget, then surfaced. Returns the rewrite and the generator identity.
pub fn generate_counterfactual(
    client: &dyn GenerationClient,
    instance: &QAInstance,
    doc: &Document,
    demos: &[Demo],
    policy: &RetryPolicy,
) -> Result<(String, String), MacnoiseError> {
    let prompt = render_macnoise_prompt(instance, doc, demos)?;
    let request = CompletionRequest {
        prompt,
        max_tokens: 512,
        temperature: 0.0,
        top_p: 1.0,
        n_logprobs: 0,
    };
    let attempts = policy.max_retries + 1;
    let mut attempt = 0;
    loop {
        attempt += 1;
        match client.complete(&request) {
            Ok(completion) => match extract_rewrite(&completion) {
                Some(text) => return Ok((text, client.id())),
                None if attempt < attempts => continue,
                None => return Err(MacnoiseError::MarkerMissing { attempts }),
            },
            Err(err) if err.is_retryable() && attempt < attempts => {
                let wait = policy.backoff(attempt - 1);
                if !wait.is_zero() {
                    std::thread::sleep(wait);
                }
            }
            Err(err) => return Err(MacnoiseError::Client(err)),
        }
    }
}

fn extract_rewrite(completion: &Completion) -> Option<String> {
    completion
        .text
        .rfind(REVISED_MARKER)
        .map(|idx| completion.text[idx + REVISED_MARKER.len()..].trim().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Valid,
    Invalid,
}

/// Outcome of the rule checks on one rewrite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// No gold alias occurs case-insensitively as a substring.
    pub answer_absent: bool,
    /// Rewritten characters / original text characters.
    pub length_ratio: f64,
    /// Whether the `Revised Document:` marker was found during extraction.
    pub marker_found: bool,
    pub verdict: Verdict,
    pub reasons: Vec<String>,
}

impl ValidationReport {
    /// Report for a completion whose marker never appeared.
    pub fn marker_missing() -> Self {
        ValidationReport {
            answer_absent: false,
            length_ratio: 0.0,
            marker_found: false,
            verdict: Verdict::Invalid,
            reasons: vec![format!("completion lacked the '{REVISED_MARKER}' marker")],
        }
    }
}

/// Checks an extracted rewrite against the answer-absence and
/// length-similarity rules with the default band.
pub fn validate_counterfactual(
    original: &Document,
    rewritten: &str,
    instance: &QAInstance,
) -> ValidationReport {
    validate_counterfactual_with_band(original, rewritten, instance, DEFAULT_LENGTH_BAND)
}

pub fn validate_counterfactual_with_band(
    original: &Document,
    rewritten: &str,
    instance: &QAInstance,
    band: (f64, f64),
) -> ValidationReport {
    assert!(!rewritten.is_empty(), "rewritten text must be non-empty");
    let lowered = rewritten.to_lowercase();
    let offending: Vec<&String> = instance
        .answers
        .iter()
        .filter(|alias| lowered.contains(&alias.to_lowercase()))
        .collect();
    let answer_absent = offending.is_empty();

    let original_chars = original.text.chars().count().max(1);
    let length_ratio = rewritten.chars().count() as f64 / original_chars as f64;
    let length_ok = length_ratio >= band.0 && length_ratio <= band.1;

    let mut reasons = Vec::new();
    if !answer_absent {
        reasons.push(format!(
            "gold answer still present: {}",
            offending
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    if !length_ok {
        reasons.push(format!(
            "length ratio {length_ratio:.3} outside [{}, {}]",
            band.0, band.1
        ));
    }
    let verdict = if answer_absent && length_ok {
        Verdict::Valid
    } else {
        Verdict::Invalid
    };
    ValidationReport {
        answer_absent,
        length_ratio,
        marker_found: true,
        verdict,
        reasons,
    }
}

/// Tallies from a generation pass, emitted as JSON.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GenerationStats {
    pub questions: usize,
    pub documents: usize,
    pub perturbable: usize,
    /// Rewrite attempts (first tries plus validation retries).
    pub attempted: usize,
    pub rewritten: usize,
    /// Generations still invalid after the single retry; kept unperturbed.
    pub invalid: usize,
    /// Documents abandoned after client errors exhausted their retries.
    pub client_errors: usize,
    /// Perturbable documents skipped by the per-question cap.
    pub capped: usize,
}

/// Rewrites every perturbable document (up to the per-question cap) through
/// the client. Equivalent to [`macnoise_split`] with selection probability 1.
pub fn build_macnoise_split(
    sets: &[RetrievedSet],
    instances: &[QAInstance],
    client: &dyn GenerationClient,
    max_docs_per_question: usize,
    demos: &[Demo],
    seed: u64,
) -> (Vec<RetrievedSet>, GenerationStats) {
    macnoise_split(
        sets,
        instances,
        client,
        1.0,
        max_docs_per_question,
        demos,
        seed,
        &RetryPolicy::immediate(1),
    )
}

/// Rewrites perturbable documents selected independently with probability
/// `p`, capped per question. Invalid generations are retried once, then the
/// document stays unperturbed; client failures are counted and the split
/// still completes. Per-question randomness is derived from
/// `(seed, question_id)`, so output is schedule-independent.
#[allow(clippy::too_many_arguments)]
pub fn macnoise_split(
    sets: &[RetrievedSet],
    instances: &[QAInstance],
    client: &dyn GenerationClient,
    p: f64,
    max_docs_per_question: usize,
    demos: &[Demo],
    seed: u64,
    policy: &RetryPolicy,
) -> (Vec<RetrievedSet>, GenerationStats) {
    assert!(max_docs_per_question >= 1, "cap must be at least 1");
    assert!((0.0..=1.0).contains(&p), "probability must be in [0, 1]");
    let by_id: std::collections::HashMap<&str, &QAInstance> =
        instances.iter().map(|i| (i.id.as_str(), i)).collect();

    let mut stats = GenerationStats::default();
    let mut out = Vec::with_capacity(sets.len());
    for set in sets {
        stats.questions += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &set.question_id));
        let instance = by_id.get(set.question_id.as_str()).copied();

        // decide which ranks to rewrite before touching the client
        let mut selected: Vec<u32> = Vec::new();
        if let Some(instance) = instance {
            for doc in &set.documents {
                if is_perturbable(instance, doc) && rand::Rng::gen::<f64>(&mut rng) < p {
                    selected.push(doc.rank);
                }
            }
        }
        if selected.len() > max_docs_per_question {
            stats.capped += selected.len() - max_docs_per_question;
            selected.shuffle(&mut rng);
            selected.truncate(max_docs_per_question);
            selected.sort_unstable();
        }

        let mut documents = Vec::with_capacity(set.documents.len());
        for doc in &set.documents {
            stats.documents += 1;
            let Some(instance) = instance else {
                documents.push(doc.clone());
                continue;
            };
            if is_perturbable(instance, doc) {
                stats.perturbable += 1;
            }
            if !selected.contains(&doc.rank) {
                documents.push(doc.clone());
                continue;
            }
            match rewrite_document(client, instance, doc, demos, policy, &mut stats) {
                Some(rewritten) => documents.push(rewritten),
                None => documents.push(doc.clone()),
            }
        }
        out.push(RetrievedSet {
            question_id: set.question_id.clone(),
            documents,
        });
    }
    (out, stats)
}

/// One document through generate -> validate, with a single regeneration on
/// an invalid rewrite. `None` leaves the document unperturbed.
fn rewrite_document(
    client: &dyn GenerationClient,
    instance: &QAInstance,
    doc: &Document,
    demos: &[Demo],
    policy: &RetryPolicy,
    stats: &mut GenerationStats,
) -> Option<Document> {
    for round in 0..2 {
        stats.attempted += 1;
        match generate_counterfactual(client, instance, doc, demos, policy) {
            Ok((rewritten, generator_id)) => {
                if rewritten.is_empty() {
                    if round == 1 {
                        stats.invalid += 1;
                    }
                    continue;
                }
                let report = validate_counterfactual(doc, &rewritten, instance);
                if report.verdict == Verdict::Valid {
                    stats.rewritten += 1;
                    return Some(Document {
                        doc_id: doc.doc_id.clone(),
                        title: doc.title.clone(),
                        text: rewritten,
                        rank: doc.rank,
                        perturbed: true,
                        record: Some(PerturbationRecord {
                            method: PerturbMethod::Macnoise,
                            original_answer: instance.primary_answer().to_string(),
                            replacement: None,
                            perturbation_type: None,
                            generator_id: Some(generator_id),
                        }),
                    });
                }
                log::debug!(
                    "invalid rewrite for doc {} (round {round}): {:?}",
                    doc.doc_id,
                    report.reasons
                );
                if round == 1 {
                    stats.invalid += 1;
                }
            }
            Err(err) => {
                log::warn!("generation failed for doc {}: {err}", doc.doc_id);
                stats.client_errors += 1;
                return None;
            }
        }
    }
    None
}
