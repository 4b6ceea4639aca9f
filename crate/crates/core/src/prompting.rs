//! In-context prompt construction and answer ensembling: the four prompt
//! variants, discriminator-decision injection, candidate extraction from
//! per-token alternatives, and probability-sum aggregation over one-shot
//! iterations.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ClientError, CompletionRequest, GenerationClient, RetryPolicy};
use crate::corpus::{AnswerType, Document, QAInstance, RetrievedSet};
use crate::eval::normalize_answer;

/// Instruction used when retrieved documents are present.
pub const ANSWER_INSTRUCTION: &str =
    "Refer to the above documents and your knowledge, and answer the question.";
/// Instruction asking the model to discern perturbed documents itself.
pub const DISCERN_INSTRUCTION: &str = "Refer to the above documents and your knowledge, \
     identify the perturbed documents, and answer the question.";
/// Closed-book instruction.
pub const PARAMETRIC_INSTRUCTION: &str = "Answer the question using your knowledge.";

/// The four prompt layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    /// Closed-book: no document blocks anywhere.
    Parametric,
    /// Documents plus the answer instruction.
    SemiParametric,
    /// Documents plus the discern instruction; the model writes its own
    /// `Perturbed:` line.
    DiscInst,
    /// Documents plus discriminator decisions injected as a `Perturbed:`
    /// line before the answer cue.
    DiscFid,
}

impl PromptVariant {
    pub fn parse(s: &str) -> Result<Self, PromptError> {
        match s {
            "parametric" => Ok(PromptVariant::Parametric),
            "semi" | "semi_parametric" => Ok(PromptVariant::SemiParametric),
            "disc_inst" => Ok(PromptVariant::DiscInst),
            "disc_fid" => Ok(PromptVariant::DiscFid),
            other => Err(PromptError::UnknownVariant(other.to_string())),
        }
    }

    pub fn uses_documents(self) -> bool {
        self != PromptVariant::Parametric
    }

    fn instruction(self) -> &'static str {
        match self {
            PromptVariant::Parametric => PARAMETRIC_INSTRUCTION,
            PromptVariant::SemiParametric => ANSWER_INSTRUCTION,
            PromptVariant::DiscInst | PromptVariant::DiscFid => DISCERN_INSTRUCTION,
        }
    }
}

impl std::fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PromptVariant::Parametric => "parametric",
            PromptVariant::SemiParametric => "semi_parametric",
            PromptVariant::DiscInst => "disc_inst",
            PromptVariant::DiscFid => "disc_fid",
        };
        f.write_str(s)
    }
}

/// One held-out instance with its labeled retrieved set, usable as an
/// in-context sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IclSample {
    pub instance: QAInstance,
    pub set: RetrievedSet,
}

impl IclSample {
    fn perturbed_count(&self) -> usize {
        self.set.documents.iter().filter(|d| d.perturbed).count()
    }
}

/// A rendered prompt for one (sample, evaluation question) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub variant: PromptVariant,
    pub rendered: String,
    pub incontext_sample_id: String,
    pub eval_question_id: String,
}

/// A scored answer candidate from one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAnswer {
    pub text: String,
    pub probability: f64,
}

/// How far the sample-selection constraints had to be relaxed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relaxation {
    None,
    /// Distinct perturbed-document counts were given up.
    Counts,
    /// Distinct answer types were given up as well.
    Types,
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown prompt variant '{0}'")]
    UnknownVariant(String),
    #[error("disc_fid prompts require discriminator decisions")]
    MissingDecisions,
    #[error("held-out pool has {available} samples, need {requested}")]
    PoolTooSmall {
        available: usize,
        requested: usize,
    },
    #[error("duplicate or non-positive document index in injection input")]
    BadInjectionIndex,
    #[error("no candidate answers in any iteration")]
    NoAnswer,
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Picks `k` in-context samples with pairwise-distinct answer types and
/// pairwise-distinct perturbed-document counts when such a subset exists
/// (complete randomized search); constraints are relaxed in order
/// (counts first, then types) with a warning when unsatisfiable.
/// Deterministic for a fixed seed.
pub fn select_incontext_samples(
    heldout: &[IclSample],
    k: usize,
    seed: u64,
) -> Result<(Vec<IclSample>, Relaxation), PromptError> {
    if heldout.len() < k {
        return Err(PromptError::PoolTooSmall {
            available: heldout.len(),
            requested: k,
        });
    }
    let mut order: Vec<usize> = (0..heldout.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let keys: Vec<(AnswerType, usize)> = heldout
        .iter()
        .map(|s| (s.instance.answer_type, s.perturbed_count()))
        .collect();

    let mut budget = 200_000usize;
    let mut picked = Vec::with_capacity(k);
    if search(&order, &keys, k, true, true, &mut picked, &mut budget) {
        return Ok((pick(heldout, &picked), Relaxation::None));
    }
    log::warn!("in-context selection: relaxing the distinct perturbed-count constraint");
    picked.clear();
    budget = 200_000;
    if search(&order, &keys, k, true, false, &mut picked, &mut budget) {
        return Ok((pick(heldout, &picked), Relaxation::Counts));
    }
    log::warn!("in-context selection: relaxing answer-type uniqueness as well");
    let fallback: Vec<usize> = order.into_iter().take(k).collect();
    Ok((pick(heldout, &fallback), Relaxation::Types))
}

fn pick(heldout: &[IclSample], idx: &[usize]) -> Vec<IclSample> {
    idx.iter().map(|&i| heldout[i].clone()).collect()
}

/// Depth-first search for a satisfying subset, visiting candidates in the
/// shuffled order; complete up to the node budget.
fn search(
    order: &[usize],
    keys: &[(AnswerType, usize)],
    k: usize,
    distinct_types: bool,
    distinct_counts: bool,
    picked: &mut Vec<usize>,
    budget: &mut usize,
) -> bool {
    fn dfs(
        order: &[usize],
        keys: &[(AnswerType, usize)],
        k: usize,
        distinct_types: bool,
        distinct_counts: bool,
        start: usize,
        picked: &mut Vec<usize>,
        budget: &mut usize,
    ) -> bool {
        if picked.len() == k {
            return true;
        }
        if *budget == 0 {
            return false;
        }
        for pos in start..order.len() {
            *budget = budget.saturating_sub(1);
            let idx = order[pos];
            let (ty, count) = keys[idx];
            let clash = picked.iter().any(|&p| {
                (distinct_types && keys[p].0 == ty)
                    || (distinct_counts && keys[p].1 == count)
            });
            if clash {
                continue;
            }
            picked.push(idx);
            if dfs(
                order,
                keys,
                k,
                distinct_types,
                distinct_counts,
                pos + 1,
                picked,
                budget,
            ) {
                return true;
            }
            picked.pop();
            if *budget == 0 {
                return false;
            }
        }
        false
    }
    dfs(
        order,
        keys,
        k,
        distinct_types,
        distinct_counts,
        0,
        picked,
        budget,
    )
}

/// Serializes flagged document indices for prompt injection:
/// `Perturbed: Document [i], Document [j]` in ascending order, or
/// `Perturbed: None` when nothing is flagged. Indices are 1-based.
pub fn format_disc_injection(decisions: &[(usize, bool)]) -> Result<String, PromptError> {
    let mut seen = std::collections::HashSet::new();
    for &(idx, _) in decisions {
        if idx == 0 || !seen.insert(idx) {
            return Err(PromptError::BadInjectionIndex);
        }
    }
    let mut flagged: Vec<usize> = decisions
        .iter()
        .filter(|(_, d)| *d)
        .map(|(i, _)| *i)
        .collect();
    flagged.sort_unstable();
    if flagged.is_empty() {
        return Ok("Perturbed: None".to_string());
    }
    let items: Vec<String> = flagged.iter().map(|i| format!("Document [{i}]")).collect();
    Ok(format!("Perturbed: {}", items.join(", ")))
}

fn push_documents(out: &mut String, docs: &[Document]) {
    for (i, doc) in docs.iter().enumerate() {
        out.push_str(&format!(
            "Document [{}] (Title: {}): {}\n",
            i + 1,
            doc.title,
            doc.text
        ));
    }
}

fn sample_truth_injection(set: &RetrievedSet) -> Result<String, PromptError> {
    let decisions: Vec<(usize, bool)> = set
        .documents
        .iter()
        .enumerate()
        .map(|(i, d)| (i + 1, d.perturbed))
        .collect();
    format_disc_injection(&decisions)
}

/// Renders one prompt. Layout: sample documents, instruction, sample
/// question, sample answer, the sample's `Perturbed:` line (disc variants),
/// then the evaluation documents, instruction, and evaluation question with
/// its trailing cue. Pure and byte-deterministic.
pub fn render_prompt(
    variant: PromptVariant,
    sample: &IclSample,
    eval_instance: &QAInstance,
    eval_docs: &[Document],
    disc_decisions: Option<&[(usize, bool)]>,
) -> Result<PromptBundle, PromptError> {
    if variant == PromptVariant::DiscFid && disc_decisions.is_none() {
        return Err(PromptError::MissingDecisions);
    }
    let mut out = String::new();

    // in-context sample block
    if variant.uses_documents() {
        push_documents(&mut out, &sample.set.documents);
    }
    out.push_str(variant.instruction());
    out.push('\n');
    out.push_str(&format!("Question: {}\n", sample.instance.question));
    out.push_str(&format!("Answer: {}\n", sample.instance.primary_answer()));
    if matches!(variant, PromptVariant::DiscInst | PromptVariant::DiscFid) {
        out.push_str(&sample_truth_injection(&sample.set)?);
        out.push('\n');
    }
    out.push('\n');

    // evaluation block
    if variant.uses_documents() {
        push_documents(&mut out, eval_docs);
    }
    out.push_str(variant.instruction());
    out.push('\n');
    out.push_str(&format!("Question: {}\n", eval_instance.question));
    if variant == PromptVariant::DiscFid {
        let injection = format_disc_injection(disc_decisions.expect("checked above"))?;
        out.push_str(&injection);
        out.push('\n');
    }
    out.push_str("Answer:");

    Ok(PromptBundle {
        variant,
        rendered: out,
        incontext_sample_id: sample.instance.id.clone(),
        eval_question_id: eval_instance.id.clone(),
    })
}

/// Request parameters for answer queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryParams {
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub n_logprobs: usize,
}

impl Default for QueryParams {
    fn default() -> Self {
        QueryParams {
            max_tokens: 64,
            temperature: 0.0,
            top_p: 1.0,
            n_logprobs: 10,
        }
    }
}

/// Most candidates kept per iteration.
pub const MAX_CANDIDATES: usize = 10;

/// Queries one prompt and builds the candidate set for the iteration.
///
/// The answer span is the completion text up to the first newline. With
/// per-token alternatives available, candidates enumerate the product of
/// alternatives over the answer-span positions (probability = product of
/// token probabilities), keeping the top [`MAX_CANDIDATES`]; otherwise a
/// single full-probability candidate is returned. An empty completion
/// yields an empty list.
pub fn query_answer(
    client: &dyn GenerationClient,
    bundle: &PromptBundle,
    params: &QueryParams,
    policy: &RetryPolicy,
) -> Result<Vec<CandidateAnswer>, PromptError> {
    let request = CompletionRequest {
        prompt: bundle.rendered.clone(),
        max_tokens: params.max_tokens,
        temperature: params.temperature,
        top_p: params.top_p,
        n_logprobs: params.n_logprobs,
    };
    let completion = policy.run(|| client.complete(&request))?;
    let answer_line = completion.text.lines().next().unwrap_or("").trim();
    if answer_line.is_empty() {
        log::warn!(
            "empty completion for question {}; iteration skipped",
            bundle.eval_question_id
        );
        return Ok(Vec::new());
    }

    let Some(token_alts) = completion
        .token_logprobs
        .as_ref()
        .filter(|alts| !alts.is_empty() && alts.iter().all(|a| !a.is_empty()))
    else {
        return Ok(vec![CandidateAnswer {
            text: answer_line.to_string(),
            probability: 1.0,
        }]);
    };

    // positions whose chosen tokens tile the answer span
    let line_end = completion.text.find('\n').unwrap_or(completion.text.len());
    let mut covered = 0usize;
    let mut span_positions = 0usize;
    for alts in token_alts.iter() {
        if covered >= line_end {
            break;
        }
        covered += alts[0].0.len();
        span_positions += 1;
    }
    let span = &token_alts[..span_positions];

    let combinations: usize = span.iter().map(Vec::len).product();
    let mut candidates: Vec<(String, f64)> = vec![(String::new(), 0.0)];
    for alts in span {
        let mut next = Vec::with_capacity(candidates.len() * alts.len());
        for (prefix, logprob) in &candidates {
            for (token, lp) in alts {
                next.push((format!("{prefix}{token}"), logprob + lp));
            }
        }
        // exhaustive when small; otherwise prune to a generous beam
        if combinations > 4096 && next.len() > 64 {
            next.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
            next.truncate(64);
        }
        candidates = next;
    }

    let mut out: Vec<CandidateAnswer> = candidates
        .into_iter()
        .map(|(text, logprob)| CandidateAnswer {
            text: text
                .split('\n')
                .next()
                .unwrap_or("")
                .trim()
                .to_string(),
            probability: logprob.exp(),
        })
        .filter(|c| !c.text.is_empty() && c.probability > 0.0)
        .collect();
    out.sort_by(|a, b| {
        b.probability
            .partial_cmp(&a.probability)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.text.cmp(&b.text))
    });
    out.truncate(MAX_CANDIDATES);
    Ok(out)
}

/// Aggregates candidates across iterations: groups by normalized answer,
/// sums probabilities within each group, and returns the best group's most
/// frequent surface form with its summed score. Ties between groups break
/// toward the lexicographically smallest normalized string.
pub fn ensemble_answers(
    per_iteration: &[Vec<CandidateAnswer>],
) -> Result<(String, f64), PromptError> {
    struct Group {
        score: f64,
        surfaces: indexmap::IndexMap<String, usize>,
    }
    let mut groups: indexmap::IndexMap<String, Group> = indexmap::IndexMap::new();
    for iteration in per_iteration {
        for candidate in iteration {
            let key = normalize_answer(&candidate.text);
            if key.is_empty() {
                continue;
            }
            let group = groups.entry(key).or_insert_with(|| Group {
                score: 0.0,
                surfaces: indexmap::IndexMap::new(),
            });
            group.score += candidate.probability;
            *group.surfaces.entry(candidate.text.clone()).or_insert(0) += 1;
        }
    }
    if groups.is_empty() {
        return Err(PromptError::NoAnswer);
    }
    let (_, best) = groups
        .iter()
        .max_by(|(ka, a), (kb, b)| {
            a.score
                .partial_cmp(&b.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| kb.cmp(ka)) // smaller normalized string wins ties
        })
        .expect("non-empty groups");
    let surface = best
        .surfaces
        .iter()
        .max_by(|(ta, ca), (tb, cb)| ca.cmp(cb).then_with(|| tb.cmp(ta)))
        .map(|(t, _)| t.clone())
        .expect("non-empty group");
    Ok((surface, best.score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{Completion, StubClient};
    use approx::assert_abs_diff_eq;

    fn instance(id: &str, question: &str, answer: &str, ty: AnswerType) -> QAInstance {
        QAInstance {
            id: id.into(),
            question: question.into(),
            answers: vec![answer.into()],
            answer_type: ty,
        }
    }

    fn doc(rank: u32, title: &str, text: &str, perturbed: bool) -> Document {
        Document {
            doc_id: format!("d{rank}"),
            title: title.into(),
            text: text.into(),
            rank,
            perturbed,
            record: perturbed.then(|| crate::corpus::PerturbationRecord {
                method: crate::corpus::PerturbMethod::Entity,
                original_answer: "x".into(),
                replacement: Some("y".into()),
                perturbation_type: Some(crate::corpus::PerturbationType::ER),
                generator_id: None,
            }),
        }
    }

    fn sample_with(perturbed: &[bool]) -> IclSample {
        IclSample {
            instance: instance("s1", "who made the thing", "Maker One", AnswerType::PER),
            set: RetrievedSet {
                question_id: "s1".into(),
                documents: perturbed
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| doc(i as u32 + 1, &format!("t{i}"), &format!("text {i}"), p))
                    .collect(),
            },
        }
    }

    #[test]
    fn injection_formats_flagged_indices() {
        let s = format_disc_injection(&[(1, false), (2, true), (3, false), (4, false), (5, true)])
            .unwrap();
        assert_eq!(s, "Perturbed: Document [2], Document [5]");
    }

    #[test]
    fn injection_none_case() {
        let s = format_disc_injection(&[(1, false), (2, false)]).unwrap();
        assert_eq!(s, "Perturbed: None");
    }

    #[test]
    fn injection_all_flagged_in_order() {
        let s = format_disc_injection(&[(3, true), (1, true), (2, true)]).unwrap();
        assert_eq!(s, "Perturbed: Document [1], Document [2], Document [3]");
    }

    #[test]
    fn injection_rejects_duplicates_and_zero() {
        assert!(format_disc_injection(&[(1, true), (1, false)]).is_err());
        assert!(format_disc_injection(&[(0, true)]).is_err());
    }

    #[test]
    fn parametric_prompt_has_no_document_blocks() {
        let sample = sample_with(&[false, true]);
        let eval = instance("e1", "what is the answer", "gold", AnswerType::PER);
        let docs = vec![doc(1, "t", "x", false)];
        let bundle =
            render_prompt(PromptVariant::Parametric, &sample, &eval, &docs, None).unwrap();
        assert!(!bundle.rendered.contains("Document ["));
        assert!(bundle.rendered.ends_with("Answer:"));
    }

    #[test]
    fn semi_parametric_counts_eval_document_blocks() {
        let sample = sample_with(&[false]);
        let eval = instance("e1", "q", "gold", AnswerType::PER);
        let docs: Vec<Document> = (1..=5).map(|r| doc(r, "t", "x", false)).collect();
        let bundle =
            render_prompt(PromptVariant::SemiParametric, &sample, &eval, &docs, None).unwrap();
        let blocks = bundle.rendered.matches("Document [").count();
        // one sample doc plus five eval docs
        assert_eq!(blocks, 6);
        // instruction sits after the documents in each section
        let last_doc = bundle.rendered.rfind("Document [5]").unwrap();
        let last_instr = bundle.rendered.rfind(ANSWER_INSTRUCTION).unwrap();
        assert!(last_instr > last_doc);
    }

    #[test]
    fn disc_fid_requires_and_embeds_decisions() {
        let sample = sample_with(&[true, false]);
        let eval = instance("e1", "q", "gold", AnswerType::PER);
        let docs: Vec<Document> = (1..=5).map(|r| doc(r, "t", "x", false)).collect();
        assert!(matches!(
            render_prompt(PromptVariant::DiscFid, &sample, &eval, &docs, None),
            Err(PromptError::MissingDecisions)
        ));
        let decisions: Vec<(usize, bool)> =
            vec![(1, false), (2, true), (3, false), (4, false), (5, true)];
        let bundle =
            render_prompt(PromptVariant::DiscFid, &sample, &eval, &docs, Some(&decisions))
                .unwrap();
        assert!(bundle
            .rendered
            .contains("Perturbed: Document [2], Document [5]"));
        // sample block carries its own truth line
        assert!(bundle.rendered.contains("Perturbed: Document [1]"));
    }

    #[test]
    fn render_is_deterministic() {
        let sample = sample_with(&[true]);
        let eval = instance("e1", "q", "gold", AnswerType::PER);
        let docs = vec![doc(1, "t", "x", false)];
        let a = render_prompt(PromptVariant::DiscInst, &sample, &eval, &docs, None).unwrap();
        let b = render_prompt(PromptVariant::DiscInst, &sample, &eval, &docs, None).unwrap();
        assert_eq!(a.rendered, b.rendered);
    }

    fn heldout_pool() -> Vec<IclSample> {
        let types = [
            AnswerType::PER,
            AnswerType::ORG,
            AnswerType::LOC,
            AnswerType::DATE,
            AnswerType::NUM,
        ];
        types
            .iter()
            .enumerate()
            .map(|(i, &ty)| {
                let perturbed: Vec<bool> = (0..5).map(|d| d < i).collect();
                let mut s = sample_with(&perturbed);
                s.instance = instance(&format!("h{i}"), "q", "a", ty);
                s.set.question_id = format!("h{i}");
                s
            })
            .collect()
    }

    #[test]
    fn forced_selection_takes_one_per_type() {
        let pool = heldout_pool();
        let (picked, relax) = select_incontext_samples(&pool, 5, 7).unwrap();
        assert_eq!(relax, Relaxation::None);
        let mut types: Vec<AnswerType> = picked.iter().map(|s| s.instance.answer_type).collect();
        types.sort();
        types.dedup();
        assert_eq!(types.len(), 5);
        let mut counts: Vec<usize> = picked.iter().map(|s| s.perturbed_count()).collect();
        counts.sort_unstable();
        counts.dedup();
        assert_eq!(counts.len(), 5);
    }

    #[test]
    fn k1_has_no_binding_constraints() {
        let pool = heldout_pool();
        let (picked, relax) = select_incontext_samples(&pool, 1, 3).unwrap();
        assert_eq!(picked.len(), 1);
        assert_eq!(relax, Relaxation::None);
    }

    #[test]
    fn selection_matches_exhaustive_subset_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let types = AnswerType::TYPED;
        for trial in 0..40 {
            let n = rng.gen_range(3..9);
            let k = rng.gen_range(2..4.min(n));
            let pool: Vec<IclSample> = (0..n)
                .map(|i| {
                    let ty = types[rng.gen_range(0..types.len())];
                    let count = rng.gen_range(0..3);
                    let perturbed: Vec<bool> = (0..5).map(|d| d < count).collect();
                    let mut s = sample_with(&perturbed);
                    s.instance = instance(&format!("p{i}"), "q", "a", ty);
                    s
                })
                .collect();

            // brute-force oracle over all k-subsets
            let keys: Vec<(AnswerType, usize)> = pool
                .iter()
                .map(|s| (s.instance.answer_type, s.perturbed_count()))
                .collect();
            let mut satisfiable = false;
            let mut combo = vec![0usize; k];
            fn subsets(
                keys: &[(AnswerType, usize)],
                k: usize,
                start: usize,
                combo: &mut Vec<usize>,
                depth: usize,
                found: &mut bool,
            ) {
                if *found {
                    return;
                }
                if depth == k {
                    *found = true;
                    return;
                }
                for i in start..keys.len() {
                    let ok = combo[..depth].iter().all(|&j| {
                        keys[j].0 != keys[i].0 && keys[j].1 != keys[i].1
                    });
                    if ok {
                        combo[depth] = i;
                        subsets(keys, k, i + 1, combo, depth + 1, found);
                    }
                }
            }
            subsets(&keys, k, 0, &mut combo, 0, &mut satisfiable);

            let (picked, relax) = select_incontext_samples(&pool, k, trial).unwrap();
            assert_eq!(picked.len(), k);
            if satisfiable {
                assert_eq!(relax, Relaxation::None, "trial {trial} should satisfy");
            } else {
                assert_ne!(relax, Relaxation::None, "trial {trial} cannot satisfy");
            }
        }
    }

    fn bundle_for(text: &str) -> PromptBundle {
        PromptBundle {
            variant: PromptVariant::SemiParametric,
            rendered: text.to_string(),
            incontext_sample_id: "s".into(),
            eval_question_id: "e".into(),
        }
    }

    #[test]
    fn single_token_candidate_uses_its_probability() {
        let stub = StubClient::new("stub", |_| {
            Ok(Completion {
                text: "1995".into(),
                token_logprobs: Some(vec![vec![("1995".into(), 0.8f64.ln())]]),
            })
        });
        let candidates = query_answer(
            &stub,
            &bundle_for("p"),
            &QueryParams::default(),
            &RetryPolicy::immediate(0),
        )
        .unwrap();
        assert_eq!(candidates.len(), 1);
        assert_eq!(candidates[0].text, "1995");
        assert_abs_diff_eq!(candidates[0].probability, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn missing_logprobs_degrade_to_full_probability() {
        let stub = StubClient::constant("stub", "Middle Island\nsecond line ignored");
        let candidates = query_answer(
            &stub,
            &bundle_for("p"),
            &QueryParams::default(),
            &RetryPolicy::immediate(0),
        )
        .unwrap();
        assert_eq!(candidates, vec![CandidateAnswer {
            text: "Middle Island".into(),
            probability: 1.0
        }]);
    }

    #[test]
    fn empty_completion_skips_iteration() {
        let stub = StubClient::constant("stub", "");
        let candidates = query_answer(
            &stub,
            &bundle_for("p"),
            &QueryParams::default(),
            &RetryPolicy::immediate(0),
        )
        .unwrap();
        assert!(candidates.is_empty());
    }

    #[test]
    fn candidates_enumerate_products_of_alternatives() {
        let stub = StubClient::new("stub", |_| {
            Ok(Completion {
                text: "ab".into(),
                token_logprobs: Some(vec![
                    vec![("a".into(), 0.7f64.ln()), ("x".into(), 0.3f64.ln())],
                    vec![("b".into(), 0.6f64.ln()), ("y".into(), 0.4f64.ln())],
                ]),
            })
        });
        let candidates = query_answer(
            &stub,
            &bundle_for("p"),
            &QueryParams::default(),
            &RetryPolicy::immediate(0),
        )
        .unwrap();
        // oracle: all four products
        let expected = [
            ("ab", 0.42),
            ("ay", 0.28),
            ("xb", 0.18),
            ("xy", 0.12),
        ];
        assert_eq!(candidates.len(), 4);
        for (c, (text, p)) in candidates.iter().zip(expected) {
            assert_eq!(c.text, text);
            assert_abs_diff_eq!(c.probability, p, epsilon = 1e-12);
        }
    }

    #[test]
    fn ensemble_sums_probabilities_per_group() {
        let lists = vec![
            vec![CandidateAnswer {
                text: "Alpha".into(),
                probability: 0.6,
            }],
            vec![
                CandidateAnswer {
                    text: "Beta".into(),
                    probability: 0.7,
                },
                CandidateAnswer {
                    text: "Alpha".into(),
                    probability: 0.35,
                },
            ],
        ];
        let (answer, score) = ensemble_answers(&lists).unwrap();
        assert_eq!(answer, "Alpha");
        assert_abs_diff_eq!(score, 0.95, epsilon = 1e-12);
    }

    #[test]
    fn singleton_ensemble_is_identity() {
        let lists = vec![vec![CandidateAnswer {
            text: "only".into(),
            probability: 0.4,
        }]];
        let (answer, score) = ensemble_answers(&lists).unwrap();
        assert_eq!(answer, "only");
        assert_abs_diff_eq!(score, 0.4, epsilon = 1e-12);
    }

    #[test]
    fn surface_forms_group_under_normalization() {
        let lists = vec![
            vec![CandidateAnswer {
                text: "The Beatles".into(),
                probability: 0.3,
            }],
            vec![CandidateAnswer {
                text: "beatles".into(),
                probability: 0.3,
            }],
            vec![CandidateAnswer {
                text: "The Beatles".into(),
                probability: 0.2,
            }],
            vec![CandidateAnswer {
                text: "Rolling Stones".into(),
                probability: 0.5,
            }],
        ];
        let (answer, score) = ensemble_answers(&lists).unwrap();
        assert_eq!(answer, "The Beatles");
        assert_abs_diff_eq!(score, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn all_empty_lists_error() {
        assert!(matches!(
            ensemble_answers(&[vec![], vec![]]),
            Err(PromptError::NoAnswer)
        ));
    }
}
