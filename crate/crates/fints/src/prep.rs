//! Contrastive prompt construction and steering-vector extraction.
//!
//! For each historical record we pair one retrieved positive context with
//! several sampled negative contexts, run both renderings through the model
//! in teacher-forcing mode, and store the differences of the hooked
//! activations keyed by an encoding of the pair text.

use rayon::prelude::*;

use crate::corpus::{retrieve_positive_excluding, sample_negative, InteractionRecord, UserCorpus};
use crate::encode::{EncoderSpec, KeyVector};
use crate::error::{FintsError, Result};
use crate::model::{tokenize, HookConfig, Model};

/// Records rendered into each context block, for both polarities.
pub const DEFAULT_CONTEXT_RECORDS: usize = 2;

/// Negative contexts generated per historical record.
pub const DEFAULT_N_NEGATIVES: usize = 4;

/// Separator joining the two pair texts when building the dictionary key.
pub const KEY_SEPARATOR: &str = "\n###\n";

/// Teacher-forcing rendering: context, query, and the gold answer.
pub fn render_teacher(context: &str, query: &str, answer: &str) -> String {
    format!("{context}\nQ: {query}\nA: {answer}")
}

/// Generation-time rendering; the teacher template minus the answer.
pub fn render_prompt(context: Option<&str>, query: &str) -> String {
    match context {
        Some(ctx) => format!("{ctx}\nQ: {query}\nA:"),
        None => format!("Q: {query}\nA:"),
    }
}

/// One positive/negative prompt pair for a record. Both texts share the
/// identical query and answer segments and differ only in the context.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    pub pair_id: u64,
    pub query: String,
    pub answer: String,
    pub positive_text: String,
    pub negative_text: String,
    pub neg_index: usize,
}

/// One steering-dictionary entry: the pair key plus the activation deltas at
/// all three granularities, extracted in a single pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringEntry {
    pub pair_id: u32,
    pub source_ts: i64,
    pub key: KeyVector,
    pub delta_attn: Vec<f32>,
    pub delta_mlp: Vec<f32>,
    pub delta_whole: Vec<f32>,
}

/// A user's ordered steering-vector dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringDict {
    pub user_id: String,
    pub model_fingerprint: [u8; 16],
    pub layer: usize,
    pub d_model: usize,
    pub key_dim: usize,
    pub entries: Vec<SteeringEntry>,
}

impl SteeringDict {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fingerprint_matches(&self, model: &Model) -> bool {
        self.model_fingerprint == model.fingerprint()
    }
}

/// A pair dropped during dictionary assembly, with the reason.
#[derive(Debug, Clone)]
pub struct SkippedPair {
    pub source_ts: i64,
    pub neg_index: usize,
    pub reason: String,
}

/// Builds the contrastive pairs for one train record: a single retrieved
/// positive context (the record itself excluded from candidates) reused
/// across `n_negatives` sampled negative contexts with derived seeds
/// `seed + i`.
pub fn build_contrastive_pairs(
    record: &InteractionRecord,
    corpus: &UserCorpus,
    n_negatives: usize,
    seed: u64,
) -> Result<Vec<ContrastivePair>> {
    let positive = retrieve_positive_excluding(
        &record.query,
        &record.user_id,
        corpus,
        DEFAULT_CONTEXT_RECORDS,
        Some(record.id),
    )?;
    let mut pairs = Vec::with_capacity(n_negatives);
    for i in 0..n_negatives {
        let negative = sample_negative(
            &record.user_id,
            corpus,
            DEFAULT_CONTEXT_RECORDS,
            seed + i as u64,
        )?;
        pairs.push(ContrastivePair {
            pair_id: i as u64,
            query: record.query.clone(),
            answer: record.answer.clone(),
            positive_text: render_teacher(&positive.text, &record.query, &record.answer),
            negative_text: render_teacher(&negative.text, &record.query, &record.answer),
            neg_index: i,
        });
    }
    Ok(pairs)
}

/// Runs both pair texts through the model and differences the last-position
/// taps at `hook.layer`. All three granularity deltas come out of one pass.
pub fn extract_deltas(
    pair: &ContrastivePair,
    model: &Model,
    hook: HookConfig,
    encoder: &EncoderSpec,
    source_ts: i64,
) -> Result<SteeringEntry> {
    let pos_tokens = tokenize(&pair.positive_text);
    let neg_tokens = tokenize(&pair.negative_text);
    let (_, tap_pos) = model.forward_full(&pos_tokens, hook)?;
    let (_, tap_neg) = model.forward_full(&neg_tokens, hook)?;

    let diff = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f32>>();
    let key_text = format!(
        "{}{}{}",
        pair.positive_text, KEY_SEPARATOR, pair.negative_text
    );
    Ok(SteeringEntry {
        pair_id: pair.pair_id as u32,
        source_ts,
        key: encoder.encode(&key_text, model)?,
        delta_attn: diff(&tap_pos.attn_out, &tap_neg.attn_out),
        delta_mlp: diff(&tap_pos.mlp_out, &tap_neg.mlp_out),
        delta_whole: diff(&tap_pos.whole_out, &tap_neg.whole_out),
    })
}

/// Assembles a user's steering dictionary over all train records in time
/// order. Each record contributes `n_negatives` entries; pairs whose texts
/// exceed the context window are skipped and reported, never truncated.
/// Record `j` derives its sampling seed as `seed + j * n_negatives` so that
/// negatives stay distinct across records.
pub fn build_dict(
    user_id: &str,
    corpus: &UserCorpus,
    model: &Model,
    hook: HookConfig,
    n_negatives: usize,
    seed: u64,
    encoder: &EncoderSpec,
) -> Result<(SteeringDict, Vec<SkippedPair>)> {
    let train = corpus.train_records(user_id)?;
    if train.is_empty() {
        return Err(FintsError::EmptyUser(user_id.to_string()));
    }
    if hook.layer >= model.config().n_layers {
        return Err(FintsError::InvalidLayer {
            layer: hook.layer,
            n_layers: model.config().n_layers,
        });
    }

    // Extraction is pure per record; parallelize and keep record order.
    let per_record: Vec<Result<Vec<std::result::Result<SteeringEntry, SkippedPair>>>> = train
        .par_iter()
        .enumerate()
        .map(|(j, record)| {
            let record_seed = seed + (j * n_negatives) as u64;
            let pairs = build_contrastive_pairs(record, corpus, n_negatives, record_seed)?;
            Ok(pairs
                .iter()
                .map(|pair| {
                    extract_deltas(pair, model, hook, encoder, record.ts).map_err(|e| {
                        SkippedPair {
                            source_ts: record.ts,
                            neg_index: pair.neg_index,
                            reason: e.to_string(),
                        }
                    })
                })
                .collect())
        })
        .collect();

    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for record_result in per_record {
        for outcome in record_result? {
            match outcome {
                Ok(entry) => entries.push(entry),
                Err(skip) => skipped.push(skip),
            }
        }
    }
    // Renumber sequentially so ids are unique within the dict.
    for (i, e) in entries.iter_mut().enumerate() {
        e.pair_id = i as u32;
    }
    Ok((
        SteeringDict {
            user_id: user_id.to_string(),
            model_fingerprint: model.fingerprint(),
            layer: hook.layer,
            d_model: model.config().d_model,
            key_dim: encoder.key_dim(model),
            entries,
        },
        skipped,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::RecordId;
    use crate::model::{Granularity, ModelConfig};

    fn rec(user: &str, ts: i64, query: &str, answer: &str) -> InteractionRecord {
        InteractionRecord {
            id: RecordId(u64::MAX),
            user_id: user.into(),
            ts,
            query: query.into(),
            answer: answer.into(),
        }
    }

    fn corpus() -> UserCorpus {
        UserCorpus::from_records(vec![
            rec("u1", 1, "apples and pears", "fruit reply"),
            rec("u1", 2, "bread and butter", "bakery reply"),
            rec("u1", 3, "apples again", "more fruit"),
            rec("u2", 1, "rockets", "space reply"),
            rec("u2", 2, "planets", "astronomy reply"),
        ])
        .unwrap()
    }

    fn model() -> Model {
        Model::new(ModelConfig::small(11)).unwrap()
    }

    #[test]
    fn pairs_share_one_positive_and_count_matches() {
        let c = corpus();
        let target = c.records("u1").unwrap()[2].clone();
        let pairs = build_contrastive_pairs(&target, &c, 3, 5).unwrap();
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|p| p.positive_text == pairs[0].positive_text));
        assert_eq!(pairs[0].neg_index, 0);
        assert_eq!(pairs[2].neg_index, 2);
    }

    #[test]
    fn pair_construction_is_deterministic() {
        let c = corpus();
        let target = c.records("u1").unwrap()[0].clone();
        let a = build_contrastive_pairs(&target, &c, 2, 9).unwrap();
        let b = build_contrastive_pairs(&target, &c, 2, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn record_is_excluded_from_its_own_positive() {
        let c = corpus();
        let target = c.records("u1").unwrap()[2].clone();
        let block = retrieve_positive_excluding(
            &target.query,
            "u1",
            &c,
            DEFAULT_CONTEXT_RECORDS,
            Some(target.id),
        )
        .unwrap();
        assert!(!block.source_record_ids.contains(&target.id));
        // And the rendered positive never quotes the target's own answer.
        let pairs = build_contrastive_pairs(&target, &c, 1, 0).unwrap();
        let context_part = pairs[0]
            .positive_text
            .split("\nQ: apples again")
            .next()
            .unwrap()
            .to_string();
        assert!(!context_part.contains("more fruit"));
    }

    #[test]
    fn pair_texts_differ_only_in_context() {
        let c = corpus();
        let target = c.records("u1").unwrap()[1].clone();
        let pairs = build_contrastive_pairs(&target, &c, 1, 3).unwrap();
        let suffix = format!("\nQ: {}\nA: {}", target.query, target.answer);
        assert!(pairs[0].positive_text.ends_with(&suffix));
        assert!(pairs[0].negative_text.ends_with(&suffix));
    }

    #[test]
    fn identical_texts_give_exactly_zero_deltas() {
        let m = model();
        let pair = ContrastivePair {
            pair_id: 0,
            query: "q".into(),
            answer: "a".into(),
            positive_text: "same text either way".into(),
            negative_text: "same text either way".into(),
            neg_index: 0,
        };
        let entry = extract_deltas(
            &pair,
            &m,
            HookConfig::new(1, Granularity::AttnMlp),
            &EncoderSpec::default(),
            0,
        )
        .unwrap();
        assert!(entry.delta_attn.iter().all(|&v| v == 0.0));
        assert!(entry.delta_mlp.iter().all(|&v| v == 0.0));
        assert!(entry.delta_whole.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swapping_pair_texts_negates_deltas_exactly() {
        let m = model();
        let pair = ContrastivePair {
            pair_id: 0,
            query: "q".into(),
            answer: "a".into(),
            positive_text: "first rendering of the pair".into(),
            negative_text: "a different second rendering".into(),
            neg_index: 0,
        };
        let mut swapped = pair.clone();
        std::mem::swap(&mut swapped.positive_text, &mut swapped.negative_text);
        let hook = HookConfig::new(2, Granularity::AttnMlp);
        let enc = EncoderSpec::default();
        let a = extract_deltas(&pair, &m, hook, &enc, 0).unwrap();
        let b = extract_deltas(&swapped, &m, hook, &enc, 0).unwrap();
        for i in 0..a.delta_attn.len() {
            assert_eq!(a.delta_attn[i], -b.delta_attn[i]);
            assert_eq!(a.delta_mlp[i], -b.delta_mlp[i]);
            assert_eq!(a.delta_whole[i], -b.delta_whole[i]);
        }
    }

    #[test]
    fn deltas_are_finite_with_expected_shape() {
        let m = model();
        let c = corpus();
        let d = m.config().d_model;
        let hook = HookConfig::new(1, Granularity::AttnMlp);
        let enc = EncoderSpec::default();
        for (j, record) in c.train_records("u1").unwrap().iter().enumerate() {
            for pair in build_contrastive_pairs(record, &c, 2, j as u64 * 100).unwrap() {
                let e = extract_deltas(&pair, &m, hook, &enc, record.ts).unwrap();
                for v in [&e.delta_attn, &e.delta_mlp, &e.delta_whole] {
                    assert_eq!(v.len(), d);
                    assert!(v.iter().all(|x| x.is_finite()));
                }
            }
        }
    }

    #[test]
    fn dict_counts_and_order() {
        let m = model();
        let c = corpus();
        let hook = HookConfig::new(1, Granularity::AttnMlp);
        let (dict, skipped) =
            build_dict("u1", &c, &m, hook, 4, 7, &EncoderSpec::default()).unwrap();
        assert!(skipped.is_empty());
        assert_eq!(dict.len(), 3 * 4);
        assert_eq!(dict.layer, 1);
        assert_eq!(dict.d_model, m.config().d_model);
        // Ordered by (source_ts, pair_id) with sequential ids.
        for (i, e) in dict.entries.iter().enumerate() {
            assert_eq!(e.pair_id, i as u32);
        }
        let ts: Vec<i64> = dict.entries.iter().map(|e| e.source_ts).collect();
        let mut sorted = ts.clone();
        sorted.sort();
        assert_eq!(ts, sorted);
    }

    #[test]
    fn single_record_user_gets_n_negative_entries() {
        let m = model();
        let c = UserCorpus::from_records(vec![
            rec("solo", 1, "only one", "reply"),
            rec("other", 1, "context donor", "text"),
        ])
        .unwrap();
        let (dict, _) = build_dict(
            "solo",
            &c,
            &m,
            HookConfig::new(0, Granularity::Whole),
            4,
            0,
            &EncoderSpec::default(),
        )
        .unwrap();
        assert_eq!(dict.len(), 4);
    }

    #[test]
    fn build_dict_is_deterministic() {
        let m = model();
        let c = corpus();
        let hook = HookConfig::new(2, Granularity::AttnMlp);
        let enc = EncoderSpec::default();
        let (a, _) = build_dict("u1", &c, &m, hook, 3, 42, &enc).unwrap();
        let (b, _) = build_dict("u1", &c, &m, hook, 3, 42, &enc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_pairs_are_skipped_with_reason() {
        let mut cfg = ModelConfig::small(0);
        cfg.max_seq_len = 48; // too small for a rendered pair
        let m = Model::new(cfg).unwrap();
        let c = corpus();
        let (dict, skipped) = build_dict(
            "u1",
            &c,
            &m,
            HookConfig::new(0, Granularity::Whole),
            2,
            0,
            &EncoderSpec::default(),
        )
        .unwrap();
        assert_eq!(dict.len() + skipped.len(), 3 * 2);
        assert!(!skipped.is_empty());
        assert!(skipped[0].reason.contains("exceeds"));
    }

    #[test]
    fn empty_user_is_an_error() {
        let m = model();
        let c = corpus();
        assert!(matches!(
            build_dict(
                "nobody",
                &c,
                &m,
                HookConfig::new(0, Granularity::Whole),
                1,
                0,
                &EncoderSpec::default()
            ),
            Err(FintsError::UnknownUser(_))
        ));
    }
}
