//! Symbolic prompt bank: vocabulary, decomposed prompt bundles, embeddings.
//!
//! Category and attribute names are the tokens; a trainable embedding table
//! stands in for a language encoder. Decomposition keeps each semantic unit
//! in its own token sequence, with attribute phrases conditioned on the
//! category (`flat_roof` becomes the sequence `[flat_roof, building]`).

use std::collections::BTreeMap;

use crate::error::PromptError;
use crate::tensor::{TResult, Tape, Tensor, Var};

/// Fixed per-phrase token budget; phrases are padded to this length.
pub const PHRASE_TOKENS: usize = 4;

/// Reserved padding token, always id 0.
pub const PAD: &str = "<pad>";

/// Token-to-id map over categories, attribute names and padding, with group
/// membership retained for validation.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
    categories: Vec<String>,
    groups: Vec<(String, Vec<String>)>,
}

impl Vocabulary {
    /// Ids are assigned densely: padding, categories in order, then group
    /// members in global group order.
    pub fn build(categories: &[String], groups: &[(String, Vec<String>)]) -> Self {
        let mut tokens = vec![PAD.to_string()];
        tokens.extend(categories.iter().cloned());
        for (_, members) in groups {
            tokens.extend(members.iter().cloned());
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens,
            ids,
            categories: categories.to_vec(),
            groups: groups.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn id(&self, token: &str) -> Result<u32, PromptError> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| PromptError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    /// Global attribute-group order; bundles always follow it.
    pub fn groups(&self) -> &[(String, Vec<String>)] {
        &self.groups
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    fn group_index(&self, group: &str) -> Option<usize> {
        self.groups.iter().position(|(g, _)| g == group)
    }

    /// Serialized form: a plain `{token: id}` object.
    pub fn to_json_map(&self) -> BTreeMap<String, u32> {
        self.ids.clone()
    }
}

/// A decomposed query: one category phrase, one conditioned phrase per
/// attribute group, a presence mask and per-phrase token validity.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub category_ids: Vec<u32>,
    pub attribute_ids: Vec<Vec<u32>>,
    /// m[k] = 1 when attribute group k is specified.
    pub presence: Vec<u8>,
    /// Row 0 covers the category phrase, row 1+k attribute phrase k.
    pub validity: Vec<Vec<f64>>,
}

impl PromptBundle {
    pub fn group_count(&self) -> usize {
        self.attribute_ids.len()
    }

    pub fn active_attributes(&self) -> usize {
        self.presence.iter().map(|&m| usize::from(m)).sum()
    }

    pub fn category_validity(&self) -> &[f64] {
        &self.validity[0]
    }

    pub fn attribute_validity(&self, k: usize) -> &[f64] {
        &self.validity[1 + k]
    }
}

fn pad_phrase(tokens: &[u32]) -> Result<Vec<u32>, PromptError> {
    if tokens.len() > PHRASE_TOKENS {
        return Err(PromptError::PhraseTooLong { got: tokens.len(), max: PHRASE_TOKENS });
    }
    let mut out = vec![0u32; PHRASE_TOKENS];
    out[..tokens.len()].copy_from_slice(tokens);
    Ok(out)
}

fn phrase_validity(len: usize) -> Vec<f64> {
    let mut v = vec![0.0; PHRASE_TOKENS];
    v[..len].iter_mut().for_each(|x| *x = 1.0);
    v
}

/// Decompose a `(category, attributes)` query into a bundle. Attributes are
/// given as `(group, value)` pairs in any order; groups not named are absent.
pub fn decompose(
    category: &str,
    attributes: &[(&str, &str)],
    vocab: &Vocabulary,
) -> Result<PromptBundle, PromptError> {
    let cat_id = vocab.id(category)?;
    let k = vocab.group_count();

    // Resolve the unordered input list onto the global group order.
    let mut by_group: Vec<Option<u32>> = vec![None; k];
    for (group, name) in attributes {
        let gi = vocab
            .group_index(group)
            .ok_or_else(|| PromptError::UnknownToken((*group).to_string()))?;
        if by_group[gi].is_some() {
            return Err(PromptError::DuplicateGroup((*group).to_string()));
        }
        let id = vocab.id(name)?;
        if !vocab.groups[gi].1.iter().any(|m| m == name) {
            return Err(PromptError::WrongGroup {
                token: (*name).to_string(),
                group: (*group).to_string(),
            });
        }
        by_group[gi] = Some(id);
    }

    let mut attribute_ids = Vec::with_capacity(k);
    let mut presence = Vec::with_capacity(k);
    let mut validity = vec![phrase_validity(1)];
    for slot in &by_group {
        match slot {
            Some(id) => {
                // category conditioning: attribute phrase carries the category
                attribute_ids.push(pad_phrase(&[*id, cat_id])?);
                presence.push(1);
                validity.push(phrase_validity(2));
            }
            None => {
                attribute_ids.push(vec![0; PHRASE_TOKENS]);
                presence.push(0);
                validity.push(phrase_validity(0));
            }
        }
    }

    Ok(PromptBundle {
        category_ids: pad_phrase(&[cat_id])?,
        attribute_ids,
        presence,
        validity,
    })
}

/// Recover `(category, [(group, value)])` names from a bundle.
pub fn detokenize(
    bundle: &PromptBundle,
    vocab: &Vocabulary,
) -> Result<(String, Vec<(String, String)>), PromptError> {
    let cat = vocab
        .token(bundle.category_ids[0])
        .ok_or_else(|| PromptError::UnknownToken(format!("id {}", bundle.category_ids[0])))?
        .to_string();
    let mut attrs = Vec::new();
    for (k, ids) in bundle.attribute_ids.iter().enumerate() {
        if bundle.presence[k] == 0 {
            continue;
        }
        let name = vocab
            .token(ids[0])
            .ok_or_else(|| PromptError::UnknownToken(format!("id {}", ids[0])))?;
        attrs.push((vocab.groups[k].0.clone(), name.to_string()));
    }
    Ok((cat, attrs))
}

/// The entangled-encoding baseline: all present attributes then the category
/// as one sequence.
pub fn concat_prompt(bundle: &PromptBundle) -> Vec<u32> {
    let mut seq = Vec::new();
    for (k, ids) in bundle.attribute_ids.iter().enumerate() {
        if bundle.presence[k] == 1 {
            seq.push(ids[0]);
        }
    }
    seq.push(bundle.category_ids[0]);
    seq
}

/// Rewrite a bundle so the whole prompt rides the category branch as a single
/// sequence with every attribute group absent.
pub fn to_concatenated_bundle(bundle: &PromptBundle) -> Result<PromptBundle, PromptError> {
    let seq = concat_prompt(bundle);
    let k = bundle.group_count();
    Ok(PromptBundle {
        validity: {
            let mut v = vec![phrase_validity(seq.len())];
            v.extend(std::iter::repeat_n(phrase_validity(0), k));
            v
        },
        category_ids: pad_phrase(&seq)?,
        attribute_ids: vec![vec![0; PHRASE_TOKENS]; k],
        presence: vec![0; k],
    })
}

/// Trainable token embeddings; row 0 (padding) stays frozen at zero.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub weights: Tensor,
}

impl EmbeddingTable {
    pub fn init(vocab_size: usize, dim: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let mut weights = Tensor::randn(vec![vocab_size, dim], 0.5, rng);
        weights.data_mut()[..dim].fill(0.0);
        EmbeddingTable { weights }
    }
}

/// One-hot rows for a phrase; padding/invalid positions are all-zero rows so
/// they embed to zero and route no gradient anywhere.
fn one_hot(ids: &[u32], validity: &[f64], vocab_size: usize) -> Tensor {
    let mut data = vec![0.0; ids.len() * vocab_size];
    for (t, (&id, &valid)) in ids.iter().zip(validity).enumerate() {
        if valid == 1.0 {
            data[t * vocab_size + id as usize] = 1.0;
        }
    }
    Tensor::new(vec![ids.len(), vocab_size], data).expect("one-hot shape")
}

/// Look up token embeddings for every phrase of a bundle.
/// Returns the category phrase `[N_t, C]` and one `[N_t, C]` per group.
pub fn embed(
    tape: &mut Tape,
    bundle: &PromptBundle,
    table: Var,
) -> TResult<(Var, Vec<Var>)> {
    let vocab_size = tape.shape(table)[0];
    let hot_c = tape.constant(one_hot(&bundle.category_ids, bundle.category_validity(), vocab_size));
    let t_c = tape.matmul(hot_c, table)?;
    let mut t_a = Vec::with_capacity(bundle.group_count());
    for k in 0..bundle.group_count() {
        let hot = tape.constant(one_hot(
            &bundle.attribute_ids[k],
            bundle.attribute_validity(k),
            vocab_size,
        ));
        t_a.push(tape.matmul(hot, table)?);
    }
    Ok((t_c, t_a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check, FD_STEP};
    use crate::rng::stream;

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            &["building".into()],
            &[
                ("roof".into(), vec!["flat_roof".into(), "gable_roof".into()]),
                ("use".into(), vec!["residential".into(), "industrial".into()]),
            ],
        )
    }

    #[test]
    fn ids_are_dense_with_pad_zero() {
        let v = vocab();
        assert_eq!(v.id(PAD).unwrap(), 0);
        let mut ids: Vec<u32> = v.to_json_map().values().copied().collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..v.len() as u32).collect::<Vec<_>>());
    }

    #[test]
    fn decompose_conditions_attribute_on_category() {
        let v = vocab();
        let b = decompose("building", &[("roof", "flat_roof")], &v).unwrap();
        assert_eq!(b.category_ids[0], v.id("building").unwrap());
        assert_eq!(
            &b.attribute_ids[0][..2],
            &[v.id("flat_roof").unwrap(), v.id("building").unwrap()]
        );
        assert_eq!(b.presence, vec![1, 0]);
        assert_eq!(b.attribute_validity(0), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.attribute_validity(1), &[0.0; 4]);
        assert!(b.attribute_ids[1].iter().all(|&id| id == 0));
    }

    #[test]
    fn decompose_all_absent_is_category_only() {
        let b = decompose("building", &[], &vocab()).unwrap();
        assert_eq!(b.presence, vec![0, 0]);
        assert_eq!(b.category_validity(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn decompose_round_trips_through_detokenize() {
        let v = vocab();
        let b = decompose("building", &[("use", "industrial"), ("roof", "flat_roof")], &v).unwrap();
        let (cat, attrs) = detokenize(&b, &v).unwrap();
        assert_eq!(cat, "building");
        // global group order, independent of input order
        assert_eq!(
            attrs,
            vec![
                ("roof".to_string(), "flat_roof".to_string()),
                ("use".to_string(), "industrial".to_string())
            ]
        );
    }

    #[test]
    fn decompose_is_order_invariant() {
        let v = vocab();
        let a = decompose("building", &[("roof", "flat_roof"), ("use", "industrial")], &v).unwrap();
        let b = decompose("building", &[("use", "industrial"), ("roof", "flat_roof")], &v).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decompose_rejects_bad_inputs() {
        let v = vocab();
        assert!(matches!(
            decompose("tower", &[], &v),
            Err(PromptError::UnknownToken(_))
        ));
        assert!(matches!(
            decompose("building", &[("roof", "industrial")], &v),
            Err(PromptError::WrongGroup { .. })
        ));
        assert!(matches!(
            decompose("building", &[("roof", "flat_roof"), ("roof", "gable_roof")], &v),
            Err(PromptError::DuplicateGroup(_))
        ));
    }

    #[test]
    fn concat_matches_paper_ordering() {
        let v = vocab();
        let b = decompose(
            "building",
            &[("roof", "flat_roof"), ("use", "industrial")],
            &v,
        )
        .unwrap();
        let seq = concat_prompt(&b);
        let names: Vec<&str> = seq.iter().map(|&id| v.token(id).unwrap()).collect();
        assert_eq!(names, vec!["flat_roof", "industrial", "building"]);
    }

    #[test]
    fn concat_length_is_active_count_plus_one() {
        let v = vocab();
        for attrs in [vec![], vec![("roof", "flat_roof")], vec![("roof", "flat_roof"), ("use", "residential")]] {
            let b = decompose("building", &attrs, &v).unwrap();
            assert_eq!(concat_prompt(&b).len(), b.active_attributes() + 1);
        }
    }

    #[test]
    fn concatenated_bundle_is_category_branch_only() {
        let v = vocab();
        let b = decompose("building", &[("roof", "flat_roof"), ("use", "industrial")], &v).unwrap();
        let cb = to_concatenated_bundle(&b).unwrap();
        assert_eq!(cb.presence, vec![0, 0]);
        assert_eq!(cb.category_validity(), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn absent_group_embeds_to_zero() {
        let v = vocab();
        let b = decompose("building", &[("roof", "flat_roof")], &v).unwrap();
        let mut tape = Tape::new();
        let table = tape.leaf(EmbeddingTable::init(v.len(), 8, &mut stream(1, "emb")).weights);
        let (_, t_a) = embed(&mut tape, &b, table).unwrap();
        assert!(tape.value(t_a[1]).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shared_tokens_share_embedding_rows() {
        let v = vocab();
        let b1 = decompose("building", &[("roof", "flat_roof")], &v).unwrap();
        let b2 = decompose("building", &[("use", "industrial")], &v).unwrap();
        let mut tape = Tape::new();
        let table = tape.leaf(EmbeddingTable::init(v.len(), 8, &mut stream(2, "emb")).weights);
        let (c1, _) = embed(&mut tape, &b1, table).unwrap();
        let (c2, _) = embed(&mut tape, &b2, table).unwrap();
        assert_eq!(tape.value(c1).data(), tape.value(c2).data());
    }

    #[test]
    fn embedding_gradient_counts_occurrences() {
        let v = vocab();
        // category token appears once in the category phrase and once in the
        // conditioned attribute phrase
        let b = decompose("building", &[("roof", "flat_roof")], &v).unwrap();
        let table = EmbeddingTable::init(v.len(), 4, &mut stream(3, "emb")).weights;

        let mut tape = Tape::new();
        let tv = tape.leaf(table.clone());
        let (t_c, t_a) = embed(&mut tape, &b, tv).unwrap();
        let s1 = tape.sum(t_c).unwrap();
        let s2 = tape.sum(t_a[0]).unwrap();
        let total = tape.add(s1, s2).unwrap();
        tape.backward(total).unwrap();
        let g = tape.grad(tv).unwrap();
        let cat_row = v.id("building").unwrap() as usize;
        let flat_row = v.id("flat_roof").unwrap() as usize;
        assert!(g.data()[cat_row * 4..(cat_row + 1) * 4].iter().all(|&x| x == 2.0));
        assert!(g.data()[flat_row * 4..(flat_row + 1) * 4].iter().all(|&x| x == 1.0));
        assert!(g.data()[..4].iter().all(|&x| x == 0.0), "padding row stays untouched");

        // and against finite differences
        let report = check(
            |tape, vars| {
                let (t_c, _) = embed(tape, &b, vars[0])?;
                tape.sum(t_c)
            },
            &[table],
            FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6);
    }
}
