//! Row-wise embedding merge keyed on token strings.
//!
//! For every token of the merged vocabulary the first applicable rule wins:
//!
//! 1. the token exists in the pre-trained vocabulary: take the pre-trained
//!    row (skipped for [`MergeMethod::Linear`], which has no pre-trained
//!    model);
//! 2. the token exists in only one of the LVLM and RM: take that row;
//! 3. the token exists in both: take the unweighted mean of the two rows.
//!
//! The merged vocabulary is the LVLM vocabulary in its own order followed by
//! RM-only tokens in RM order.

use thiserror::Error;

use crate::manifest::ModelKind;
use crate::merge::{F32Tensor, MergeMethod};
use crate::vocab::Vocab;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum EmbedError {
    #[error("{model}: embedding must be a matrix, found shape {shape:?}")]
    NotMatrix { model: ModelKind, shape: Vec<usize> },
    #[error("embedding widths differ: {0:?}")]
    WidthMismatch(Vec<(ModelKind, usize)>),
    #[error("{model}: token {token:?} maps to row {row}, embedding has {rows} rows")]
    RowOutOfRange { model: ModelKind, token: String, row: usize, rows: usize },
    #[error("{0} needs the pre-trained embedding")]
    MissingPretrained(MergeMethod),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedToken {
    pub token: String,
    pub pre_row: Option<usize>,
    pub lvlm_row: Option<usize>,
    pub rm_row: Option<usize>,
}

/// Union of the LVLM and RM vocabularies with each model's row index.
/// `rows` is in output order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedVocab {
    pub rows: Vec<AlignedToken>,
}

impl AlignedVocab {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn output_order(&self) -> impl Iterator<Item = &str> {
        self.rows.iter().map(|r| r.token.as_str())
    }

    /// Vocabulary of the merged embedding.
    pub fn output_vocab(&self) -> Vocab {
        Vocab::from_tokens(self.output_order()).expect("aligned tokens are unique")
    }
}

/// Tokens present only in the pre-trained vocabulary are dropped.
pub fn align_vocab(pre: &Vocab, lvlm: &Vocab, rm: &Vocab) -> AlignedVocab {
    let entry = |token: &str| AlignedToken {
        token: token.to_string(),
        pre_row: pre.row(token),
        lvlm_row: lvlm.row(token),
        rm_row: rm.row(token),
    };
    let mut rows: Vec<AlignedToken> = lvlm.iter().map(|(t, _)| entry(t)).collect();
    rows.extend(rm.iter().filter(|(t, _)| !lvlm.contains(t)).map(|(t, _)| entry(t)));
    AlignedVocab { rows }
}

fn dims(model: ModelKind, t: &F32Tensor) -> Result<(usize, usize), EmbedError> {
    match t.shape.as_slice() {
        [rows, width] => Ok((*rows, *width)),
        _ => Err(EmbedError::NotMatrix {
            model,
            shape: t.shape.clone(),
        }),
    }
}

/// Build the merged embedding matrix of shape `(aligned.len(), width)`.
pub fn merge_embedding_rows(
    aligned: &AlignedVocab,
    pre: Option<&F32Tensor>,
    lvlm: &F32Tensor,
    rm: &F32Tensor,
    method: MergeMethod,
) -> Result<F32Tensor, EmbedError> {
    let use_pre = method.uses_pretrained();
    let pre = match (use_pre, pre) {
        (true, None) => return Err(EmbedError::MissingPretrained(method)),
        (true, Some(p)) => Some(p),
        (false, _) => None,
    };
    let (lvlm_rows, width) = dims(ModelKind::Lvlm, lvlm)?;
    let (rm_rows, rm_width) = dims(ModelKind::Rm, rm)?;
    let mut widths = vec![(ModelKind::Lvlm, width), (ModelKind::Rm, rm_width)];
    let pre_rows = match pre {
        Some(p) => {
            let (r, w) = dims(ModelKind::Pre, p)?;
            widths.push((ModelKind::Pre, w));
            r
        }
        None => 0,
    };
    if widths.iter().any(|(_, w)| *w != width) {
        return Err(EmbedError::WidthMismatch(widths));
    }

    let row_of = |model: ModelKind, t: &F32Tensor, rows: usize, tok: &str, row: usize| {
        if row >= rows {
            return Err(EmbedError::RowOutOfRange {
                model,
                token: tok.to_string(),
                row,
                rows,
            });
        }
        Ok(t.values[row * width..(row + 1) * width].to_vec())
    };

    let mut values = Vec::with_capacity(aligned.len() * width);
    for tok in &aligned.rows {
        let row = match (pre.zip(tok.pre_row), tok.lvlm_row, tok.rm_row) {
            (Some((p, r)), _, _) => row_of(ModelKind::Pre, p, pre_rows, &tok.token, r)?,
            (None, Some(a), Some(b)) => {
                let x = row_of(ModelKind::Lvlm, lvlm, lvlm_rows, &tok.token, a)?;
                let y = row_of(ModelKind::Rm, rm, rm_rows, &tok.token, b)?;
                x.iter().zip(&y).map(|(u, v)| (u + v) / 2.0).collect()
            }
            (None, Some(a), None) => row_of(ModelKind::Lvlm, lvlm, lvlm_rows, &tok.token, a)?,
            (None, None, Some(b)) => row_of(ModelKind::Rm, rm, rm_rows, &tok.token, b)?,
            (None, None, None) => unreachable!("aligned tokens come from the LVLM or RM vocab"),
        };
        values.extend_from_slice(&row);
    }
    Ok(F32Tensor::new(vec![aligned.len(), width], values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(pairs: &[(&str, usize)]) -> Vocab {
        Vocab::from_pairs(pairs.iter().map(|(t, r)| (*t, *r))).unwrap()
    }

    fn emb(rows: &[&[f32]]) -> F32Tensor {
        let width = rows[0].len();
        F32Tensor::new(vec![rows.len(), width], rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    #[test]
    fn union_in_lvlm_then_rm_order() {
        let a = align_vocab(&vocab(&[("b", 0)]), &vocab(&[("a", 0), ("b", 1)]), &vocab(&[("b", 0), ("c", 1)]));
        let order: Vec<_> = a.output_order().collect();
        assert_eq!(order, ["a", "b", "c"]);
        assert_eq!(a.rows[0], AlignedToken { token: "a".into(), pre_row: None, lvlm_row: Some(0), rm_row: None });
        assert_eq!(a.rows[1].pre_row, Some(0));
        assert_eq!((a.rows[1].lvlm_row, a.rows[1].rm_row), (Some(1), Some(0)));
        assert_eq!(a.rows[2].rm_row, Some(1));
    }

    #[test]
    fn identical_vocabs_align_fully() {
        let v = vocab(&[("x", 0), ("y", 1)]);
        let a = align_vocab(&v, &v, &v);
        assert!(a.rows.iter().all(|r| r.pre_row.is_some() && r.lvlm_row.is_some() && r.rm_row.is_some()));
        assert_eq!(a.output_order().collect::<Vec<_>>(), ["x", "y"]);
    }

    #[test]
    fn pre_only_token_excluded() {
        let a = align_vocab(&vocab(&[("p", 0), ("x", 1)]), &vocab(&[("x", 0)]), &vocab(&[("x", 0)]));
        assert_eq!(a.output_order().collect::<Vec<_>>(), ["x"]);
    }

    #[test]
    fn rule_three_mean() {
        let a = align_vocab(&Vocab::default(), &vocab(&[("t", 0)]), &vocab(&[("t", 0)]));
        let out = merge_embedding_rows(&a, Some(&emb(&[&[9.0, 9.0]])), &emb(&[&[1.0, 3.0]]), &emb(&[&[3.0, 1.0]]), MergeMethod::Ties)
            .unwrap();
        assert_eq!(out.values, vec![2.0, 2.0]);
    }

    #[test]
    fn rule_two_single_model() {
        let a = align_vocab(&Vocab::default(), &vocab(&[("l", 0)]), &vocab(&[("r", 0)]));
        let out = merge_embedding_rows(&a, None, &emb(&[&[1.0, 2.0]]), &emb(&[&[5.0, 6.0]]), MergeMethod::Linear).unwrap();
        assert_eq!(out.shape, vec![2, 2]);
        assert_eq!(out.values, vec![1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn rule_one_and_linear_exception() {
        let v = vocab(&[("t", 0)]);
        let a = align_vocab(&v, &v, &v);
        let (pre, l, r) = (emb(&[&[7.0, 7.0]]), emb(&[&[1.0, 3.0]]), emb(&[&[3.0, 5.0]]));
        let ta = merge_embedding_rows(&a, Some(&pre), &l, &r, MergeMethod::TaskArithmetic).unwrap();
        assert_eq!(ta.values, vec![7.0, 7.0]);
        let lin = merge_embedding_rows(&a, Some(&pre), &l, &r, MergeMethod::Linear).unwrap();
        assert_eq!(lin.values, vec![2.0, 4.0]);
    }

    #[test]
    fn errors() {
        let v = vocab(&[("t", 3)]);
        let a = align_vocab(&Vocab::default(), &v, &v);
        let e = emb(&[&[1.0]]);
        assert!(matches!(
            merge_embedding_rows(&a, None, &e, &e, MergeMethod::Linear),
            Err(EmbedError::RowOutOfRange { row: 3, rows: 1, .. })
        ));
        assert!(matches!(
            merge_embedding_rows(&a, None, &e, &emb(&[&[1.0, 2.0]]), MergeMethod::Linear),
            Err(EmbedError::WidthMismatch(_))
        ));
        assert_eq!(
            merge_embedding_rows(&a, None, &e, &e, MergeMethod::Ties),
            Err(EmbedError::MissingPretrained(MergeMethod::Ties))
        );
    }
}
