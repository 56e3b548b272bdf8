//! Cross-entropy restricted to each step's vocabulary slice.

use std::collections::BTreeMap;

use crate::autograd::{Graph, Var};
use crate::error::{Result, UliError};
use crate::model::{Forward, Model};
use crate::scalar::Scalar;
use crate::task::TaskSpec;
use crate::tensor::log_softmax;
use crate::vocab::{TokenId, Vocabulary};

/// Mean negative log-likelihood over supervised rows. `targets` index into
/// each row; unsupervised rows are never read.
pub fn masked_cross_entropy(logits: &[Vec<f64>], targets: &[usize], mask: &[bool]) -> Result<f64> {
    assert_eq!(logits.len(), targets.len());
    assert_eq!(logits.len(), mask.len());
    let mut total = 0.0;
    let mut n = 0usize;
    for (step, ((row, &t), _)) in logits.iter().zip(targets).zip(mask).enumerate().filter(|(_, (_, &m))| m) {
        if t >= row.len() {
            return Err(UliError::ScheduleViolation { step, token: t, expected: format!("slice of {}", row.len()) });
        }
        total -= log_softmax(row)[t];
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Summed slice cross-entropy of one forward pass and the number of
/// supervised positions. Positions sharing a slice are scored together.
pub fn sequence_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &Model<T>,
    fwd: &Forward,
    task: &TaskSpec,
    vocab: &Vocabulary<T>,
    targets: &[Vec<TokenId>],
    supervised: &[Vec<bool>],
) -> Result<Option<(Var, usize)>> {
    let mut groups: BTreeMap<(usize, usize), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (t, (toks, sup)) in targets.iter().zip(supervised).enumerate() {
        for (s, (&tok, _)) in toks.iter().zip(sup).enumerate().filter(|(_, (_, &m))| m) {
            let range = vocab.slice(task.schedule[s]);
            if !range.contains(&tok.0) {
                return Err(UliError::ScheduleViolation { step: s, token: tok.0, expected: format!("{range:?}") });
            }
            let e = groups.entry((range.start, range.end)).or_default();
            e.0.push(fwd.layout.prediction_position(t, s));
            e.1.push(tok.0 - range.start);
        }
    }
    let mut parts = Vec::new();
    let mut count = 0;
    for ((lo, hi), (pos, tgt)) in groups {
        let l = model.slice_logits(g, fwd, &pos, lo..hi)?;
        parts.push(g.cross_entropy_sum(l, &tgt));
        count += tgt.len();
    }
    if parts.is_empty() {
        return Ok(None);
    }
    Ok(Some((g.sum_scalars(&parts), count)))
}
