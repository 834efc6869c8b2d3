use pirt_tensor::{cst, Real, Tape, Var};

use crate::error::{PirtError, Result};

/// Stabilizes square roots of zero in normalization and distances.
pub const DIST_EPS: f64 = 1e-12;

/// Mean over the batch of `-log softmax(logits)[label]`. `logits` is `[B, K]`.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = match *tape.shape(logits) {
        [b, k] => (b, k),
        ref s => return Err(PirtError::Contract(format!("logits must be [batch, classes], got {s:?}"))),
    };
    if k < 2 {
        return Err(PirtError::Contract(format!("cross entropy needs at least 2 classes, got {k}")));
    }
    if labels.len() != b {
        return Err(PirtError::Contract(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(PirtError::Contract(format!("label {bad} out of range for {k} classes")));
    }
    let ls = tape.log_softmax(logits, 1)?;
    let flat: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| i * k + l).collect();
    let picked = tape.take(ls, &flat)?;
    let mean = tape.mean_all(picked);
    Ok(tape.neg(mean))
}

/// Rows scaled to unit Euclidean norm. `x` is `[B, C]`.
pub fn l2_normalize<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let sq = tape.square(x);
    let norm = tape.sum(sq, 1, true)?;
    let norm = tape.add_scalar(norm, cst(DIST_EPS));
    let norm = tape.sqrt(norm);
    Ok(tape.div(x, norm)?)
}

/// Pairwise Euclidean distances `[B, B]` between rows of `x`.
pub fn pairwise_distances<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (b, c) = (tape.shape(x)[0], tape.shape(x)[1]);
    let rows = tape.reshape(x, &[b, 1, c])?;
    let cols = tape.reshape(x, &[1, b, c])?;
    let diff = tape.sub(rows, cols)?;
    let sq = tape.square(diff);
    let d2 = tape.sum(sq, 2, false)?;
    let d2 = tape.add_scalar(d2, cst(DIST_EPS));
    Ok(tape.sqrt(d2))
}

/// For each anchor, the farthest positive and nearest negative.
pub fn mine_hard_pairs(distances: &[f64], labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let b = labels.len();
    (0..b)
        .map(|a| {
            let row = &distances[a * b..(a + 1) * b];
            let pos = (0..b)
                .filter(|&j| j != a && labels[j] == labels[a])
                .max_by(|&i, &j| row[i].total_cmp(&row[j]).then(j.cmp(&i)));
            let neg = (0..b)
                .filter(|&j| labels[j] != labels[a])
                .min_by(|&i, &j| row[i].total_cmp(&row[j]).then(i.cmp(&j)));
            match (pos, neg) {
                (Some(p), Some(n)) => Ok((p, n)),
                (None, _) => Err(PirtError::Contract(format!(
                    "triplet anchor {a} (identity {}) has no positive in the batch",
                    labels[a]
                ))),
                (_, None) => Err(PirtError::Contract("triplet batch holds a single identity".into())),
            }
        })
        .collect()
}

/// Batch-hard triplet loss on L2-normalized rows of `emb` (`[B, C]`).
pub fn hard_triplet<T: Real>(tape: &mut Tape<T>, emb: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let b = match *tape.shape(emb) {
        [b, _] => b,
        ref s => return Err(PirtError::Contract(format!("embeddings must be [batch, dim], got {s:?}"))),
    };
    if labels.len() != b {
        return Err(PirtError::Contract(format!("{} labels for a batch of {b}", labels.len())));
    }
    let unit = l2_normalize(tape, emb)?;
    let dist = pairwise_distances(tape, unit)?;
    let host: Vec<f64> = tape.value(dist).data().iter().map(|v| v.to_f64().unwrap()).collect();
    let pairs = mine_hard_pairs(&host, labels)?;
    let pos: Vec<usize> = pairs.iter().enumerate().map(|(a, &(p, _))| a * b + p).collect();
    let neg: Vec<usize> = pairs.iter().enumerate().map(|(a, &(_, n))| a * b + n).collect();
    let dp = tape.take(dist, &pos)?;
    let dn = tape.take(dist, &neg)?;
    let gap = tape.sub(dp, dn)?;
    let gap = tape.add_scalar(gap, cst(margin));
    let hinge = tape.relu(gap);
    Ok(tape.mean_all(hinge))
}

#[cfg(test)]
mod tests {
    use super::*;
    use pirt_tensor::Tensor;

    #[test]
    fn uniform_logits_cost_log_k() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 7]));
        let l = cross_entropy(&mut tape, x, &[0, 3, 6]).unwrap();
        assert!((tape.value(l).item() - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_logits_cost_nothing() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 3], &[0.0, 60.0, 0.0]).unwrap());
        let l = cross_entropy(&mut tape, x, &[1]).unwrap();
        assert!(tape.value(l).item() < 1e-20);
    }

    #[test]
    fn label_out_of_range_is_a_contract_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(cross_entropy(&mut tape, x, &[3]), Err(PirtError::Contract(_))));
    }

    #[test]
    fn identical_embeddings_cost_the_margin() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[4, 3], |i| [0.3, -1.0, 2.0][i % 3]));
        let l = hard_triplet(&mut tape, x, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((tape.value(l).item() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn separated_identities_cost_nothing() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[4, 2], &[1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 5.0]).unwrap());
        let l = hard_triplet(&mut tape, x, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn degenerate_batches_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[3, 2], |i| i as f64));
        assert!(matches!(hard_triplet(&mut tape, x, &[4, 4, 4], 0.3), Err(PirtError::Contract(_))));
        assert!(matches!(hard_triplet(&mut tape, x, &[4, 4, 5], 0.3), Err(PirtError::Contract(_))));
    }
}
