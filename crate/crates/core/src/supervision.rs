//! Pairwise supervision for a minibatch: one-hot seen types, the label
//! matrix, the both-unseen indicator and the dynamic margin mask.

use ndarray::{Array2, ArrayView2};

use crate::dataio::TypeTag;
use crate::error::{Error, Result};
use crate::linalg::sigmoid;

/// Label tensors for one batch of `n` rows over `c` seen types.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionTensors {
    /// `n x c` one-hot rows; unseen rows are all zero.
    pub one_hot: Array2<u8>,
    /// `n x n`, `(O Oᵀ) ∨ I`.
    pub labels: Array2<u8>,
    /// `n x n`, 1 where both rows are unseen (diagonal included).
    pub both_unseen: Array2<u8>,
}

impl SupervisionTensors {
    pub fn n(&self) -> usize {
        self.labels.nrows()
    }
}

/// Which pairs stay in the loss for the current logits.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginMask {
    pub mask: Array2<u8>,
    pub margin: f64,
}

impl MarginMask {
    pub fn active_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

pub fn build_labels(tags: &[TypeTag], seen_type_count: usize) -> Result<SupervisionTensors> {
    let n = tags.len();
    if n == 0 {
        return Err(Error::Contract("cannot build labels for an empty batch".into()));
    }
    let mut one_hot = Array2::<u8>::zeros((n, seen_type_count));
    for (i, tag) in tags.iter().enumerate() {
        if let TypeTag::Seen(t) = *tag {
            if t >= seen_type_count {
                return Err(Error::Data(format!(
                    "seen type id {t} is out of range for {seen_type_count} seen types"
                )));
            }
            one_hot[[i, t]] = 1;
        }
    }
    let labels = Array2::from_shape_fn((n, n), |(i, j)| {
        let same_seen = matches!((tags[i], tags[j]), (TypeTag::Seen(a), TypeTag::Seen(b)) if a == b);
        u8::from(i == j || same_seen)
    });
    let both_unseen =
        Array2::from_shape_fn((n, n), |(i, j)| u8::from(!tags[i].is_seen() && !tags[j].is_seen()));
    Ok(SupervisionTensors {
        one_hot,
        labels,
        both_unseen,
    })
}

/// `M = ¬[(¬p ∧ σ(logit) < m) ∨ u]`, with the diagonal kept active: a row
/// paired with itself is a positive even when unseen.
pub fn build_mask(
    tensors: &SupervisionTensors,
    logits: ArrayView2<'_, f64>,
    margin: f64,
) -> Result<MarginMask> {
    let n = tensors.n();
    if logits.dim() != (n, n) {
        return Err(Error::Contract(format!(
            "logits are {:?}, supervision is {n}x{n}",
            logits.dim()
        )));
    }
    if !(margin > 0.0 && margin < 1.0) {
        return Err(Error::Contract(format!("margin {margin} outside (0, 1)")));
    }
    let mask = Array2::from_shape_fn((n, n), |(i, j)| {
        let positive = tensors.labels[[i, j]] == 1;
        let unseen_pair = i != j && tensors.both_unseen[[i, j]] == 1;
        let separated = !positive && sigmoid(logits[[i, j]]) < margin;
        u8::from(!(separated || unseen_pair))
    });
    Ok(MarginMask { mask, margin })
}
