//! Masked semi-supervised contrastive loss and the auxiliary cosine loss.
//!
//! The contrastive term is binary cross-entropy between `σ(Q̂ K̂ᵀ/√d)` and the
//! label matrix, restricted to unmasked pairs and averaged over them. With an
//! augmented batch the four pairings `{Q, Q'} x {K, K'}` are summed, each with
//! its own mask computed from its own logits. Masks are constants for
//! differentiation.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::clusterer::{BatchForward, Upstream};
use crate::dataio::{NameCorpus, TypeTag};
use crate::error::{Error, Result};
use crate::linalg::{bce_with_logit, norm, sigmoid};
use crate::supervision::{build_mask, MarginMask, SupervisionTensors};

/// Mean BCE over unmasked entries and its gradient with respect to the logits.
pub fn contrastive_loss(
    logits: ArrayView2<'_, f64>,
    tensors: &SupervisionTensors,
    mask: &MarginMask,
) -> Result<(f64, Array2<f64>)> {
    let n = tensors.n();
    if logits.dim() != (n, n) || mask.mask.dim() != (n, n) {
        return Err(Error::Contract(format!(
            "logits {:?} / mask {:?} do not match supervision {n}x{n}",
            logits.dim(),
            mask.mask.dim()
        )));
    }
    let active = mask.active_count();
    if active == 0 {
        return Err(Error::DegenerateBatch);
    }
    let denom = active as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if mask.mask[[i, j]] == 0 {
                continue;
            }
            let l = logits[[i, j]];
            let y = f64::from(tensors.labels[[i, j]]);
            value += bce_with_logit(l, y);
            grad[[i, j]] = (sigmoid(l) - y) / denom;
        }
    }
    Ok((value / denom, grad))
}

/// Which projections a contrastive term pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TermPair {
    #[serde(rename = "q_k")]
    QK,
    #[serde(rename = "q_kaug")]
    QKAug,
    #[serde(rename = "qaug_k")]
    QAugK,
    #[serde(rename = "qaug_kaug")]
    QAugKAug,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveTerm {
    pub pair: TermPair,
    pub value: f64,
    pub active_pairs: usize,
}

/// Per-step loss values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub terms: Vec<ContrastiveTerm>,
    pub l_a: f64,
    pub active_pair_count: usize,
    pub total: f64,
}

/// Contrastive part of a step: values and gradients routed to both forwards.
#[derive(Clone, Debug)]
pub struct ContrastiveOutcome {
    pub l_c: f64,
    pub terms: Vec<ContrastiveTerm>,
    pub active_pair_count: usize,
    pub upstream: Upstream,
    pub upstream_aug: Option<Upstream>,
}

/// `L_c = Σ L_m(Q̂, K̂)` over `{Q, Q'} x {K, K'}`; only `L_m(Q, K)` without an
/// augmented forward.
pub fn combined_contrastive(
    fwd: &BatchForward,
    fwd_aug: Option<&BatchForward>,
    tensors: &SupervisionTensors,
    margin: f64,
) -> Result<ContrastiveOutcome> {
    let (n, d) = fwd.q.dim();
    let scale = (d as f64).sqrt();
    let mut upstream = Upstream::zeros(n, d);
    let mut terms = Vec::with_capacity(4);
    let mut active_total = 0;

    let mut run = |pair: TermPair, logits: ArrayView2<'_, f64>| -> Result<Array2<f64>> {
        let mask = build_mask(tensors, logits, margin)?;
        let (value, grad) = contrastive_loss(logits, tensors, &mask)?;
        let active_pairs = mask.active_count();
        active_total += active_pairs;
        terms.push(ContrastiveTerm {
            pair,
            value,
            active_pairs,
        });
        Ok(grad)
    };

    let g = run(TermPair::QK, fwd.logits.view())?;
    upstream.logits += &g;

    let upstream_aug = match fwd_aug {
        None => {
            log::debug!("no augmented batch; contrastive loss uses the (Q, K) term only");
            None
        }
        Some(aug) => {
            if aug.q.dim() != (n, d) {
                return Err(Error::Contract("augmented batch is not row-aligned".into()));
            }
            let mut up_aug = Upstream::zeros(n, d);

            let l = fwd.q.dot(&aug.k.t()) / scale;
            let g = run(TermPair::QKAug, l.view())?;
            upstream.q += &(g.dot(&aug.k) / scale);
            up_aug.k += &(g.t().dot(&fwd.q) / scale);

            let l = aug.q.dot(&fwd.k.t()) / scale;
            let g = run(TermPair::QAugK, l.view())?;
            up_aug.q += &(g.dot(&fwd.k) / scale);
            upstream.k += &(g.t().dot(&aug.q) / scale);

            let g = run(TermPair::QAugKAug, aug.logits.view())?;
            up_aug.logits += &g;
            Some(up_aug)
        }
    };

    Ok(ContrastiveOutcome {
        l_c: terms.iter().map(|t| t.value).sum(),
        terms,
        active_pair_count: active_total,
        upstream,
        upstream_aug,
    })
}

/// Target embedding for each seen type id.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxTargets {
    targets: Array2<f64>,
}

impl AuxTargets {
    /// Resolves every seen type name against the corpus.
    pub fn from_corpus(corpus: &NameCorpus, seen_type_names: &[String]) -> Result<Self> {
        let mut targets = Array2::zeros((seen_type_names.len(), corpus.dim()));
        for (id, name) in seen_type_names.iter().enumerate() {
            let emb = corpus
                .embedding(name)
                .ok_or_else(|| Error::Data(format!("seen type {name:?} is missing from the name corpus")))?;
            if norm(emb) == 0.0 {
                return Err(Error::Data(format!("name embedding for {name:?} has zero norm")));
            }
            targets.row_mut(id).assign(&emb);
        }
        Ok(Self { targets })
    }

    pub fn target(&self, seen_id: usize) -> Option<ArrayView1<'_, f64>> {
        (seen_id < self.targets.nrows()).then(|| self.targets.row(seen_id))
    }
}

/// Mean over seen rows of `1 - cos(aux_i, B_{t_i})`; unseen rows contribute
/// nothing.
pub fn auxiliary_loss(
    aux_out: ArrayView2<'_, f64>,
    targets: &AuxTargets,
    tags: &[TypeTag],
) -> Result<(f64, Array2<f64>)> {
    if aux_out.nrows() != tags.len() {
        return Err(Error::Contract(format!(
            "{} aux rows for {} tags",
            aux_out.nrows(),
            tags.len()
        )));
    }
    let mut grad = Array2::zeros(aux_out.raw_dim());
    let seen = tags.iter().filter(|t| t.is_seen()).count();
    if seen == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / seen as f64;
    let mut value = 0.0;
    for (i, (a, tag)) in aux_out.axis_iter(Axis(0)).zip(tags).enumerate() {
        let TypeTag::Seen(t) = *tag else { continue };
        let b = targets
            .target(t)
            .ok_or_else(|| Error::Data(format!("no auxiliary target for seen type {t}")))?;
        if b.len() != a.len() {
            return Err(Error::Contract("aux width differs from name embedding width".into()));
        }
        let na = norm(a);
        if na == 0.0 {
            return Err(Error::numerics("aux_head", format!("row {i} has zero norm")));
        }
        let nb = norm(b);
        let cos = a.dot(&b) / (na * nb);
        value += (1.0 - cos) * inv;
        // d(1 - cos)/da = -(b / (|a||b|) - cos · a / |a|²)
        let mut g = grad.row_mut(i);
        g.assign(&(&a * (cos / (na * na)) - &b / (na * nb)));
        g.mapv_inplace(|v| v * inv);
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clusterer::{forward, init_params, ClustererConfig};
    use crate::dataio::{rng_for, CorpusKind};
    use crate::supervision::build_labels;
    use ndarray::{array, Array1};
    use rand::Rng;
    use rand_distr::StandardNormal;
    use TypeTag::{Seen, Unseen};

    fn randn(seed: u64, r: usize, c: usize) -> Array2<f64> {
        let mut rng = rng_for(seed, 5);
        Array2::from_shape_fn((r, c), |_| rng.sample(StandardNormal))
    }

    fn random_tags(seed: u64, n: usize) -> Vec<TypeTag> {
        let mut rng = rng_for(seed, 6);
        (0..n)
            .map(|_| match rng.random_range(0..4) {
                3 => Unseen,
                t => Seen(t),
            })
            .collect()
    }

    #[test]
    fn perfectly_separated_is_near_zero() {
        let tags = [Seen(0), Seen(0), Seen(1)];
        let s = build_labels(&tags, 2).unwrap();
        let logits = s.labels.mapv(|y| if y == 1 { 40.0 } else { -40.0 });
        // keep every entry active with a tiny margin
        let m = build_mask(&s, logits.view(), 1e-30).unwrap();
        assert_eq!(m.active_count(), 9);
        let (v, _) = contrastive_loss(logits.view(), &s, &m).unwrap();
        assert!(v < 1e-15);
    }

    #[test]
    fn single_active_positive_at_zero_logit() {
        let s = build_labels(&[Unseen], 1).unwrap();
        let logits = array![[0.0]];
        let m = build_mask(&s, logits.view(), 0.5).unwrap();
        let (v, g) = contrastive_loss(logits.view(), &s, &m).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g[[0, 0]] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn all_masked_is_degenerate() {
        let s = build_labels(&[Unseen, Unseen], 1).unwrap();
        let m = MarginMask {
            mask: Array2::zeros((2, 2)),
            margin: 0.5,
        };
        assert!(matches!(
            contrastive_loss(Array2::zeros((2, 2)).view(), &s, &m),
            Err(Error::DegenerateBatch)
        ));
    }

    // Scalar oracle: plain loops, naive log form of BCE.
    fn oracle(logits: &Array2<f64>, y: &Array2<u8>, m: &Array2<u8>) -> f64 {
        let mut total = 0.0;
        let mut count = 0.0;
        for i in 0..logits.nrows() {
            for j in 0..logits.ncols() {
                if m[[i, j]] == 1 {
                    let p = 1.0 / (1.0 + (-logits[[i, j]]).exp());
                    let t = f64::from(y[[i, j]]);
                    total += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
                    count += 1.0;
                }
            }
        }
        total / count
    }

    #[test]
    fn matches_scalar_oracle_on_random_instances() {
        for seed in 0..20 {
            let tags = random_tags(seed, 6);
            let s = build_labels(&tags, 3).unwrap();
            let logits = randn(seed, 6, 6) * 2.0;
            let m = build_mask(&s, logits.view(), 0.5).unwrap();
            let (v, _) = contrastive_loss(logits.view(), &s, &m).unwrap();
            assert!((v - oracle(&logits, &s.labels, &m.mask)).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_with_frozen_mask() {
        for seed in 0..10 {
            let tags = random_tags(seed + 50, 5);
            let s = build_labels(&tags, 3).unwrap();
            let logits = randn(seed + 50, 5, 5);
            let m = build_mask(&s, logits.view(), 0.5).unwrap();
            let (_, g) = contrastive_loss(logits.view(), &s, &m).unwrap();
            let eps = 1e-6;
            for i in 0..5 {
                for j in 0..5 {
                    let mut p = logits.clone();
                    p[[i, j]] += eps;
                    let mut q = logits.clone();
                    q[[i, j]] -= eps;
                    let fd = (contrastive_loss(p.view(), &s, &m).unwrap().0
                        - contrastive_loss(q.view(), &s, &m).unwrap().0)
                        / (2.0 * eps);
                    let tol = 1e-6 * fd.abs().max(g[[i, j]].abs()).max(1e-3);
                    assert!((fd - g[[i, j]]).abs() <= tol);
                    if m.mask[[i, j]] == 0 {
                        assert_eq!(g[[i, j]], 0.0);
                    }
                }
            }
        }
    }

    fn setup(seed: u64, n: usize, d: usize) -> (crate::clusterer::ClustererParams, Array2<f64>, Vec<TypeTag>) {
        let p = init_params(seed, ClustererConfig::new(d, 0.0)).unwrap();
        (p, randn(seed + 1, n, d) * 3.0, random_tags(seed + 2, n))
    }

    #[test]
    fn identical_augmentation_quadruples() {
        let (p, x, tags) = setup(3, 8, 6);
        let s = build_labels(&tags, 3).unwrap();
        let f = forward(&p, x.view(), false, 0).unwrap();
        let f2 = forward(&p, x.view(), false, 0).unwrap();
        let out = combined_contrastive(&f, Some(&f2), &s, 0.5).unwrap();
        let single = combined_contrastive(&f, None, &s, 0.5).unwrap();
        assert_eq!(out.terms.len(), 4);
        for t in &out.terms {
            assert!((t.value - single.l_c).abs() < 1e-12);
        }
        assert!((out.l_c - 4.0 * single.l_c).abs() < 1e-12);
        assert_eq!(single.terms.len(), 1);
    }

    #[test]
    fn terms_decompose_into_single_losses() {
        let (p, x, tags) = setup(4, 8, 6);
        let xa = &x + &(randn(99, 8, 6) * 0.3);
        let s = build_labels(&tags, 3).unwrap();
        let f = forward(&p, x.view(), false, 0).unwrap();
        let fa = forward(&p, xa.view(), false, 0).unwrap();
        let out = combined_contrastive(&f, Some(&fa), &s, 0.5).unwrap();
        let scale = (6f64).sqrt();
        let pairs = [
            (&f.q, &f.k),
            (&f.q, &fa.k),
            (&fa.q, &f.k),
            (&fa.q, &fa.k),
        ];
        for (term, (q, k)) in out.terms.iter().zip(pairs) {
            let l = q.dot(&k.t()) / scale;
            let m = build_mask(&s, l.view(), 0.5).unwrap();
            let (v, _) = contrastive_loss(l.view(), &s, &m).unwrap();
            assert!((term.value - v).abs() < 1e-12);
        }
        assert!((out.l_c - out.terms.iter().map(|t| t.value).sum::<f64>()).abs() < 1e-15);
        assert!(out.active_pair_count <= 4 * 64);
    }

    fn corpus(rows: Array2<f64>) -> (NameCorpus, Vec<String>) {
        let names: Vec<String> = (0..rows.nrows()).map(|i| format!("t{i}")).collect();
        (
            NameCorpus::new(names.clone(), rows, CorpusKind::TypeNames).unwrap(),
            names,
        )
    }

    #[test]
    fn aux_loss_alignment_cases() {
        let b = randn(7, 2, 4);
        let (c, names) = corpus(b.clone());
        let t = AuxTargets::from_corpus(&c, &names).unwrap();
        let tags = [Seen(0), Seen(1), Unseen];
        let mut aux = Array2::zeros((3, 4));
        aux.row_mut(0).assign(&b.row(0));
        aux.row_mut(1).assign(&b.row(1));
        aux.row_mut(2).assign(&Array1::from_elem(4, 9.0));
        let (v, g) = auxiliary_loss(aux.view(), &t, &tags).unwrap();
        assert!(v.abs() < 1e-12);
        assert!(g.row(2).iter().all(|&x| x == 0.0));

        let neg = aux.mapv(|v| -v);
        let (v, _) = auxiliary_loss(neg.view(), &t, &tags).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn aux_gradient_is_scale_free_and_matches_fd() {
        let b = randn(8, 3, 5);
        let (c, names) = corpus(b.clone());
        let t = AuxTargets::from_corpus(&c, &names).unwrap();
        let tags = [Seen(0), Seen(2), Unseen, Seen(1)];
        let aux = randn(9, 4, 5);
        let (v, g) = auxiliary_loss(aux.view(), &t, &tags).unwrap();
        for i in 0..4 {
            assert!(g.row(i).dot(&aux.row(i)).abs() < 1e-12, "gradient orthogonal to row");
        }
        let mut scaled = aux.clone();
        scaled.row_mut(1).mapv_inplace(|x| x * 3.7);
        assert!((auxiliary_loss(scaled.view(), &t, &tags).unwrap().0 - v).abs() < 1e-12);
        let eps = 1e-6;
        for i in 0..4 {
            for j in 0..5 {
                let mut p = aux.clone();
                p[[i, j]] += eps;
                let mut m = aux.clone();
                m[[i, j]] -= eps;
                let fd = (auxiliary_loss(p.view(), &t, &tags).unwrap().0
                    - auxiliary_loss(m.view(), &t, &tags).unwrap().0)
                    / (2.0 * eps);
                assert!((fd - g[[i, j]]).abs() < 1e-8);
            }
        }
        // positive multiple of the target: zero loss, zero gradient along it
        let mut aligned = aux.clone();
        aligned.row_mut(0).assign(&(&b.row(0) * 2.5));
        let (_, g) = auxiliary_loss(aligned.view(), &t, &tags).unwrap();
        assert!(g.row(0).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn aux_zero_row_is_numerics_error() {
        let (c, names) = corpus(randn(1, 1, 3));
        let t = AuxTargets::from_corpus(&c, &names).unwrap();
        let r = auxiliary_loss(Array2::zeros((1, 3)).view(), &t, &[Seen(0)]);
        assert!(matches!(r, Err(Error::Numerics { .. })));
    }

    #[test]
    fn missing_name_is_data_error() {
        let (c, _) = corpus(randn(1, 1, 3));
        assert!(matches!(
            AuxTargets::from_corpus(&c, &["absent".to_string()]),
            Err(Error::Data(_))
        ));
    }
}
