//! Classifier head: global average pooling, linear layer, softmax
//! cross-entropy.

use crate::error::{Error, Result};

use super::param::{OpKind, ParamBlock};
use super::tensor::Tensor4;

#[derive(Debug, Clone)]
pub struct HeadTrace {
    pooled: Vec<f64>, // (batch, features) row-major
    probs: Vec<f64>,  // (batch, classes) row-major
    labels: Vec<usize>,
    feat_shape: [usize; 4],
}

#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// (batch, classes) row-major logits.
    pub logits: Vec<f64>,
    pub loss: f64,
    pub trace: HeadTrace,
}

impl HeadOutput {
    /// Fraction of rows whose argmax logit equals the label.
    pub fn accuracy(&self) -> f64 {
        let n = self.trace.labels.len();
        let classes = self.logits.len() / n;
        let mut hits = 0;
        for (b, &label) in self.trace.labels.iter().enumerate() {
            let row = &self.logits[b * classes..(b + 1) * classes];
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            if best == label {
                hits += 1;
            }
        }
        hits as f64 / n as f64
    }
}

/// Pool features globally, apply the linear head, and score mean softmax
/// cross-entropy against `labels`.
pub fn head_forward(
    head: &ParamBlock,
    features: &Tensor4,
    labels: &[usize],
    n_classes: usize,
) -> Result<HeadOutput> {
    if head.kind != OpKind::LinearHead {
        return Err(Error::ShapeMismatch {
            op: "head_forward",
            detail: format!("expected LinearHead params, got {:?}", head.kind),
        });
    }
    if n_classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "n_classes must be >= 2, got {n_classes}"
        )));
    }
    let [b, c, h, w] = features.shape();
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "head_forward",
            detail: format!("{} labels for batch {}", labels.len(), b),
        });
    }
    for &l in labels {
        if l >= n_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                n_classes,
            });
        }
    }
    let weight = &head.tensors[0];
    let bias = &head.tensors[1];
    if weight.shape() != [n_classes, c, 1, 1] {
        return Err(Error::ShapeMismatch {
            op: "head_forward",
            detail: format!(
                "head weight {:?} vs features with {} channels, {} classes",
                weight.shape(),
                c,
                n_classes
            ),
        });
    }

    let inv_hw = 1.0 / (h * w) as f64;
    let mut pooled = vec![0.0; b * c];
    for bi in 0..b {
        for ci in 0..c {
            pooled[bi * c + ci] = features.plane(bi, ci).iter().sum::<f64>() * inv_hw;
        }
    }

    let mut logits = vec![0.0; b * n_classes];
    for bi in 0..b {
        for k in 0..n_classes {
            let mut s = bias.data()[k];
            for ci in 0..c {
                s += weight.at(k, ci, 0, 0) * pooled[bi * c + ci];
            }
            logits[bi * n_classes + k] = s;
        }
    }

    let mut probs = vec![0.0; b * n_classes];
    let mut loss = 0.0;
    for bi in 0..b {
        let row = &logits[bi * n_classes..(bi + 1) * n_classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (k, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            probs[bi * n_classes + k] = e;
            z += e;
        }
        for k in 0..n_classes {
            probs[bi * n_classes + k] /= z;
        }
        loss -= probs[bi * n_classes + labels[bi]].max(f64::MIN_POSITIVE).ln();
    }
    loss /= b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "head_forward",
            step: 0,
        });
    }

    Ok(HeadOutput {
        logits,
        loss,
        trace: HeadTrace {
            pooled,
            probs,
            labels: labels.to_vec(),
            feat_shape: [b, c, h, w],
        },
    })
}

/// Backward of the mean cross-entropy loss. Accumulates head gradients and
/// returns the gradient with respect to the feature map.
pub fn head_backward(head: &mut ParamBlock, trace: &HeadTrace) -> Result<Tensor4> {
    if head.kind != OpKind::LinearHead {
        return Err(Error::BackwardWithoutForward("head params mismatch"));
    }
    let [b, c, h, w] = trace.feat_shape;
    let n_classes = trace.probs.len() / b;
    let inv_b = 1.0 / b as f64;

    // d loss / d logits = (softmax - one_hot) / batch
    let mut dlogits = trace.probs.clone();
    for (bi, &label) in trace.labels.iter().enumerate() {
        dlogits[bi * n_classes + label] -= 1.0;
    }
    for v in &mut dlogits {
        *v *= inv_b;
    }

    let weight = head.tensors[0].clone();
    let (gw, gb) = head.grads.split_at_mut(1);
    let grad_w = &mut gw[0];
    let grad_b = &mut gb[0];
    let mut dpooled = vec![0.0; b * c];
    for bi in 0..b {
        for k in 0..n_classes {
            let dl = dlogits[bi * n_classes + k];
            grad_b.data_mut()[k] += dl;
            for ci in 0..c {
                *grad_w.at_mut(k, ci, 0, 0) += dl * trace.pooled[bi * c + ci];
                dpooled[bi * c + ci] += dl * weight.at(k, ci, 0, 0);
            }
        }
    }

    let inv_hw = 1.0 / (h * w) as f64;
    let mut gx = Tensor4::zeros([b, c, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            let g = dpooled[bi * c + ci] * inv_hw;
            gx.plane_mut(bi, ci).fill(g);
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_head(c: usize, n: usize) -> ParamBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut h = ParamBlock::head(c, n, &mut rng);
        h.tensors[0].fill(0.0);
        h.tensors[1].fill(0.0);
        h
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        let head = flat_head(3, 5);
        let feats = Tensor4::zeros([4, 3, 2, 2]);
        let out = head_forward(&head, &feats, &[0, 1, 2, 3], 5).unwrap();
        assert!((out.loss - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logit_drives_loss_to_zero() {
        let mut head = flat_head(1, 2);
        // weight maps the single pooled feature straight onto class 0
        *head.tensors[0].at_mut(0, 0, 0, 0) = 1.0;
        let mut feats = Tensor4::zeros([1, 1, 1, 1]);
        let mut last = f64::INFINITY;
        for mag in [1.0, 10.0, 100.0] {
            feats.data_mut()[0] = mag;
            let out = head_forward(&head, &feats, &[0], 2).unwrap();
            assert!(out.loss < last);
            last = out.loss;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn label_out_of_range_errors() {
        let head = flat_head(2, 3);
        let feats = Tensor4::zeros([1, 2, 1, 1]);
        assert!(head_forward(&head, &feats, &[3], 3).is_err());
    }

    #[test]
    fn n_classes_below_two_errors() {
        let head = flat_head(2, 1);
        let feats = Tensor4::zeros([1, 2, 1, 1]);
        assert!(head_forward(&head, &feats, &[0], 1).is_err());
    }

    #[test]
    fn logit_gradient_is_softmax_minus_onehot() {
        // Check via the head backward on 1x1 spatial features with an
        // identity-ish weight so dlogits maps straight through.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut head = ParamBlock::head(4, 4, &mut rng);
        head.tensors[0].fill(0.0);
        for k in 0..4 {
            *head.tensors[0].at_mut(k, k, 0, 0) = 1.0;
        }
        head.tensors[1].fill(0.0);
        let mut feats = Tensor4::zeros([1, 4, 1, 1]);
        for (i, v) in feats.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.3;
        }
        let out = head_forward(&head, &feats, &[2], 4).unwrap();
        let gx = head_backward(&mut head, &out.trace).unwrap();
        // logits == pooled features here, so dfeatures == softmax - onehot
        for k in 0..4 {
            let expect = out.trace.probs[k] - if k == 2 { 1.0 } else { 0.0 };
            assert!((gx.at(0, k, 0, 0) - expect).abs() < 1e-12);
        }
    }
}
