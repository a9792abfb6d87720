//! Operation kinds and their parameter blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor4;

/// Candidate and structural operation kinds.
///
/// The seven candidate kinds are the search-space alphabet; gene value 0
/// means "edge absent" and has no kind. `StemConv` and `LinearHead` exist
/// only at the network boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpKind {
    MaxPool3,
    AvgPool3,
    Identity,
    SepConv3,
    SepConv5,
    DilConv3,
    DilConv5,
    StemConv,
    LinearHead,
}

/// Gene alphabet order; gene value g in 1..=7 maps to CANDIDATES[g-1].
pub const CANDIDATES: [OpKind; 7] = [
    OpKind::MaxPool3,
    OpKind::AvgPool3,
    OpKind::Identity,
    OpKind::SepConv3,
    OpKind::SepConv5,
    OpKind::DilConv3,
    OpKind::DilConv5,
];

impl OpKind {
    pub fn from_gene(gene: u8) -> Option<OpKind> {
        if (1..=7).contains(&gene) {
            Some(CANDIDATES[gene as usize - 1])
        } else {
            None
        }
    }

    pub fn kernel(self) -> usize {
        match self {
            OpKind::SepConv3 | OpKind::DilConv3 => 3,
            OpKind::SepConv5 | OpKind::DilConv5 => 5,
            OpKind::MaxPool3 | OpKind::AvgPool3 => 3,
            OpKind::StemConv => 3,
            OpKind::Identity | OpKind::LinearHead => 1,
        }
    }

    pub fn dilation(self) -> usize {
        match self {
            OpKind::DilConv3 | OpKind::DilConv5 => 2,
            _ => 1,
        }
    }

    pub fn is_candidate(self) -> bool {
        !matches!(self, OpKind::StemConv | OpKind::LinearHead)
    }

    pub fn has_weights(self) -> bool {
        matches!(
            self,
            OpKind::SepConv3
                | OpKind::SepConv5
                | OpKind::DilConv3
                | OpKind::DilConv5
                | OpKind::StemConv
                | OpKind::LinearHead
        )
    }
}

/// Per-operation parameter store: weight tensors plus same-shaped gradient
/// accumulators.
///
/// Tensor layout per kind:
/// - SepConv{3,5}: [dw1, pw1, gamma1, beta1, dw2, pw2, gamma2, beta2]
/// - DilConv{3,5}: [dw, pw, gamma, beta]
/// - StemConv:     [filter, gamma, beta]
/// - LinearHead:   [weight (classes, feat, 1, 1), bias (1, classes, 1, 1)]
/// - pools/identity: empty
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub kind: OpKind,
    pub tensors: Vec<Tensor4>,
    pub grads: Vec<Tensor4>,
}

impl ParamBlock {
    pub fn empty(kind: OpKind) -> Self {
        ParamBlock {
            kind,
            tensors: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn from_tensors(kind: OpKind, tensors: Vec<Tensor4>) -> Self {
        let grads = tensors.iter().map(|t| Tensor4::zeros(t.shape())).collect();
        ParamBlock {
            kind,
            tensors,
            grads,
        }
    }

    /// Build a candidate block operating at `channels` feature maps.
    pub fn candidate<R: Rng>(kind: OpKind, channels: usize, rng: &mut R) -> Self {
        match kind {
            OpKind::SepConv3 | OpKind::SepConv5 => {
                let k = kind.kernel();
                let mut ts = Vec::with_capacity(8);
                for _ in 0..2 {
                    ts.push(kaiming([channels, 1, k, k], rng));
                    ts.push(kaiming([channels, channels, 1, 1], rng));
                    ts.push(ones_vec(channels));
                    ts.push(zeros_vec(channels));
                }
                ParamBlock::from_tensors(kind, ts)
            }
            OpKind::DilConv3 | OpKind::DilConv5 => {
                let k = kind.kernel();
                let ts = vec![
                    kaiming([channels, 1, k, k], rng),
                    kaiming([channels, channels, 1, 1], rng),
                    ones_vec(channels),
                    zeros_vec(channels),
                ];
                ParamBlock::from_tensors(kind, ts)
            }
            OpKind::MaxPool3 | OpKind::AvgPool3 | OpKind::Identity => ParamBlock::empty(kind),
            _ => panic!("candidate() called with non-candidate kind {kind:?}"),
        }
    }

    pub fn stem<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let ts = vec![
            kaiming([out_channels, in_channels, 3, 3], rng),
            ones_vec(out_channels),
            zeros_vec(out_channels),
        ];
        ParamBlock::from_tensors(OpKind::StemConv, ts)
    }

    pub fn head<R: Rng>(features: usize, n_classes: usize, rng: &mut R) -> Self {
        let ts = vec![
            kaiming([n_classes, features, 1, 1], rng),
            Tensor4::zeros([1, n_classes, 1, 1]),
        ];
        ParamBlock::from_tensors(OpKind::LinearHead, ts)
    }

    /// Total weight count across tensors.
    pub fn weight_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Accumulate a detached gradient set into this block's accumulators.
    pub fn accumulate(&mut self, grads: &[Tensor4]) -> crate::error::Result<()> {
        if grads.len() != self.grads.len() {
            return Err(crate::error::Error::ShapeMismatch {
                op: "ParamBlock::accumulate",
                detail: format!(
                    "{:?}: {} grad tensors, block has {}",
                    self.kind,
                    grads.len(),
                    self.grads.len()
                ),
            });
        }
        for (acc, g) in self.grads.iter_mut().zip(grads) {
            acc.add_assign(g)?;
        }
        Ok(())
    }
}

/// Kaiming-uniform fan-in init: U(-b, b) with b = sqrt(6 / fan_in).
fn kaiming<R: Rng>(shape: [usize; 4], rng: &mut R) -> Tensor4 {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let mut t = Tensor4::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
    t
}

fn ones_vec(c: usize) -> Tensor4 {
    let mut t = Tensor4::zeros([1, c, 1, 1]);
    t.fill(1.0);
    t
}

fn zeros_vec(c: usize) -> Tensor4 {
    Tensor4::zeros([1, c, 1, 1])
}

/// Weight count of a candidate kind at a given channel width, without
/// materializing tensors. Must agree with `ParamBlock::candidate`.
pub fn candidate_weight_count(kind: OpKind, channels: usize) -> usize {
    let c = channels;
    match kind {
        OpKind::SepConv3 | OpKind::SepConv5 => {
            let k = kind.kernel();
            2 * (c * k * k + c * c + 2 * c)
        }
        OpKind::DilConv3 | OpKind::DilConv5 => {
            let k = kind.kernel();
            c * k * k + c * c + 2 * c
        }
        _ => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grad_shapes_match_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in CANDIDATES {
            let b = ParamBlock::candidate(kind, 6, &mut rng);
            assert_eq!(b.tensors.len(), b.grads.len());
            for (t, g) in b.tensors.iter().zip(&b.grads) {
                assert_eq!(t.shape(), g.shape());
            }
        }
    }

    #[test]
    fn weightless_kinds_carry_no_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for kind in [OpKind::MaxPool3, OpKind::AvgPool3, OpKind::Identity] {
            let b = ParamBlock::candidate(kind, 6, &mut rng);
            assert!(b.tensors.is_empty());
            assert_eq!(b.weight_count(), 0);
        }
    }

    #[test]
    fn closed_form_counts_match_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in CANDIDATES {
            let b = ParamBlock::candidate(kind, 5, &mut rng);
            assert_eq!(b.weight_count(), candidate_weight_count(kind, 5), "{kind:?}");
        }
    }

    #[test]
    fn gene_mapping_is_canonical() {
        assert_eq!(OpKind::from_gene(1), Some(OpKind::MaxPool3));
        assert_eq!(OpKind::from_gene(3), Some(OpKind::Identity));
        assert_eq!(OpKind::from_gene(7), Some(OpKind::DilConv5));
        assert_eq!(OpKind::from_gene(0), None);
        assert_eq!(OpKind::from_gene(8), None);
    }
}
