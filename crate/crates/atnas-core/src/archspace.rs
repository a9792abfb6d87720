//! Architecture genome: integer string of length 14 x cells, constraint
//! validation, sampling, and genetic operators.
//!
//! Gene alphabet: 0 = edge absent, 1..=7 = candidate op (see
//! [`crate::numkernel::CANDIDATES`]). Within every cell the four node
//! groups sit at offsets (0, 2, 5, 9) with sizes (2, 3, 4, 5), and each
//! group carries exactly two nonzero genes.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::cell::{GROUP_OFFSETS, GROUP_SIZES, NUM_EDGES};
use crate::numkernel::{candidate_weight_count, OpKind};

/// Genome of a stacked-cell network.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchCode {
    pub genes: Vec<u8>,
    pub cells: usize,
    /// Sorted indices of reduction cells.
    pub reduce_positions: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ArchCodeWire {
    cells: usize,
    reduce: Vec<usize>,
    genes: Vec<u8>,
}

/// Reduction-cell placement when the caller does not choose one: cell 1
/// for two-cell networks, cells at c/3 and 2c/3 for deeper stacks.
pub fn default_reduce_positions(cells: usize) -> Vec<usize> {
    match cells {
        0 | 1 => Vec::new(),
        2 => vec![1],
        c => {
            let mut v = vec![c / 3, 2 * c / 3];
            v.dedup();
            v
        }
    }
}

impl ArchCode {
    /// Gene slice of one cell.
    pub fn cell_genes(&self, cell: usize) -> &[u8] {
        &self.genes[cell * NUM_EDGES..(cell + 1) * NUM_EDGES]
    }

    pub fn is_reduce(&self, cell: usize) -> bool {
        self.reduce_positions.contains(&cell)
    }

    /// Count of nonzero genes (selected edges).
    pub fn selected_edges(&self) -> usize {
        self.genes.iter().filter(|&&g| g != 0).count()
    }

    /// Group slice bounds in cell-major, node-major order.
    pub fn group_bounds(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.cells).flat_map(|cell| {
            (0..4).map(move |g| {
                let start = cell * NUM_EDGES + GROUP_OFFSETS[g];
                (start, start + GROUP_SIZES[g])
            })
        })
    }
}

/// True iff all structural invariants hold.
pub fn validate(code: &ArchCode) -> bool {
    if code.genes.len() != NUM_EDGES * code.cells || code.cells == 0 {
        return false;
    }
    if code
        .reduce_positions
        .iter()
        .any(|&r| r >= code.cells)
    {
        return false;
    }
    if code.reduce_positions.windows(2).any(|w| w[0] >= w[1]) {
        return false;
    }
    if code.genes.iter().any(|&g| g > 7) {
        return false;
    }
    for (start, end) in code.group_bounds() {
        let nonzero = code.genes[start..end].iter().filter(|&&g| g != 0).count();
        if nonzero != 2 {
            return false;
        }
    }
    true
}

fn sample_group<R: Rng + ?Sized>(slice: &mut [u8], rng: &mut R) {
    slice.fill(0);
    let picks = sample(rng, slice.len(), 2);
    for p in picks {
        slice[p] = rng.gen_range(1..=7);
    }
}

/// Uniform valid genome: each group selects two distinct edges and random
/// op values.
pub fn random_code<R: Rng + ?Sized>(
    cells: usize,
    reduce_positions: &[usize],
    rng: &mut R,
) -> Result<ArchCode> {
    if cells == 0 {
        return Err(Error::InvalidArgument("cells must be >= 1".into()));
    }
    let mut code = ArchCode {
        genes: vec![0; NUM_EDGES * cells],
        cells,
        reduce_positions: reduce_positions.to_vec(),
    };
    let bounds: Vec<(usize, usize)> = code.group_bounds().collect();
    for (start, end) in bounds {
        sample_group(&mut code.genes[start..end], rng);
    }
    debug_assert!(validate(&code));
    Ok(code)
}

/// Group-wise uniform crossover: each node group comes wholesale from
/// parent `b` with probability `p_c`, otherwise from parent `a`.
pub fn crossover<R: Rng + ?Sized>(
    a: &ArchCode,
    b: &ArchCode,
    p_c: f64,
    rng: &mut R,
) -> Result<ArchCode> {
    if a.cells != b.cells || a.reduce_positions != b.reduce_positions {
        return Err(Error::ShapeMismatch {
            op: "crossover",
            detail: format!(
                "parents disagree: {} vs {} cells, reduce {:?} vs {:?}",
                a.cells, b.cells, a.reduce_positions, b.reduce_positions
            ),
        });
    }
    let mut child = a.clone();
    let bounds: Vec<(usize, usize)> = a.group_bounds().collect();
    for (start, end) in bounds {
        if rng.gen::<f64>() < p_c {
            child.genes[start..end].copy_from_slice(&b.genes[start..end]);
        }
    }
    Ok(child)
}

/// Group-wise mutation: each node group is independently resampled (new
/// edge pair and new op values) with probability `p_m`.
pub fn mutate<R: Rng + ?Sized>(a: &ArchCode, p_m: f64, rng: &mut R) -> ArchCode {
    let mut out = a.clone();
    let bounds: Vec<(usize, usize)> = a.group_bounds().collect();
    for (start, end) in bounds {
        if rng.gen::<f64>() < p_m {
            sample_group(&mut out.genes[start..end], rng);
        }
    }
    out
}

/// Exact weight count of the subnet this genome selects, including stem
/// and head. Candidate pools and identity edges are weightless.
pub fn param_count(
    code: &ArchCode,
    channels: usize,
    in_channels: usize,
    n_classes: usize,
) -> usize {
    let plan = crate::supernet::ChannelPlan::new(code.cells, channels, &code.reduce_positions);
    let stem = channels * in_channels * 9 + 2 * channels;
    let head = n_classes * plan.head_features() + n_classes;
    let mut total = stem + head;
    for cell in 0..code.cells {
        let width = plan.node_channels(cell);
        for (edge, &g) in code.cell_genes(cell).iter().enumerate() {
            let _ = edge;
            if let Some(kind) = OpKind::from_gene(g) {
                total += candidate_weight_count(kind, width);
            }
        }
    }
    total
}

/// Genome JSON: `{"cells": c, "reduce": [...], "genes": [...]}`.
pub fn serialize(code: &ArchCode) -> String {
    serde_json::to_string(&ArchCodeWire {
        cells: code.cells,
        reduce: code.reduce_positions.clone(),
        genes: code.genes.clone(),
    })
    .expect("genome serialization cannot fail")
}

pub fn deserialize(text: &str) -> Result<ArchCode> {
    let wire: ArchCodeWire = serde_json::from_str(text)?;
    let code = ArchCode {
        genes: wire.genes,
        cells: wire.cells,
        reduce_positions: wire.reduce,
    };
    if !validate(&code) {
        return Err(Error::InvalidCode(format!(
            "deserialized genome fails validation ({} genes, {} cells)",
            code.genes.len(),
            code.cells
        )));
    }
    Ok(code)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn all_zero_genome_is_invalid() {
        let code = ArchCode {
            genes: vec![0; 28],
            cells: 2,
            reduce_positions: vec![1],
        };
        assert!(!validate(&code));
    }

    #[test]
    fn length_mismatch_is_invalid() {
        let code = ArchCode {
            genes: vec![0; 27],
            cells: 2,
            reduce_positions: vec![1],
        };
        assert!(!validate(&code));
    }

    #[test]
    fn random_codes_validate_and_have_right_length() {
        let mut r = rng(0);
        for _ in 0..1000 {
            let c = random_code(2, &[1], &mut r).unwrap();
            assert_eq!(c.genes.len(), 28);
            assert!(validate(&c));
        }
    }

    #[test]
    fn random_code_is_deterministic_under_seed() {
        let a = random_code(3, &[1], &mut rng(99)).unwrap();
        let b = random_code(3, &[1], &mut rng(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_cells_is_an_error() {
        assert!(random_code(0, &[], &mut rng(0)).is_err());
    }

    #[test]
    fn crossover_identical_parents_returns_parent() {
        let mut r = rng(1);
        let a = random_code(2, &[1], &mut r).unwrap();
        let child = crossover(&a, &a, 0.5, &mut r).unwrap();
        assert_eq!(child, a);
    }

    #[test]
    fn crossover_boundary_probabilities() {
        let mut r = rng(2);
        let a = random_code(2, &[1], &mut r).unwrap();
        let b = random_code(2, &[1], &mut r).unwrap();
        assert_eq!(crossover(&a, &b, 0.0, &mut r).unwrap(), a);
        assert_eq!(crossover(&a, &b, 1.0, &mut r).unwrap(), b);
    }

    #[test]
    fn crossover_children_take_each_group_from_one_parent() {
        let mut r = rng(3);
        for _ in 0..1000 {
            let a = random_code(2, &[1], &mut r).unwrap();
            let b = random_code(2, &[1], &mut r).unwrap();
            let child = crossover(&a, &b, 0.5, &mut r).unwrap();
            assert!(validate(&child));
            for (start, end) in child.group_bounds() {
                let g = &child.genes[start..end];
                assert!(
                    g == &a.genes[start..end] || g == &b.genes[start..end],
                    "group {start}..{end} matches neither parent"
                );
            }
        }
    }

    #[test]
    fn crossover_shape_mismatch_errors() {
        let mut r = rng(4);
        let a = random_code(2, &[1], &mut r).unwrap();
        let b = random_code(3, &[1], &mut r).unwrap();
        assert!(crossover(&a, &b, 0.5, &mut r).is_err());
    }

    #[test]
    fn mutate_zero_probability_is_identity() {
        let mut r = rng(5);
        let a = random_code(2, &[1], &mut r).unwrap();
        assert_eq!(mutate(&a, 0.0, &mut r), a);
    }

    #[test]
    fn mutate_full_probability_still_validates() {
        let mut r = rng(6);
        for _ in 0..1000 {
            let a = random_code(2, &[1], &mut r).unwrap();
            assert!(validate(&mutate(&a, 1.0, &mut r)));
        }
    }

    #[test]
    fn mutated_group_fraction_tracks_p_m() {
        let mut r = rng(7);
        let trials = 10_000;
        let mut changed = 0usize;
        let mut total = 0usize;
        for _ in 0..trials {
            let a = random_code(2, &[1], &mut r).unwrap();
            let m = mutate(&a, 0.1, &mut r);
            for (start, end) in a.group_bounds() {
                total += 1;
                if a.genes[start..end] != m.genes[start..end] {
                    changed += 1;
                }
            }
        }
        let frac = changed as f64 / total as f64;
        assert!((frac - 0.1).abs() <= 0.01, "mutated fraction {frac}");
    }

    #[test]
    fn param_count_weightless_code_is_stem_plus_head() {
        // Identity and pool genes only.
        let mut code = random_code(2, &[1], &mut rng(8)).unwrap();
        for g in code.genes.iter_mut() {
            if *g != 0 {
                *g = 1 + (*g % 3); // MaxPool3, AvgPool3 or Identity
            }
        }
        assert!(validate(&code));
        let channels = 8;
        let n_classes = 5;
        let stem = channels * 1 * 9 + 2 * channels;
        let plan = crate::supernet::ChannelPlan::new(2, channels, &[1]);
        let head = n_classes * plan.head_features() + n_classes;
        assert_eq!(param_count(&code, channels, 1, n_classes), stem + head);
    }

    #[test]
    fn adding_one_sepconv_edge_adds_exactly_its_block_size() {
        let mut code = random_code(2, &[1], &mut rng(9)).unwrap();
        for g in code.genes.iter_mut() {
            if *g != 0 {
                *g = 3;
            }
        }
        let base = param_count(&code, 8, 1, 5);
        // Flip one selected gene in cell 0 to SepConv3.
        let pos = code.genes.iter().position(|&g| g == 3).unwrap();
        code.genes[pos] = 4;
        let bumped = param_count(&code, 8, 1, 5);
        assert_eq!(
            bumped - base,
            candidate_weight_count(OpKind::SepConv3, 8),
            "delta should equal one separable block"
        );
    }

    #[test]
    fn param_count_is_monotone_in_conv_ops() {
        let mut r = rng(10);
        for _ in 0..100 {
            let code = random_code(2, &[1], &mut r).unwrap();
            let mut heavier = code.clone();
            for g in heavier.genes.iter_mut() {
                if *g != 0 && *g <= 3 {
                    *g = 4; // replace weightless edges with SepConv3
                }
            }
            assert!(
                param_count(&heavier, 8, 1, 5) >= param_count(&code, 8, 1, 5),
                "superset of conv ops should not shrink"
            );
        }
    }

    #[test]
    fn serde_round_trip_is_identity() {
        let mut r = rng(11);
        for _ in 0..1000 {
            let code = random_code(2, &[1], &mut r).unwrap();
            let text = serialize(&code);
            assert_eq!(deserialize(&text).unwrap(), code);
        }
    }

    #[test]
    fn bad_gene_length_fails_to_parse() {
        let text = r#"{"cells": 2, "reduce": [1], "genes": [3, 3]}"#;
        assert!(deserialize(text).is_err());
    }

    #[test]
    fn empty_document_fails_to_parse() {
        assert!(deserialize("").is_err());
    }

    #[test]
    fn default_reduce_positions_follow_depth() {
        assert_eq!(default_reduce_positions(1), Vec::<usize>::new());
        assert_eq!(default_reduce_positions(2), vec![1]);
        assert_eq!(default_reduce_positions(6), vec![2, 4]);
    }
}
