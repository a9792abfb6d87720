//! Cell topology: 2 input nodes, 4 intermediate nodes, 14 candidate edges.
//!
//! Each intermediate node sums the outputs of its selected incoming edges;
//! the cell output concatenates the four intermediate node outputs along
//! channels. In a reduction cell, edges leaving the two input nodes run at
//! stride 2.

use crate::error::{Error, Result};

use super::ops::{op_backward, op_forward, OpTrace};
use super::param::{OpKind, ParamBlock};
use super::tensor::Tensor4;

pub const NUM_EDGES: usize = 14;
pub const NUM_NODES: usize = 4;
/// Gene offset of each node group within a cell's 14-gene slice.
pub const GROUP_OFFSETS: [usize; 4] = [0, 2, 5, 9];
/// Number of candidate edges per node group.
pub const GROUP_SIZES: [usize; 4] = [2, 3, 4, 5];

/// Intermediate node an edge feeds into.
pub fn edge_node(edge: usize) -> usize {
    match edge {
        0..=1 => 0,
        2..=4 => 1,
        5..=8 => 2,
        _ => 3,
    }
}

/// Source feeding an edge: 0/1 are the cell inputs, 2 + k is intermediate
/// node k.
pub fn edge_source(edge: usize) -> usize {
    edge - GROUP_OFFSETS[edge_node(edge)]
}

/// Saved state of one cell forward pass.
#[derive(Debug)]
pub struct CellTrace {
    edges: Vec<(usize, OpTrace)>,
    node_shapes: [[usize; 4]; NUM_NODES],
    in_shapes: [[usize; 4]; 2],
    /// Number of candidate op invocations; equals the nonzero gene count.
    pub ops_invoked: usize,
}

/// Run one cell forward. `edge_blocks` holds exactly the selected edges in
/// ascending edge order; `genes` is the cell's 14-gene slice.
pub fn cell_forward(
    edge_blocks: &[(usize, &ParamBlock)],
    genes: &[u8],
    input0: &Tensor4,
    input1: &Tensor4,
    reduce: bool,
) -> Result<(Tensor4, CellTrace)> {
    check_edges(edge_blocks, genes)?;
    let mut nodes: Vec<Option<Tensor4>> = vec![None; NUM_NODES];
    let mut traces = Vec::with_capacity(edge_blocks.len());
    for &(edge, block) in edge_blocks {
        let node = edge_node(edge);
        let source = edge_source(edge);
        let stride = if reduce && source < 2 { 2 } else { 1 };
        let src = match source {
            0 => input0,
            1 => input1,
            s => nodes[s - 2].as_ref().ok_or_else(|| {
                Error::InvalidCode(format!("edge {edge} reads unset node {}", s - 2))
            })?,
        };
        let (out, trace) = op_forward(block.kind, block, src, stride)?;
        traces.push((edge, trace));
        match &mut nodes[node] {
            Some(acc) => acc.add_assign(&out)?,
            slot => *slot = Some(out),
        }
    }
    let mut node_shapes = [[0; 4]; NUM_NODES];
    let mut parts: Vec<&Tensor4> = Vec::with_capacity(NUM_NODES);
    for (i, n) in nodes.iter().enumerate() {
        let t = n
            .as_ref()
            .ok_or_else(|| Error::InvalidCode(format!("node {i} has no selected edges")))?;
        node_shapes[i] = t.shape();
        parts.push(t);
    }
    let out = Tensor4::concat_channels(&parts)?;
    Ok((
        out,
        CellTrace {
            ops_invoked: traces.len(),
            edges: traces,
            node_shapes,
            in_shapes: [input0.shape(), input1.shape()],
        },
    ))
}

/// Backward through a cell. `edge_blocks` must be the same selection the
/// forward ran with; gradients accumulate into each block. Returns the
/// gradients for the two cell inputs.
pub fn cell_backward(
    edge_blocks: &mut [(usize, &mut ParamBlock)],
    trace: &CellTrace,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Tensor4)> {
    let channel_counts: Vec<usize> = trace.node_shapes.iter().map(|s| s[1]).collect();
    let node_grad_parts = grad_out.split_channels(&channel_counts);
    let mut node_grads: Vec<Tensor4> = node_grad_parts;
    let mut in_grads = [
        Tensor4::zeros(trace.in_shapes[0]),
        Tensor4::zeros(trace.in_shapes[1]),
    ];
    // Reverse topological order: later edges consume earlier nodes.
    for (slot, &mut (edge, ref mut block)) in edge_blocks.iter_mut().enumerate().rev() {
        let (trace_edge, op_trace) = &trace.edges[slot];
        if *trace_edge != edge {
            return Err(Error::BackwardWithoutForward("cell trace edge mismatch"));
        }
        let node = edge_node(edge);
        let source = edge_source(edge);
        let g_node = node_grads[node].clone();
        let g_in = op_backward(block.kind, block, op_trace, &g_node)?;
        match source {
            0 => in_grads[0].add_assign(&g_in)?,
            1 => in_grads[1].add_assign(&g_in)?,
            s => node_grads[s - 2].add_assign(&g_in)?,
        }
    }
    let [g0, g1] = in_grads;
    Ok((g0, g1))
}

fn check_edges(edge_blocks: &[(usize, &ParamBlock)], genes: &[u8]) -> Result<()> {
    if genes.len() != NUM_EDGES {
        return Err(Error::InvalidCode(format!(
            "cell gene slice has {} entries, want {NUM_EDGES}",
            genes.len()
        )));
    }
    let selected: Vec<usize> = genes
        .iter()
        .enumerate()
        .filter(|(_, &g)| g != 0)
        .map(|(i, _)| i)
        .collect();
    if selected.len() != edge_blocks.len()
        || !selected
            .iter()
            .zip(edge_blocks)
            .all(|(&e, &(be, _))| e == be)
    {
        return Err(Error::InvalidCode(
            "edge blocks do not match nonzero genes".into(),
        ));
    }
    for &(edge, block) in edge_blocks {
        let kind = OpKind::from_gene(genes[edge])
            .ok_or_else(|| Error::InvalidCode(format!("gene {} invalid", genes[edge])))?;
        if block.kind != kind {
            return Err(Error::InvalidCode(format!(
                "edge {edge} gene says {kind:?}, block is {:?}",
                block.kind
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_cell_genes() -> Vec<u8> {
        // Identity (gene 3) on the first two edges of every group.
        let mut g = vec![0u8; NUM_EDGES];
        for off in GROUP_OFFSETS {
            g[off] = 3;
            g[off + 1] = 3;
        }
        g
    }

    fn blocks_for(genes: &[u8], channels: usize, seed: u64) -> Vec<(usize, ParamBlock)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        genes
            .iter()
            .enumerate()
            .filter(|(_, &g)| g != 0)
            .map(|(e, &g)| {
                let kind = OpKind::from_gene(g).unwrap();
                (e, ParamBlock::candidate(kind, channels, &mut rng))
            })
            .collect()
    }

    fn rand_t(shape: [usize; 4], seed: u64) -> Tensor4 {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor4::zeros(shape);
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn node0_of_identity_edges_sums_inputs() {
        let genes = identity_cell_genes();
        let owned = blocks_for(&genes, 3, 0);
        let blocks: Vec<(usize, &ParamBlock)> = owned.iter().map(|(e, b)| (*e, b)).collect();
        let a = rand_t([2, 3, 4, 4], 1);
        let b = rand_t([2, 3, 4, 4], 2);
        let (out, _) = cell_forward(&blocks, &genes, &a, &b, false).unwrap();
        // Node 0 occupies the first 3 output channels.
        for bi in 0..2 {
            for ci in 0..3 {
                for i in 0..16 {
                    let want = a.plane(bi, ci)[i] + b.plane(bi, ci)[i];
                    assert!((out.plane(bi, ci)[i] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn output_channels_are_four_times_node_channels() {
        let genes = identity_cell_genes();
        let owned = blocks_for(&genes, 5, 0);
        let blocks: Vec<(usize, &ParamBlock)> = owned.iter().map(|(e, b)| (*e, b)).collect();
        let a = rand_t([1, 5, 4, 4], 3);
        let b = rand_t([1, 5, 4, 4], 4);
        let (out, _) = cell_forward(&blocks, &genes, &a, &b, false).unwrap();
        assert_eq!(out.channels(), 20);
    }

    #[test]
    fn ops_invoked_equals_nonzero_gene_count() {
        let genes = identity_cell_genes();
        let owned = blocks_for(&genes, 2, 0);
        let blocks: Vec<(usize, &ParamBlock)> = owned.iter().map(|(e, b)| (*e, b)).collect();
        let a = rand_t([1, 2, 4, 4], 5);
        let b = rand_t([1, 2, 4, 4], 6);
        let (_, trace) = cell_forward(&blocks, &genes, &a, &b, false).unwrap();
        assert_eq!(trace.ops_invoked, 8);
    }

    #[test]
    fn reduce_cell_halves_spatial_dims() {
        let genes = identity_cell_genes();
        let owned = blocks_for(&genes, 2, 0);
        let blocks: Vec<(usize, &ParamBlock)> = owned.iter().map(|(e, b)| (*e, b)).collect();
        let a = rand_t([1, 2, 8, 8], 7);
        let b = rand_t([1, 2, 8, 8], 8);
        let (out, _) = cell_forward(&blocks, &genes, &a, &b, true).unwrap();
        assert_eq!(out.shape(), [1, 8, 4, 4]);
    }

    #[test]
    fn mismatched_blocks_are_rejected() {
        let genes = identity_cell_genes();
        let mut wrong = genes.clone();
        wrong[0] = 1; // MaxPool gene, but we pass identity blocks
        let owned = blocks_for(&genes, 2, 0);
        let blocks: Vec<(usize, &ParamBlock)> = owned.iter().map(|(e, b)| (*e, b)).collect();
        let a = rand_t([1, 2, 4, 4], 9);
        let b = rand_t([1, 2, 4, 4], 10);
        assert!(cell_forward(&blocks, &wrong, &a, &b, false).is_err());
    }
}
