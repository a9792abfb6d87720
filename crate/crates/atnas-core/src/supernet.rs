//! Shared parameter store covering all candidate operations, the selection
//! operator, subnet materialization and checkpoint I/O.
//!
//! Every (cell, edge, candidate kind) triple owns exactly one [`ParamBlock`].
//! Selecting a genome exposes the blocks of its nonzero genes plus stem and
//! head without copying; training always happens on detached clones, and
//! gradients flow back through [`scatter_grads`].

use std::io::{Read, Write};

use rand::Rng;

use crate::archspace::{validate, ArchCode};
use crate::error::{Error, Result};
use crate::numkernel::cell::{cell_backward, cell_forward, CellTrace, NUM_EDGES};
use crate::numkernel::head::{head_backward, head_forward, HeadOutput};
use crate::numkernel::ops::{
    align_channels, align_channels_backward, op_backward, op_forward, spatial_subsample,
    spatial_subsample_backward, OpTrace,
};
use crate::numkernel::param::{OpKind, ParamBlock, CANDIDATES};
use crate::numkernel::tensor::Tensor4;

/// Channel bookkeeping: node width per cell, doubling after each reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelPlan {
    node_ch: Vec<usize>,
    reduce_positions: Vec<usize>,
    init_channels: usize,
}

impl ChannelPlan {
    pub fn new(cells: usize, channels: usize, reduce_positions: &[usize]) -> Self {
        let mut node_ch = Vec::with_capacity(cells);
        let mut ch = channels;
        for cell in 0..cells {
            if reduce_positions.contains(&cell) {
                ch *= 2;
            }
            node_ch.push(ch);
        }
        ChannelPlan {
            node_ch,
            reduce_positions: reduce_positions.to_vec(),
            init_channels: channels,
        }
    }

    pub fn node_channels(&self, cell: usize) -> usize {
        self.node_ch[cell]
    }

    /// Channel count entering the classifier head (4 concatenated nodes of
    /// the final cell).
    pub fn head_features(&self) -> usize {
        4 * *self.node_ch.last().expect("at least one cell")
    }

    /// Channel counts of the two tensors feeding `cell` (before alignment).
    fn input_channels(&self, cell: usize) -> (usize, usize) {
        let out_of = |i: usize| 4 * self.node_ch[i];
        match cell {
            0 => (self.init_channels, self.init_channels),
            1 => (self.init_channels, out_of(0)),
            i => (out_of(i - 2), out_of(i - 1)),
        }
    }

    /// Spatial stride aligning input 0 of `cell` with input 1 (2 when the
    /// previous cell reduced).
    fn input0_stride(&self, cell: usize) -> usize {
        if cell >= 1 && self.reduce_positions.contains(&(cell - 1)) {
            2
        } else {
            1
        }
    }
}

/// Stable identity of one shared block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockKey {
    Stem,
    Edge {
        cell: usize,
        edge: usize,
        kind_idx: usize,
    },
    Head,
}

/// Weight store shared by every subnet.
#[derive(Debug, Clone)]
pub struct SuperNet {
    pub cells: usize,
    pub channels: usize,
    pub in_channels: usize,
    pub n_classes: usize,
    pub reduce_positions: Vec<usize>,
    plan: ChannelPlan,
    stem: ParamBlock,
    /// cell_blocks[cell][edge][kind_idx]
    cell_blocks: Vec<Vec<Vec<ParamBlock>>>,
    head: ParamBlock,
    version: u64,
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ATSN";
pub const CHECKPOINT_VERSION: u32 = 1;

impl SuperNet {
    pub fn new<R: Rng>(
        cells: usize,
        channels: usize,
        in_channels: usize,
        n_classes: usize,
        reduce_positions: &[usize],
        rng: &mut R,
    ) -> Self {
        let plan = ChannelPlan::new(cells, channels, reduce_positions);
        let stem = ParamBlock::stem(in_channels, channels, rng);
        let mut cell_blocks = Vec::with_capacity(cells);
        for cell in 0..cells {
            let width = plan.node_channels(cell);
            let mut edges = Vec::with_capacity(NUM_EDGES);
            for _ in 0..NUM_EDGES {
                let kinds: Vec<ParamBlock> = CANDIDATES
                    .iter()
                    .map(|&k| ParamBlock::candidate(k, width, rng))
                    .collect();
                edges.push(kinds);
            }
            cell_blocks.push(edges);
        }
        let head = ParamBlock::head(plan.head_features(), n_classes, rng);
        SuperNet {
            cells,
            channels,
            in_channels,
            n_classes,
            reduce_positions: reduce_positions.to_vec(),
            plan,
            stem,
            cell_blocks,
            head,
            version: 0,
        }
    }

    pub fn plan(&self) -> &ChannelPlan {
        &self.plan
    }

    /// Monotone counter bumped on every mutation of shared state.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn total_candidate_blocks(&self) -> usize {
        self.cell_blocks
            .iter()
            .map(|c| c.iter().map(|e| e.len()).sum::<usize>())
            .sum()
    }

    pub fn block(&self, key: BlockKey) -> &ParamBlock {
        match key {
            BlockKey::Stem => &self.stem,
            BlockKey::Head => &self.head,
            BlockKey::Edge {
                cell,
                edge,
                kind_idx,
            } => &self.cell_blocks[cell][edge][kind_idx],
        }
    }

    fn block_mut(&mut self, key: BlockKey) -> &mut ParamBlock {
        self.version += 1;
        match key {
            BlockKey::Stem => &mut self.stem,
            BlockKey::Head => &mut self.head,
            BlockKey::Edge {
                cell,
                edge,
                kind_idx,
            } => &mut self.cell_blocks[cell][edge][kind_idx],
        }
    }

    /// Keys of every block in canonical order (stem, edges, head).
    pub fn all_keys(&self) -> Vec<BlockKey> {
        let mut keys = vec![BlockKey::Stem];
        for cell in 0..self.cells {
            for edge in 0..NUM_EDGES {
                for kind_idx in 0..CANDIDATES.len() {
                    keys.push(BlockKey::Edge {
                        cell,
                        edge,
                        kind_idx,
                    });
                }
            }
        }
        keys.push(BlockKey::Head);
        keys
    }

    fn check_code(&self, code: &ArchCode) -> Result<()> {
        if !validate(code) {
            return Err(Error::InvalidCode("code fails validation".into()));
        }
        if code.cells != self.cells || code.reduce_positions != self.reduce_positions {
            return Err(Error::InvalidCode(format!(
                "code geometry ({} cells, reduce {:?}) does not match net ({} cells, reduce {:?})",
                code.cells, code.reduce_positions, self.cells, self.reduce_positions
            )));
        }
        Ok(())
    }

    /// Apply an in-place update to one block's weights. Used by optimizers;
    /// bumps the version counter.
    pub fn update_block<F: FnOnce(&mut ParamBlock)>(&mut self, key: BlockKey, f: F) {
        f(self.block_mut(key));
    }

    pub fn zero_grads(&mut self) {
        self.version += 1;
        self.stem.zero_grads();
        for cell in &mut self.cell_blocks {
            for edge in cell {
                for b in edge {
                    b.zero_grads();
                }
            }
        }
        self.head.zero_grads();
    }

    /// Write the checkpoint: magic, version, (cells, channels, n_classes),
    /// then every block in canonical order as a length-prefixed f64 array.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [self.cells as u32, self.channels as u32, self.n_classes as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for key in self.all_keys() {
            let block = self.block(key);
            let len: usize = block.tensors.iter().map(|t| t.len()).sum();
            w.write_all(&(len as u32).to_le_bytes())?;
            for t in &block.tensors {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Read a checkpoint written by [`SuperNet::save`]. The in-channel count
    /// and reduction positions are run configuration, not checkpoint state,
    /// so the caller supplies them.
    pub fn load<R: Read>(
        mut r: R,
        in_channels: usize,
        reduce_positions: &[usize],
        path: &str,
    ) -> Result<SuperNet> {
        let fmt = |detail: String| Error::Format {
            path: path.to_string(),
            detail,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != CHECKPOINT_VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        let mut read_u32 = |r: &mut R| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let cells = read_u32(&mut r)? as usize;
        let channels = read_u32(&mut r)? as usize;
        let n_classes = read_u32(&mut r)? as usize;
        if cells == 0 || channels == 0 || n_classes < 2 {
            return Err(fmt(format!(
                "implausible geometry: {cells} cells, {channels} channels, {n_classes} classes"
            )));
        }
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = SuperNet::new(
            cells,
            channels,
            in_channels,
            n_classes,
            reduce_positions,
            &mut rng,
        );
        for key in net.all_keys() {
            let expect: usize = net.block(key).tensors.iter().map(|t| t.len()).sum();
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            let len = u32::from_le_bytes(b) as usize;
            if len != expect {
                return Err(fmt(format!(
                    "block {key:?} has {len} weights, geometry wants {expect}"
                )));
            }
            let block = net.block_mut(key);
            for t in &mut block.tensors {
                for v in t.data_mut() {
                    let mut fb = [0u8; 8];
                    r.read_exact(&mut fb)?;
                    *v = f64::from_le_bytes(fb);
                }
            }
        }
        net.version = 0;
        Ok(net)
    }

    /// Select the subnet a genome describes. No weights are copied; the
    /// view resolves the blocks of nonzero genes plus stem and head.
    pub fn select<'a>(&'a self, code: &'a ArchCode) -> Result<SubnetView<'a>> {
        self.check_code(code)?;
        Ok(SubnetView { net: self, code })
    }
}

/// Borrowed view of the blocks one genome selects.
#[derive(Debug, Clone, Copy)]
pub struct SubnetView<'a> {
    net: &'a SuperNet,
    code: &'a ArchCode,
}

impl<'a> SubnetView<'a> {
    pub fn code(&self) -> &ArchCode {
        self.code
    }

    /// Selected block keys in canonical order: stem, edge blocks by
    /// (cell, edge), head.
    pub fn keys(&self) -> Vec<BlockKey> {
        let mut keys = vec![BlockKey::Stem];
        for cell in 0..self.code.cells {
            for (edge, &gene) in self.code.cell_genes(cell).iter().enumerate() {
                if gene != 0 {
                    keys.push(BlockKey::Edge {
                        cell,
                        edge,
                        kind_idx: gene as usize - 1,
                    });
                }
            }
        }
        keys.push(BlockKey::Head);
        keys
    }

    pub fn block(&self, key: BlockKey) -> &'a ParamBlock {
        self.net.block(key)
    }

    /// Deep-copy the selected weights so inner-loop SGD cannot touch the
    /// shared store.
    pub fn clone_subnet_weights(&self) -> SubnetWeights {
        let mut cells = Vec::with_capacity(self.code.cells);
        for cell in 0..self.code.cells {
            let mut edges = Vec::new();
            for (edge, &gene) in self.code.cell_genes(cell).iter().enumerate() {
                if gene != 0 {
                    let key = BlockKey::Edge {
                        cell,
                        edge,
                        kind_idx: gene as usize - 1,
                    };
                    let mut block = self.net.block(key).clone();
                    block.zero_grads();
                    edges.push((edge, block));
                }
            }
            cells.push(edges);
        }
        let mut stem = self.net.stem.clone();
        stem.zero_grads();
        let mut head = self.net.head.clone();
        head.zero_grads();
        SubnetWeights {
            code: self.code.clone(),
            plan: self.net.plan.clone(),
            n_classes: self.net.n_classes,
            stem,
            cells,
            head,
        }
    }
}

/// Detached gradients keyed for scatter back into the shared store.
#[derive(Debug, Clone, Default)]
pub struct GradSet {
    pub entries: Vec<(BlockKey, Vec<Tensor4>)>,
}

impl GradSet {
    pub fn scale(&mut self, s: f64) {
        for (_, ts) in &mut self.entries {
            for t in ts {
                for v in t.data_mut() {
                    *v *= s;
                }
            }
        }
    }

    /// Merge another grad set into this one, summing overlapping keys.
    pub fn merge(&mut self, other: &GradSet) {
        for (key, ts) in &other.entries {
            if let Some((_, mine)) = self.entries.iter_mut().find(|(k, _)| k == key) {
                for (a, b) in mine.iter_mut().zip(ts) {
                    a.add_assign(b).expect("grad shapes agree");
                }
            } else {
                self.entries.push((*key, ts.clone()));
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let mut s = 0.0;
        for (_, ts) in &self.entries {
            for t in ts {
                for v in t.data() {
                    s += v * v;
                }
            }
        }
        s.sqrt()
    }
}

/// Add a detached gradient set into the shared accumulators of exactly the
/// blocks the code selects.
pub fn scatter_grads(net: &mut SuperNet, code: &ArchCode, grads: &GradSet) -> Result<()> {
    net.check_code(code)?;
    let selected = net.select(code)?.keys();
    for (key, _) in &grads.entries {
        if !selected.contains(key) {
            return Err(Error::ShapeMismatch {
                op: "scatter_grads",
                detail: format!("grad key {key:?} is not selected by the code"),
            });
        }
    }
    for (key, ts) in &grads.entries {
        net.block_mut(*key).accumulate(ts)?;
    }
    Ok(())
}

/// Concrete subnet with owned weights: the unit of inner-loop training,
/// evaluation and transfer.
#[derive(Debug, Clone)]
pub struct SubnetWeights {
    code: ArchCode,
    plan: ChannelPlan,
    n_classes: usize,
    stem: ParamBlock,
    /// Per cell: (edge index, owned block) for each nonzero gene.
    cells: Vec<Vec<(usize, ParamBlock)>>,
    head: ParamBlock,
}

/// Saved activations of one subnet forward pass.
pub struct NetTrace {
    stem: OpTrace,
    cells: Vec<CellTrace>,
    /// (pre-subsample shape, pre-align channels, stride) per cell input 0.
    align0: Vec<([usize; 4], usize, usize)>,
    align1: Vec<usize>,
    head: crate::numkernel::head::HeadTrace,
    cell_out_shapes: Vec<[usize; 4]>,
    stem_out_shape: [usize; 4],
}

impl NetTrace {
    /// Candidate op invocations of the forward pass (excludes stem/head).
    pub fn ops_invoked(&self) -> usize {
        self.cells.iter().map(|c| c.ops_invoked).sum()
    }
}

impl SubnetWeights {
    pub fn code(&self) -> &ArchCode {
        &self.code
    }

    pub fn weight_count(&self) -> usize {
        let mut n = self.stem.weight_count() + self.head.weight_count();
        for cell in &self.cells {
            for (_, b) in cell {
                n += b.weight_count();
            }
        }
        n
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut out: Vec<&mut ParamBlock> = vec![&mut self.stem];
        for cell in &mut self.cells {
            for (_, b) in cell {
                out.push(b);
            }
        }
        out.push(&mut self.head);
        out
    }

    /// Forward pass with loss against labels. Returns the head output and
    /// the trace consumed by [`SubnetWeights::backward`].
    pub fn forward(&self, x: &Tensor4, labels: &[usize]) -> Result<(HeadOutput, NetTrace)> {
        let (stem_out, stem_trace) = op_forward(OpKind::StemConv, &self.stem, x, 1)?;
        let stem_out_shape = stem_out.shape();
        let mut prev_prev = stem_out.clone();
        let mut prev = stem_out;
        let mut cell_traces = Vec::with_capacity(self.code.cells);
        let mut align0 = Vec::with_capacity(self.code.cells);
        let mut align1 = Vec::with_capacity(self.code.cells);
        let mut cell_out_shapes = Vec::with_capacity(self.code.cells);
        for cell in 0..self.code.cells {
            let width = self.plan.node_channels(cell);
            let stride0 = self.plan.input0_stride(cell);
            let pre_shape = prev_prev.shape();
            let sub = spatial_subsample(&prev_prev, stride0);
            let in0 = align_channels(&sub, width)?;
            let in1 = align_channels(&prev, width)?;
            align0.push((pre_shape, pre_shape[1], stride0));
            align1.push(prev.shape()[1]);
            let genes = self.code.cell_genes(cell);
            let blocks: Vec<(usize, &ParamBlock)> =
                self.cells[cell].iter().map(|(e, b)| (*e, b)).collect();
            let reduce = self.code.is_reduce(cell);
            let (out, trace) = cell_forward(&blocks, genes, &in0, &in1, reduce)?;
            cell_out_shapes.push(out.shape());
            cell_traces.push(trace);
            prev_prev = prev;
            prev = out;
        }
        let head_out = head_forward(&self.head, &prev, labels, self.n_classes)?;
        let head_trace = head_out.trace.clone();
        Ok((
            head_out,
            NetTrace {
                stem: stem_trace,
                cells: cell_traces,
                align0,
                align1,
                head: head_trace,
                cell_out_shapes,
                stem_out_shape,
            },
        ))
    }

    /// Backpropagate the loss whose forward produced `trace`. Gradients
    /// accumulate into this subnet's own blocks.
    pub fn backward(&mut self, trace: &NetTrace) -> Result<()> {
        let c = self.code.cells;
        // Gradient accumulator per producer: index 0 = stem, 1 + i = cell i.
        let mut slots: Vec<Option<Tensor4>> = vec![None; c + 1];
        let g_feat = head_backward(&mut self.head, &trace.head)?;
        add_tensor(&mut slots, c, g_feat);
        for cell in (0..c).rev() {
            let g_out = slots[cell + 1]
                .take()
                .unwrap_or_else(|| Tensor4::zeros(trace.cell_out_shapes[cell]));
            let mut blocks: Vec<(usize, &mut ParamBlock)> = self.cells[cell]
                .iter_mut()
                .map(|(e, b)| (*e, b))
                .collect();
            let (g_in0_aligned, g_in1_aligned) =
                cell_backward(&mut blocks, &trace.cells[cell], &g_out)?;
            let (pre_shape, pre_ch, stride0) = trace.align0[cell];
            let g_sub = align_channels_backward(pre_ch, &g_in0_aligned);
            let g_in0 = spatial_subsample_backward(pre_shape, &g_sub, stride0);
            let g_in1 = align_channels_backward(trace.align1[cell], &g_in1_aligned);
            // Producer slots: input 1 came from cell-1 (slot == cell, stem
            // when cell == 0); input 0 from cell-2 (stem when cell <= 1).
            let src1 = cell;
            let src0 = if cell >= 2 { cell - 1 } else { 0 };
            add_tensor(&mut slots, src1, g_in1);
            add_tensor(&mut slots, src0, g_in0);
        }
        let g_stem_out = slots[0]
            .take()
            .unwrap_or_else(|| Tensor4::zeros(trace.stem_out_shape));
        op_backward(OpKind::StemConv, &mut self.stem, &trace.stem, &g_stem_out)?;
        Ok(())
    }

    /// One SGD step on every weight tensor; gradient accumulators are
    /// zeroed afterwards.
    pub fn sgd_step(&mut self, lr: f64) {
        for block in self.blocks_mut() {
            for (t, g) in block.tensors.iter_mut().zip(&block.grads) {
                for (w, gv) in t.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * gv;
                }
            }
            block.zero_grads();
        }
    }

    /// Detach accumulated gradients into a keyed set and zero the local
    /// accumulators.
    pub fn take_grads(&mut self) -> GradSet {
        let mut entries = Vec::new();
        entries.push((BlockKey::Stem, take_block_grads(&mut self.stem)));
        for (cell_idx, cell) in self.cells.iter_mut().enumerate() {
            for (edge, block) in cell {
                let key = BlockKey::Edge {
                    cell: cell_idx,
                    edge: *edge,
                    kind_idx: kind_index(block.kind),
                };
                entries.push((key, take_block_grads(block)));
            }
        }
        entries.push((BlockKey::Head, take_block_grads(&mut self.head)));
        GradSet { entries }
    }

    /// Re-randomize every weight tensor in place, preserving shapes. Used
    /// for random-init baselines.
    pub fn reinitialize<R: Rng>(&mut self, rng: &mut R) {
        for block in self.blocks_mut() {
            let kind = block.kind;
            for (i, t) in block.tensors.iter_mut().enumerate() {
                reinit_tensor(kind, i, t, rng);
            }
            block.zero_grads();
        }
    }
}

fn reinit_tensor<R: Rng>(kind: OpKind, slot: usize, t: &mut Tensor4, rng: &mut R) {
    let shape = t.shape();
    let is_norm_scale = match kind {
        OpKind::SepConv3 | OpKind::SepConv5 => slot == 2 || slot == 6,
        OpKind::DilConv3 | OpKind::DilConv5 => slot == 2,
        OpKind::StemConv => slot == 1,
        _ => false,
    };
    let is_norm_shift = match kind {
        OpKind::SepConv3 | OpKind::SepConv5 => slot == 3 || slot == 7,
        OpKind::DilConv3 | OpKind::DilConv5 => slot == 3,
        OpKind::StemConv => slot == 2,
        _ => false,
    };
    let is_bias = kind == OpKind::LinearHead && slot == 1;
    if is_norm_scale {
        t.fill(1.0);
    } else if is_norm_shift || is_bias {
        t.fill(0.0);
    } else {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let bound = (6.0 / fan_in).sqrt();
        for v in t.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    }
}

fn kind_index(kind: OpKind) -> usize {
    CANDIDATES
        .iter()
        .position(|&k| k == kind)
        .expect("candidate kind")
}

fn take_block_grads(block: &mut ParamBlock) -> Vec<Tensor4> {
    let out = block.grads.clone();
    block.zero_grads();
    out
}

fn add_tensor(slots: &mut [Option<Tensor4>], idx: usize, t: Tensor4) {
    match &mut slots[idx] {
        Some(acc) => acc.add_assign(&t).expect("slot shapes agree"),
        slot => *slot = Some(t),
    }
}
