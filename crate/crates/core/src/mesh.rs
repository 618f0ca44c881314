//! Distributed regular Cartesian grid: per-sub-domain node blocks with
//! ghost frames, multi-index access, ghost-node exchange, stencil sweeps,
//! and redistribution after decomposition changes.
//!
//! Node `i` on axis `d` sits at `low[d] + i * spacing[d]` with
//! `spacing = extent / nodes` (vertex-centered, periodic-consistent). Every
//! global node is owned by exactly one rank; ghost frames replicate
//! neighbor-owned nodes bitwise, including between same-rank blocks.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::decomp::Decomposition;
use crate::error::{usage, Error, Result};
use crate::exec;
use crate::geometry::{Bc, GridKey};
use crate::schema::{read_f64, read_i64, read_u64, Column, PropertySchema};
use crate::transport::World;

/// Half-open integer box in global node coordinates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct IntBox {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
}

impl IntBox {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn volume(&self) -> usize {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| (h - l).max(0) as usize)
            .product()
    }

    pub fn intersect(&self, other: &IntBox) -> Option<IntBox> {
        let mut lo = Vec::with_capacity(self.dim());
        let mut hi = Vec::with_capacity(self.dim());
        for d in 0..self.dim() {
            let l = self.lo[d].max(other.lo[d]);
            let h = self.hi[d].min(other.hi[d]);
            if l >= h {
                return None;
            }
            lo.push(l);
            hi.push(h);
        }
        Some(IntBox { lo, hi })
    }

    pub fn shifted(&self, s: &[i64]) -> IntBox {
        IntBox {
            lo: self.lo.iter().zip(s).map(|(a, b)| a + b).collect(),
            hi: self.hi.iter().zip(s).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn contains_key(&self, k: &[i64]) -> bool {
        (0..self.dim()).all(|d| self.lo[d] <= k[d] && k[d] < self.hi[d])
    }

    /// Visit all keys row-major (last axis fastest).
    pub fn for_each_key(&self, mut f: impl FnMut(&[i64])) {
        if self.volume() == 0 {
            return;
        }
        let mut key = self.lo.clone();
        loop {
            f(&key);
            let mut advanced = false;
            for d in (0..self.dim()).rev() {
                key[d] += 1;
                if key[d] < self.hi[d] {
                    advanced = true;
                    break;
                }
                key[d] = self.lo[d];
            }
            if !advanced {
                return;
            }
        }
    }
}

/// One dense node block: a sub-domain's owned nodes plus a ghost frame.
pub struct Block {
    /// Global node key of the owned low corner.
    pub origin: Vec<i64>,
    /// Owned node extents.
    pub ext: Vec<usize>,
    /// Frame width per axis.
    frame: Vec<usize>,
    padded_strides: Vec<usize>,
    cols: Vec<Column>,
}

impl Block {
    fn new(origin: Vec<i64>, ext: Vec<usize>, frame: Vec<usize>, schema: &PropertySchema, dim: usize) -> Block {
        let padded: Vec<usize> = ext.iter().zip(&frame).map(|(e, g)| e + 2 * g).collect();
        let mut strides = vec![1usize; padded.len()];
        for d in (0..padded.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * padded[d + 1];
        }
        let padded_volume: usize = padded.iter().product();
        let cols: Vec<Column> = schema
            .props()
            .iter()
            .map(|p| {
                let mut c = Column::new_for(p, dim);
                c.push_zero(padded_volume);
                c
            })
            .collect();
        Block { origin, ext, frame, padded_strides: strides, cols }
    }

    pub(crate) fn owned_box(&self) -> IntBox {
        IntBox {
            lo: self.origin.clone(),
            hi: self.origin.iter().zip(&self.ext).map(|(o, e)| o + *e as i64).collect(),
        }
    }

    fn extended_box(&self) -> IntBox {
        IntBox {
            lo: self.origin.iter().zip(&self.frame).map(|(o, g)| o - *g as i64).collect(),
            hi: self
                .origin
                .iter()
                .zip(&self.ext)
                .zip(&self.frame)
                .map(|((o, e), g)| o + *e as i64 + *g as i64)
                .collect(),
        }
    }

    /// Padded linear index of a global key inside the extended box; pairs
    /// with [`Block::col`] for direct storage access.
    pub fn linear_of(&self, key: &[i64]) -> usize {
        self.linear(key)
    }

    /// Padded linear index of a global key known to be inside the
    /// extended box.
    fn linear(&self, key: &[i64]) -> usize {
        let mut idx = 0;
        for d in 0..key.len() {
            let l = key[d] - self.origin[d] + self.frame[d] as i64;
            debug_assert!(l >= 0 && (l as usize) < self.ext[d] + 2 * self.frame[d]);
            idx += l as usize * self.padded_strides[d];
        }
        idx
    }

    pub fn col(&self, prop: usize) -> &Column {
        &self.cols[prop]
    }

    pub fn col_mut(&mut self, prop: usize) -> &mut Column {
        &mut self.cols[prop]
    }
}

/// Ghost-exchange transfer: one rectangular piece, sender's owned region to
/// receiver's frame region (shifted by a periodic image offset).
#[derive(Clone, Debug)]
struct Transfer {
    src_rank: usize,
    src_block: usize,
    /// Global coords inside the sender's owned region.
    src_box: IntBox,
    dst_rank: usize,
    dst_block: usize,
    /// Global coords in the receiver's (possibly shifted) frame.
    dst_box: IntBox,
}

pub struct DistributedGrid {
    dim: usize,
    rank: usize,
    nodes: Vec<usize>,
    spacing: Vec<f64>,
    schema: PropertySchema,
    decomp: Arc<Decomposition>,
    blocks: Vec<Block>,
    transfers: Vec<Transfer>,
}

impl DistributedGrid {
    /// Allocate a zero-initialized grid of `nodes` per axis over the
    /// decomposition's domain. Node counts must be divisible by the
    /// sub-sub-grid cell counts so node ownership follows cell ownership.
    pub fn new(
        nodes: &[usize],
        schema: PropertySchema,
        decomp: Arc<Decomposition>,
        rank: usize,
    ) -> Result<DistributedGrid> {
        let dim = decomp.domain().dim();
        if nodes.len() != dim {
            return Err(usage("node counts must match the domain dimension"));
        }
        for p in schema.props() {
            if p.is_var_list() {
                return Err(usage(format!(
                    "grids support fixed-width properties only; '{}' is a var list",
                    p.name
                )));
            }
        }
        let cells = decomp.grid().cells_per_axis();
        for d in 0..dim {
            if nodes[d] == 0 || nodes[d] % cells[d] != 0 {
                return Err(usage(format!(
                    "node count {} on axis {d} must be divisible by the {} sub-sub-domain cells",
                    nodes[d], cells[d]
                )));
            }
        }
        let spacing: Vec<f64> =
            (0..dim).map(|d| decomp.domain().extent(d) / nodes[d] as f64).collect();
        let frame: Vec<usize> = (0..dim)
            .map(|d| (decomp.ghost().width / spacing[d]).ceil() as usize)
            .collect();
        let npc: Vec<usize> = (0..dim).map(|d| nodes[d] / cells[d]).collect();

        let node_box = |sd: &crate::decomp::SubDomain| -> IntBox {
            let lo = (0..dim).map(|d| (sd.cell_lo[d] * npc[d]) as i64).collect();
            let hi = (0..dim).map(|d| ((sd.cell_hi[d] + 1) * npc[d]) as i64).collect();
            IntBox { lo, hi }
        };

        let blocks: Vec<Block> = decomp
            .subdomains(rank)
            .iter()
            .map(|sd| {
                let nb = node_box(sd);
                let ext = (0..dim).map(|d| (nb.hi[d] - nb.lo[d]) as usize).collect();
                Block::new(nb.lo.clone(), ext, frame.clone(), &schema, dim)
            })
            .collect();

        // Ghost-exchange plan, replicated deterministically: intersect every
        // extended block with every (periodic image of every) owned block.
        let shifts = node_shifts(nodes, decomp.bc());
        let mut transfers = Vec::new();
        for dst_rank in 0..decomp.nranks() {
            for (dst_block, sd) in decomp.subdomains(dst_rank).iter().enumerate() {
                let nb = node_box(sd);
                let ext_box = IntBox {
                    lo: (0..dim).map(|d| nb.lo[d] - frame[d] as i64).collect(),
                    hi: (0..dim).map(|d| nb.hi[d] + frame[d] as i64).collect(),
                };
                for src_rank in 0..decomp.nranks() {
                    for (src_block, sd2) in decomp.subdomains(src_rank).iter().enumerate() {
                        let owned = node_box(sd2);
                        for s in &shifts {
                            let unshifted = s.iter().all(|&v| v == 0);
                            if unshifted && src_rank == dst_rank && src_block == dst_block {
                                continue;
                            }
                            if let Some(i) = ext_box.intersect(&owned.shifted(s)) {
                                let neg: Vec<i64> = s.iter().map(|v| -v).collect();
                                transfers.push(Transfer {
                                    src_rank,
                                    src_block,
                                    src_box: i.shifted(&neg),
                                    dst_rank,
                                    dst_block,
                                    dst_box: i,
                                });
                            }
                        }
                    }
                }
            }
        }

        Ok(DistributedGrid {
            dim,
            rank,
            nodes: nodes.to_vec(),
            spacing,
            schema,
            decomp,
            blocks,
            transfers,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes_per_axis(&self) -> &[usize] {
        &self.nodes
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn schema(&self) -> &PropertySchema {
        &self.schema
    }

    pub fn decomposition(&self) -> &Arc<Decomposition> {
        &self.decomp
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [Block] {
        &mut self.blocks
    }

    pub fn frame_nodes(&self, d: usize) -> usize {
        self.blocks.first().map(|b| b.frame[d]).unwrap_or(0)
    }

    pub fn owned_node_count(&self) -> usize {
        self.blocks.iter().map(|b| b.ext.iter().product::<usize>()).sum()
    }

    /// Physical position of a global node key.
    pub fn node_position(&self, key: &[i64]) -> Vec<f64> {
        (0..self.dim)
            .map(|d| self.decomp.domain().low()[d] + key[d] as f64 * self.spacing[d])
            .collect()
    }

    pub fn prop_index(&self, name: &str) -> Result<usize> {
        self.schema
            .index_of(name)
            .ok_or_else(|| usage(format!("no property named '{name}'")))
    }

    fn find_block_owned(&self, key: &[i64]) -> Option<(usize, usize)> {
        for (b, blk) in self.blocks.iter().enumerate() {
            if blk.owned_box().contains_key(key) {
                return Some((b, blk.linear(key)));
            }
        }
        None
    }

    /// Locate a key in owned or ghost storage. Owned storage wins over any
    /// frame copy; the unshifted frame wins over periodic images.
    fn find_block_any(&self, key: &[i64]) -> Option<(usize, usize)> {
        if let Some(hit) = self.find_block_owned(key) {
            return Some(hit);
        }
        for (b, blk) in self.blocks.iter().enumerate() {
            if blk.extended_box().contains_key(key) {
                return Some((b, blk.linear(key)));
            }
        }
        let shifts = node_shifts(&self.nodes, self.decomp.bc());
        for (b, blk) in self.blocks.iter().enumerate() {
            let ext_box = blk.extended_box();
            for s in &shifts {
                if s.iter().all(|&v| v == 0) {
                    continue;
                }
                let k: Vec<i64> = key.iter().zip(s).map(|(a, b)| a + b).collect();
                if ext_box.contains_key(&k) {
                    return Some((b, blk.linear(&k)));
                }
            }
        }
        None
    }

    /// Read the value slice at an owned or ghost node.
    pub fn get(&self, key: &GridKey, prop: usize) -> Result<&[f64]> {
        let (b, lin) = self
            .find_block_any(key)
            .ok_or_else(|| usage(format!("key {key:?} is outside owned+ghost storage")))?;
        Ok(self.blocks[b].cols[prop].row_f64(lin))
    }

    /// Write the value slice at an owned node. Ghost nodes are read-only.
    pub fn set(&mut self, key: &GridKey, prop: usize, value: &[f64]) -> Result<()> {
        let (b, lin) = self
            .find_block_owned(key)
            .ok_or_else(|| usage(format!("key {key:?} is not an owned node")))?;
        let row = self.blocks[b].cols[prop].row_f64_mut(lin);
        if value.len() != row.len() {
            return Err(usage("value component count mismatch"));
        }
        row.copy_from_slice(value);
        Ok(())
    }

    /// Visit every owned node: `f(global_key, block_idx, linear_idx)`.
    pub fn for_each_owned(&self, mut f: impl FnMut(&[i64], usize, usize)) {
        for (b, blk) in self.blocks.iter().enumerate() {
            blk.owned_box().for_each_key(|key| {
                f(key, b, blk.linear(key));
            });
        }
    }

    /// Fill every ghost-frame node with its owner's current value, bitwise.
    /// Periodic axes wrap; frames beyond non-periodic physical boundaries
    /// are left untouched (client-defined boundary values).
    pub fn ghost_get(&mut self, world: &mut World, props: &[usize]) -> Result<()> {
        self.exchange(world, props, false)
    }

    /// Fold ghost-frame values back onto their owners, summing. Used by
    /// particle-to-mesh interpolation to return frame scatter contributions.
    pub fn ghost_put_sum(&mut self, world: &mut World, props: &[usize]) -> Result<()> {
        self.exchange(world, props, true)
    }

    fn exchange(&mut self, world: &mut World, props: &[usize], reverse: bool) -> Result<()> {
        for &p in props {
            if p >= self.schema.len() {
                return Err(usage(format!("property index {p} out of range")));
            }
        }
        // Sender role: forward sends owned values into remote frames;
        // reverse sends frame values back to the owner. Both sides walk the
        // replicated transfer plan in the same order, so payload framing
        // needs no per-region headers.
        let mut outgoing: BTreeMap<usize, Vec<u8>> = BTreeMap::new();
        for t in &self.transfers {
            let (sender, block, region, peer) = if reverse {
                (t.dst_rank, t.dst_block, &t.dst_box, t.src_rank)
            } else {
                (t.src_rank, t.src_block, &t.src_box, t.dst_rank)
            };
            if sender != self.rank {
                continue;
            }
            let buf = outgoing.entry(peer).or_default();
            let blk = &self.blocks[block];
            let mut lins = Vec::with_capacity(region.volume());
            region.for_each_key(|key| lins.push(blk.linear(key)));
            for &p in props {
                let col = &blk.cols[p];
                for &l in &lins {
                    col.write_row(l, buf);
                }
            }
        }
        let received = world.nbx_exchange(&outgoing)?;
        let mut cursors: BTreeMap<usize, usize> = received.keys().map(|&k| (k, 0)).collect();
        for t in &self.transfers {
            let (receiver, block, region, peer) = if reverse {
                (t.src_rank, t.src_block, &t.src_box, t.dst_rank)
            } else {
                (t.dst_rank, t.dst_block, &t.dst_box, t.src_rank)
            };
            if receiver != self.rank {
                continue;
            }
            let buf = received
                .get(&peer)
                .ok_or_else(|| Error::Protocol(format!("missing ghost data from rank {peer}")))?;
            let at = cursors.get_mut(&peer).unwrap();
            let blk = &mut self.blocks[block];
            let mut lins = Vec::with_capacity(region.volume());
            {
                let blk_ref = &*blk;
                region.for_each_key(|key| lins.push(blk_ref.linear(key)));
            }
            for &p in props {
                let col = &mut blk.cols[p];
                for &l in &lins {
                    if reverse {
                        col.merge_row(l, buf, at, &crate::particles::MergeOp::Sum)?;
                    } else {
                        col.overwrite_row(l, buf, at)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Periodic node shifts: products of {-nodes, 0, +nodes} on periodic axes.
fn node_shifts(nodes: &[usize], bc: &[Bc]) -> Vec<Vec<i64>> {
    let dim = nodes.len();
    let mut out: Vec<Vec<i64>> = vec![vec![0; dim]];
    for d in 0..dim {
        if bc[d] != Bc::Periodic {
            continue;
        }
        let n = nodes[d] as i64;
        let mut next = Vec::with_capacity(out.len() * 3);
        for s in &out {
            for v in [-n, 0, n] {
                let mut s2 = s.clone();
                s2[d] = v;
                next.push(s2);
            }
        }
        out = next;
    }
    out
}

/// Ordered list of grid-key offsets.
#[derive(Clone, Debug)]
pub struct Stencil {
    pub offsets: Vec<GridKey>,
}

impl Stencil {
    pub fn new(offsets: Vec<GridKey>) -> Stencil {
        Stencil { offsets }
    }

    /// Center plus one-node offsets on every axis: the (2D+1)-point star.
    pub fn star(dim: usize) -> Stencil {
        let mut offsets = vec![vec![0i64; dim]];
        for d in 0..dim {
            for s in [-1i64, 1] {
                let mut o = vec![0i64; dim];
                o[d] = s;
                offsets.push(o);
            }
        }
        Stencil { offsets }
    }

    pub fn identity(dim: usize) -> Stencil {
        Stencil { offsets: vec![vec![0; dim]] }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

/// Resolved stencil reads for one owned node during a sweep.
pub struct StencilValues<'a> {
    cols: &'a [&'a [f64]],
    comps: &'a [usize],
    deltas: &'a [isize],
    base: usize,
}

impl<'a> StencilValues<'a> {
    /// Value of input property slot `prop_slot` (index into the sweep's
    /// `props_in` list) at stencil offset `stencil_slot`, component 0.
    #[inline]
    pub fn get(&self, prop_slot: usize, stencil_slot: usize) -> f64 {
        self.get_comp(prop_slot, stencil_slot, 0)
    }

    #[inline]
    pub fn get_comp(&self, prop_slot: usize, stencil_slot: usize, comp: usize) -> f64 {
        let lin = (self.base as isize + self.deltas[stencil_slot]) as usize;
        self.cols[prop_slot][lin * self.comps[prop_slot] + comp]
    }
}

/// Visit every owned node of `src` exactly once and write per-node outputs
/// into `dst` (a grid of identical layout, for double buffering). The
/// closure reads resolved stencil accessors and fills one value per
/// component of each `props_out` entry, concatenated.
///
/// Stencil offsets must fit inside the ghost frame; this is checked up
/// front. Nodes are processed in disjoint tiles with no cross-node
/// accumulation, so the result is bitwise identical to a serial sweep.
pub fn stencil_sweep<F>(
    src: &DistributedGrid,
    dst: &mut DistributedGrid,
    stencil: &Stencil,
    props_in: &[usize],
    props_out: &[usize],
    f: F,
) -> Result<()>
where
    F: Fn(&StencilValues, &mut [f64]) + Sync + Send,
{
    if src.nodes != dst.nodes || src.blocks.len() != dst.blocks.len() {
        return Err(usage("stencil sweep requires grids of identical layout"));
    }
    for off in &stencil.offsets {
        if off.len() != src.dim {
            return Err(usage("stencil offset dimension mismatch"));
        }
        for d in 0..src.dim {
            let g = src.frame_nodes(d) as i64;
            if off[d].abs() > g {
                return Err(usage(format!(
                    "stencil offset {off:?} exceeds the ghost frame width {g} on axis {d}"
                )));
            }
        }
    }
    let out_width: usize =
        props_out.iter().map(|&p| dst.blocks[0].cols[p].comps()).sum();
    for b in 0..src.blocks.len() {
        let blk = &src.blocks[b];
        if blk.origin != dst.blocks[b].origin || blk.ext != dst.blocks[b].ext {
            return Err(usage("stencil sweep requires grids of identical layout"));
        }
        let deltas: Vec<isize> = stencil
            .offsets
            .iter()
            .map(|off| {
                (0..src.dim)
                    .map(|d| off[d] as isize * blk.padded_strides[d] as isize)
                    .sum()
            })
            .collect();
        let cols: Vec<&[f64]> = props_in.iter().map(|&p| blk.cols[p].f64_data()).collect();
        let comps: Vec<usize> = props_in.iter().map(|&p| blk.cols[p].comps()).collect();
        let owned: Vec<usize> = blk.ext.clone();
        let owned_volume: usize = owned.iter().product();
        // owned-node linear index in padded storage, per owned row-major idx
        let to_padded = |mut i: usize| -> usize {
            let mut lin = 0;
            for d in (0..owned.len()).rev() {
                let l = i % owned[d];
                i /= owned[d];
                lin += (l + blk.frame[d]) * blk.padded_strides[d];
            }
            lin
        };
        let mut scratch = vec![0.0f64; owned_volume * out_width];
        exec::for_each_row_mut(&mut scratch, out_width, |i, row| {
            let ctx = StencilValues {
                cols: &cols,
                comps: &comps,
                deltas: &deltas,
                base: to_padded(i),
            };
            f(&ctx, row);
        });
        // fold scratch into the destination columns
        let dblk = &mut dst.blocks[b];
        let mut offset = 0;
        for &p in props_out {
            let comps = dblk.cols[p].comps();
            let data = dblk.cols[p].f64_data_mut();
            for i in 0..owned_volume {
                let lin = to_padded(i);
                data[lin * comps..(lin + 1) * comps]
                    .copy_from_slice(&scratch[i * out_width + offset..i * out_width + offset + comps]);
            }
            offset += comps;
        }
    }
    Ok(())
}

impl DistributedGrid {
    /// Move node values onto a new decomposition, preserving every owned
    /// value bitwise. Implemented by intersecting owned blocks with the new
    /// ownership and exchanging the pieces sparsely.
    pub fn redistribute(&self, world: &mut World, new_decomp: Arc<Decomposition>) -> Result<DistributedGrid> {
        let mut target =
            DistributedGrid::new(&self.nodes, self.schema.clone(), new_decomp, self.rank)?;
        let sources: Vec<(IntBox, &Block)> =
            self.blocks.iter().map(|b| (b.owned_box(), b)).collect();
        let mut packed = Vec::with_capacity(sources.len());
        for (bx, blk) in sources {
            let mut cols: Vec<Column> = self
                .schema
                .props()
                .iter()
                .map(|p| Column::new_for(p, self.dim))
                .collect();
            let mut lins = Vec::with_capacity(bx.volume());
            bx.for_each_key(|key| lins.push(blk.linear(key)));
            for (p, col) in cols.iter_mut().enumerate() {
                let mut buf = Vec::new();
                for &l in &lins {
                    blk.cols[p].write_row(l, &mut buf);
                }
                let mut at = 0;
                for _ in 0..lins.len() {
                    col.read_row(&buf, &mut at)?;
                }
            }
            packed.push((bx, cols));
        }
        scatter_blocks(world, &mut target, &packed)?;
        Ok(target)
    }
}

/// Route packed node blocks (owned values, row-major) onto the target
/// grid's ownership. Also used by checkpoint loading (map-after-read).
pub(crate) fn scatter_blocks(
    world: &mut World,
    target: &mut DistributedGrid,
    sources: &[(IntBox, Vec<Column>)],
) -> Result<()> {
    let dim = target.dim;
    let npc: Vec<usize> = (0..dim)
        .map(|d| target.nodes[d] / target.decomp.grid().cells_per_axis()[d])
        .collect();
    let node_box = |sd: &crate::decomp::SubDomain| -> IntBox {
        let lo = (0..dim).map(|d| (sd.cell_lo[d] * npc[d]) as i64).collect();
        let hi = (0..dim).map(|d| ((sd.cell_hi[d] + 1) * npc[d]) as i64).collect();
        IntBox { lo, hi }
    };
    // payload per destination: repeated [lo, hi, per-prop rows]
    let mut outgoing: BTreeMap<usize, Vec<u8>> = BTreeMap::new();
    for (bx, cols) in sources {
        // row-major strides of the packed source block
        let ext: Vec<usize> = (0..dim).map(|d| (bx.hi[d] - bx.lo[d]) as usize).collect();
        let mut strides = vec![1usize; dim];
        for d in (0..dim.saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * ext[d + 1];
        }
        for r in 0..target.decomp.nranks() {
            for sd in target.decomp.subdomains(r) {
                let nb = node_box(sd);
                if let Some(park) = bx.intersect(&nb) {
                    let buf = outgoing.entry(r).or_default();
                    for v in &park.lo {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                    for v in &park.hi {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                    let mut lins = Vec::with_capacity(park.volume());
                    park.for_each_key(|key| {
                        let mut lin = 0usize;
                        for d in 0..dim {
                            lin += (key[d] - bx.lo[d]) as usize * strides[d];
                        }
                        lins.push(lin);
                    });
                    for col in cols {
                        for &l in &lins {
                            col.write_row(l, buf);
                        }
                    }
                }
            }
        }
    }
    let received = world.nbx_exchange(&outgoing)?;
    for (_, buf) in received {
        let mut at = 0;
        while at < buf.len() {
            let mut lo = vec![0i64; dim];
            let mut hi = vec![0i64; dim];
            for v in lo.iter_mut() {
                *v = read_i64(&buf, &mut at)?;
            }
            for v in hi.iter_mut() {
                *v = read_i64(&buf, &mut at)?;
            }
            let piece = IntBox { lo, hi };
            // locate the (unique) local block owning this piece
            let b = target
                .blocks
                .iter()
                .position(|blk| blk.owned_box().intersect(&piece) == Some(piece.clone()))
                .ok_or_else(|| {
                    Error::Protocol("received a node piece outside local ownership".into())
                })?;
            let blk = &mut target.blocks[b];
            let mut lins = Vec::with_capacity(piece.volume());
            {
                let blk_ref = &*blk;
                piece.for_each_key(|key| lins.push(blk_ref.linear(key)));
            }
            for p in 0..target.schema.len() {
                let col = &mut blk.cols[p];
                for &l in &lins {
                    col.overwrite_row(l, &buf, &mut at)?;
                }
            }
        }
    }
    Ok(())
}

/// Gather the full global (key -> values) table of one property on every
/// rank. Test and verification helper; cost is the global node count.
pub fn gather_global(
    world: &mut World,
    grid: &DistributedGrid,
    prop: usize,
) -> Result<BTreeMap<Vec<i64>, Vec<u64>>> {
    let mut local = Vec::new();
    grid.for_each_owned(|key, b, lin| {
        for v in key {
            local.extend_from_slice(&v.to_le_bytes());
        }
        let row = grid.blocks[b].cols[prop].row_f64(lin);
        for v in row {
            local.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    });
    let comps = grid
        .blocks
        .first()
        .map(|b| b.cols[prop].comps())
        .unwrap_or(1);
    let all = world.allgather(&local)?;
    let mut out = BTreeMap::new();
    for buf in all {
        let mut at = 0;
        while at < buf.len() {
            let mut key = vec![0i64; grid.dim];
            for v in key.iter_mut() {
                *v = read_i64(&buf, &mut at)?;
            }
            let mut bits = vec![0u64; comps];
            for v in bits.iter_mut() {
                *v = read_u64(&buf, &mut at)?;
            }
            if out.insert(key.clone(), bits).is_some() {
                return Err(Error::Protocol(format!("node {key:?} owned twice")));
            }
        }
    }
    let _ = read_f64; // keep the shared reader imports in one place
    Ok(out)
}
