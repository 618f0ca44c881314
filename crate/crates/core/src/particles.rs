//! The distributed particle set: schema-typed property columns, owned/ghost
//! partitioning, local and global maps, ghost_get/ghost_put, cell lists,
//! symmetric Verlet lists, and the pairwise-interaction driver.
//!
//! A set is confined to its rank; all cross-rank effects flow through the
//! mapping operations, which communicate over NBX and never compute.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::decomp::Decomposition;
use crate::error::{usage, Error, Result};
use crate::exec;
use crate::geometry::periodic_wrap_in_place;
use crate::schema::{read_f64, read_u32, read_u64, read_u8, Column, PropertySchema};
use crate::transport::World;

/// Iteration region of a particle set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Owned,
    Ghost,
    All,
}

/// Where a ghost came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub rank: usize,
    /// Local index of the source particle on its owner rank.
    pub src_idx: u32,
    /// Periodic shift applied to the position, in steps of the domain extent.
    pub shift_steps: Vec<i8>,
}

/// How ghost contributions merge into the owner copy.
#[derive(Clone, Copy)]
pub enum MergeOp {
    /// Componentwise addition.
    Sum,
    /// Owner value replaced by the componentwise max of itself and all
    /// contributions.
    MaxReplace,
    /// Contributions appended to a var-list property, applied in
    /// (source rank, source ghost index) order.
    ListMerge,
    /// User combiner applied per contribution; must be associative and
    /// commutative. Fixed-width f64 properties only.
    Custom(fn(owner: &mut [f64], contribution: &[f64])),
}

/// Mirrored contribution applied to the partner in symmetric mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mirror {
    /// Partner receives the negated contribution (forces).
    Negate,
    /// Partner receives the same contribution.
    Same,
}

struct SendRecord {
    idx: usize,
    shift_steps: Vec<i8>,
}

pub struct ParticleSet {
    dim: usize,
    rank: usize,
    schema: PropertySchema,
    decomp: Arc<Decomposition>,
    pos: Vec<f64>,
    gid: Vec<u64>,
    cols: Vec<Column>,
    n_owned: usize,
    ghost_src: Vec<Provenance>,
    ghost_send_log: BTreeMap<usize, Vec<SendRecord>>,
}

impl ParticleSet {
    /// Create an empty set bound to a decomposition. Domain, boundary
    /// conditions, ghost width, and the dimension come from the
    /// decomposition.
    pub fn new(schema: PropertySchema, decomp: Arc<Decomposition>, rank: usize) -> Result<Self> {
        if rank >= decomp.nranks() {
            return Err(usage(format!("rank {rank} out of range")));
        }
        let dim = decomp.domain().dim();
        let cols = schema.props().iter().map(|p| Column::new_for(p, dim)).collect();
        Ok(ParticleSet {
            dim,
            rank,
            schema,
            decomp,
            pos: Vec::new(),
            gid: Vec::new(),
            cols,
            n_owned: 0,
            ghost_src: Vec::new(),
            ghost_send_log: BTreeMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn schema(&self) -> &PropertySchema {
        &self.schema
    }

    pub fn decomposition(&self) -> &Arc<Decomposition> {
        &self.decomp
    }

    pub fn n_owned(&self) -> usize {
        self.n_owned
    }

    pub fn n_ghost(&self) -> usize {
        self.gid.len() - self.n_owned
    }

    pub fn len(&self) -> usize {
        self.gid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gid.is_empty()
    }

    /// Index range of a region; owned particles come first, ghosts after.
    pub fn indices(&self, region: Region) -> std::ops::Range<usize> {
        match region {
            Region::Owned => 0..self.n_owned,
            Region::Ghost => self.n_owned..self.len(),
            Region::All => 0..self.len(),
        }
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.pos[i * self.dim..(i + 1) * self.dim]
    }

    pub fn position_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.pos[i * self.dim..(i + 1) * self.dim]
    }

    pub fn gid(&self, i: usize) -> u64 {
        self.gid[i]
    }

    pub fn prop_index(&self, name: &str) -> Result<usize> {
        self.schema
            .index_of(name)
            .ok_or_else(|| usage(format!("no property named '{name}'")))
    }

    pub fn col(&self, prop: usize) -> &Column {
        &self.cols[prop]
    }

    pub fn col_mut(&mut self, prop: usize) -> &mut Column {
        &mut self.cols[prop]
    }

    pub fn prop_f64(&self, prop: usize, i: usize) -> &[f64] {
        self.cols[prop].row_f64(i)
    }

    pub fn prop_f64_mut(&mut self, prop: usize, i: usize) -> &mut [f64] {
        self.cols[prop].row_f64_mut(i)
    }

    pub fn ghost_provenance(&self, i: usize) -> &Provenance {
        &self.ghost_src[i - self.n_owned]
    }

    /// Zero a property over a region (clears lists on var columns).
    pub fn zero_prop(&mut self, prop: usize, region: Region) {
        let range = self.indices(region);
        self.cols[prop].zero_rows(range);
    }

    /// Append an owned particle with zeroed properties. Not legal while
    /// ghosts are present (owned and ghost storage would interleave).
    pub fn add_owned(&mut self, position: &[f64], gid: u64) -> Result<usize> {
        if position.len() != self.dim {
            return Err(usage("position dimension mismatch"));
        }
        if self.n_ghost() > 0 {
            return Err(usage("cannot add owned particles while ghosts are present"));
        }
        self.pos.extend_from_slice(position);
        self.gid.push(gid);
        for c in &mut self.cols {
            c.push_zero(1);
        }
        self.n_owned += 1;
        Ok(self.n_owned - 1)
    }

    /// One particle per node of a `nodes_per_axis` lattice spanning the
    /// domain (node i sits at `low + i * extent / nodes`), instantiated on
    /// the rank whose sub-domain contains it, so the global total is the
    /// product of the node counts. Gids come from the lattice
    /// linearization.
    pub fn init_grid(&mut self, nodes_per_axis: &[usize]) -> Result<()> {
        if !self.is_empty() {
            return Err(usage("init_grid requires an empty set"));
        }
        if nodes_per_axis.len() != self.dim {
            return Err(usage("nodes_per_axis dimension mismatch"));
        }
        let domain = self.decomp.domain().clone();
        let total: usize = nodes_per_axis.iter().product();
        let mut key = vec![0usize; self.dim];
        let mut p = vec![0.0; self.dim];
        for gid in 0..total {
            for d in 0..self.dim {
                p[d] =
                    domain.low()[d] + domain.extent(d) * key[d] as f64 / nodes_per_axis[d] as f64;
            }
            if self.decomp.owner_of(&p) == Some(self.rank) {
                self.add_owned(&p, gid as u64)?;
            }
            for d in (0..self.dim).rev() {
                key[d] += 1;
                if key[d] < nodes_per_axis[d] {
                    break;
                }
                key[d] = 0;
            }
        }
        Ok(())
    }

    fn drop_ghosts(&mut self) {
        let n = self.n_owned;
        self.pos.truncate(n * self.dim);
        self.gid.truncate(n);
        for c in &mut self.cols {
            c.truncate(n);
        }
        self.ghost_src.clear();
        self.ghost_send_log.clear();
    }

    fn write_full_record(&self, i: usize, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.gid[i].to_le_bytes());
        for v in self.position(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.cols {
            c.write_row(i, out);
        }
    }

    fn read_full_record(&mut self, buf: &[u8], at: &mut usize) -> Result<()> {
        let gid = read_u64(buf, at)?;
        for _ in 0..self.dim {
            let v = read_f64(buf, at)?;
            self.pos.push(v);
        }
        self.gid.push(gid);
        for c in &mut self.cols {
            c.read_row(buf, at)?;
        }
        Ok(())
    }

    /// Redistribute particles that migrated across sub-domain boundaries.
    /// Positions are periodic-wrapped first; ghosts are discarded. Intended
    /// for neighbor-reachable displacements (smaller than a sub-domain
    /// extent); any destination still works since the exchange is sparse.
    pub fn map_local(&mut self, world: &mut World) -> Result<()> {
        self.map_impl(world)
    }

    /// Redistribute particles to arbitrary ranks, e.g. after distributed
    /// file reads or a load-balancer decomposition change.
    pub fn map_global(&mut self, world: &mut World) -> Result<()> {
        self.map_impl(world)
    }

    fn map_impl(&mut self, world: &mut World) -> Result<()> {
        self.drop_ghosts();
        let domain = self.decomp.domain().clone();
        let bc = self.decomp.bc().to_vec();
        let dim = self.dim;
        for i in 0..self.n_owned {
            periodic_wrap_in_place(&mut self.pos[i * dim..(i + 1) * dim], &domain, &bc);
        }
        let mut outgoing: BTreeMap<usize, Vec<u8>> = BTreeMap::new();
        let mut leaving = vec![false; self.n_owned];
        let mut any_leaving = false;
        for i in 0..self.n_owned {
            match self.decomp.owner_of(self.position(i)) {
                Some(r) if r == self.rank => {}
                Some(r) => {
                    leaving[i] = true;
                    any_leaving = true;
                    let buf = outgoing.entry(r).or_default();
                    let mut rec = Vec::new();
                    self.write_full_record(i, &mut rec);
                    buf.extend_from_slice(&rec);
                }
                None => return Err(Error::OutOfDomain { gid: self.gid[i] }),
            }
        }
        if any_leaving {
            let keep: Vec<usize> = (0..self.n_owned).filter(|&i| !leaving[i]).collect();
            let mut pos = Vec::with_capacity(keep.len() * dim);
            for &i in &keep {
                pos.extend_from_slice(self.position(i));
            }
            self.pos = pos;
            self.gid = keep.iter().map(|&i| self.gid[i]).collect();
            for c in &mut self.cols {
                *c = c.gather(&keep);
            }
            self.n_owned = keep.len();
        }
        let received = world.nbx_exchange(&outgoing)?;
        for (_, buf) in received {
            let mut at = 0;
            while at < buf.len() {
                self.read_full_record(&buf, &mut at)?;
                self.n_owned += 1;
            }
        }
        Ok(())
    }

    /// Populate ghost layers with copies of owned particles from the
    /// overlap regions. `props` selects which property columns travel
    /// (positions and gids always do); unselected columns are zeroed on the
    /// ghosts. With `keep`, provenance and positions stay put and only the
    /// selected property values of the existing ghosts are refreshed.
    pub fn ghost_get(&mut self, world: &mut World, props: &[usize], keep: bool) -> Result<()> {
        self.check_props(props)?;
        if keep {
            return self.ghost_refresh(world, props);
        }
        self.drop_ghosts();
        let domain = self.decomp.domain().clone();
        // Select owned particles per destination, deduplicated by
        // (peer, shift, particle) so overlapping internal boxes do not
        // produce duplicate ghosts.
        let mut selected: BTreeMap<usize, Vec<SendRecord>> = BTreeMap::new();
        {
            let table = &self.decomp.ghost_table(self.rank).internal;
            let mut seen: BTreeSet<(usize, Vec<i8>, usize)> = BTreeSet::new();
            for gb in table {
                for i in 0..self.n_owned {
                    if gb.bounds.contains(self.position(i))
                        && seen.insert((gb.peer, gb.shift_steps.clone(), i))
                    {
                        selected
                            .entry(gb.peer)
                            .or_default()
                            .push(SendRecord { idx: i, shift_steps: gb.shift_steps.clone() });
                    }
                }
            }
        }
        let mut outgoing: BTreeMap<usize, Vec<u8>> = BTreeMap::new();
        for (&dest, records) in &selected {
            let mut buf = Vec::new();
            for r in records {
                buf.extend_from_slice(&self.gid[r.idx].to_le_bytes());
                buf.extend_from_slice(&(r.idx as u32).to_le_bytes());
                for s in &r.shift_steps {
                    buf.push(*s as u8);
                }
                for (d, v) in self.position(r.idx).iter().enumerate() {
                    let shifted = v + r.shift_steps[d] as f64 * domain.extent(d);
                    buf.extend_from_slice(&shifted.to_le_bytes());
                }
                for &p in props {
                    self.cols[p].write_row(r.idx, &mut buf);
                }
            }
            outgoing.insert(dest, buf);
        }
        self.ghost_send_log = selected;
        let received = world.nbx_exchange(&outgoing)?;
        for (src, buf) in received {
            let mut at = 0;
            while at < buf.len() {
                let gid = read_u64(&buf, &mut at)?;
                let src_idx = read_u32(&buf, &mut at)?;
                let mut steps = vec![0i8; self.dim];
                for s in steps.iter_mut() {
                    *s = read_u8(&buf, &mut at)? as i8;
                }
                for _ in 0..self.dim {
                    let v = read_f64(&buf, &mut at)?;
                    self.pos.push(v);
                }
                self.gid.push(gid);
                let mut next_selected = props.iter().peekable();
                for (ci, c) in self.cols.iter_mut().enumerate() {
                    if next_selected.peek() == Some(&&ci) {
                        c.read_row(&buf, &mut at)?;
                        next_selected.next();
                    } else {
                        c.push_zero(1);
                    }
                }
                self.ghost_src.push(Provenance { rank: src, src_idx, shift_steps: steps });
            }
        }
        Ok(())
    }

    fn ghost_refresh(&mut self, world: &mut World, props: &[usize]) -> Result<()> {
        let mut outgoing: BTreeMap<usize, Vec<u8>> = BTreeMap::new();
        for (&dest, records) in &self.ghost_send_log {
            let mut buf = Vec::new();
            for r in records {
                for &p in props {
                    self.cols[p].write_row(r.idx, &mut buf);
                }
            }
            outgoing.insert(dest, buf);
        }
        let received = world.nbx_exchange(&outgoing)?;
        for (src, buf) in received {
            let mut at = 0;
            for g in 0..self.ghost_src.len() {
                if self.ghost_src[g].rank != src {
                    continue;
                }
                let row = self.n_owned + g;
                for &p in props {
                    self.cols[p].overwrite_row(row, &buf, &mut at)?;
                }
            }
            if at != buf.len() {
                return Err(Error::Protocol("ghost refresh length mismatch".into()));
            }
        }
        Ok(())
    }

    /// Route ghost property values back to their owners and merge them.
    /// Contributions apply in (source rank, source ghost index) order.
    pub fn ghost_put(&mut self, world: &mut World, op: MergeOp, props: &[usize]) -> Result<()> {
        self.check_props(props)?;
        for &p in props {
            let desc = self.schema.prop(p);
            match op {
                MergeOp::ListMerge if !desc.is_var_list() => {
                    return Err(usage(format!(
                        "LIST_MERGE requires a var-list property; '{}' is not one",
                        desc.name
                    )))
                }
                MergeOp::Custom(_) if desc.is_var_list() => {
                    return Err(usage("custom merge requires a fixed-width f64 property"))
                }
                _ => {}
            }
        }
        let mut outgoing: BTreeMap<usize, Vec<u8>> = BTreeMap::new();
        for g in 0..self.ghost_src.len() {
            let row = self.n_owned + g;
            let dest = self.ghost_src[g].rank;
            let buf = outgoing.entry(dest).or_default();
            buf.extend_from_slice(&self.ghost_src[g].src_idx.to_le_bytes());
            for &p in props {
                self.cols[p].write_row(row, buf);
            }
        }
        let received = world.nbx_exchange(&outgoing)?;
        for (_, buf) in received {
            let mut at = 0;
            while at < buf.len() {
                let idx = read_u32(&buf, &mut at)? as usize;
                if idx >= self.n_owned {
                    return Err(Error::Protocol("ghost_put targets a non-owned index".into()));
                }
                for &p in props {
                    self.cols[p].merge_row(idx, &buf, &mut at, &op)?;
                }
            }
        }
        Ok(())
    }

    fn check_props(&self, props: &[usize]) -> Result<()> {
        for &p in props {
            if p >= self.schema.len() {
                return Err(usage(format!("property index {p} out of range")));
            }
        }
        Ok(())
    }

    /// Rebind to a new decomposition (after load balancing) and migrate.
    pub fn rebind(&mut self, world: &mut World, decomp: Arc<Decomposition>) -> Result<()> {
        self.decomp = decomp;
        self.map_global(world)
    }

    /// Bulk-append owned particles from deserialized storage. The caller
    /// must re-establish the ownership invariant with a global map.
    pub(crate) fn extend_from_parts(
        &mut self,
        pos: &[f64],
        gid: &[u64],
        cols: Vec<Column>,
    ) -> Result<()> {
        if self.n_ghost() > 0 {
            return Err(usage("cannot extend while ghosts are present"));
        }
        if pos.len() != gid.len() * self.dim || cols.len() != self.cols.len() {
            return Err(usage("mismatched particle storage parts"));
        }
        self.pos.extend_from_slice(pos);
        self.gid.extend_from_slice(gid);
        for (dst, src) in self.cols.iter_mut().zip(cols) {
            if src.rows() != gid.len() {
                return Err(usage("property column length mismatch"));
            }
            dst.append_column(src)?;
        }
        self.n_owned += gid.len();
        Ok(())
    }

    /// Owned-particle count per sub-sub-domain cell; the default cost model.
    pub fn owned_per_cell(&self) -> Vec<f64> {
        let grid = self.decomp.grid();
        let mut counts = vec![0.0; grid.cell_count()];
        for i in 0..self.n_owned {
            if let Some(c) = grid.locate(self.position(i)) {
                counts[c] += 1.0;
            }
        }
        counts
    }
}

/// Spatial binning of all particles (owned + ghost) with cell spacing of at
/// least `r_cut` per axis.
pub struct CellList {
    origin: Vec<f64>,
    inv_spacing: Vec<f64>,
    dims: Vec<usize>,
    starts: Vec<usize>,
    items: Vec<u32>,
    r_cut: f64,
    symmetric: bool,
}

impl CellList {
    pub fn r_cut(&self) -> f64 {
        self.r_cut
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    fn cell_key_of(&self, p: &[f64], key: &mut [isize]) {
        for d in 0..p.len() {
            key[d] = (((p[d] - self.origin[d]) * self.inv_spacing[d]) as isize)
                .clamp(0, self.dims[d] as isize - 1);
        }
    }

    fn cell_of(&self, p: &[f64]) -> usize {
        let mut idx = 0;
        for d in 0..p.len() {
            let k = (((p[d] - self.origin[d]) * self.inv_spacing[d]) as isize)
                .clamp(0, self.dims[d] as isize - 1) as usize;
            idx = idx * self.dims[d] + k;
        }
        idx
    }

    /// Visit every particle within `r_cut` (strict) of particle `i`,
    /// excluding `i` itself: `f(j, dx, r2)` with `dx = x_i - x_j`.
    pub fn for_each_neighbor(
        &self,
        pset: &ParticleSet,
        i: usize,
        mut f: impl FnMut(usize, &[f64], f64),
    ) {
        let dim = pset.dim();
        let xi = pset.position(i).to_vec();
        let mut key = vec![0isize; dim];
        self.cell_key_of(&xi, &mut key);
        let r2max = self.r_cut * self.r_cut;
        let mut dx = vec![0.0; dim];
        let mut offset = vec![-1isize; dim];
        'cells: loop {
            let mut cell = 0usize;
            let mut in_range = true;
            for d in 0..dim {
                let k = key[d] + offset[d];
                if k < 0 || k >= self.dims[d] as isize {
                    in_range = false;
                    break;
                }
                cell = cell * self.dims[d] + k as usize;
            }
            if in_range {
                for &j in &self.items[self.starts[cell]..self.starts[cell + 1]] {
                    let j = j as usize;
                    if j == i {
                        continue;
                    }
                    let xj = pset.position(j);
                    let mut r2 = 0.0;
                    for d in 0..dim {
                        dx[d] = xi[d] - xj[d];
                        r2 += dx[d] * dx[d];
                    }
                    if r2 < r2max {
                        f(j, &dx, r2);
                    }
                }
            }
            for d in (0..dim).rev() {
                offset[d] += 1;
                if offset[d] <= 1 {
                    continue 'cells;
                }
                offset[d] = -1;
            }
            break;
        }
    }
}

/// Bin all particles (owned + ghost). Requires ghosts populated with width
/// >= `r_cut`. The `symmetric` flag is carried to pair-enumeration helpers.
pub fn build_cell_list(pset: &ParticleSet, r_cut: f64, symmetric: bool) -> Result<CellList> {
    if r_cut <= 0.0 {
        return Err(usage("r_cut must be positive"));
    }
    if r_cut > pset.decomposition().ghost().width {
        return Err(usage(format!(
            "r_cut {} exceeds the ghost width {}",
            r_cut,
            pset.decomposition().ghost().width
        )));
    }
    let dim = pset.dim();
    let n = pset.len();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for i in 0..n {
        for (d, v) in pset.position(i).iter().enumerate() {
            lo[d] = lo[d].min(*v);
            hi[d] = hi[d].max(*v);
        }
    }
    if n == 0 {
        lo = vec![0.0; dim];
        hi = vec![1.0; dim];
    }
    let mut dims = vec![0usize; dim];
    let mut inv = vec![0.0; dim];
    for d in 0..dim {
        let extent = (hi[d] - lo[d]).max(r_cut * 1e-9);
        dims[d] = ((extent / r_cut).floor() as usize).max(1);
        inv[d] = dims[d] as f64 / extent; // spacing = extent/dims >= r_cut
    }
    let ncells: usize = dims.iter().product();
    let mut cl = CellList {
        origin: lo,
        inv_spacing: inv,
        dims,
        starts: vec![0usize; ncells + 1],
        items: vec![0u32; n],
        r_cut,
        symmetric,
    };
    let mut cells = vec![0usize; n];
    for i in 0..n {
        let c = cl.cell_of(pset.position(i));
        cells[i] = c;
        cl.starts[c + 1] += 1;
    }
    for c in 0..ncells {
        cl.starts[c + 1] += cl.starts[c];
    }
    let mut cursor = cl.starts.clone();
    for i in 0..n {
        cl.items[cursor[cells[i]]] = i as u32;
        cursor[cells[i]] += 1;
    }
    Ok(cl)
}

/// Per owned particle: neighbor indices within `r_cut + skin` (strict
/// inequality). The symmetric variant stores each unordered pair once, on
/// the lower gid; pairs whose lower-gid member is remote are enumerated by
/// the owner of that particle.
pub struct VerletList {
    pub cutoff: f64,
    pub symmetric: bool,
    starts: Vec<usize>,
    neigh: Vec<u32>,
}

impl VerletList {
    pub fn neighbors(&self, i: usize) -> &[u32] {
        &self.neigh[self.starts[i]..self.starts[i + 1]]
    }

    pub fn n_particles(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn pair_count(&self) -> usize {
        self.neigh.len()
    }
}

pub fn build_verlet(
    pset: &ParticleSet,
    r_cut: f64,
    skin: f64,
    symmetric: bool,
) -> Result<VerletList> {
    if skin < 0.0 {
        return Err(usage("skin must be >= 0"));
    }
    let cutoff = r_cut + skin;
    let cl = build_cell_list(pset, cutoff, symmetric)?;
    let n = pset.n_owned();
    let mut starts = Vec::with_capacity(n + 1);
    let mut neigh = Vec::new();
    starts.push(0);
    for i in 0..n {
        cl.for_each_neighbor(pset, i, |j, _dx, _r2| {
            if !symmetric || pset.gid(j) > pset.gid(i) {
                neigh.push(j as u32);
            }
        });
        starts.push(neigh.len());
    }
    Ok(VerletList { cutoff, symmetric, starts, neigh })
}

/// Accumulate pairwise kernel contributions into property `accum`.
///
/// The kernel writes the contribution for the driving (owned) particle `p`;
/// in symmetric mode the mirrored contribution also lands on the partner,
/// including ghost partners, and the caller must follow with
/// `ghost_put(MergeOp::Sum)`. Zero the target property beforehand when
/// assignment semantics are wanted. Accumulation uses a fixed chunk
/// structure, so results do not depend on the worker thread count.
pub fn apply_pairwise<K>(
    pset: &mut ParticleSet,
    list: &VerletList,
    accum: usize,
    mirror: Mirror,
    kernel: K,
) -> Result<()>
where
    K: Fn(&ParticleSet, usize, usize, &[f64], f64, &mut [f64]) + Sync + Send,
{
    let comps = pset.col(accum).comps();
    let n_owned = pset.n_owned();
    let dim = pset.dim();
    let pset_ref: &ParticleSet = pset;
    if list.symmetric {
        let acc = exec::accumulate_chunked(n_owned, pset_ref.len() * comps, |range, buf| {
            let mut dx = vec![0.0; dim];
            let mut out = vec![0.0; comps];
            for i in range {
                let xi = pset_ref.position(i);
                for &j in list.neighbors(i) {
                    let j = j as usize;
                    let xj = pset_ref.position(j);
                    let mut r2 = 0.0;
                    for d in 0..dim {
                        dx[d] = xi[d] - xj[d];
                        r2 += dx[d] * dx[d];
                    }
                    out.fill(0.0);
                    kernel(pset_ref, i, j, &dx, r2, &mut out);
                    for (k, v) in out.iter().enumerate() {
                        buf[i * comps + k] += v;
                        match mirror {
                            Mirror::Negate => buf[j * comps + k] -= v,
                            Mirror::Same => buf[j * comps + k] += v,
                        }
                    }
                }
            }
        });
        let col = pset.col_mut(accum).f64_data_mut();
        for (c, a) in col.iter_mut().zip(&acc) {
            *c += a;
        }
    } else {
        // each owned particle accumulates only to itself; rows are disjoint
        let mut acc = vec![0.0; n_owned * comps];
        exec::for_each_row_mut(&mut acc, comps, |i, row| {
            let mut dx = vec![0.0; dim];
            let mut out = vec![0.0; comps];
            let xi = pset_ref.position(i);
            for &j in list.neighbors(i) {
                let j = j as usize;
                let xj = pset_ref.position(j);
                let mut r2 = 0.0;
                for d in 0..dim {
                    dx[d] = xi[d] - xj[d];
                    r2 += dx[d] * dx[d];
                }
                out.fill(0.0);
                kernel(pset_ref, i, j, &dx, r2, &mut out);
                for (k, v) in out.iter().enumerate() {
                    row[k] += v;
                }
            }
        });
        let col = pset.col_mut(accum).f64_data_mut();
        for (c, a) in col[..n_owned * comps].iter_mut().zip(&acc) {
            *c += a;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{AxisBox, Bc, GhostSpec};
    use crate::schema::PropDesc;
    use crate::transport::world_spawn;

    fn decomp_for(
        dim: usize,
        bc: Bc,
        ghost: f64,
        nranks: usize,
    ) -> Arc<Decomposition> {
        Arc::new(
            Decomposition::build(
                &AxisBox::unit(dim),
                &vec![bc; dim],
                &GhostSpec::new(ghost).unwrap(),
                nranks,
                Some(4),
                None,
            )
            .unwrap(),
        )
    }

    fn vel_force_schema() -> PropertySchema {
        PropertySchema::new(vec![
            PropDesc::vector_f64("velocity"),
            PropDesc::vector_f64("force"),
        ])
        .unwrap()
    }

    #[test]
    fn create_and_high_dimension() {
        let dec = decomp_for(3, Bc::Periodic, 0.1, 1);
        let ps = ParticleSet::new(vel_force_schema(), dec, 0).unwrap();
        assert_eq!(ps.n_owned(), 0);
        // arbitrary dimension
        let dec50 = Arc::new(
            Decomposition::build(
                &AxisBox::new(vec![-5.0; 50], vec![5.0; 50]).unwrap(),
                &vec![Bc::NonPeriodic; 50],
                &GhostSpec::new(0.0).unwrap(),
                2,
                Some(1),
                None,
            )
            .unwrap(),
        );
        let schema = PropertySchema::new(vec![
            PropDesc::scalar_f64("fitness"),
            PropDesc::fixed_f64("mean", 50),
        ])
        .unwrap();
        let ps = ParticleSet::new(schema, dec50, 0).unwrap();
        assert_eq!(ps.dim(), 50);
        // duplicate names rejected at the schema level
        assert!(PropertySchema::new(vec![
            PropDesc::scalar_f64("a"),
            PropDesc::scalar_f64("a")
        ])
        .is_err());
    }

    #[test]
    fn init_grid_counts() {
        let out = world_spawn(4, |w| {
            let dec = decomp_for(2, Bc::Periodic, 0.1, 4);
            let mut ps = ParticleSet::new(PropertySchema::empty(), dec.clone(), w.rank())?;
            ps.init_grid(&[8, 8])?;
            // every particle is inside one of this rank's sub-domains
            for i in ps.indices(Region::Owned) {
                assert_eq!(dec.owner_of(ps.position(i)), Some(w.rank()));
            }
            Ok(ps.n_owned())
        })
        .unwrap();
        assert_eq!(out.iter().sum::<usize>(), 64);
    }

    #[test]
    fn map_moves_particle_across_split() {
        let out = world_spawn(2, |w| {
            let dec = decomp_for(1, Bc::NonPeriodic, 0.1, 2);
            let schema = PropertySchema::new(vec![PropDesc::scalar_f64("m")]).unwrap();
            let mut ps = ParticleSet::new(schema, dec.clone(), w.rank())?;
            if w.rank() == 0 {
                // owned by rank 0 initially, then pushed into rank 1's half
                let sub = &dec.subdomains(0)[0];
                let x0 = 0.5 * (sub.bounds.low()[0] + sub.bounds.high()[0]);
                let i = ps.add_owned(&[x0], 7)?;
                ps.prop_f64_mut(0, i)[0] = 2.25;
                ps.position_mut(i)[0] = 0.93; // belongs to the upper rank
            }
            ps.map_local(w)?;
            Ok((ps.n_owned(), (0..ps.n_owned()).map(|i| (ps.gid(i), ps.prop_f64(0, i)[0])).collect::<Vec<_>>()))
        })
        .unwrap();
        let total: usize = out.iter().map(|(n, _)| n).sum();
        assert_eq!(total, 1);
        let holder: Vec<_> = out.iter().flat_map(|(_, v)| v.clone()).collect();
        assert_eq!(holder, vec![(7u64, 2.25)]);
    }

    #[test]
    fn map_wraps_periodic_and_errors_outside() {
        world_spawn(1, |w| {
            let dec = decomp_for(1, Bc::Periodic, 0.1, 1);
            let mut ps = ParticleSet::new(PropertySchema::empty(), dec, 0)?;
            ps.add_owned(&[-0.25], 3)?;
            ps.map_local(w)?;
            assert!((ps.position(0)[0] - 0.75).abs() < 1e-12);
            // non-periodic escape is a hard error naming the gid
            let dec = decomp_for(1, Bc::NonPeriodic, 0.1, 1);
            let mut ps = ParticleSet::new(PropertySchema::empty(), dec, 0)?;
            ps.add_owned(&[1.5], 9)?;
            let err = ps.map_local(w).unwrap_err();
            match err {
                Error::OutOfDomain { gid } => assert_eq!(gid, 9),
                other => panic!("unexpected error {other}"),
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn map_idempotent_and_conserves_gids() {
        let out = world_spawn(4, |w| {
            let dec = decomp_for(2, Bc::Periodic, 0.1, 4);
            let mut ps = ParticleSet::new(PropertySchema::empty(), dec, w.rank())?;
            ps.init_grid(&[6, 6])?;
            ps.map_global(w)?;
            let before: Vec<u64> = (0..ps.n_owned()).map(|i| ps.gid(i)).collect();
            ps.map_global(w)?; // fixed point
            let after: Vec<u64> = (0..ps.n_owned()).map(|i| ps.gid(i)).collect();
            assert_eq!(before, after);
            Ok(before)
        })
        .unwrap();
        let mut all: Vec<u64> = out.into_iter().flatten().collect();
        all.sort_unstable();
        assert_eq!(all, (0..36u64).collect::<Vec<_>>());
    }

    #[test]
    fn ghost_get_copies_across_split_bitwise() {
        let out = world_spawn(2, |w| {
            let dec = decomp_for(1, Bc::NonPeriodic, 0.1, 2);
            let schema = PropertySchema::new(vec![PropDesc::scalar_f64("q")]).unwrap();
            let mut ps = ParticleSet::new(schema, dec.clone(), w.rank())?;
            let split = dec.subdomains(0)[0].bounds.high()[0];
            if w.rank() == dec.owner_of(&[split + 0.05]).unwrap() {
                let i = ps.add_owned(&[split + 0.05], 1)?;
                ps.prop_f64_mut(0, i)[0] = 0.1 + 0.2; // not exactly representable
            }
            ps.ghost_get(w, &[0], false)?;
            let ghosts: Vec<(u64, f64, f64)> = ps
                .indices(Region::Ghost)
                .map(|i| (ps.gid(i), ps.position(i)[0], ps.prop_f64(0, i)[0]))
                .collect();
            Ok((w.rank(), ps.n_owned(), ghosts))
        })
        .unwrap();
        // exactly one rank holds the particle; the other sees one ghost with
        // bitwise-identical position and property
        let total_ghosts: usize = out.iter().map(|(_, _, g)| g.len()).sum();
        assert_eq!(total_ghosts, 1);
        for (_, _, ghosts) in &out {
            for (gid, pos, q) in ghosts {
                assert_eq!(*gid, 1);
                assert_eq!(q.to_bits(), (0.1f64 + 0.2).to_bits());
                assert!(*pos > 0.0 && *pos < 1.0);
            }
        }
    }

    #[test]
    fn ghost_zero_width_no_ghosts() {
        world_spawn(2, |w| {
            let dec = decomp_for(1, Bc::Periodic, 0.0, 2);
            let mut ps = ParticleSet::new(PropertySchema::empty(), dec, w.rank())?;
            ps.init_grid(&[8])?;
            ps.ghost_get(w, &[], false)?;
            assert_eq!(ps.n_ghost(), 0);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn ghost_get_periodic_self_images() {
        // single rank, periodic: particles near the boundary appear as
        // wrapped ghost images of themselves
        world_spawn(1, |w| {
            let dec = decomp_for(1, Bc::Periodic, 0.2, 1);
            let mut ps = ParticleSet::new(PropertySchema::empty(), dec, 0)?;
            ps.add_owned(&[0.05], 0)?;
            ps.add_owned(&[0.5], 1)?;
            ps.ghost_get(w, &[], false)?;
            // particle 0 is within 0.2 of the low face: one image at 1.05
            assert_eq!(ps.n_ghost(), 1);
            let g = ps.indices(Region::Ghost).next().unwrap();
            assert_eq!(ps.gid(g), 0);
            assert!((ps.position(g)[0] - 1.05).abs() < 1e-12);
            let prov = ps.ghost_provenance(g);
            assert_eq!(prov.rank, 0);
            assert_eq!(prov.shift_steps, vec![1]);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn ghost_put_sum_and_max() {
        let out = world_spawn(2, |w| {
            let dec = decomp_for(1, Bc::NonPeriodic, 0.15, 2);
            let schema = PropertySchema::new(vec![PropDesc::scalar_f64("acc")]).unwrap();
            let mut ps = ParticleSet::new(schema, dec.clone(), w.rank())?;
            let split = dec.subdomains(0)[0].bounds.high()[0];
            let owner = dec.owner_of(&[split - 0.05]).unwrap();
            if w.rank() == owner {
                let i = ps.add_owned(&[split - 0.05], 42)?;
                ps.prop_f64_mut(0, i)[0] = 4.0;
            }
            ps.ghost_get(w, &[], false)?;
            // the non-owner writes a contribution on its ghost copy
            for g in ps.indices(Region::Ghost) {
                ps.prop_f64_mut(0, g)[0] = 5.0;
            }
            ps.ghost_put(w, MergeOp::MaxReplace, &[0])?;
            let vals: Vec<f64> =
                ps.indices(Region::Owned).map(|i| ps.prop_f64(0, i)[0]).collect();
            // now SUM on top: owner has 5.0, ghost contributes 3.0
            for g in ps.indices(Region::Ghost) {
                ps.prop_f64_mut(0, g)[0] = 3.0;
            }
            ps.ghost_put(w, MergeOp::Sum, &[0])?;
            let vals2: Vec<f64> =
                ps.indices(Region::Owned).map(|i| ps.prop_f64(0, i)[0]).collect();
            Ok((w.rank() == owner, vals, vals2))
        })
        .unwrap();
        for (is_owner, vals, vals2) in out {
            if is_owner {
                assert_eq!(vals, vec![5.0]); // max(4, 5)
                assert_eq!(vals2, vec![8.0]); // 5 + 3
            } else {
                assert!(vals.is_empty());
            }
        }
    }

    #[test]
    fn ghost_put_list_merge_requires_var_list() {
        world_spawn(1, |w| {
            let dec = decomp_for(1, Bc::NonPeriodic, 0.1, 1);
            let schema = PropertySchema::new(vec![PropDesc::scalar_f64("s")]).unwrap();
            let mut ps = ParticleSet::new(schema, dec, 0)?;
            let err = ps.ghost_put(w, MergeOp::ListMerge, &[0]).unwrap_err();
            assert!(matches!(err, Error::Usage(_)));
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn single_rank_ghost_put_is_noop() {
        world_spawn(1, |w| {
            let dec = decomp_for(1, Bc::NonPeriodic, 0.1, 1);
            let schema = PropertySchema::new(vec![PropDesc::scalar_f64("s")]).unwrap();
            let mut ps = ParticleSet::new(schema, dec, 0)?;
            let i = ps.add_owned(&[0.5], 0)?;
            ps.prop_f64_mut(0, i)[0] = 1.5;
            ps.ghost_get(w, &[0], false)?;
            assert_eq!(ps.n_ghost(), 0);
            ps.ghost_put(w, MergeOp::Sum, &[0])?;
            assert_eq!(ps.prop_f64(0, 0)[0], 1.5);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn verlet_matches_brute_force_oracle() {
        world_spawn(1, |w| {
            let dec = decomp_for(3, Bc::NonPeriodic, 0.3, 1);
            let mut ps = ParticleSet::new(PropertySchema::empty(), dec, 0)?;
            ps.init_grid(&[5, 5, 5])?;
            ps.ghost_get(w, &[], false)?;
            let r_cut = 0.27;
            let full = build_verlet(&ps, r_cut, 0.0, false)?;
            let sym = build_verlet(&ps, r_cut, 0.0, true)?;
            // brute force O(N^2) oracle
            let mut oracle: BTreeSet<(usize, usize)> = BTreeSet::new();
            for i in 0..ps.n_owned() {
                for j in 0..ps.len() {
                    if i == j {
                        continue;
                    }
                    let d2: f64 = ps
                        .position(i)
                        .iter()
                        .zip(ps.position(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d2 < r_cut * r_cut {
                        oracle.insert((i, j));
                    }
                }
            }
            let mut got: BTreeSet<(usize, usize)> = BTreeSet::new();
            for i in 0..ps.n_owned() {
                for &j in full.neighbors(i) {
                    got.insert((i, j as usize));
                }
            }
            assert_eq!(got, oracle);
            // symmetric stores each unordered pair once: half the count
            assert_eq!(sym.pair_count() * 2, full.pair_count());
            for i in 0..ps.n_owned() {
                for &j in sym.neighbors(i) {
                    assert!(ps.gid(j as usize) > ps.gid(i));
                }
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn neighbor_radius_is_strict() {
        world_spawn(1, |w| {
            let dec = decomp_for(1, Bc::NonPeriodic, 0.5, 1);
            let mut ps = ParticleSet::new(PropertySchema::empty(), dec, 0)?;
            ps.add_owned(&[0.2], 0)?;
            ps.add_owned(&[0.45], 1)?;
            ps.ghost_get(w, &[], false)?;
            // distance exactly r_cut: excluded
            let v = build_verlet(&ps, 0.25, 0.0, false)?;
            assert_eq!(v.pair_count(), 0);
            // distance 0.9 * r_cut: one pair each direction
            let v = build_verlet(&ps, 0.28, 0.0, false)?;
            assert_eq!(v.pair_count(), 2);
            let v = build_verlet(&ps, 0.28, 0.0, true)?;
            assert_eq!(v.pair_count(), 1);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn r_cut_beyond_ghost_width_rejected() {
        world_spawn(1, |w| {
            let dec = decomp_for(1, Bc::NonPeriodic, 0.1, 1);
            let mut ps = ParticleSet::new(PropertySchema::empty(), dec, 0)?;
            ps.add_owned(&[0.5], 0)?;
            ps.ghost_get(w, &[], false)?;
            assert!(build_verlet(&ps, 0.2, 0.0, false).is_err());
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn pairwise_zero_kernel_accumulates_nothing() {
        world_spawn(1, |w| {
            let dec = decomp_for(2, Bc::NonPeriodic, 0.3, 1);
            let schema = PropertySchema::new(vec![PropDesc::vector_f64("f")]).unwrap();
            let mut ps = ParticleSet::new(schema, dec, 0)?;
            ps.init_grid(&[4, 4])?;
            ps.ghost_get(w, &[], false)?;
            let list = build_verlet(&ps, 0.3, 0.0, true)?;
            apply_pairwise(&mut ps, &list, 0, Mirror::Negate, |_, _, _, _, _, _out| {})?;
            for i in ps.indices(Region::All) {
                assert_eq!(ps.prop_f64(0, i), &[0.0, 0.0]);
            }
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn symmetric_pairwise_matches_full_on_multiple_ranks() {
        // LJ-style kernel; symmetric + ghost_put(SUM) vs full evaluation
        for nranks in [1usize, 4] {
            let out = world_spawn(nranks, move |w| {
                let dec = decomp_for(2, Bc::Periodic, 0.2, w.size());
                let schema = PropertySchema::new(vec![
                    PropDesc::vector_f64("f_sym"),
                    PropDesc::vector_f64("f_full"),
                ])
                .unwrap();
                let mut ps = ParticleSet::new(schema, dec, w.rank())?;
                ps.init_grid(&[11, 11])?;
                ps.map_local(w)?;
                ps.ghost_get(w, &[], false)?;
                let r_cut = 0.17;
                let kernel = |ps: &ParticleSet,
                              _i: usize,
                              _j: usize,
                              dx: &[f64],
                              r2: f64,
                              out: &mut [f64]| {
                    let _ = ps;
                    if r2 > r_cut * r_cut || r2 == 0.0 {
                        return;
                    }
                    let inv = 1.0 / r2;
                    for d in 0..dx.len() {
                        out[d] = dx[d] * inv;
                    }
                };
                let sym = build_verlet(&ps, r_cut, 0.0, true)?;
                ps.zero_prop(0, Region::All);
                apply_pairwise(&mut ps, &sym, 0, Mirror::Negate, kernel)?;
                ps.ghost_put(w, MergeOp::Sum, &[0])?;
                let full = build_verlet(&ps, r_cut, 0.0, false)?;
                ps.zero_prop(1, Region::All);
                apply_pairwise(&mut ps, &full, 1, Mirror::Negate, kernel)?;
                let per_gid: Vec<(u64, Vec<f64>, Vec<f64>)> = ps
                    .indices(Region::Owned)
                    .map(|i| {
                        (ps.gid(i), ps.prop_f64(0, i).to_vec(), ps.prop_f64(1, i).to_vec())
                    })
                    .collect();
                Ok(per_gid)
            })
            .unwrap();
            for rows in out {
                for (gid, sym, full) in rows {
                    for d in 0..2 {
                        let denom = full[d].abs().max(1.0);
                        assert!(
                            (sym[d] - full[d]).abs() / denom < 1e-12,
                            "gid {gid} axis {d}: {} vs {}",
                            sym[d],
                            full[d]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn ghost_coherence_bitwise_after_get() {
        let out = world_spawn(4, |w| {
            let dec = decomp_for(2, Bc::Periodic, 0.15, 4);
            let schema = PropertySchema::new(vec![PropDesc::vector_f64("v")]).unwrap();
            let mut ps = ParticleSet::new(schema, dec.clone(), w.rank())?;
            ps.init_grid(&[9, 9])?;
            ps.map_local(w)?;
            for i in ps.indices(Region::Owned) {
                let g = ps.gid(i) as f64;
                let row = ps.prop_f64_mut(0, i);
                row[0] = g * 0.1;
                row[1] = -g * 7.25;
            }
            ps.ghost_get(w, &[0], false)?;
            // report all owned and ghost states for global comparison
            let owned: Vec<(u64, Vec<u64>)> = ps
                .indices(Region::Owned)
                .map(|i| (ps.gid(i), ps.prop_f64(0, i).iter().map(|v| v.to_bits()).collect()))
                .collect();
            let ghosts: Vec<(u64, Vec<u64>)> = ps
                .indices(Region::Ghost)
                .map(|i| (ps.gid(i), ps.prop_f64(0, i).iter().map(|v| v.to_bits()).collect()))
                .collect();
            Ok((owned, ghosts))
        })
        .unwrap();
        let mut owner_map = BTreeMap::new();
        for (owned, _) in &out {
            for (gid, bits) in owned {
                owner_map.insert(*gid, bits.clone());
            }
        }
        let mut total_ghosts = 0;
        for (_, ghosts) in &out {
            for (gid, bits) in ghosts {
                assert_eq!(&owner_map[gid], bits, "ghost of gid {gid} differs from owner");
                total_ghosts += 1;
            }
        }
        assert!(total_ghosts > 0);
    }

    #[test]
    fn ghost_keep_refreshes_values() {
        let out = world_spawn(2, |w| {
            let dec = decomp_for(1, Bc::Periodic, 0.2, 2);
            let schema = PropertySchema::new(vec![PropDesc::scalar_f64("q")]).unwrap();
            let mut ps = ParticleSet::new(schema, dec, w.rank())?;
            ps.init_grid(&[8])?;
            ps.map_local(w)?;
            ps.ghost_get(w, &[0], false)?;
            let ghost_count = ps.n_ghost();
            // owners change their values; KEEP refresh must propagate them
            for i in ps.indices(Region::Owned) {
                ps.prop_f64_mut(0, i)[0] = 100.0 + ps.gid(i) as f64;
            }
            ps.ghost_get(w, &[0], true)?;
            assert_eq!(ps.n_ghost(), ghost_count, "KEEP must not rebuild");
            let ok = ps
                .indices(Region::Ghost)
                .all(|i| ps.prop_f64(0, i)[0] == 100.0 + ps.gid(i) as f64);
            Ok(ok)
        })
        .unwrap();
        assert!(out.into_iter().all(|b| b));
    }

    #[test]
    fn iterate_regions_partition_indices() {
        world_spawn(1, |w| {
            let dec = decomp_for(1, Bc::Periodic, 0.2, 1);
            let mut ps = ParticleSet::new(PropertySchema::empty(), dec, 0)?;
            assert_eq!(ps.indices(Region::All).len(), 0);
            ps.init_grid(&[8])?;
            ps.ghost_get(w, &[], false)?;
            let owned: Vec<usize> = ps.indices(Region::Owned).collect();
            let ghost: Vec<usize> = ps.indices(Region::Ghost).collect();
            let all: Vec<usize> = ps.indices(Region::All).collect();
            let merged: Vec<usize> = owned.iter().chain(ghost.iter()).copied().collect();
            assert_eq!(merged, all);
            assert_eq!(ghost.len(), ps.n_ghost());
            Ok(())
        })
        .unwrap();
    }
}
