//! Chunked checkpoint/restart readable on any rank count (map-after-read),
//! and legacy ASCII VTK output for particles and grids.
//!
//! Checkpoint layout, all little-endian, IEEE-754 binary64 values:
//! header (magic `PMCKPT01`, version, dimension, entity kind, schema
//! descriptor, domain box, boundary conditions, global size, rank count at
//! save), then one contiguous chunk per saved rank, then a footer with
//! per-chunk offsets, lengths, and CRC32C checksums, the footer offset, and
//! the end magic `PMCKPTEF`. Partial files carry no valid footer and are
//! detectably incomplete.

use std::io::{Read, Seek, SeekFrom};
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::Arc;

use crate::decomp::Decomposition;
use crate::error::{usage, Error, Result};
use crate::geometry::Bc;
use crate::mesh::{scatter_blocks, DistributedGrid, IntBox};
use crate::particles::{ParticleSet, Region};
use crate::schema::{
    read_f64, read_i64, read_u32, read_u64, read_u8, slice, Column, PropKind, PropertySchema,
};
use crate::transport::World;

const MAGIC: &[u8; 8] = b"PMCKPT01";
const END_MAGIC: &[u8; 8] = b"PMCKPTEF";
const VERSION: u32 = 1;
const KIND_PARTICLES: u8 = 0;
const KIND_GRID: u8 = 1;

const CRC: crc::Crc<u32> = crc::Crc::<u32>::new(&crc::CRC_32_ISCSI);

fn header_bytes(
    dim: usize,
    kind: u8,
    schema: &PropertySchema,
    domain_low: &[f64],
    domain_high: &[f64],
    bc: &[Bc],
    global_size: &[u64],
    nranks: u32,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&schema.encode());
    for v in domain_low.iter().chain(domain_high) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for b in bc {
        out.push(match b {
            Bc::NonPeriodic => 0,
            Bc::Periodic => 1,
        });
    }
    out.extend_from_slice(&(global_size.len() as u32).to_le_bytes());
    for v in global_size {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&nranks.to_le_bytes());
    out
}

struct Header {
    dim: usize,
    kind: u8,
    schema: PropertySchema,
    domain_low: Vec<f64>,
    domain_high: Vec<f64>,
    bc: Vec<Bc>,
    global_size: Vec<u64>,
    nranks: u32,
}

fn parse_header(buf: &[u8]) -> Result<Header> {
    let mut at = 0;
    let magic = slice(buf, &mut at, 8)?;
    if magic != MAGIC {
        return Err(Error::CorruptFile("bad checkpoint magic".into()));
    }
    let version = read_u32(buf, &mut at)?;
    if version != VERSION {
        return Err(Error::SchemaMismatch(format!(
            "checkpoint format version {version}, expected {VERSION}"
        )));
    }
    let dim = read_u32(buf, &mut at)? as usize;
    let kind = read_u8(buf, &mut at)?;
    let schema = PropertySchema::decode(buf, &mut at)?;
    let mut domain_low = vec![0.0; dim];
    let mut domain_high = vec![0.0; dim];
    for v in domain_low.iter_mut().chain(domain_high.iter_mut()) {
        *v = read_f64(buf, &mut at)?;
    }
    let mut bc = Vec::with_capacity(dim);
    for _ in 0..dim {
        bc.push(match read_u8(buf, &mut at)? {
            0 => Bc::NonPeriodic,
            1 => Bc::Periodic,
            t => return Err(Error::CorruptFile(format!("bad bc tag {t}"))),
        });
    }
    let gs_len = read_u32(buf, &mut at)? as usize;
    let mut global_size = vec![0u64; gs_len];
    for v in global_size.iter_mut() {
        *v = read_u64(buf, &mut at)?;
    }
    let nranks = read_u32(buf, &mut at)?;
    Ok(Header { dim, kind, schema, domain_low, domain_high, bc, global_size, nranks })
}

/// Write one file: a header, one chunk per rank (each rank writes only its
/// own byte range), and a footer written by rank 0 after a barrier.
fn write_checkpoint(world: &mut World, path: &Path, header: &[u8], chunk: &[u8]) -> Result<()> {
    let my_len = chunk.len() as u64;
    let lens = world.allgather(&my_len.to_le_bytes())?;
    let lens: Vec<u64> =
        lens.iter().map(|b| u64::from_le_bytes(b[..8].try_into().unwrap())).collect();
    let mut offsets = Vec::with_capacity(lens.len());
    let mut off = header.len() as u64;
    for l in &lens {
        offsets.push(off);
        off += l;
    }
    let crc = CRC.checksum(chunk);
    let crcs = world.allgather(&crc.to_le_bytes())?;
    if world.rank() == 0 {
        let f = std::fs::File::create(path).map_err(|e| rank_io_error(world.rank(), e))?;
        f.set_len(off).map_err(|e| rank_io_error(world.rank(), e))?;
        f.write_at(header, 0).map_err(|e| rank_io_error(world.rank(), e))?;
    }
    world.barrier()?;
    let f = std::fs::OpenOptions::new()
        .write(true)
        .open(path)
        .map_err(|e| rank_io_error(world.rank(), e))?;
    f.write_at(chunk, offsets[world.rank()])
        .map_err(|e| rank_io_error(world.rank(), e))?;
    drop(f);
    world.barrier()?;
    if world.rank() == 0 {
        let mut footer = Vec::new();
        footer.extend_from_slice(&(lens.len() as u32).to_le_bytes());
        for i in 0..lens.len() {
            footer.extend_from_slice(&offsets[i].to_le_bytes());
            footer.extend_from_slice(&lens[i].to_le_bytes());
            footer.extend_from_slice(&crcs[i][..4]);
        }
        let footer_offset = off;
        footer.extend_from_slice(&footer_offset.to_le_bytes());
        footer.extend_from_slice(END_MAGIC);
        let f = std::fs::OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| rank_io_error(0, e))?;
        f.write_at(&footer, off).map_err(|e| rank_io_error(0, e))?;
        f.sync_all().map_err(|e| rank_io_error(0, e))?;
    }
    world.barrier()?;
    Ok(())
}

fn check_domain(header: &Header, decomp: &Decomposition) -> Result<()> {
    if header.dim != decomp.domain().dim()
        || header.domain_low != decomp.domain().low()
        || header.domain_high != decomp.domain().high()
        || header.bc != decomp.bc()
    {
        return Err(Error::SchemaMismatch(
            "checkpoint domain or boundary conditions differ from the decomposition".into(),
        ));
    }
    Ok(())
}

fn rank_io_error(rank: usize, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("rank {rank}: {e}")))
}

struct ChunkTable {
    offsets: Vec<u64>,
    lens: Vec<u64>,
    crcs: Vec<u32>,
}

fn read_header_and_table(path: &Path) -> Result<(Header, ChunkTable, std::fs::File)> {
    let mut f = std::fs::File::open(path)?;
    let file_len = f.metadata()?.len();
    if file_len < 16 {
        return Err(Error::CorruptFile("file too short for a footer".into()));
    }
    let mut tail = [0u8; 16];
    f.seek(SeekFrom::End(-16))?;
    f.read_exact(&mut tail)?;
    if &tail[8..] != END_MAGIC {
        return Err(Error::CorruptFile("missing end magic; file is incomplete".into()));
    }
    let footer_offset = u64::from_le_bytes(tail[..8].try_into().unwrap());
    if footer_offset >= file_len {
        return Err(Error::CorruptFile("footer offset out of range".into()));
    }
    let mut footer = vec![0u8; (file_len - footer_offset) as usize - 16];
    f.seek(SeekFrom::Start(footer_offset))?;
    f.read_exact(&mut footer)?;
    let mut at = 0;
    let nchunks = read_u32(&footer, &mut at)? as usize;
    let mut table = ChunkTable {
        offsets: Vec::with_capacity(nchunks),
        lens: Vec::with_capacity(nchunks),
        crcs: Vec::with_capacity(nchunks),
    };
    for _ in 0..nchunks {
        table.offsets.push(read_u64(&footer, &mut at)?);
        table.lens.push(read_u64(&footer, &mut at)?);
        table.crcs.push(read_u32(&footer, &mut at)?);
    }
    let header_len = table.offsets.first().copied().unwrap_or(footer_offset);
    let mut header = vec![0u8; header_len as usize];
    f.seek(SeekFrom::Start(0))?;
    f.read_exact(&mut header)?;
    let header = parse_header(&header)?;
    if header.nranks as usize != nchunks {
        return Err(Error::CorruptFile("chunk table does not match saved rank count".into()));
    }
    Ok((header, table, f))
}

fn read_chunk(f: &std::fs::File, table: &ChunkTable, i: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; table.lens[i] as usize];
    f.read_exact_at(&mut buf, table.offsets[i])?;
    let crc = CRC.checksum(&buf);
    if crc != table.crcs[i] {
        return Err(Error::CorruptFile(format!(
            "chunk {i} checksum mismatch (stored {:#010x}, computed {crc:#010x})",
            table.crcs[i]
        )));
    }
    Ok(buf)
}

/// Save a particle set: one chunk per rank holding the owned particles
/// (ghosts excluded) as raw little-endian columns plus gids.
pub fn checkpoint_save_particles(pset: &ParticleSet, path: &Path, world: &mut World) -> Result<()> {
    let n = pset.n_owned() as u64;
    let counts = world.allgather(&n.to_le_bytes())?;
    let total: u64 = counts
        .iter()
        .map(|b| u64::from_le_bytes(b[..8].try_into().unwrap()))
        .sum();
    let dec = pset.decomposition();
    let header = header_bytes(
        pset.dim(),
        KIND_PARTICLES,
        pset.schema(),
        dec.domain().low(),
        dec.domain().high(),
        dec.bc(),
        &[total],
        world.size() as u32,
    );
    let mut chunk = Vec::new();
    chunk.extend_from_slice(&(world.rank() as u32).to_le_bytes());
    chunk.extend_from_slice(&n.to_le_bytes());
    for i in pset.indices(Region::Owned) {
        for v in pset.position(i) {
            chunk.extend_from_slice(&v.to_le_bytes());
        }
    }
    for p in 0..pset.schema().len() {
        for i in pset.indices(Region::Owned) {
            pset.col(p).write_row(i, &mut chunk);
        }
    }
    for i in pset.indices(Region::Owned) {
        chunk.extend_from_slice(&pset.gid(i).to_le_bytes());
    }
    write_checkpoint(world, path, &header, &chunk)
}

/// Load a particle set saved on any rank count: chunks are read round-robin
/// by the current ranks, deserialized, and mapped globally onto the given
/// decomposition. Self-describing; pass `expect_schema` to enforce a schema.
pub fn checkpoint_load_particles(
    path: &Path,
    world: &mut World,
    decomp: Arc<Decomposition>,
    expect_schema: Option<&PropertySchema>,
) -> Result<ParticleSet> {
    let (header, table, f) = read_header_and_table(path)?;
    if header.kind != KIND_PARTICLES {
        return Err(Error::SchemaMismatch("checkpoint holds a grid, not particles".into()));
    }
    if let Some(want) = expect_schema {
        if *want != header.schema {
            return Err(Error::SchemaMismatch("particle schema differs from the file".into()));
        }
    }
    check_domain(&header, &decomp)?;
    let mut pset = ParticleSet::new(header.schema.clone(), decomp, world.rank())?;
    for i in (world.rank()..header.nranks as usize).step_by(world.size()) {
        let buf = read_chunk(&f, &table, i)?;
        let mut at = 0;
        let _rank = read_u32(&buf, &mut at)?;
        let count = read_u64(&buf, &mut at)? as usize;
        let mut pos = Vec::with_capacity(count * header.dim);
        for _ in 0..count * header.dim {
            pos.push(read_f64(&buf, &mut at)?);
        }
        let mut cols: Vec<Column> = header
            .schema
            .props()
            .iter()
            .map(|p| Column::new_for(p, header.dim))
            .collect();
        for col in cols.iter_mut() {
            for _ in 0..count {
                col.read_row(&buf, &mut at)?;
            }
        }
        let mut gid = Vec::with_capacity(count);
        for _ in 0..count {
            gid.push(read_u64(&buf, &mut at)?);
        }
        if at != buf.len() {
            return Err(Error::CorruptFile(format!("chunk {i} has trailing bytes")));
        }
        pset.extend_from_parts(&pos, &gid, cols)?;
    }
    pset.map_global(world)?;
    Ok(pset)
}

/// Save a grid: one chunk per rank holding its owned node blocks
/// (origin key + extents + raw columns, ghost frames excluded).
pub fn checkpoint_save_grid(grid: &DistributedGrid, path: &Path, world: &mut World) -> Result<()> {
    let dec = grid.decomposition();
    let global: Vec<u64> = grid.nodes_per_axis().iter().map(|&n| n as u64).collect();
    let header = header_bytes(
        grid.dim(),
        KIND_GRID,
        grid.schema(),
        dec.domain().low(),
        dec.domain().high(),
        dec.bc(),
        &global,
        world.size() as u32,
    );
    let mut chunk = Vec::new();
    chunk.extend_from_slice(&(world.rank() as u32).to_le_bytes());
    chunk.extend_from_slice(&(grid.owned_node_count() as u64).to_le_bytes());
    chunk.extend_from_slice(&(grid.blocks().len() as u64).to_le_bytes());
    for blk in grid.blocks() {
        for v in &blk.origin {
            chunk.extend_from_slice(&v.to_le_bytes());
        }
        for v in &blk.ext {
            chunk.extend_from_slice(&(*v as u64).to_le_bytes());
        }
        let owned = blk.owned_box();
        let mut lins = Vec::with_capacity(owned.volume());
        owned.for_each_key(|key| lins.push(blk.linear_of(key)));
        for p in 0..grid.schema().len() {
            let col = blk.col(p);
            for &l in &lins {
                col.write_row(l, &mut chunk);
            }
        }
    }
    write_checkpoint(world, path, &header, &chunk)
}

/// Load a grid saved on any rank count (map-after-read): chunks are read
/// round-robin and the node blocks scattered onto the current ownership.
pub fn checkpoint_load_grid(
    path: &Path,
    world: &mut World,
    decomp: Arc<Decomposition>,
    expect_schema: Option<&PropertySchema>,
) -> Result<DistributedGrid> {
    let (header, table, f) = read_header_and_table(path)?;
    if header.kind != KIND_GRID {
        return Err(Error::SchemaMismatch("checkpoint holds particles, not a grid".into()));
    }
    if let Some(want) = expect_schema {
        if *want != header.schema {
            return Err(Error::SchemaMismatch("grid schema differs from the file".into()));
        }
    }
    check_domain(&header, &decomp)?;
    let nodes: Vec<usize> = header.global_size.iter().map(|&n| n as usize).collect();
    let mut grid = DistributedGrid::new(&nodes, header.schema.clone(), decomp, world.rank())?;
    let mut sources = Vec::new();
    for i in (world.rank()..header.nranks as usize).step_by(world.size()) {
        let buf = read_chunk(&f, &table, i)?;
        let mut at = 0;
        let _rank = read_u32(&buf, &mut at)?;
        let _count = read_u64(&buf, &mut at)?;
        let nblocks = read_u64(&buf, &mut at)? as usize;
        for _ in 0..nblocks {
            let mut lo = vec![0i64; header.dim];
            for v in lo.iter_mut() {
                *v = read_i64(&buf, &mut at)?;
            }
            let mut hi = lo.clone();
            for v in hi.iter_mut() {
                *v += read_u64(&buf, &mut at)? as i64;
            }
            let bx = IntBox { lo, hi };
            let rows = bx.volume();
            let mut cols: Vec<Column> = header
                .schema
                .props()
                .iter()
                .map(|p| Column::new_for(p, header.dim))
                .collect();
            for col in cols.iter_mut() {
                for _ in 0..rows {
                    col.read_row(&buf, &mut at)?;
                }
            }
            sources.push((bx, cols));
        }
        if at != buf.len() {
            return Err(Error::CorruptFile(format!("chunk {i} has trailing bytes")));
        }
    }
    scatter_blocks(world, &mut grid, &sources)?;
    Ok(grid)
}

fn fmt_f64(v: f64) -> String {
    // shortest representation that round-trips; VTK readers parse plain
    // decimal or exponent notation
    format!("{v}")
}

fn vtk_pad3(v: &[f64]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (d, x) in v.iter().take(3).enumerate() {
        out[d] = *x;
    }
    out
}

/// Write this rank's owned particles to `<path>.<rank>.vtk` as legacy ASCII
/// POLYDATA. Scalar f64 properties become SCALARS, D-vectors (D <= 3)
/// become VECTORS; other kinds are skipped with a warning on stderr.
pub fn vtk_write_particles(pset: &ParticleSet, path: &Path, props: &[usize]) -> Result<()> {
    if pset.dim() > 3 {
        return Err(usage("VTK output supports up to three dimensions"));
    }
    let file = vtk_rank_path(path, pset.rank());
    let mut out = String::new();
    out.push_str("# vtk DataFile Version 3.0\n");
    out.push_str("particle set\nASCII\nDATASET POLYDATA\n");
    let n = pset.n_owned();
    out.push_str(&format!("POINTS {n} double\n"));
    for i in pset.indices(Region::Owned) {
        let p = vtk_pad3(pset.position(i));
        out.push_str(&format!("{} {} {}\n", fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(p[2])));
    }
    out.push_str(&format!("VERTICES {n} {}\n", 2 * n));
    for i in 0..n {
        out.push_str(&format!("1 {i}\n"));
    }
    out.push_str(&format!("POINT_DATA {n}\n"));
    for &p in props {
        let desc = pset.schema().prop(p);
        match (&desc.kind, desc.base) {
            (PropKind::Scalar, crate::schema::BaseType::F64) => {
                out.push_str(&format!("SCALARS {} double 1\nLOOKUP_TABLE default\n", desc.name));
                for i in pset.indices(Region::Owned) {
                    out.push_str(&fmt_f64(pset.prop_f64(p, i)[0]));
                    out.push('\n');
                }
            }
            (PropKind::Vector, crate::schema::BaseType::F64) if pset.dim() <= 3 => {
                out.push_str(&format!("VECTORS {} double\n", desc.name));
                for i in pset.indices(Region::Owned) {
                    let v = vtk_pad3(pset.prop_f64(p, i));
                    out.push_str(&format!(
                        "{} {} {}\n",
                        fmt_f64(v[0]),
                        fmt_f64(v[1]),
                        fmt_f64(v[2])
                    ));
                }
            }
            _ => {
                eprintln!(
                    "vtk: skipping property '{}' (unsupported kind for legacy VTK)",
                    desc.name
                );
            }
        }
    }
    std::fs::write(&file, out)?;
    Ok(())
}

/// Write this rank's owned grid blocks as legacy ASCII STRUCTURED_POINTS.
/// Block 0 goes to `<path>.<rank>.vtk`; further blocks, when a rank owns
/// more than one, go to `<path>.<rank>_<b>.vtk` since a legacy file holds
/// one dataset.
pub fn vtk_write_grid(grid: &DistributedGrid, path: &Path, props: &[usize]) -> Result<()> {
    if grid.dim() > 3 {
        return Err(usage("VTK output supports up to three dimensions"));
    }
    for (b, blk) in grid.blocks().iter().enumerate() {
        let file = if b == 0 {
            vtk_rank_path(path, grid.rank())
        } else {
            let mut p = path.as_os_str().to_os_string();
            p.push(format!(".{}_{b}.vtk", grid.rank()));
            std::path::PathBuf::from(p)
        };
        let mut dims = [1usize; 3];
        let mut origin = [0.0f64; 3];
        let mut sp = [1.0f64; 3];
        for d in 0..grid.dim() {
            dims[d] = blk.ext[d];
            origin[d] = grid.node_position(&blk.origin)[d];
            sp[d] = grid.spacing()[d];
        }
        let npoints: usize = dims.iter().product();
        let mut out = String::new();
        out.push_str("# vtk DataFile Version 3.0\n");
        out.push_str("grid block\nASCII\nDATASET STRUCTURED_POINTS\n");
        out.push_str(&format!("DIMENSIONS {} {} {}\n", dims[0], dims[1], dims[2]));
        out.push_str(&format!(
            "ORIGIN {} {} {}\n",
            fmt_f64(origin[0]),
            fmt_f64(origin[1]),
            fmt_f64(origin[2])
        ));
        out.push_str(&format!(
            "SPACING {} {} {}\n",
            fmt_f64(sp[0]),
            fmt_f64(sp[1]),
            fmt_f64(sp[2])
        ));
        out.push_str(&format!("POINT_DATA {npoints}\n"));
        // VTK point order: x fastest. Our axis 0 is x.
        let mut keys = Vec::with_capacity(npoints);
        {
            let mut idx = [0usize; 3];
            loop {
                let key: Vec<i64> = (0..grid.dim())
                    .map(|d| blk.origin[d] + idx[d] as i64)
                    .collect();
                keys.push(key);
                let mut done = true;
                for d in 0..3 {
                    idx[d] += 1;
                    if idx[d] < dims[d] {
                        done = false;
                        break;
                    }
                    idx[d] = 0;
                }
                if done {
                    break;
                }
            }
        }
        for &p in props {
            let desc = grid.schema().prop(p);
            match (&desc.kind, desc.base) {
                (PropKind::Scalar, crate::schema::BaseType::F64) => {
                    out.push_str(&format!(
                        "SCALARS {} double 1\nLOOKUP_TABLE default\n",
                        desc.name
                    ));
                    for key in &keys {
                        out.push_str(&fmt_f64(blk.col(p).row_f64(blk.linear_of(key))[0]));
                        out.push('\n');
                    }
                }
                (PropKind::Vector, crate::schema::BaseType::F64) if grid.dim() <= 3 => {
                    out.push_str(&format!("VECTORS {} double\n", desc.name));
                    for key in &keys {
                        let v = vtk_pad3(blk.col(p).row_f64(blk.linear_of(key)));
                        out.push_str(&format!(
                            "{} {} {}\n",
                            fmt_f64(v[0]),
                            fmt_f64(v[1]),
                            fmt_f64(v[2])
                        ));
                    }
                }
                _ => {
                    eprintln!(
                        "vtk: skipping property '{}' (unsupported kind for legacy VTK)",
                        desc.name
                    );
                }
            }
        }
        std::fs::write(&file, out)?;
    }
    Ok(())
}

pub fn vtk_rank_path(path: &Path, rank: usize) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_os_string();
    p.push(format!(".{rank}.vtk"));
    std::path::PathBuf::from(p)
}
