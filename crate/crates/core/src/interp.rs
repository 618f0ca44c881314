//! Moment-conserving particle-mesh and mesh-particle interpolation with the
//! M'4 kernel (support of two cells per side, tensor-product weights).
//!
//! Particles scatter into their home block's padded storage, including the
//! ghost frame; frame contributions are then folded back onto the owning
//! nodes, so the result is independent of the decomposition up to
//! floating-point summation order.

use crate::error::{usage, Result};
use crate::exec;
use crate::mesh::DistributedGrid;
use crate::particles::ParticleSet;
use crate::transport::World;

/// Kernel support radius in cells.
pub const SUPPORT: usize = 2;

/// The M'4 interpolation weight function.
///
/// `1 - 5/2 x^2 + 3/2 |x|^3` for `|x| < 1`,
/// `1/2 (2 - |x|)^2 (1 - |x|)` for `1 <= |x| < 2`, `0` otherwise.
/// Partition of unity: `sum_k m4prime(x - k) = 1` for all `x`.
pub fn m4prime(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        1.0 - 2.5 * a * a + 1.5 * a * a * a
    } else if a < 2.0 {
        0.5 * (2.0 - a) * (2.0 - a) * (1.0 - a)
    } else {
        0.0
    }
}

/// Per-axis window: the four nodes `base..base+4` and their weights for a
/// particle at node coordinate `u` (position in units of the spacing).
fn window(u: f64) -> (i64, [f64; 4]) {
    let base = u.floor() as i64 - 1;
    let mut w = [0.0; 4];
    for (k, wk) in w.iter_mut().enumerate() {
        *wk = m4prime(u - (base + k as i64) as f64);
    }
    (base, w)
}

fn check_frames(grid: &DistributedGrid) -> Result<()> {
    for d in 0..grid.dim() {
        if grid.frame_nodes(d) < SUPPORT {
            return Err(usage(format!(
                "interpolation needs a ghost frame of at least {SUPPORT} nodes; axis {d} has {}",
                grid.frame_nodes(d)
            )));
        }
    }
    Ok(())
}

/// Scatter a particle property onto the mesh:
/// `node += value * prod_d m4prime((x[d] - node[d]) / h[d])` over the 4^D
/// surrounding nodes, followed by a summing fold of ghost-frame
/// contributions back onto the owning nodes. The destination property is
/// zeroed first; afterwards owner values are final and frames are stale.
pub fn p2m(
    pset: &ParticleSet,
    src_prop: usize,
    grid: &mut DistributedGrid,
    dst_prop: usize,
    world: &mut World,
) -> Result<()> {
    check_frames(grid)?;
    let dim = grid.dim();
    let comps = pset.col(src_prop).comps();
    if let Some(b) = grid.blocks().first() {
        if b.col(dst_prop).comps() != comps {
            return Err(usage("source and destination component counts differ"));
        }
    }
    let decomp = pset.decomposition().clone();
    let low = decomp.domain().low().to_vec();
    let spacing = grid.spacing().to_vec();

    // per-block spans inside one flat accumulation buffer
    let mut spans = Vec::with_capacity(grid.blocks().len());
    let mut total = 0usize;
    for b in grid.blocks() {
        spans.push(total);
        total += b.col(dst_prop).rows() * comps;
    }
    let block_meta: Vec<(Vec<i64>, Vec<usize>, Vec<usize>)> = grid
        .blocks()
        .iter()
        .map(|b| {
            let frame: Vec<usize> = (0..dim).map(|d| grid.frame_nodes(d)).collect();
            let padded: Vec<usize> =
                b.ext.iter().zip(&frame).map(|(e, g)| e + 2 * g).collect();
            let mut strides = vec![1usize; dim];
            for d in (0..dim.saturating_sub(1)).rev() {
                strides[d] = strides[d + 1] * padded[d + 1];
            }
            (b.origin.clone(), frame, strides)
        })
        .collect();
    let rank = pset.rank();

    let acc = exec::accumulate_chunked(pset.n_owned(), total, |range, buf| {
        let mut windows = vec![(0i64, [0.0; 4]); dim];
        let mut counter = vec![0usize; dim];
        for i in range {
            let x = pset.position(i);
            let Some(home) = decomp.local_subdomain_of(rank, x) else {
                continue; // unmapped particle; ownership is map's invariant
            };
            let (origin, frame, strides) = &block_meta[home];
            let span = spans[home];
            let val = pset.prop_f64(src_prop, i);
            for d in 0..dim {
                windows[d] = window((x[d] - low[d]) / spacing[d]);
            }
            counter.fill(0);
            loop {
                let mut w = 1.0;
                let mut lin = 0usize;
                for d in 0..dim {
                    let node = windows[d].0 + counter[d] as i64;
                    w *= windows[d].1[counter[d]];
                    let l = node - origin[d] + frame[d] as i64;
                    lin += l as usize * strides[d];
                }
                if w != 0.0 {
                    for c in 0..comps {
                        buf[span + lin * comps + c] += val[c] * w;
                    }
                }
                let mut done = true;
                for d in (0..dim).rev() {
                    counter[d] += 1;
                    if counter[d] < 4 {
                        done = false;
                        break;
                    }
                    counter[d] = 0;
                }
                if done {
                    break;
                }
            }
        }
    });

    for (b, blk) in grid.blocks_mut().iter_mut().enumerate() {
        let span = spans[b];
        let data = blk.col_mut(dst_prop).f64_data_mut();
        let len = data.len();
        data.copy_from_slice(&acc[span..span + len]);
    }
    grid.ghost_put_sum(world, &[dst_prop])
}

/// Gather a mesh property onto particles with the same tensor-product
/// weights. Ghost frames must be current (`ghost_get` first); the particle
/// property is overwritten.
pub fn m2p(
    grid: &DistributedGrid,
    src_prop: usize,
    pset: &mut ParticleSet,
    dst_prop: usize,
) -> Result<()> {
    check_frames(grid)?;
    let dim = grid.dim();
    let comps = pset.col(dst_prop).comps();
    let decomp = pset.decomposition().clone();
    let low = decomp.domain().low().to_vec();
    let spacing = grid.spacing().to_vec();
    let rank = pset.rank();
    let n_owned = pset.n_owned();
    let pset_ref: &ParticleSet = pset;

    let mut out = vec![0.0f64; n_owned * comps];
    exec::for_each_row_mut(&mut out, comps, |i, row| {
        let x = pset_ref.position(i);
        let Some(home) = decomp.local_subdomain_of(rank, x) else {
            return;
        };
        let blk = &grid.blocks()[home];
        let col = blk.col(src_prop).f64_data();
        let frame: Vec<usize> = (0..dim).map(|d| grid.frame_nodes(d)).collect();
        let padded: Vec<usize> = blk.ext.iter().zip(&frame).map(|(e, g)| e + 2 * g).collect();
        let mut strides = vec![1usize; dim];
        for d in (0..dim.saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * padded[d + 1];
        }
        let mut windows = vec![(0i64, [0.0; 4]); dim];
        for d in 0..dim {
            windows[d] = window((x[d] - low[d]) / spacing[d]);
        }
        let mut counter = vec![0usize; dim];
        loop {
            let mut w = 1.0;
            let mut lin = 0usize;
            for d in 0..dim {
                let node = windows[d].0 + counter[d] as i64;
                w *= windows[d].1[counter[d]];
                let l = node - blk.origin[d] + frame[d] as i64;
                lin += l as usize * strides[d];
            }
            if w != 0.0 {
                for c in 0..comps {
                    row[c] += col[lin * comps + c] * w;
                }
            }
            let mut done = true;
            for d in (0..dim).rev() {
                counter[d] += 1;
                if counter[d] < 4 {
                    done = false;
                    break;
                }
                counter[d] = 0;
            }
            if done {
                break;
            }
        }
    });
    for i in 0..n_owned {
        pset.prop_f64_mut(dst_prop, i).copy_from_slice(&out[i * comps..(i + 1) * comps]);
    }
    Ok(())
}
