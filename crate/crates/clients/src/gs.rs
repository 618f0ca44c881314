//! Gray-Scott reaction-diffusion over the distributed grid: FTCS updates
//! through a star-stencil sweep on double-buffered fields, with ghost
//! exchange between sweeps. Stencil-local and reduction-free, so any rank
//! count produces bitwise-identical fields.

use std::collections::BTreeMap;
use std::sync::Arc;

use pmfw::decomp::Decomposition;
use pmfw::dlb::{self, CostLedger, SarState};
use pmfw::geometry::{AxisBox, Bc, GhostSpec};
use pmfw::io::{checkpoint_load_grid, checkpoint_save_grid, vtk_write_grid};
use pmfw::mesh::{gather_global, stencil_sweep, DistributedGrid, Stencil};
use pmfw::schema::{PropDesc, PropertySchema};
use pmfw::transport::World;
use pmfw::Result;

use crate::cli::RunOpts;
use crate::config::GSConfig;

pub const PROP_U: usize = 0;
pub const PROP_V: usize = 1;

fn gs_schema() -> PropertySchema {
    PropertySchema::new(vec![PropDesc::scalar_f64("u"), PropDesc::scalar_f64("v")])
        .expect("static schema is valid")
}

/// One FTCS update on the owned nodes, reading `old` and writing `new`:
/// `u' = u + dt (D_u Lap(u) - u v^2 + F (1 - u))`,
/// `v' = v + dt (D_v Lap(v) + u v^2 - (F + k) v)`.
/// Ghost frames of `old` must be current.
pub fn gs_step(old: &DistributedGrid, new: &mut DistributedGrid, cfg: &GSConfig) -> Result<()> {
    let dim = old.dim();
    let star = Stencil::star(dim);
    let inv_h2 = 1.0 / (cfg.spacing * cfg.spacing);
    let (d_u, d_v, f, k, dt) = (cfg.d_u, cfg.d_v, cfg.f, cfg.k, cfg.dt);
    stencil_sweep(old, new, &star, &[PROP_U, PROP_V], &[PROP_U, PROP_V], move |ctx, out| {
        let u = ctx.get(0, 0);
        let v = ctx.get(1, 0);
        let mut lap_u = 0.0;
        let mut lap_v = 0.0;
        for d in 0..dim {
            lap_u += (ctx.get(0, 1 + 2 * d) + ctx.get(0, 2 + 2 * d) - 2.0 * u) * inv_h2;
            lap_v += (ctx.get(1, 1 + 2 * d) + ctx.get(1, 2 + 2 * d) - 2.0 * v) * inv_h2;
        }
        let uv2 = u * v * v;
        out[0] = u + dt * (d_u * lap_u - uv2 + f * (1.0 - u));
        out[1] = v + dt * (d_v * lap_v + uv2 - (f + k) * v);
    })
}

/// Per-node initialization noise in [-1, 1], derived from the seed and the
/// global node index so every decomposition produces identical fields.
fn node_noise(seed: u64, linear: u64) -> f64 {
    let mut z = seed ^ linear.wrapping_mul(0xd1342543de82ef95);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    2.0 * ((z >> 11) as f64 / (1u64 << 53) as f64) - 1.0
}

#[derive(Clone, Debug)]
pub struct GsReport {
    pub steps_run: usize,
    pub v_mean: f64,
    pub v_variance: f64,
    pub u_mean: f64,
    pub v_max: f64,
    /// Gathered global fields (u bits, v bits) when requested.
    pub final_field: Option<BTreeMap<Vec<i64>, (u64, u64)>>,
}

/// Initialize `u = 1, v = 0` with a central square perturbation
/// (`u = 0.5, v = 0.25`, each with 1% seeded noise) and run `gs_step`.
pub fn run_gray_scott(cfg: &GSConfig, run: &RunOpts, world: &mut World) -> Result<GsReport> {
    cfg.validate()?;
    let dim = cfg.grid.len();
    let high: Vec<f64> = cfg.grid.iter().map(|&n| n as f64 * cfg.spacing).collect();
    let domain = AxisBox::new(vec![0.0; dim], high)?;
    let bc = vec![Bc::Periodic; dim];
    // the star stencil needs one frame node; derive the ghost width from
    // the spacing rather than a physics radius
    let ghost = GhostSpec::new(cfg.spacing)?;
    let decomp = Arc::new(Decomposition::build(&domain, &bc, &ghost, world.size(), None, None)?);

    let mut old = match &run.restart {
        Some(path) => checkpoint_load_grid(path, world, decomp.clone(), Some(&gs_schema()))?,
        None => {
            let mut g =
                DistributedGrid::new(&cfg.grid, gs_schema(), decomp.clone(), world.rank())?;
            let mut keys = Vec::new();
            g.for_each_owned(|key, _, _| keys.push(key.to_vec()));
            // central square spans 1/8 of each axis
            let mut strides = vec![1u64; dim];
            for d in (0..dim.saturating_sub(1)).rev() {
                strides[d] = strides[d + 1] * cfg.grid[d + 1] as u64;
            }
            for key in &keys {
                let inside = (0..dim).all(|d| {
                    let n = cfg.grid[d] as i64;
                    (key[d] - n / 2).abs() <= n / 16
                });
                let (u, v) = if inside {
                    let linear: u64 =
                        (0..dim).map(|d| key[d] as u64 * strides[d]).sum();
                    let nu = node_noise(cfg.seed, linear);
                    let nv = node_noise(cfg.seed ^ 0x5bf0_3635, linear);
                    (0.5 * (1.0 + 0.01 * nu), 0.25 * (1.0 + 0.01 * nv))
                } else {
                    (1.0, 0.0)
                };
                g.set(key, PROP_U, &[u])?;
                g.set(key, PROP_V, &[v])?;
            }
            g
        }
    };
    let mut new = DistributedGrid::new(&cfg.grid, gs_schema(), decomp.clone(), world.rank())?;

    let mut ledger = CostLedger::new(decomp.grid().cell_count());
    let mut sar = SarState::new(1e-3);
    let mut trace = match (&run.trace, world.rank()) {
        (Some(path), 0) => Some(dlb::LedgerTrace::create(path, world.size())?),
        _ => None,
    };

    let mut steps_run = 0;
    for step in 1..=cfg.steps {
        let t0 = std::time::Instant::now();
        old.ghost_get(world, &[PROP_U, PROP_V])?;
        gs_step(&old, &mut new, cfg)?;
        std::mem::swap(&mut old, &mut new);
        steps_run = step;
        if let Some(every) = run.vtk_every {
            if step % every == 0 {
                let base = run.out.join(format!("gs_{step:06}"));
                vtk_write_grid(&old, &base, &[PROP_U, PROP_V])?;
            }
        }
        if let Some(every) = run.checkpoint_every {
            if step % every == 0 {
                let path = run.out.join(format!("gs_{step:06}.ckpt"));
                checkpoint_save_grid(&old, &path, world)?;
            }
        }
        if run.dlb || trace.is_some() {
            let my_time = t0.elapsed().as_secs_f64();
            let all = world.allgather(&my_time.to_bits().to_le_bytes())?;
            let times: Vec<f64> = all
                .iter()
                .map(|b| f64::from_bits(u64::from_le_bytes(b[..8].try_into().unwrap())))
                .collect();
            let delta = dlb::record_step(&mut ledger, &mut sar, &times);
            // node counts per cell are static for a mesh-only client, so the
            // ledger uses them directly
            let mut counts = vec![0.0; decomp.grid().cell_count()];
            let per_cell: f64 = (0..dim)
                .map(|d| (cfg.grid[d] / decomp.grid().cells_per_axis()[d]) as f64)
                .product();
            for c in 0..counts.len() {
                if decomp.assignment().owner[c] == world.rank() {
                    counts[c] = per_cell;
                }
            }
            ledger.set_costs_from_counts(&counts);
            if let Some(t) = trace.as_mut() {
                t.record(step, &times, delta, sar.w_current(), false)?;
            }
        }
    }

    // global statistics of v
    let mut sums = [0.0f64; 4]; // sum v, sum v^2, sum u, max v
    sums[3] = f64::NEG_INFINITY;
    let mut count = 0u64;
    let mut keys = Vec::new();
    old.for_each_owned(|key, _, _| keys.push(key.to_vec()));
    for key in &keys {
        let v = old.get(key, PROP_V)?[0];
        let u = old.get(key, PROP_U)?[0];
        sums[0] += v;
        sums[1] += v * v;
        sums[2] += u;
        sums[3] = sums[3].max(v);
        count += 1;
    }
    let mut buf = Vec::new();
    for s in sums {
        buf.extend_from_slice(&s.to_bits().to_le_bytes());
    }
    buf.extend_from_slice(&count.to_le_bytes());
    let all = world.allgather(&buf)?;
    let mut g_sums = [0.0f64; 3];
    let mut g_max = f64::NEG_INFINITY;
    let mut g_count = 0u64;
    for b in all {
        for (i, slot) in g_sums.iter_mut().enumerate() {
            *slot += f64::from_bits(u64::from_le_bytes(b[i * 8..(i + 1) * 8].try_into().unwrap()));
        }
        g_max = g_max.max(f64::from_bits(u64::from_le_bytes(b[24..32].try_into().unwrap())));
        g_count += u64::from_le_bytes(b[32..40].try_into().unwrap());
    }
    let n = g_count as f64;
    let v_mean = g_sums[0] / n;
    let report = GsReport {
        steps_run,
        v_mean,
        v_variance: g_sums[1] / n - v_mean * v_mean,
        u_mean: g_sums[2] / n,
        v_max: g_max,
        final_field: if run.collect_state {
            let u_map = gather_global(world, &old, PROP_U)?;
            let v_map = gather_global(world, &old, PROP_V)?;
            Some(
                u_map
                    .into_iter()
                    .map(|(k, ub)| {
                        let vb = v_map[&k][0];
                        (k, (ub[0], vb))
                    })
                    .collect(),
            )
        } else {
            None
        },
    };
    Ok(report)
}
