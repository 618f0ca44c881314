//! Lennard-Jones molecular dynamics over the framework: symmetric Verlet
//! lists, two-step velocity Verlet time integration, energy tracing,
//! checkpointing, VTK output, and optional dynamic load balancing.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use pmfw::decomp::Decomposition;
use pmfw::dlb::{self, CostLedger, SarState};
use pmfw::error::Error;
use pmfw::geometry::{AxisBox, Bc, GhostSpec};
use pmfw::io::{checkpoint_load_particles, checkpoint_save_particles, vtk_write_particles};
use pmfw::particles::{apply_pairwise, build_verlet, Mirror, ParticleSet, Region, VerletList};
use pmfw::schema::{PropDesc, PropertySchema};
use pmfw::transport::World;
use pmfw::Result;

use crate::cli::RunOpts;
use crate::config::LJConfig;

pub const PROP_VELOCITY: usize = 0;
pub const PROP_FORCE: usize = 1;

/// Lennard-Jones pair force on p: `24 eps (2 sigma^12/r^14 - sigma^6/r^8) * (x_p - x_q)`,
/// zero at or beyond the cutoff (strict). Coincident particles are a hard error.
pub fn lj_force(dx: &[f64], r2: f64, sigma: f64, epsilon: f64, r_cut: f64, out: &mut [f64]) -> Result<()> {
    if r2 == 0.0 {
        return Err(Error::Physics("coincident particles in LJ force".into()));
    }
    if r2 >= r_cut * r_cut {
        out.fill(0.0);
        return Ok(());
    }
    let s2 = sigma * sigma;
    let sr2 = s2 / r2;
    let sr6 = sr2 * sr2 * sr2;
    let factor = 24.0 * epsilon * (2.0 * sr6 * sr6 - sr6) / r2;
    for (o, d) in out.iter_mut().zip(dx) {
        *o = factor * d;
    }
    Ok(())
}

/// Pair potential `4 eps [(sigma/r)^12 - (sigma/r)^6]`, truncated (not
/// shifted) at the cutoff.
pub fn lj_potential(r2: f64, sigma: f64, epsilon: f64, r_cut: f64) -> f64 {
    if r2 >= r_cut * r_cut || r2 == 0.0 {
        return 0.0;
    }
    let sr2 = sigma * sigma / r2;
    let sr6 = sr2 * sr2 * sr2;
    4.0 * epsilon * (sr6 * sr6 - sr6)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnergySample {
    pub step: usize,
    pub kinetic: f64,
    pub potential: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct MdReport {
    pub energy: Vec<EnergySample>,
    pub steps_run: usize,
    pub n_global: u64,
    /// Owned final state: gid -> (position, velocity).
    pub final_state: BTreeMap<u64, (Vec<f64>, Vec<f64>)>,
}

fn md_schema() -> PropertySchema {
    PropertySchema::new(vec![
        PropDesc::vector_f64("velocity"),
        PropDesc::vector_f64("force"),
    ])
    .expect("static schema is valid")
}

/// Deterministic velocity component in [-scale, scale] for (seed, gid, axis).
fn seeded_velocity(seed: u64, gid: u64, axis: usize, scale: f64) -> f64 {
    let mut z = seed ^ gid.wrapping_mul(0x9e3779b97f4a7c15) ^ (axis as u64) << 56;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    let u = (z >> 11) as f64 / (1u64 << 53) as f64;
    scale * (2.0 * u - 1.0)
}

/// Sum owned kinetic and potential energy, reduced over all ranks.
/// The potential walks the symmetric list, so each pair counts once
/// globally; coincident particles abort with the offending gid.
fn energies(
    world: &mut World,
    ps: &ParticleSet,
    list: &VerletList,
    cfg: &LJConfig,
) -> Result<(f64, f64)> {
    let mut ke = 0.0;
    let mut pe = 0.0;
    for i in ps.indices(Region::Owned) {
        let v = ps.prop_f64(PROP_VELOCITY, i);
        ke += 0.5 * v.iter().map(|x| x * x).sum::<f64>();
        let xi = ps.position(i);
        for &j in list.neighbors(i) {
            let xj = ps.position(j as usize);
            let r2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
            if r2 == 0.0 {
                return Err(Error::Physics(format!(
                    "particles gid {} and gid {} overlap exactly",
                    ps.gid(i),
                    ps.gid(j as usize)
                )));
            }
            pe += lj_potential(r2, cfg.sigma, cfg.epsilon, cfg.r_cut);
        }
    }
    let mut buf = Vec::with_capacity(16);
    buf.extend_from_slice(&ke.to_bits().to_le_bytes());
    buf.extend_from_slice(&pe.to_bits().to_le_bytes());
    let all = world.allgather(&buf)?;
    let (mut ke_g, mut pe_g) = (0.0, 0.0);
    for b in all {
        ke_g += f64::from_bits(u64::from_le_bytes(b[..8].try_into().unwrap()));
        pe_g += f64::from_bits(u64::from_le_bytes(b[8..16].try_into().unwrap()));
    }
    Ok((ke_g, pe_g))
}

fn compute_forces(world: &mut World, ps: &mut ParticleSet, cfg: &LJConfig) -> Result<VerletList> {
    ps.ghost_get(world, &[], false)?;
    let list = build_verlet(ps, cfg.r_cut, 0.0, true)?;
    ps.zero_prop(PROP_FORCE, Region::All);
    let (sigma, epsilon, r_cut) = (cfg.sigma, cfg.epsilon, cfg.r_cut);
    apply_pairwise(ps, &list, PROP_FORCE, Mirror::Negate, move |_ps, _i, _j, dx, r2, out| {
        if r2 > 0.0 && r2 < r_cut * r_cut {
            let sr2 = sigma * sigma / r2;
            let sr6 = sr2 * sr2 * sr2;
            let factor = 24.0 * epsilon * (2.0 * sr6 * sr6 - sr6) / r2;
            for (o, d) in out.iter_mut().zip(dx) {
                *o = factor * d;
            }
        }
    })?;
    ps.ghost_put(world, pmfw::particles::MergeOp::Sum, &[PROP_FORCE])?;
    Ok(list)
}

pub fn run_md(cfg: &LJConfig, run: &RunOpts, world: &mut World) -> Result<MdReport> {
    cfg.validate()?;
    let dim = cfg.lattice.len();
    let domain = AxisBox::new(cfg.domain.low.clone(), cfg.domain.high.clone())?;
    let bc = vec![Bc::Periodic; dim];
    let ghost = GhostSpec::new(cfg.r_cut)?;
    let decomp = Arc::new(Decomposition::build(
        &domain,
        &bc,
        &ghost,
        world.size(),
        None,
        None,
    )?);

    let mut ps = match &run.restart {
        Some(path) => {
            checkpoint_load_particles(path, world, decomp.clone(), Some(&md_schema()))?
        }
        None => {
            let mut ps = ParticleSet::new(md_schema(), decomp.clone(), world.rank())?;
            ps.init_grid(&cfg.lattice)?;
            if let Some(init) = &cfg.init_velocity {
                for i in ps.indices(Region::Owned) {
                    let gid = ps.gid(i);
                    let v = ps.prop_f64_mut(PROP_VELOCITY, i);
                    for d in 0..dim {
                        v[d] = seeded_velocity(init.seed, gid, d, init.scale);
                    }
                }
            }
            ps
        }
    };
    ps.map_global(world)?;

    let n_global = {
        let n = ps.n_owned() as u64;
        let all = world.allgather(&n.to_le_bytes())?;
        all.iter().map(|b| u64::from_le_bytes(b[..8].try_into().unwrap())).sum()
    };

    let mut ledger = CostLedger::new(decomp.grid().cell_count());
    let mut sar = SarState::new(1e-3);
    let mut trace = match (&run.trace, world.rank()) {
        (Some(path), 0) => Some(dlb::LedgerTrace::create(path, world.size())?),
        _ => None,
    };
    let mut decomp = decomp;

    let mut list = compute_forces(world, &mut ps, cfg)?;
    let mut report = MdReport {
        energy: Vec::new(),
        steps_run: 0,
        n_global,
        final_state: BTreeMap::new(),
    };
    let (ke, pe) = energies(world, &ps, &list, cfg)?;
    report.energy.push(EnergySample { step: 0, kinetic: ke, potential: pe, total: ke + pe });

    let half_dt = 0.5 * cfg.dt;
    for step in 1..=cfg.steps {
        let t0 = Instant::now();
        // first velocity Verlet half-kick and drift
        for i in ps.indices(Region::Owned) {
            let f: Vec<f64> = ps.prop_f64(PROP_FORCE, i).to_vec();
            let v = ps.prop_f64_mut(PROP_VELOCITY, i);
            for d in 0..dim {
                v[d] += half_dt * f[d];
            }
            let v: Vec<f64> = v.to_vec();
            let x = ps.position_mut(i);
            for d in 0..dim {
                x[d] += cfg.dt * v[d];
            }
        }
        ps.map_local(world)?;
        list = compute_forces(world, &mut ps, cfg)?;
        // second half-kick with the new forces
        for i in ps.indices(Region::Owned) {
            let f: Vec<f64> = ps.prop_f64(PROP_FORCE, i).to_vec();
            let v = ps.prop_f64_mut(PROP_VELOCITY, i);
            for d in 0..dim {
                v[d] += half_dt * f[d];
            }
        }
        report.steps_run = step;

        if step % cfg.output_every == 0 || step == cfg.steps {
            let (ke, pe) = energies(world, &ps, &list, cfg)?;
            if !ke.is_finite() || !pe.is_finite() {
                return Err(Error::Physics(format!(
                    "energy diverged at step {step} (kinetic {ke}, potential {pe})"
                )));
            }
            report.energy.push(EnergySample {
                step,
                kinetic: ke,
                potential: pe,
                total: ke + pe,
            });
        }
        if let Some(every) = run.vtk_every {
            if step % every == 0 {
                let base = run.out.join(format!("md_{step:06}"));
                vtk_write_particles(&ps, &base, &[PROP_VELOCITY])?;
            }
        }
        if let Some(every) = run.checkpoint_every {
            if step % every == 0 {
                let path = run.out.join(format!("md_{step:06}.ckpt"));
                checkpoint_save_particles(&ps, &path, world)?;
            }
        }

        // load balancing bookkeeping
        let my_time = t0.elapsed().as_secs_f64();
        let times = world.allgather(&my_time.to_bits().to_le_bytes())?;
        let times: Vec<f64> = times
            .iter()
            .map(|b| f64::from_bits(u64::from_le_bytes(b[..8].try_into().unwrap())))
            .collect();
        ledger.set_costs_from_counts(&ps.owned_per_cell());
        let counts = ps.owned_per_cell();
        for (m, c) in ledger.migration.iter_mut().zip(&counts) {
            *m = c * (2 * dim + 1) as f64 * 8.0; // bytes per particle record
        }
        let delta = dlb::record_step(&mut ledger, &mut sar, &times);
        let mut rebalanced = false;
        if run.dlb && dlb::sar_decide(&sar) {
            decomp = dlb::rebalance(
                world,
                &decomp,
                &ledger,
                &mut sar,
                dlb::RebalanceTargets { pset: Some(&mut ps), grid: None },
            )?;
            list = compute_forces(world, &mut ps, cfg)?;
            rebalanced = true;
        }
        if let Some(t) = trace.as_mut() {
            t.record(step, &times, delta, sar.w_current(), rebalanced)?;
        }
    }

    for i in ps.indices(Region::Owned) {
        report.final_state.insert(
            ps.gid(i),
            (ps.position(i).to_vec(), ps.prop_f64(PROP_VELOCITY, i).to_vec()),
        );
    }
    Ok(report)
}
