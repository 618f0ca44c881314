//! Discrete-element avalanche client: Hertz-style normal and tangential
//! contact forces with persistent tangential springs, Coulomb capping,
//! leapfrog time integration, fixed walls in x and at the floor, a free
//! boundary in +z, and periodic y.
//!
//! Contact state lives in a var-list property on the lower-gid member of
//! each pair, keyed by partner gid, so it travels with the particle through
//! maps and rebalances and never depends on local indices. Wall contacts
//! use negative partner ids and a virtual mirrored particle at rest.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use pmfw::decomp::Decomposition;
use pmfw::dlb::{self, CostLedger, SarState};
use pmfw::error::Error;
use pmfw::geometry::{AxisBox, Bc, GhostSpec};
use pmfw::io::{checkpoint_load_particles, checkpoint_save_particles, vtk_write_particles};
use pmfw::particles::{build_verlet, MergeOp, ParticleSet, Region};
use pmfw::schema::{ElemShape, PropDesc, PropertySchema};
use pmfw::transport::World;
use pmfw::Result;

use crate::cli::RunOpts;
use crate::config::DEMConfig;

pub const PROP_VELOCITY: usize = 0;
pub const PROP_OMEGA: usize = 1;
pub const PROP_FORCE: usize = 2;
pub const PROP_TORQUE: usize = 3;
pub const PROP_CONTACTS: usize = 4;

/// Contact record layout in the var list: [partner id, u_t x, u_t y, u_t z].
/// Pair partners use the gid as f64 (exact below 2^53); walls use -1..-3.
pub const CONTACT_RECORD: usize = 4;

pub const WALL_X_LOW: f64 = -1.0;
pub const WALL_X_HIGH: f64 = -2.0;
pub const WALL_Z_LOW: f64 = -3.0;

fn dem_schema() -> PropertySchema {
    PropertySchema::new(vec![
        PropDesc::vector_f64("velocity"),
        PropDesc::vector_f64("omega"),
        PropDesc::vector_f64("force"),
        PropDesc::vector_f64("torque"),
        PropDesc::var_list_f64("contacts", ElemShape::FixedArray(CONTACT_RECORD)),
    ])
    .expect("static schema is valid")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn cross(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// One pair-contact evaluation.
pub struct PairForces {
    pub f_n: [f64; 3],
    pub f_t: [f64; 3],
    /// Torque on p from the tangential force at the contact point; the
    /// partner receives the identical torque.
    pub torque_p: [f64; 3],
    /// Contact deformation.
    pub delta: f64,
}

/// Hertz-style contact force between p and q.
///
/// `delta = 2R - |x_p - x_q|` (must be positive: contact active);
/// the relative velocity splits into normal and tangential parts, the
/// tangential spring integrates `u_t += v_t dt`, and
/// `F_n = sqrt(delta/2R) (k_n delta n - gamma_n m_eff v_n)`,
/// `F_t = sqrt(delta/2R) (-k_t u_t - gamma_t m_eff v_t)` with
/// `m_eff = m/2`. When `|F_t| > mu |F_n|`, `u_t` is rescaled so that
/// `|F_t| = mu |F_n|` exactly (Coulomb cap).
pub fn dem_pair_force(
    xp: &[f64],
    vp: &[f64],
    xq: &[f64],
    vq: &[f64],
    u_t: &mut [f64],
    cfg: &DEMConfig,
) -> Option<PairForces> {
    let r = cfg.radius;
    let dx = [xp[0] - xq[0], xp[1] - xq[1], xp[2] - xq[2]];
    let dist = norm(&dx);
    let delta = 2.0 * r - dist;
    if delta <= 0.0 || dist == 0.0 {
        return None;
    }
    let n = [dx[0] / dist, dx[1] / dist, dx[2] / dist];
    let v_rel = [vp[0] - vq[0], vp[1] - vq[1], vp[2] - vq[2]];
    let vn_mag = dot(&v_rel, &n);
    let v_n = [n[0] * vn_mag, n[1] * vn_mag, n[2] * vn_mag];
    let v_t = [v_rel[0] - v_n[0], v_rel[1] - v_n[1], v_rel[2] - v_n[2]];
    for d in 0..3 {
        u_t[d] += v_t[d] * cfg.dt;
    }
    let m_eff = cfg.mass / 2.0;
    let amp = (delta / (2.0 * r)).sqrt();
    let f_n = [
        amp * (cfg.k_n * delta * n[0] - cfg.gamma_n * m_eff * v_n[0]),
        amp * (cfg.k_n * delta * n[1] - cfg.gamma_n * m_eff * v_n[1]),
        amp * (cfg.k_n * delta * n[2] - cfg.gamma_n * m_eff * v_n[2]),
    ];
    let g_t = cfg.gamma_t();
    let mut f_t = [
        amp * (-cfg.k_t * u_t[0] - g_t * m_eff * v_t[0]),
        amp * (-cfg.k_t * u_t[1] - g_t * m_eff * v_t[1]),
        amp * (-cfg.k_t * u_t[2] - g_t * m_eff * v_t[2]),
    ];
    let fn_mag = norm(&f_n);
    let ft_mag = norm(&f_t);
    let cap = cfg.mu * fn_mag;
    if ft_mag > cap && ft_mag > 0.0 {
        let scale = cap / ft_mag;
        for v in f_t.iter_mut() {
            *v *= scale;
        }
        // rescale the spring so the capped force is self-consistent
        if cfg.k_t > 0.0 && amp > 0.0 {
            for d in 0..3 {
                u_t[d] = -(f_t[d] / amp + g_t * m_eff * v_t[d]) / cfg.k_t;
            }
        }
    }
    // tangential force acts at the contact point, lever arm -R n from p;
    // the partner's lever and force both flip sign, giving the same torque
    let lever = [-r * n[0], -r * n[1], -r * n[2]];
    let torque_p = cross(&lever, &f_t);
    Some(PairForces { f_n, f_t, torque_p, delta })
}

#[derive(Clone, Debug)]
pub struct DemReport {
    pub steps_run: usize,
    pub n_global: u64,
    /// Largest `|F_t| - mu |F_n|` observed after capping, over all steps.
    pub max_coulomb_excess: f64,
    /// Contacts whose partner was in reach but failed to resolve, summed
    /// over steps (must stay zero).
    pub unresolved_contacts: u64,
    /// Global active contact count per step.
    pub contact_counts: Vec<u64>,
    /// Global linear momentum at the final step.
    pub momentum: [f64; 3],
    /// Owned final state: gid -> (position, velocity, omega).
    pub final_state: BTreeMap<u64, (Vec<f64>, Vec<f64>, Vec<f64>)>,
}

struct WallSpec {
    axis: usize,
    /// Wall plane coordinate on that axis.
    plane: f64,
    /// +1 when the wall pushes toward increasing coordinates.
    inward: f64,
    id: f64,
}

pub fn run_dem(cfg: &DEMConfig, run: &RunOpts, world: &mut World) -> Result<DemReport> {
    cfg.validate()?;
    let dim = 3;
    let domain = AxisBox::new(cfg.domain.low.clone(), cfg.domain.high.clone())?;
    let bc = [Bc::NonPeriodic, Bc::Periodic, Bc::NonPeriodic];
    let r_cut = 2.0 * cfg.radius;
    let skin = 0.1 * cfg.radius;
    let ghost = GhostSpec::new(r_cut + skin)?;
    let decomp = Arc::new(Decomposition::build(&domain, &bc, &ghost, world.size(), None, None)?);

    let mut ps = match &run.restart {
        Some(path) => checkpoint_load_particles(path, world, decomp.clone(), Some(&dem_schema()))?,
        None => {
            let mut ps = ParticleSet::new(dem_schema(), decomp.clone(), world.rank())?;
            let init = AxisBox::new(cfg.initial_box.low.clone(), cfg.initial_box.high.clone())?;
            let mut key = [0usize; 3];
            let total: usize = cfg.lattice.iter().product();
            for gid in 0..total {
                let mut p = [0.0; 3];
                for d in 0..dim {
                    p[d] = init.low()[d]
                        + init.extent(d) * (key[d] as f64 + 0.5) / cfg.lattice[d] as f64;
                }
                if decomp.owner_of(&p) == Some(world.rank()) {
                    let i = ps.add_owned(&p, gid as u64)?;
                    if let Some(boost) = &cfg.boost {
                        ps.prop_f64_mut(PROP_VELOCITY, i).copy_from_slice(boost);
                    }
                }
                for d in (0..dim).rev() {
                    key[d] += 1;
                    if key[d] < cfg.lattice[d] {
                        break;
                    }
                    key[d] = 0;
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

    let walls = [
        WallSpec { axis: 0, plane: domain.low()[0], inward: 1.0, id: WALL_X_LOW },
        WallSpec { axis: 0, plane: domain.high()[0], inward: -1.0, id: WALL_X_HIGH },
        WallSpec { axis: 2, plane: domain.low()[2], inward: 1.0, id: WALL_Z_LOW },
    ];

    let mut ledger = CostLedger::new(decomp.grid().cell_count());
    let mut sar = SarState::new(1e-3);
    let mut trace = match (&run.trace, world.rank()) {
        (Some(path), 0) => Some(dlb::LedgerTrace::create(path, world.size())?),
        _ => None,
    };
    let mut decomp = decomp;

    let mut report = DemReport {
        steps_run: 0,
        n_global,
        max_coulomb_excess: 0.0,
        unresolved_contacts: 0,
        contact_counts: Vec::new(),
        momentum: [0.0; 3],
        final_state: BTreeMap::new(),
    };

    for step in 1..=cfg.steps {
        let t0 = Instant::now();
        ps.zero_prop(PROP_FORCE, Region::All);
        ps.zero_prop(PROP_TORQUE, Region::All);
        ps.ghost_get(world, &[PROP_VELOCITY], false)?;
        let list = build_verlet(&ps, r_cut, skin, true)?;

        // gid -> local index over owned + ghosts, for stale-contact checks
        let gid_index: BTreeMap<u64, usize> =
            ps.indices(Region::All).map(|i| (ps.gid(i), i)).collect();

        let n_owned = ps.n_owned();
        let mut new_contacts: Vec<Vec<f64>> = vec![Vec::new(); n_owned];
        let mut local_contacts = 0u64;
        for i in 0..n_owned {
            // previous springs of this particle, keyed by partner id
            let prev: Vec<f64> = ps.col(PROP_CONTACTS).var_f64(i).clone();
            let find_prev = |id: f64| -> Option<[f64; 3]> {
                prev.chunks_exact(CONTACT_RECORD)
                    .find(|rec| rec[0] == id)
                    .map(|rec| [rec[1], rec[2], rec[3]])
            };
            let xi = ps.position(i).to_vec();
            let vi = ps.prop_f64(PROP_VELOCITY, i).to_vec();
            for &j in list.neighbors(i) {
                let j = j as usize;
                let id = ps.gid(j) as f64;
                let mut u_t = find_prev(id).unwrap_or([0.0; 3]);
                let xj = ps.position(j);
                let vj = ps.prop_f64(PROP_VELOCITY, j);
                if let Some(pf) = dem_pair_force(&xi, &vi, xj, vj, &mut u_t, cfg) {
                    if pf.delta > cfg.radius {
                        return Err(Error::Physics(format!(
                            "interpenetration delta {} > R between gid {} and gid {} at step {step}",
                            pf.delta,
                            ps.gid(i),
                            ps.gid(j)
                        )));
                    }
                    let excess = norm(&pf.f_t) - cfg.mu * norm(&pf.f_n);
                    report.max_coulomb_excess = report.max_coulomb_excess.max(excess);
                    for d in 0..3 {
                        let f = pf.f_n[d] + pf.f_t[d];
                        ps.prop_f64_mut(PROP_FORCE, i)[d] += f;
                        ps.prop_f64_mut(PROP_FORCE, j)[d] -= f;
                        ps.prop_f64_mut(PROP_TORQUE, i)[d] += pf.torque_p[d];
                        ps.prop_f64_mut(PROP_TORQUE, j)[d] += pf.torque_p[d];
                    }
                    new_contacts[i].extend_from_slice(&[id, u_t[0], u_t[1], u_t[2]]);
                    local_contacts += 1;
                }
            }
            // wall contacts via a mirrored virtual particle at rest
            for wall in &walls {
                let gap = (xi[wall.axis] - wall.plane) * wall.inward;
                if gap < cfg.radius {
                    let mut xq = xi.clone();
                    xq[wall.axis] = xi[wall.axis] - 2.0 * gap * wall.inward;
                    let vq = [0.0; 3];
                    let mut u_t = find_prev(wall.id).unwrap_or([0.0; 3]);
                    if let Some(pf) = dem_pair_force(&xi, &vi, &xq, &vq, &mut u_t, cfg) {
                        if pf.delta > cfg.radius {
                            return Err(Error::Physics(format!(
                                "wall interpenetration delta {} > R for gid {} at step {step}",
                                pf.delta,
                                ps.gid(i)
                            )));
                        }
                        let excess = norm(&pf.f_t) - cfg.mu * norm(&pf.f_n);
                        report.max_coulomb_excess = report.max_coulomb_excess.max(excess);
                        for d in 0..3 {
                            ps.prop_f64_mut(PROP_FORCE, i)[d] += pf.f_n[d] + pf.f_t[d];
                            ps.prop_f64_mut(PROP_TORQUE, i)[d] += pf.torque_p[d];
                        }
                        new_contacts[i].extend_from_slice(&[wall.id, u_t[0], u_t[1], u_t[2]]);
                        local_contacts += 1;
                    }
                }
            }
            // stale-contact audit: every previous partner still within
            // contact range must have been re-matched above
            for rec in prev.chunks_exact(CONTACT_RECORD) {
                let id = rec[0];
                if id < 0.0 {
                    continue; // wall gap handled above
                }
                let matched = new_contacts[i].chunks_exact(CONTACT_RECORD).any(|r| r[0] == id);
                if matched {
                    continue;
                }
                if let Some(&j) = gid_index.get(&(id as u64)) {
                    let xj = ps.position(j);
                    let dist: f64 =
                        xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    if 2.0 * cfg.radius - dist > 0.0 {
                        report.unresolved_contacts += 1;
                    }
                }
            }
        }
        for (i, rec) in new_contacts.into_iter().enumerate() {
            *ps.col_mut(PROP_CONTACTS).var_f64_mut(i) = rec;
        }
        ps.ghost_put(world, MergeOp::Sum, &[PROP_FORCE, PROP_TORQUE])?;

        // leapfrog: kick with the summed force plus gravity, then drift
        let inv_m = 1.0 / cfg.mass;
        let inv_i = 1.0 / cfg.inertia;
        for i in 0..ps.n_owned() {
            let f: Vec<f64> = ps.prop_f64(PROP_FORCE, i).to_vec();
            let v = ps.prop_f64_mut(PROP_VELOCITY, i);
            for d in 0..3 {
                v[d] += cfg.dt * (f[d] * inv_m + cfg.g[d]);
            }
            let v: Vec<f64> = v.to_vec();
            let x = ps.position_mut(i);
            for d in 0..3 {
                x[d] += cfg.dt * v[d];
            }
            let t: Vec<f64> = ps.prop_f64(PROP_TORQUE, i).to_vec();
            let om = ps.prop_f64_mut(PROP_OMEGA, i);
            for d in 0..3 {
                om[d] += cfg.dt * t[d] * inv_i;
            }
        }
        ps.map_local(world)?;
        report.steps_run = step;

        // global contact count
        let all = world.allgather(&local_contacts.to_le_bytes())?;
        report
            .contact_counts
            .push(all.iter().map(|b| u64::from_le_bytes(b[..8].try_into().unwrap())).sum());

        if let Some(every) = run.vtk_every {
            if step % every == 0 {
                let base = run.out.join(format!("dem_{step:06}"));
                vtk_write_particles(&ps, &base, &[PROP_VELOCITY, PROP_OMEGA])?;
            }
        }
        if let Some(every) = run.checkpoint_every {
            if step % every == 0 {
                let path = run.out.join(format!("dem_{step:06}.ckpt"));
                checkpoint_save_particles(&ps, &path, world)?;
            }
        }

        let my_time = t0.elapsed().as_secs_f64();
        let times = world.allgather(&my_time.to_bits().to_le_bytes())?;
        let times: Vec<f64> = times
            .iter()
            .map(|b| f64::from_bits(u64::from_le_bytes(b[..8].try_into().unwrap())))
            .collect();
        let counts = ps.owned_per_cell();
        ledger.set_costs_from_counts(&counts);
        for (m, c) in ledger.migration.iter_mut().zip(&counts) {
            *m = c * 16.0 * 8.0;
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
            rebalanced = true;
        }
        if let Some(t) = trace.as_mut() {
            t.record(step, &times, delta, sar.w_current(), rebalanced)?;
        }
    }

    // global momentum
    let mut p_local = [0.0f64; 3];
    for i in ps.indices(Region::Owned) {
        let v = ps.prop_f64(PROP_VELOCITY, i);
        for d in 0..3 {
            p_local[d] += cfg.mass * v[d];
        }
    }
    let mut buf = Vec::new();
    for v in p_local {
        buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    let all = world.allgather(&buf)?;
    for b in all {
        for d in 0..3 {
            report.momentum[d] +=
                f64::from_bits(u64::from_le_bytes(b[d * 8..(d + 1) * 8].try_into().unwrap()));
        }
    }
    for i in ps.indices(Region::Owned) {
        report.final_state.insert(
            ps.gid(i),
            (
                ps.position(i).to_vec(),
                ps.prop_f64(PROP_VELOCITY, i).to_vec(),
                ps.prop_f64(PROP_OMEGA, i).to_vec(),
            ),
        );
    }
    Ok(report)
}
