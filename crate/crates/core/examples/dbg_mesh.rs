use pmfw::decomp::Decomposition;
use pmfw::geometry::{AxisBox, Bc, GhostSpec};
use pmfw::mesh::{stencil_sweep, DistributedGrid, Stencil};
use pmfw::schema::{PropDesc, PropertySchema};
use pmfw::transport::world_spawn;
use std::sync::Arc;

fn grid_setup(dim: usize, nodes: usize, bc: Bc, ghost: f64, nranks: usize, rank: usize) -> DistributedGrid {
    let dec = Arc::new(
        Decomposition::build(
            &AxisBox::unit(dim),
            &vec![bc; dim],
            &GhostSpec::new(ghost).unwrap(),
            nranks,
            Some(4),
            None,
        )
        .unwrap(),
    );
    let schema = PropertySchema::new(vec![PropDesc::scalar_f64("u")]).unwrap();
    DistributedGrid::new(&vec![nodes; dim], schema, dec, rank).unwrap()
}

fn main() {
    world_spawn(1, |w| {
        let mut g = grid_setup(2, 8, Bc::Periodic, 0.13, 1, 0);
        let mut h = grid_setup(2, 8, Bc::Periodic, 0.13, 1, 0);
        println!("g blocks: {}", g.blocks().len());
        for b in g.blocks() {
            println!("  origin {:?} ext {:?}", b.origin, b.ext);
        }
        println!("g cells: {:?}", g.decomposition().grid().cells_per_axis());
        for sd in g.decomposition().subdomains(0) {
            println!("  sd cells {:?}..{:?}", sd.cell_lo, sd.cell_hi);
        }
        let keys: Vec<Vec<i64>> = {
            let mut v = Vec::new();
            g.for_each_owned(|key, _, _| v.push(key.to_vec()));
            v
        };
        println!("owned key count: {}", keys.len());
        for key in &keys {
            g.set(key, 0, &[4.25]).unwrap();
        }
        g.ghost_get(w, &[0])?;
        stencil_sweep(&g, &mut h, &Stencil::identity(2), &[0], &[0], |ctx, out| {
            out[0] = ctx.get(0, 0);
        })?;
        let mut bad = vec![];
        for key in &keys {
            if h.get(key, 0).unwrap() != [4.25] {
                bad.push(key.clone());
            }
        }
        println!("bad: {:?}", bad);
        Ok(())
    })
    .unwrap();
}
