//! Checkpoint save/load across rank counts, corrupt-file detection, and
//! basic VTK output shape.

use std::collections::BTreeMap;
use std::sync::Arc;

use pmfw::decomp::Decomposition;
use pmfw::geometry::{AxisBox, Bc, GhostSpec};
use pmfw::io::{
    checkpoint_load_grid, checkpoint_load_particles, checkpoint_save_grid,
    checkpoint_save_particles, vtk_rank_path, vtk_write_grid, vtk_write_particles,
};
use pmfw::mesh::{gather_global, DistributedGrid};
use pmfw::particles::{ParticleSet, Region};
use pmfw::schema::{ElemShape, PropDesc, PropertySchema};
use pmfw::transport::world_spawn;

fn decomp_for(nranks: usize) -> Arc<Decomposition> {
    Arc::new(
        Decomposition::build(
            &AxisBox::unit(2),
            &[Bc::Periodic, Bc::NonPeriodic],
            &GhostSpec::new(0.1).unwrap(),
            nranks,
            Some(4),
            None,
        )
        .unwrap(),
    )
}

fn particle_schema() -> PropertySchema {
    PropertySchema::new(vec![
        PropDesc::vector_f64("velocity"),
        PropDesc::scalar_i64("species"),
        PropDesc::var_list_f64("contacts", ElemShape::FixedArray(3)),
    ])
    .unwrap()
}

/// Global gid -> (position bits, velocity bits, species, contacts bits).
type GlobalState = BTreeMap<u64, (Vec<u64>, Vec<u64>, i64, Vec<u64>)>;

fn build_particles(world: &mut pmfw::transport::World) -> pmfw::Result<ParticleSet> {
    let dec = decomp_for(world.size());
    let mut ps = ParticleSet::new(particle_schema(), dec, world.rank())?;
    ps.init_grid(&[10, 10])?;
    for i in ps.indices(Region::Owned) {
        let gid_u = ps.gid(i);
        let gid = gid_u as f64;
        let v = ps.prop_f64_mut(0, i);
        v[0] = gid * 0.1 + 0.03;
        v[1] = -gid * 7.0;
        match ps.col_mut(1) {
            pmfw::schema::Column::I64 { data, .. } => data[i] = gid_u as i64 % 5,
            _ => unreachable!(),
        }
        if gid_u % 3 == 0 {
            ps.col_mut(2).var_f64_mut(i).extend_from_slice(&[gid, 0.5, -1.25]);
        }
    }
    Ok(ps)
}

fn gather_state(
    world: &mut pmfw::transport::World,
    ps: &ParticleSet,
) -> pmfw::Result<GlobalState> {
    let mut local = Vec::new();
    for i in ps.indices(Region::Owned) {
        let species = match ps.col(1) {
            pmfw::schema::Column::I64 { data, .. } => data[i],
            _ => unreachable!(),
        };
        let contacts = ps.col(2).var_f64(i);
        local.push((
            ps.gid(i),
            ps.position(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            ps.prop_f64(0, i).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            species,
            contacts.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        ));
    }
    let bytes = bincode_like(&local);
    let all = world.allgather(&bytes)?;
    let mut out = GlobalState::new();
    for buf in all {
        for (gid, pos, vel, species, contacts) in parse_bincode_like(&buf) {
            assert!(
                out.insert(gid, (pos, vel, species, contacts)).is_none(),
                "gid {gid} owned twice"
            );
        }
    }
    Ok(out)
}

// minimal hand-rolled record framing for the test helper
fn bincode_like(rows: &[(u64, Vec<u64>, Vec<u64>, i64, Vec<u64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (gid, pos, vel, species, contacts) in rows {
        out.extend_from_slice(&gid.to_le_bytes());
        for part in [pos, vel, contacts] {
            out.extend_from_slice(&(part.len() as u64).to_le_bytes());
            for v in part {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&species.to_le_bytes());
    }
    out
}

fn parse_bincode_like(mut buf: &[u8]) -> Vec<(u64, Vec<u64>, Vec<u64>, i64, Vec<u64>)> {
    let mut out = Vec::new();
    let take_u64 = |buf: &mut &[u8]| -> u64 {
        let v = u64::from_le_bytes(buf[..8].try_into().unwrap());
        *buf = &buf[8..];
        v
    };
    while !buf.is_empty() {
        let gid = take_u64(&mut buf);
        let mut parts = Vec::new();
        for _ in 0..3 {
            let n = take_u64(&mut buf) as usize;
            let mut v = Vec::with_capacity(n);
            for _ in 0..n {
                v.push(take_u64(&mut buf));
            }
            parts.push(v);
        }
        let species = take_u64(&mut buf) as i64;
        let contacts = parts.pop().unwrap();
        let vel = parts.pop().unwrap();
        let pos = parts.pop().unwrap();
        out.push((gid, pos, vel, species, contacts));
    }
    out
}

#[test]
fn particle_roundtrip_across_rank_counts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pset.ckpt");
    // save on P, load on Q; the gathered gid -> state map must be bitwise
    // identical in every combination
    let mut reference: Option<GlobalState> = None;
    for save_ranks in [1usize, 2, 4] {
        let p = path.clone();
        let saved = world_spawn(save_ranks, move |w| {
            let ps = build_particles(w)?;
            let state = gather_state(w, &ps)?;
            checkpoint_save_particles(&ps, &p, w)?;
            Ok(state)
        })
        .unwrap();
        let state = saved.into_iter().next().unwrap();
        if let Some(r) = &reference {
            assert_eq!(r, &state);
        } else {
            reference = Some(state.clone());
        }
        for load_ranks in [1usize, 2, 3, 4] {
            let p = path.clone();
            let loaded = world_spawn(load_ranks, move |w| {
                let dec = decomp_for(w.size());
                let ps = checkpoint_load_particles(&p, w, dec, Some(&particle_schema()))?;
                gather_state(w, &ps)
            })
            .unwrap();
            assert_eq!(
                reference.as_ref().unwrap(),
                &loaded[0],
                "save {save_ranks} load {load_ranks}"
            );
        }
    }
}

#[test]
fn empty_set_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.ckpt");
    let p = path.clone();
    world_spawn(2, move |w| {
        let dec = decomp_for(w.size());
        let ps = ParticleSet::new(particle_schema(), dec.clone(), w.rank())?;
        checkpoint_save_particles(&ps, &p, w)?;
        let loaded = checkpoint_load_particles(&p, w, dec, None)?;
        assert_eq!(loaded.n_owned(), 0);
        Ok(())
    })
    .unwrap();
}

#[test]
fn truncated_file_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trunc.ckpt");
    let p = path.clone();
    world_spawn(1, move |w| {
        let ps = build_particles(w)?;
        checkpoint_save_particles(&ps, &p, w)?;
        Ok(())
    })
    .unwrap();
    let full = std::fs::read(&path).unwrap();
    std::fs::write(&path, &full[..full.len() - 21]).unwrap();
    let p = path.clone();
    let err = world_spawn(1, move |w| {
        let dec = decomp_for(w.size());
        checkpoint_load_particles(&p, w, dec, None).map(|_| ())
    })
    .unwrap_err();
    assert!(matches!(err, pmfw::Error::CorruptFile(_)), "got {err}");

    // flip one payload byte: the chunk checksum must catch it
    let mut corrupt = full.clone();
    let mid = full.len() / 2;
    corrupt[mid] ^= 0x40;
    std::fs::write(&path, &corrupt).unwrap();
    let p = path.clone();
    let err = world_spawn(1, move |w| {
        let dec = decomp_for(w.size());
        checkpoint_load_particles(&p, w, dec, None).map(|_| ())
    })
    .unwrap_err();
    match err {
        pmfw::Error::CorruptFile(msg) => assert!(msg.contains("chunk"), "{msg}"),
        other => panic!("expected corrupt-file, got {other}"),
    }
}

#[test]
fn schema_mismatch_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("schema.ckpt");
    let p = path.clone();
    world_spawn(1, move |w| {
        let ps = build_particles(w)?;
        checkpoint_save_particles(&ps, &p, w)?;
        Ok(())
    })
    .unwrap();
    let p = path.clone();
    let err = world_spawn(1, move |w| {
        let dec = decomp_for(w.size());
        let other = PropertySchema::new(vec![PropDesc::scalar_f64("other")]).unwrap();
        checkpoint_load_particles(&p, w, dec, Some(&other)).map(|_| ())
    })
    .unwrap_err();
    assert!(matches!(err, pmfw::Error::SchemaMismatch(_)), "got {err}");
}

#[test]
fn grid_roundtrip_across_rank_counts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grid.ckpt");
    let gschema = || PropertySchema::new(vec![PropDesc::scalar_f64("u")]).unwrap();
    let build = move |w: &mut pmfw::transport::World| -> pmfw::Result<DistributedGrid> {
        let dec = decomp_for(w.size());
        let mut g = DistributedGrid::new(&[16, 16], gschema(), dec, w.rank())?;
        let mut keys = Vec::new();
        g.for_each_owned(|key, _, _| keys.push(key.to_vec()));
        for key in &keys {
            let v = (key[0] as f64 * 0.731).sin() * (key[1] as f64 + 0.25);
            g.set(key, 0, &[v]).unwrap();
        }
        Ok(g)
    };
    let mut reference: Option<BTreeMap<Vec<i64>, Vec<u64>>> = None;
    for save_ranks in [1usize, 2, 4] {
        let p = path.clone();
        let saved = world_spawn(save_ranks, move |w| {
            let g = build(w)?;
            let state = gather_global(w, &g, 0)?;
            checkpoint_save_grid(&g, &p, w)?;
            Ok(state)
        })
        .unwrap();
        if let Some(r) = &reference {
            assert_eq!(r, &saved[0]);
        } else {
            reference = Some(saved.into_iter().next().unwrap());
        }
        for load_ranks in [1usize, 2, 3, 4] {
            let p = path.clone();
            let loaded = world_spawn(load_ranks, move |w| {
                let dec = decomp_for(w.size());
                let g = checkpoint_load_grid(&p, w, dec, None)?;
                gather_global(w, &g, 0)
            })
            .unwrap();
            assert_eq!(
                reference.as_ref().unwrap(),
                &loaded[0],
                "save {save_ranks} load {load_ranks}"
            );
        }
    }
}

#[test]
fn vtk_files_have_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let pbase = dir.path().join("parts");
    let gbase = dir.path().join("field");
    let (pbase2, gbase2) = (pbase.clone(), gbase.clone());
    world_spawn(1, move |w| {
        let dec = Arc::new(
            Decomposition::build(
                &AxisBox::unit(3),
                &[Bc::Periodic; 3],
                &GhostSpec::new(0.1).unwrap(),
                1,
                Some(1),
                None,
            )
            .unwrap(),
        );
        let schema = PropertySchema::new(vec![
            PropDesc::scalar_f64("mass"),
            PropDesc::vector_f64("vel"),
        ])
        .unwrap();
        let mut ps = ParticleSet::new(schema, dec.clone(), 0)?;
        let i = ps.add_owned(&[0.0, 0.0, 0.0], 0)?;
        ps.prop_f64_mut(0, i)[0] = 1.5;
        vtk_write_particles(&ps, &pbase2, &[0, 1])?;
        let gschema = PropertySchema::new(vec![PropDesc::scalar_f64("u")]).unwrap();
        let g = DistributedGrid::new(&[2, 2, 2], gschema, dec, 0)?;
        vtk_write_grid(&g, &gbase2, &[0])?;
        let _ = w;
        Ok(())
    })
    .unwrap();
    let ptext = std::fs::read_to_string(vtk_rank_path(&pbase, 0)).unwrap();
    assert!(ptext.contains("POINTS 1 double"));
    assert!(ptext.contains("0 0 0"));
    assert!(ptext.contains("SCALARS mass double 1"));
    assert!(ptext.contains("1.5"));
    assert!(ptext.contains("VECTORS vel double"));
    let gtext = std::fs::read_to_string(vtk_rank_path(&gbase, 0)).unwrap();
    assert!(gtext.contains("DATASET STRUCTURED_POINTS"));
    assert!(gtext.contains("DIMENSIONS 2 2 2"));
    // 2D grid gets a trailing 1
    let dir2 = tempfile::tempdir().unwrap();
    let g2base = dir2.path().join("g2");
    let g2 = g2base.clone();
    world_spawn(1, move |w| {
        let dec = decomp_for(1);
        let gschema = PropertySchema::new(vec![PropDesc::scalar_f64("u")]).unwrap();
        let g = DistributedGrid::new(&[2, 2], gschema, dec, 0)?;
        vtk_write_grid(&g, &g2, &[0])?;
        let _ = w;
        Ok(())
    })
    .unwrap();
    let gtext = std::fs::read_to_string(vtk_rank_path(&g2base, 0)).unwrap();
    assert!(gtext.contains("DIMENSIONS 2 2 1"));
}
