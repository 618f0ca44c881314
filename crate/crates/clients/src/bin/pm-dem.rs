use clap::Parser;
use pmfw_clients::cli::{exit_code_for, run_on_world, CommonOpts, RunOpts};
use pmfw_clients::config::{load_json, DEMConfig};
use pmfw_clients::dem::run_dem;

fn main() {
    let opts = CommonOpts::parse();
    let result = run(&opts);
    std::process::exit(exit_code_for(&result));
}

fn run(opts: &CommonOpts) -> pmfw::Result<()> {
    let path = opts
        .config
        .as_ref()
        .ok_or_else(|| pmfw::Error::Usage("--config <json> is required".into()))?;
    let mut cfg: DEMConfig = load_json(path)?;
    if let Some(steps) = opts.steps {
        cfg.steps = steps;
    }
    std::fs::create_dir_all(&opts.out)?;
    let run_opts = RunOpts::from_cli(opts);
    let reports = run_on_world(opts, move |w| run_dem(&cfg, &run_opts, w))?;
    if let Some(r) = reports.first() {
        println!(
            "particles {}  steps {}  momentum [{:.6e}, {:.6e}, {:.6e}]",
            r.n_global, r.steps_run, r.momentum[0], r.momentum[1], r.momentum[2]
        );
        println!(
            "max coulomb excess {:.3e}  unresolved contacts {}  final contacts {}",
            r.max_coulomb_excess,
            r.unresolved_contacts,
            r.contact_counts.last().copied().unwrap_or(0)
        );
    }
    Ok(())
}
