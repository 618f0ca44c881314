use clap::Parser;
use pmfw_clients::cli::{exit_code_for, run_on_world, CommonOpts, RunOpts};
use pmfw_clients::config::{load_json, LJConfig};
use pmfw_clients::md::run_md;

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
    let mut cfg: LJConfig = load_json(path)?;
    if let Some(steps) = opts.steps {
        cfg.steps = steps;
    }
    std::fs::create_dir_all(&opts.out)?;
    let run_opts = RunOpts::from_cli(opts);
    let reports = run_on_world(opts, move |w| run_md(&cfg, &run_opts, w))?;
    if let Some(r) = reports.first() {
        println!("particles: {}", r.n_global);
        for s in &r.energy {
            println!(
                "step {:6}  kinetic {:.9e}  potential {:.9e}  total {:.9e}",
                s.step, s.kinetic, s.potential, s.total
            );
        }
        if let (Some(first), Some(last)) = (r.energy.first(), r.energy.last()) {
            let drift = ((last.total - first.total) / first.total.abs()).abs();
            println!("relative energy drift over {} steps: {drift:.3e}", r.steps_run);
        }
    }
    Ok(())
}
