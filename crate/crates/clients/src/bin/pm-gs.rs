use clap::Parser;
use pmfw_clients::cli::{exit_code_for, run_on_world, CommonOpts, RunOpts};
use pmfw_clients::config::{load_json, GSConfig, GS_PRESETS};
use pmfw_clients::gs::run_gray_scott;

fn main() {
    let opts = CommonOpts::parse();
    let result = run(&opts);
    std::process::exit(exit_code_for(&result));
}

fn run(opts: &CommonOpts) -> pmfw::Result<()> {
    let path = opts.config.as_ref().ok_or_else(|| {
        pmfw::Error::Usage(format!(
            "--config <json> is required; pattern presets (F, k): {}",
            GS_PRESETS
                .iter()
                .map(|(n, f, k)| format!("{n}=({f},{k})"))
                .collect::<Vec<_>>()
                .join(", ")
        ))
    })?;
    let mut cfg: GSConfig = load_json(path)?;
    if let Some(steps) = opts.steps {
        cfg.steps = steps;
    }
    std::fs::create_dir_all(&opts.out)?;
    let run_opts = RunOpts::from_cli(opts);
    let reports = run_on_world(opts, move |w| run_gray_scott(&cfg, &run_opts, w))?;
    if let Some(r) = reports.first() {
        println!(
            "steps {}  u_mean {:.6}  v_mean {:.6}  v_variance {:.6e}  v_max {:.6}",
            r.steps_run, r.u_mean, r.v_mean, r.v_variance, r.v_max
        );
    }
    Ok(())
}
