//! Runs the default synthetic benchmark over ten seeds and prints the
//! precision at 100% recall of every member, the mean-rule ensemble and the
//! approximate ensemble.
//!
//! cargo run --release --example synthetic_benchmark

use std::time::Instant;

use evpr::pipeline::PipelineParams;
use evpr::synthetic::{run_synthetic_experiment, SyntheticConfig};

fn main() -> evpr::Result<()> {
    let params = PipelineParams {
        sweep_points: 0,
        ..PipelineParams::default()
    };
    let started = Instant::now();
    for seed in 0..10 {
        let report =
            run_synthetic_experiment(&SyntheticConfig::default().with_seed(seed), &params)?;
        let members: Vec<String> = report
            .member_precisions
            .iter()
            .map(|p| format!("{p:.3}"))
            .collect();
        println!(
            "seed {seed}: members [{}] best {:.3} mean {:.3} | ensemble {:.3} | approximate {:.3}",
            members.join(" "),
            report.best_member(),
            report.member_mean(),
            report.ensemble_precision,
            report.approximate_precision.unwrap_or(f64::NAN),
        );
    }
    println!("elapsed {:.1?}", started.elapsed());
    Ok(())
}
