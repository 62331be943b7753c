//! Per-step wall time of MAML with and without the default freeze policy.
//!
//! `cargo run --release --example freeze_speed -- [pairs] [steps]`

use accent_core::config::ExperimentConfig;
use accent_core::eval::run_expansion;
use accent_core::model::build_model;
use accent_core::synth::{Corpus, Recipe};
use accent_core::trainer::Method;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let pairs: usize = args.next().map_or(Ok(5), |a| a.parse())?;
    let steps: usize = args.next().map_or(Ok(200), |a| a.parse())?;
    let mut cfg = ExperimentConfig::default();
    cfg.expansion.epochs = 1000;
    cfg.expansion.max_steps = Some(steps);
    let start = build_model(&cfg.model, cfg.seed)?;
    let data = Corpus::generate(&cfg.data)?.partition(Recipe::Accent, cfg.seed)?.train;
    let mut ratios = Vec::new();
    for i in 0..pairs {
        let mut ms = [0.0; 2];
        for (k, method) in [Method::MAML, Method::MamlFmp].into_iter().enumerate() {
            let (_, out) = run_expansion(&cfg, &start, method, &data)?;
            ms[k] = out.median_step_ms().unwrap_or(f64::NAN);
        }
        ratios.push(ms[1] / ms[0]);
        println!("pair {i}: MAML {:.2} ms, MAML_FMP {:.2} ms, ratio {:.3}", ms[0], ms[1], ms[1] / ms[0]);
    }
    ratios.sort_by(f64::total_cmp);
    println!("median ratio {:.3}", ratios[ratios.len() / 2]);
    Ok(())
}
