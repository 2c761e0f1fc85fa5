//! The full synthetic pipeline: train stage 2, join visual scores, aggregate
//! and evaluate. Pass a seed as the first argument.

use vrdet::demo::{run_demo, DemoConfig};

fn main() -> anyhow::Result<()> {
    let seed = match std::env::args().nth(1) {
        Some(s) => s.parse()?,
        None => 7,
    };
    let out = run_demo(&DemoConfig::with_seed(seed))?;
    print!("{}", out.report_text());
    Ok(())
}
