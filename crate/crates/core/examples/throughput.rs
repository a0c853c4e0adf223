//! Eval-mode images per second.
//!
//!     cargo run --release --example throughput [preset] [batch] [seconds]

use std::time::Duration;

use dynamixer::analysis::bench_throughput;
use dynamixer::{Model, ModelConfig};

fn main() -> dynamixer::Result<()> {
    let mut args = std::env::args().skip(1);
    let preset = args.next().unwrap_or_else(|| "tiny".into());
    let batch: usize = args.next().map_or(32, |s| s.parse().expect("batch"));
    let seconds: f64 = args.next().map_or(2.0, |s| s.parse().expect("seconds"));

    let model = Model::new(ModelConfig::preset(&preset).expect("unknown preset"), 0)?;
    let t = bench_throughput(&model, batch, Duration::from_secs_f64(seconds))?;
    println!("{preset}, batch {batch}: {:.1} ± {:.1} images/s", t.mean, t.std);
    Ok(())
}
