//! Parameter and MAC accounting for the named presets.
//!
//!     cargo run --example capacity_report [preset]

use dynamixer::analysis::count_params;
use dynamixer::config::PRESET_NAMES;
use dynamixer::ModelConfig;

fn main() -> dynamixer::Result<()> {
    if let Some(name) = std::env::args().nth(1) {
        let cfg = ModelConfig::preset(&name).expect("unknown preset");
        print!("{}", count_params(&cfg)?.to_csv());
        return Ok(());
    }
    println!("{:<12} {:>14} {:>16}", "preset", "params", "MACs");
    for name in PRESET_NAMES {
        let cfg = ModelConfig::preset(name).unwrap();
        let r = count_params(&cfg)?;
        println!("{:<12} {:>14} {:>16}", name, r.total_params, r.total_macs);
    }
    Ok(())
}
