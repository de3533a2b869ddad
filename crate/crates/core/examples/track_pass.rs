//! Tracks one simulated NRHO pass with the library API and prints the
//! per-step standard deviations.
//!
//! ```text
//! cargo run --release -p cislunar-pgm --example track_pass [seed]
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cislunar_pgm::dynamics::SystemParams;
use cislunar_pgm::hybrid::{run_hybrid, shrink_factors, HybridConfig, UpdateKind};
use cislunar_pgm::scenario::{box_to_filter, build_scenario, default_box_km, ScenarioConfig};

fn main() -> cislunar_pgm::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let p = SystemParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = build_scenario(&ScenarioConfig::default_for(&p)?, &p, &mut rng)?;
    println!("{} measurements at a 40-minute cadence", data.len());

    let cfg = HybridConfig::with_box(box_to_filter(&default_box_km(), &p));
    let history = run_hybrid(&data.measurements, &data.truth, &cfg, &p, &mut rng)?;
    println!("step update  entropy   sd_x km   sd_y km   sd_z km  sd_vx km/s  sd_vy km/s  sd_vz km/s  consistent");
    for r in &history.records {
        let kind = match r.kind {
            UpdateKind::Pgm1 => "PGM-I ",
            UpdateKind::Pgm2 => "PGM-II",
        };
        let s = &r.std_km;
        println!(
            "{:>4} {kind} {:>8.2} {:>9.1} {:>9.1} {:>9.1} {:>11.5} {:>11.5} {:>11.5}  {}",
            r.step, r.entropy, s[0], s[1], s[2], s[3], s[4], s[5], r.consistent
        );
    }
    if let Some(last) = history.records.last() {
        let f = shrink_factors(&history.initial_std_km, &last.std_km);
        println!(
            "shrink: position {:.0} {:.0} {:.0}, velocity {:.0} {:.0} {:.0}",
            f[0], f[1], f[2], f[3], f[4], f[5]
        );
    }
    Ok(())
}
