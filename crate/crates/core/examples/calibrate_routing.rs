//! Picks the routing rating scale so the flood threshold is exceeded on a
//! target number of days per year when the reservoir passes its inflow
//! straight through.
//!
//! cargo run --release -p reservoir-core --example calibrate_routing -- [config.json] [days_per_year] [years]

use reservoir_core::config::AppConfig;
use reservoir_core::hydrology::{generate_trace, DAYS_PER_YEAR};
use reservoir_core::routing::{DownstreamModel, RoutingModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cfg = match args.first() {
        Some(path) => AppConfig::load(path.as_ref())?,
        None => AppConfig::default_config(),
    };
    let target: f64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(7.5);
    let years: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(200);

    let trace = generate_trace(&cfg.hydrology, years * DAYS_PER_YEAR)?;
    // Route with a unit rating so the level equals the smoothed flow^exponent.
    let unit = RoutingModel { rating_scale: 1.0, ..cfg.routing };
    let total = |t: usize| trace.q_d[t] + trace.q_t[t] + trace.q_l[t];
    let mut state = unit.state_at_rest(total(0));
    let mut levels: Vec<f64> = (0..trace.len()).map(|t| unit.advance(&mut state, total(t))).collect();
    levels.sort_by(f64::total_cmp);

    let exceed = ((target / DAYS_PER_YEAR as f64) * levels.len() as f64).round() as usize;
    let at = levels[levels.len() - exceed.max(1)];
    let scale = cfg.objectives.h_bar / at;
    println!("rating_scale = {scale:.6}");
    println!("threshold flow = {:.1} m3/s", unit.flow_for_level(at));
    Ok(())
}
