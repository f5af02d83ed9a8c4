//! Run a small fit and export the effect map as GeoJSON through the
//! command layer.
//!
//! Usage: cargo run --release --example export_geojson [seed]

use gwsnmm::cli::{cmd_fit, cmd_map, cmd_simulate, RunConfig};

fn main() -> gwsnmm::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(17);
    let dir = std::env::temp_dir().join("gwsnmm_geojson_example");
    std::fs::create_dir_all(&dir)?;

    let mut config = RunConfig::default();
    config.seed = Some(seed);
    config.out_dir = dir.clone();
    config.simulate.n = 150;
    config.simulate.horizon = 8;
    cmd_simulate(&config)?;

    config.panel.path = Some(dir.join("panel.csv"));
    config.targets.grid = Some("0.2:0.8:3 x 0.2:0.8:3".into());
    config.inference.bootstrap_b = 20;
    let written = cmd_fit(&config)?;
    println!("fit wrote: {}", written[0].display());

    let outputs = cmd_map(&config, &written[0])?;
    for path in &outputs {
        println!("map wrote: {}", path.display());
    }
    let geojson = std::fs::read_to_string(&outputs[0])?;
    let preview: String = geojson.chars().take(160).collect();
    println!("GeoJSON starts: {preview}...");
    Ok(())
}
