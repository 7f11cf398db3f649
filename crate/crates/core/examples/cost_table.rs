//! Parameter and FLOP counts of Swin-T on 100 classes across keep ratios,
//! with the MAC convention calibrated against the unpruned 4.49G.

use dimprune::cost::{calibrate_mac_factor, model_cost, CostConvention};
use dimprune::BackboneConfig;

fn main() -> dimprune::Result<()> {
    let cfg = BackboneConfig::swin_tiny(100);
    let cal = calibrate_mac_factor(&cfg, &CostConvention::default(), 4.49e9, 0.05)?;
    let conv = CostConvention {
        mac_factor: cal.mac_factor,
        ..CostConvention::default()
    };
    println!(
        "mac_factor {} ({:+.2}% against 4.49G)",
        cal.mac_factor,
        100.0 * cal.rel_error
    );
    println!(
        "{:>5}  {:>9}  {:>8}  {:>11}  {:>11}",
        "rho", "params M", "FLOPs G", "backbone M", "prunable %"
    );
    for rho in [1.0, 0.8, 0.6, 0.4, 0.2] {
        let r = model_cost(&cfg, rho, &conv)?;
        println!(
            "{rho:>5.1}  {:>9.3}  {:>8.3}  {:>11.3}  {:>11.1}",
            r.total.params as f64 / 1e6,
            r.total.flops as f64 / 1e9,
            r.backbone.params as f64 / 1e6,
            100.0 * r.prunable.params as f64 / r.total.params as f64
        );
    }
    // Per-entry breakdown for the small desk model.
    let desk = model_cost(&BackboneConfig::desk(), 0.6, &conv)?;
    println!("\n{}", desk.render_table());
    Ok(())
}
