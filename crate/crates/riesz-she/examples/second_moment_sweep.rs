//! Sweep the radial two-point solver across mollification scales at two
//! couplings: one above the fall-to-center threshold (mass explodes faster
//! at every deeper scale) and one below it (masses collapse into a single
//! band under the supersolution).

use riesz_she::moment2::no_phase_transition_sweep;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let rhos: Vec<f64> = [4.0, 6.0, 8.0, 10.0, 12.0]
        .iter()
        .map(|k| (-k as f64).exp())
        .collect();
    for beta in [3.0, 0.5] {
        let report = no_phase_transition_sweep(beta, 3, &rhos, 1.0)?;
        println!(
            "beta = {beta}: log spread {:.3}, bounded = {}",
            report.log_spread, report.bounded
        );
        println!("  {:>12} {:>14} {:>14} {:>14}", "log(1/rho)", "sup log mass", "final log mass", "super log mass");
        for row in &report.rows {
            let sup_bound = row
                .super_log_mass
                .map_or("undefined".to_string(), |s| format!("{s:.4}"));
            println!(
                "  {:>12.1} {:>14.4} {:>14.4} {:>14}",
                (1.0 / row.rho).ln(),
                row.sup_log_mass,
                row.final_log_mass,
                sup_bound
            );
        }
    }
    Ok(())
}
