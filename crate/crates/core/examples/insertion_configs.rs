//! Where each insertion configuration places adapters, and what it costs.

use mdl_core::audit::{audit, AuditScenario};
use mdl_core::{AdapterKind, ChannelSpec, InsertionConfig};

fn main() -> mdl_core::Result<()> {
    let spec = ChannelSpec::x3d_m();
    println!("channels per location: {:?}", spec.channels);
    for ins in ["all", "early-1", "early-3", "late-1", "late-3", "multi-head"] {
        let ins: InsertionConfig = ins.parse()?;
        let locations = ins.locations(spec.num_locations())?;
        let budget = audit(&AuditScenario {
            name: ins.to_string(),
            channel_spec: spec.clone(),
            adapter_kind: AdapterKind::SeparableST,
            insertion: ins,
            domains: vec![51, 101, 400],
            trainable_base: false,
            base_param_count: 0,
        })?;
        println!(
            "{:<11} locations {:<16} adapters {:>9} ({:.2} M)",
            ins.to_string(),
            format!("{locations:?}"),
            budget.adapters,
            budget.adapters as f64 / 1e6
        );
    }
    Ok(())
}
