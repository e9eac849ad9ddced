//! Adapter and head budgets for the X3D-M channel layout, plus a toy network
//! counted both from closed forms and from its actual tensors.

use mdl_core::audit::{self, audit_network};
use mdl_core::{AdapterKind, DomainSpec, InsertionConfig, MdlNetwork, NetworkConfig, ToyBackboneConfig};

fn main() -> mdl_core::Result<()> {
    let rows = audit::report_rows(&audit::x3d_golden())?;
    print!("{}", audit::render_text(&rows));

    let net = MdlNetwork::<f32>::new(NetworkConfig {
        backbone: ToyBackboneConfig::default(),
        adapter_kind: AdapterKind::SeparableST,
        insertion: InsertionConfig::Late(2),
        trainable_base: false,
        domains: vec![DomainSpec::new(1, "a", 10), DomainSpec::new(2, "b", 25)],
        seed: 0,
        shared_bn_stats: false,
    })?;
    let (walked, closed) = audit_network(&net)?;
    println!("\ntoy network, late-2, frozen backbone");
    println!("  walked: {walked:?}");
    println!("  agrees with closed form: {}", walked == closed);
    Ok(())
}
