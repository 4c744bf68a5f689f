//! Shared fixtures for the criterion benches.

use satcon_core::sysmodel::{load_model, NetworkModel};

/// The bundled three-agent demo network (same file as `configs/demo3.toml`).
pub fn demo_model() -> NetworkModel {
    let path = format!("{}/../../configs/demo3.toml", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(path).expect("demo config present");
    load_model(&text).expect("demo config valid")
}
