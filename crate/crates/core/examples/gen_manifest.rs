//! Regenerate the checked-in approximate 1B-model manifest:
//! `cargo run -p binquant --example gen_manifest -- manifests/conformer_1b.json`

use binquant::modelpack::conformer_1b_manifest;
use binquant::quant::QuantScheme;

fn main() {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "manifests/conformer_1b.json".to_string());
    let manifest = conformer_1b_manifest(QuantScheme::e5());
    manifest.to_json_file(&path).expect("write manifest");
    println!(
        "wrote {path}: {} layers, {} params ({} quantized)",
        manifest.layers.len(),
        manifest.total_params(),
        manifest.quantized_params()
    );
}
