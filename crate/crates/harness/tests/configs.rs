use std::path::Path;

use mfsim_harness::{ExperimentConfig, Preset};

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (file, preset) in [
        ("competition.toml", Preset::M1Paper),
        ("convergence.toml", Preset::M1Paper),
        ("two_atoms.toml", Preset::AppendixB),
    ] {
        let cfg = ExperimentConfig::load(&dir.join(file)).unwrap();
        assert_eq!(cfg.preset, preset, "{file}");
    }
}
