use std::path::PathBuf;
use std::sync::OnceLock;

use iondet::{FieldBasis, RunConfig};

/// Default configuration and its field basis, solved once per test binary
/// and cached on disk across binaries.
pub fn default_basis() -> &'static (RunConfig, FieldBasis) {
    static CELL: OnceLock<(RunConfig, FieldBasis)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = RunConfig::default();
        let assembly = cfg.assembly().expect("default assembly");
        let cache = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("field-cache");
        let basis =
            FieldBasis::solve(&assembly, cfg.spacing(), &cfg.solve_options(), Some(&cache)).expect("field solve");
        (cfg, basis)
    })
}
