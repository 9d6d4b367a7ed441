//! The example configurations shipped in `configs/` stay in sync with the
//! presets in code.

use std::path::PathBuf;

use dfgan::commands::load_phantom_config;
use dfgan::config::RunConfig;
use dfgan::data::PhantomConfig;

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn desk_config_file_matches_preset() {
    assert_eq!(RunConfig::load(&configs_dir().join("desk.toml")).unwrap(), RunConfig::desk());
}

#[test]
fn phantom_config_file_matches_defaults() {
    let cfg = load_phantom_config(&configs_dir().join("phantoms.toml")).unwrap();
    assert_eq!(
        cfg,
        PhantomConfig {
            samples: 244,
            ..PhantomConfig::default()
        }
    );
}
