#![allow(dead_code)]

use std::path::{Path, PathBuf};

use percfield_cli::ExperimentConfig;

/// Small experiment touching every job type: π, spin pairs, an energy
/// insertion with two spins and an arm curve.
pub fn small_config(seed: u64) -> ExperimentConfig {
    let text = format!(
        r#"{{
  "master_seed": {seed},
  "spacings": [0.25, 0.125],
  "domain_radius": 2.0,
  "pi": {{"n_samples": 2400, "batch_size": 40}},
  "checkpoint_every": 5,
  "correlators": [
    {{"id": "psi_far", "kind": "spin_n_point", "n_samples": 2400, "batch_size": 40,
      "points": [{{"z": [-0.5, 0.0], "role": "spin"}}, {{"z": [0.5, 0.0], "role": "spin"}}]}},
    {{"id": "psi_near", "kind": "spin_n_point", "n_samples": 2400, "batch_size": 40,
      "points": [{{"z": [-0.25, 0.0], "role": "spin"}}, {{"z": [0.25, 0.0], "role": "spin"}}]}},
    {{"id": "ess", "kind": "energy_spin_spin", "n_samples": 2400, "batch_size": 40,
      "points": [{{"z": [0.0, 0.0], "role": "energy_center"}}, {{"z": [0.0, 1.0], "role": "spin"}}, {{"z": [0.0, -1.0], "role": "spin"}}]}},
    {{"id": "arms", "kind": "four_arm_curve", "n_samples": 2400, "batch_size": 40, "spacing": 0.125,
      "points": [{{"z": [0.0, 0.0], "role": "spin"}}], "radii": [0.25, 0.5, 1.0]}}
  ]
}}"#
    );
    ExperimentConfig::from_json(&text).unwrap()
}

pub fn write_config(dir: &Path, config: &ExperimentConfig) -> PathBuf {
    let path = dir.join("experiment.json");
    std::fs::write(&path, config.canonical()).unwrap();
    path
}

pub fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path).unwrap()
}
