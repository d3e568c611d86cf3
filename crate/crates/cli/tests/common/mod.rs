#![allow(dead_code)]

use std::path::Path;

use dtaad_cli::commands::cmd_synth;
use dtaad_cli::config::RunConfig;
use dtaad_cli::synth::SyntheticSpec;

/// Writes a synthetic benchmark into `dir` and returns a config pointing at it.
pub fn synthetic_run(dir: &Path, spec: &SyntheticSpec, seed: u64) -> RunConfig {
    let data = dir.join("data");
    cmd_synth(spec, &data).unwrap();
    let mut cfg = RunConfig { seed, ..RunConfig::default() };
    cfg.data.train = Some(data.join("train.csv"));
    cfg.data.test = Some(data.join("test.csv"));
    cfg.data.labels = Some(data.join("labels.csv"));
    cfg.out = dir.join("out");
    cfg
}

pub fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec { dims: 3, length: 2000, seed, ..SyntheticSpec::default() }
}
