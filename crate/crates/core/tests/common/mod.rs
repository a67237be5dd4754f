#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use failsense::backbone::BackboneConfig;
use failsense::dataset::synth::GenConfig;
use failsense::evalcli::RunConfig;

/// A configuration small enough to run the whole pipeline in seconds.
pub const TINY_TOML: &str = r#"
seed = 7

[data]
tasks = ["lift_red", "lift_blue", "turn_on_light", "turn_off_light"]
demos = 40
height = 16
width = 16
control_failures = 8

[backbone]
d_model = 32
n_layers = 3
n_heads = 2
d_ff = 64
vision_width = 32
vision_heads = 2
projector_hidden = 32

[stage1]
epochs = 2
batch_size = 8

[stage2]
epochs = 2
batch_size = 8

[stage2.fs]
d_model = 32
d_pool = 32
residual_hidden = 64
"#;

pub fn tiny() -> RunConfig {
    RunConfig::from_toml(TINY_TOML).unwrap()
}

pub fn tiny_data() -> GenConfig {
    tiny().data
}

pub fn tiny_backbone() -> BackboneConfig {
    tiny().backbone
}

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_failsense"));
    c.env_remove("FAILSENSE_SEED");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, text).unwrap();
    p
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// gen-data, both training stages and an eval of the smf test split, all
/// written under `dir`.
pub fn pipeline(dir: &Path, config: &Path) {
    let data = dir.join("data");
    let bb = dir.join("bb.ckpt");
    let fs = dir.join("fs.ckpt");
    let report = dir.join("report.json");
    let steps: [Vec<&str>; 4] = [
        vec!["gen-data", "--config", s(config), "--out", s(&data)],
        vec!["train", "--stage", "1", "--config", s(config), "--data", s(&data), "--out", s(&bb)],
        vec![
            "train", "--stage", "2", "--config", s(config), "--data", s(&data), "--backbone", s(&bb), "--out", s(&fs),
        ],
        vec![
            "eval", "--config", s(config), "--data", s(&data), "--backbone", s(&bb), "--fs", s(&fs), "--out",
            s(&report),
        ],
    ];
    for args in steps {
        let out = run(&args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
