//! Bundled search spaces and the six specialized NAS-BNN architectures.

use crate::error::{Error, Result};
use crate::searchspace::{Architecture, SearchSpace, StageSpec};

fn stage(depths: &[usize], channels: &[usize], kernels: &[usize], groups: &[usize], stride: usize) -> StageSpec {
    StageSpec {
        depth_choices: depths.to_vec(),
        channel_choices: channels.to_vec(),
        kernel_choices: kernels.to_vec(),
        group_choices: groups.to_vec(),
        stride,
    }
}

/// The ImageNet search space: 224x224 input, 1000 classes.
pub fn paper_space() -> SearchSpace {
    SearchSpace {
        id: "paper".into(),
        stem_channel_choices: vec![24, 32, 48],
        stem_kernel: 3,
        stem_stride: 2,
        stages: vec![
            stage(&[2, 3], &[48, 64, 96], &[3], &[1], 1),
            stage(&[2, 3], &[96, 128, 192], &[3, 5], &[1, 2], 2),
            stage(&[2, 3], &[192, 256, 384], &[3, 5], &[2, 4], 2),
            stage(&[8, 9], &[384, 512, 768], &[3, 5], &[4, 8], 2),
            stage(&[2, 3], &[768, 1024, 1536], &[3, 5], &[8, 16], 2),
        ],
        input_resolution: 224,
        num_classes: 1000,
        in_channels: 3,
    }
}

/// CIFAR-scale variant: 32x32 input, stem stride 1, stage strides
/// 1,1,2,2,2, channel choices divided by four and stage-4 depths {3,4}.
pub fn desk_cifar_space() -> SearchSpace {
    SearchSpace {
        id: "desk-cifar".into(),
        stem_channel_choices: vec![6, 8, 12],
        stem_kernel: 3,
        stem_stride: 1,
        stages: vec![
            stage(&[2, 3], &[12, 16, 24], &[3], &[1], 1),
            stage(&[2, 3], &[24, 32, 48], &[3, 5], &[1, 2], 1),
            stage(&[2, 3], &[48, 64, 96], &[3, 5], &[2, 4], 2),
            stage(&[3, 4], &[96, 128, 192], &[3, 5], &[4, 8], 2),
            stage(&[2, 3], &[192, 256, 384], &[3, 5], &[8, 16], 2),
        ],
        input_resolution: 32,
        num_classes: 10,
        in_channels: 3,
    }
}

/// A three-stage space small enough to train in seconds on one core.
/// Used by the examples and the test suite.
pub fn tiny_space() -> SearchSpace {
    SearchSpace {
        id: "tiny".into(),
        stem_channel_choices: vec![4, 8],
        stem_kernel: 3,
        stem_stride: 1,
        stages: vec![
            stage(&[1, 2], &[8, 12], &[3], &[1], 1),
            stage(&[1, 2], &[16, 24], &[3, 5], &[1, 2], 2),
            stage(&[1, 2], &[32, 48], &[3, 5], &[2, 4], 2),
        ],
        input_resolution: 12,
        num_classes: 4,
        in_channels: 3,
    }
}

pub const SPACE_NAMES: &[&str] = &["paper", "desk-cifar", "tiny"];

pub fn space_by_name(name: &str) -> Result<SearchSpace> {
    match name {
        "paper" => Ok(paper_space()),
        "desk-cifar" => Ok(desk_cifar_space()),
        "tiny" => Ok(tiny_space()),
        other => Err(Error::Config(format!(
            "unknown space preset `{other}` (expected one of {})",
            SPACE_NAMES.join(", ")
        ))),
    }
}

const NAS_BNN_JSON: [(&str, &str); 6] = [
    ("a", include_str!("../presets/nas-bnn-a.json")),
    ("b", include_str!("../presets/nas-bnn-b.json")),
    ("c", include_str!("../presets/nas-bnn-c.json")),
    ("d", include_str!("../presets/nas-bnn-d.json")),
    ("e", include_str!("../presets/nas-bnn-e.json")),
    ("f", include_str!("../presets/nas-bnn-f.json")),
];

/// OPs (in millions) reported for each bundled architecture at 224x224.
pub const REPORTED_OPS_M: [(&str, f64); 6] = [
    ("a", 21.0),
    ("b", 57.0),
    ("c", 87.0),
    ("d", 124.0),
    ("e", 160.0),
    ("f", 180.0),
];

/// One of the bundled `nas-bnn-{a..f}` architectures (paper space).
pub fn nas_bnn(letter: &str) -> Result<Architecture> {
    let key = letter.trim_start_matches("nas-bnn-").to_ascii_lowercase();
    NAS_BNN_JSON
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, j)| Architecture::from_json(j).expect("bundled preset parses"))
        .ok_or_else(|| Error::Config(format!("unknown architecture preset `{letter}`")))
}

pub fn nas_bnn_all() -> Vec<(String, Architecture)> {
    NAS_BNN_JSON
        .iter()
        .map(|(k, _)| (format!("nas-bnn-{k}"), nas_bnn(k).unwrap()))
        .collect()
}

/// The raw bundled JSON text for `nas-bnn-{letter}`.
pub fn nas_bnn_json(letter: &str) -> Option<&'static str> {
    NAS_BNN_JSON.iter().find(|(k, _)| *k == letter).map(|(_, j)| *j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::validate;

    #[test]
    fn bundled_presets_validate() {
        let space = paper_space();
        for (name, a) in nas_bnn_all() {
            let v = validate(&space, &a);
            assert!(v.is_empty(), "{name}: {v:?}");
        }
    }

    #[test]
    fn desk_and_tiny_spaces_are_well_formed() {
        for n in SPACE_NAMES {
            space_by_name(n).unwrap().check().unwrap();
        }
    }
}
