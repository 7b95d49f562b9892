//! Flat `section.key = value` run configuration files.
//!
//! ```text
//! network.input   = 3x32x32
//! network.classes = 4
//! layer.<index>   = <layer descriptor>
//! lkam.<layer>    = k=.. x0=.. thres=.. pregain=.. gain=..
//! residual.<idx>  = <first layer> <last layer>
//! train.<field>   = learning_rate | momentum | batch_size | epochs | seed
//!                   | precision | eval_cadence | clip_norm (or `none`)
//! ```
//!
//! `#` starts a comment. Layer indices must run `0..n` without gaps;
//! residual indices only order the blocks. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{LayerSpec, LkamAttachment, NetworkConfig, ResidualBlock};
use crate::scalar::Precision;
use crate::training::TrainConfig;

pub const TINY_GATED: &str = include_str!("../configs/tiny-gated.cfg");
pub const TINY_RESIDUAL: &str = include_str!("../configs/tiny-residual.cfg");
pub const TOY_CAFFENET: &str = include_str!("../configs/toy-caffenet.cfg");

/// Names accepted by [`bundled`].
pub const BUNDLED: [&str; 3] = ["tiny-gated", "tiny-residual", "toy-caffenet"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
}

pub fn bundled(name: &str) -> Option<RunConfig> {
    let text = match name {
        "tiny-gated" => TINY_GATED,
        "tiny-residual" => TINY_RESIDUAL,
        "toy-caffenet" => TOY_CAFFENET,
        _ => return None,
    };
    Some(parse(text).expect("bundled configs parse"))
}

/// Loads a bundled config by name, or else reads the file at `spec`.
pub fn load(spec: &str) -> Result<RunConfig> {
    if let Some(c) = bundled(spec) {
        return Ok(c);
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        e => e,
    })
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("line {line}: `{key}` has invalid value `{value}`")))
}

pub fn parse(text: &str) -> Result<RunConfig> {
    let mut input = None;
    let mut classes = None;
    let mut layers: BTreeMap<usize, LayerSpec> = BTreeMap::new();
    let mut lkams = Vec::new();
    let mut residuals: BTreeMap<usize, ResidualBlock> = BTreeMap::new();
    let mut train = TrainConfig::default();

    for (no, raw) in text.lines().enumerate() {
        let line = no + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::config(format!("line {line}: expected `key = value`, got `{content}`")))?;
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::config(format!("line {line}: key `{key}` lacks a section")))?;
        match (section, field) {
            ("network", "input") => {
                let dims: Vec<usize> = value
                    .split('x')
                    .map(|d| parse_num(key, d.trim(), line))
                    .collect::<Result<_>>()?;
                if dims.len() != 3 {
                    return Err(Error::config(format!("line {line}: input must look like 3x32x32")));
                }
                input = Some((dims[0], dims[1], dims[2]));
            }
            ("network", "classes") => classes = Some(parse_num(key, value, line)?),
            ("layer", idx) => {
                let i: usize = parse_num(key, idx, line)?;
                let spec = LayerSpec::parse_descriptor(value)
                    .map_err(|e| Error::config(format!("line {line}: {e}")))?;
                if layers.insert(i, spec).is_some() {
                    return Err(Error::config(format!("line {line}: layer {i} given twice")));
                }
            }
            ("lkam", layer) => {
                let a = LkamAttachment::parse_descriptor(&format!("{layer} {value}"))
                    .map_err(|e| Error::config(format!("line {line}: {e}")))?;
                lkams.push(a);
            }
            ("residual", idx) => {
                let i: usize = parse_num(key, idx, line)?;
                let (f, l) = value
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| Error::config(format!("line {line}: residual needs `first last`")))?;
                residuals.insert(i, ResidualBlock::new(f.trim(), l.trim()));
            }
            ("train", "learning_rate") => train.learning_rate = parse_num(key, value, line)?,
            ("train", "momentum") => train.momentum = parse_num(key, value, line)?,
            ("train", "batch_size") => train.batch_size = parse_num(key, value, line)?,
            ("train", "epochs") => train.epochs = parse_num(key, value, line)?,
            ("train", "seed") => train.seed = parse_num(key, value, line)?,
            ("train", "eval_cadence") => train.eval_cadence = parse_num(key, value, line)?,
            ("train", "clip_norm") => {
                train.clip_norm = match value {
                    "none" => None,
                    v => Some(parse_num(key, v, line)?),
                }
            }
            ("train", "precision") => {
                train.precision = Precision::parse(value)
                    .ok_or_else(|| Error::config(format!("line {line}: unknown precision `{value}`")))?
            }
            _ => return Err(Error::config(format!("line {line}: unknown key `{key}`"))),
        }
    }
    if let Some((pos, (&idx, _))) = layers.iter().enumerate().find(|(p, (&i, _))| *p != i) {
        return Err(Error::config(format!("layer indices must run from 0 without gaps; found {idx} at position {pos}")));
    }
    let network = NetworkConfig {
        input: input.ok_or_else(|| Error::config("missing `network.input`"))?,
        classes: classes.ok_or_else(|| Error::config("missing `network.classes`"))?,
        layers: layers.into_values().collect(),
        lkams,
        residuals: residuals.into_values().collect(),
    };
    network.validate()?;
    train.validate()?;
    Ok(RunConfig { network, train })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_parse() {
        for name in BUNDLED {
            let c = bundled(name).unwrap();
            assert!(!c.network.lkams.is_empty(), "{name}");
        }
        let t = bundled("toy-caffenet").unwrap();
        assert_eq!(t.network.lkams.len(), 4);
        assert_eq!(t.network.layers.iter().filter(|l| l.is_conv()).count(), 5);
        assert_eq!(bundled("tiny-residual").unwrap().network.residuals.len(), 1);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = format!("{TINY_GATED}\ntrain.warmup = 3\n");
        let e = parse(&text).unwrap_err().to_string();
        assert!(e.contains("train.warmup"), "{e}");
    }

    #[test]
    fn layer_gap_rejected() {
        let text = TINY_GATED.replace("layer.2 =", "layer.7 =");
        assert!(parse(&text).is_err());
    }

    #[test]
    fn comments_and_whitespace() {
        let text = TINY_GATED.replace("train.epochs = 10", "  train.epochs=3   # short");
        assert_eq!(parse(&text).unwrap().train.epochs, 3);
    }
}
