//! `key = value` run configuration shared by config files and flags.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Attribute,
    Evaluate,
    Roar,
    Render,
}

impl Command {
    pub const ALL: [Command; 5] = [
        Command::Train,
        Command::Attribute,
        Command::Evaluate,
        Command::Roar,
        Command::Render,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Attribute => "attribute",
            Command::Evaluate => "evaluate",
            Command::Roar => "roar",
            Command::Render => "render",
        }
    }

    pub fn about(self) -> &'static str {
        match self {
            Command::Train => "Train a classifier and write a checkpoint",
            Command::Attribute => "Compute attribution maps for dataset images",
            Command::Evaluate => "MoRF/LeRF curves and their areas",
            Command::Roar => "Remove-and-retrain evaluation",
            Command::Render => "Render an attribution file as PGM/PPM",
        }
    }

    /// Accepted keys with their defaults and help text.
    pub fn keys(self) -> Vec<Key> {
        let mut keys = vec![
            key("seed", "0", "global random seed"),
            key("out", "out", "output directory"),
        ];
        let data = [
            key("dataset", "mnist", "mnist or synthetic"),
            key("data_dir", "data/mnist", "directory holding the MNIST IDX files"),
            key("synthetic_samples", "8000", "size of the synthetic dataset"),
            key("synthetic_side", "28", "side length of synthetic images"),
            key("synthetic_noise", "0.1", "pixel noise of synthetic images"),
        ];
        let checkpoint = key("checkpoint", "", "checkpoint path (default <out>/model.apck)");
        let training = [
            key("epochs", "3", "training epochs"),
            key("batch_size", "64", "minibatch size"),
            key("optimizer", "adam", "adam or sgd"),
            key("lr", "0.001", "training learning rate"),
            key("momentum", "0.9", "SGD momentum"),
        ];
        let methods = [
            key("iters", "30", "learned method: optimization iterations"),
            key("plugin_lr", "0.2", "learned method: Adam learning rate"),
            key("lambda", "0.1", "learned method: mask loss weight"),
            key("alpha", "0.75", "positive mask center"),
            key("beta", "0.25", "negative mask center"),
            key("gamma", "10", "mask sharpness"),
            key("use_reference", "true", "learned method: subtract reference features"),
            key("sign_aware", "true", "learned method: include the negative term"),
            key("post_softmax", "false", "learned method: score by probability"),
            key("ig_steps", "50", "integrated gradients steps"),
            key("sg_samples", "50", "smoothgrad noise samples"),
            key("sg_sigma", "auto", "smoothgrad noise std (auto = 0.15 of the image range)"),
            key("occlusion_patch", "4", "occlusion patch side"),
            key("occlusion_stride", "4", "occlusion stride"),
        ];
        match self {
            Command::Train => {
                keys.extend(data);
                keys.push(checkpoint);
                keys.push(key("model", "mnist_cnn2", "mnist_cnn2 or cifar_cnn4"));
                keys.push(key("train_limit", "0", "use only the first N training images (0 = all)"));
                keys.extend(training);
            }
            Command::Attribute => {
                keys.extend(data);
                keys.push(checkpoint);
                keys.push(key("split", "test", "train or test"));
                keys.push(key("method", "saliency", "comma-separated method names"));
                keys.push(key("indices", "0", "comma-separated indices or ranges a-b"));
                keys.extend(methods);
            }
            Command::Evaluate => {
                keys.extend(data);
                keys.push(checkpoint);
                keys.push(key("methods", "saliency,gradxinput,smoothgrad,learned", "methods to compare"));
                keys.push(key("samples", "100", "number of test samples"));
                keys.push(key("steps", "20", "curve steps over the 5% range"));
                keys.extend(methods);
            }
            Command::Roar => {
                keys.extend(data);
                keys.push(checkpoint);
                keys.push(key("methods", "random,learned", "methods to compare"));
                keys.push(key("fractions", "0.4,0.5,0.6,0.7,0.8,0.9", "removed fractions"));
                keys.push(key("subset", "10000", "training images used (split into train/test)"));
                keys.push(key("train_fraction", "0.8", "share of the subset used for training"));
                keys.extend(training);
                keys.extend(methods);
            }
            Command::Render => {
                keys.extend(data);
                keys.push(key("split", "test", "train or test"));
                keys.push(key("attr", "", "attribution file"));
                keys.push(key("index", "", "dataset index of the underlying image (overlay)"));
                keys.push(key("mode", "heatmap", "heatmap, overlay or mask"));
                keys.push(key("output", "", "output image path (default next to the .attr file)"));
                keys.push(key("alpha", "0.75", "positive mask center"));
                keys.push(key("beta", "0.25", "negative mask center"));
                keys.push(key("gamma", "10", "mask sharpness"));
            }
        }
        keys
    }
}

#[derive(Clone, Debug)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Fully resolved settings of one command.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Defaults, overridden by the config file, overridden by flags.
    pub fn resolve(
        command: Command,
        file: Option<&Path>,
        flags: &[(String, String)],
    ) -> Result<RunConfig, CliError> {
        let keys = command.keys();
        let mut values: BTreeMap<String, String> =
            keys.iter().map(|k| (k.name.to_string(), k.default.to_string())).collect();
        let from_file = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })?;
                parse_config(&text)?
            }
            None => Vec::new(),
        };
        for (k, v) in from_file.into_iter().chain(flags.iter().cloned()) {
            match values.get_mut(&k) {
                Some(slot) => *slot = v,
                None => {
                    return Err(CliError::Config(format!(
                        "unknown key '{k}' for command '{}'",
                        command.name()
                    )))
                }
            }
        }
        Ok(RunConfig { command, values })
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key '{key}' is not declared for {}", self.command.name()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| CliError::Config(format!("invalid value '{raw}' for '{key}'")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::Config(format!("invalid entry '{s}' in '{key}'")))
            })
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        match self.raw("checkpoint") {
            "" => self.out_dir().join("model.apck"),
            p => PathBuf::from(p),
        }
    }
}

/// The effective configuration, one sorted `key = value` line per key.
impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# {}", self.command.name())?;
        for (k, v) in &self.values {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Expands `"0,3,5-7"` into `[0, 3, 5, 6, 7]`.
pub fn parse_indices(spec: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Config(format!("invalid index list '{spec}'"));
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_blank_lines() {
        let parsed = parse_config("# header\n\nseed = 4  # trailing\n out=dir \n").unwrap();
        assert_eq!(parsed, vec![("seed".into(), "4".into()), ("out".into(), "dir".into())]);
        assert!(parse_config("seed 4").is_err());
    }

    #[test]
    fn flags_override_file_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "epochs = 5\nseed = 2\n").unwrap();
        let cfg = RunConfig::resolve(Command::Train, Some(&path), &[("seed".into(), "9".into())]).unwrap();
        assert_eq!(cfg.get::<usize>("epochs").unwrap(), 5);
        assert_eq!(cfg.get::<u64>("seed").unwrap(), 9);
        assert_eq!(cfg.raw("batch_size"), "64");
        let err = RunConfig::resolve(Command::Train, None, &[("iters".into(), "3".into())]).unwrap_err();
        assert!(err.to_string().contains("unknown key 'iters'"));
    }

    #[test]
    fn echo_lists_every_key_sorted() {
        let cfg = RunConfig::resolve(Command::Render, None, &[]).unwrap();
        let text = cfg.to_string();
        let keys: Vec<&str> = text.lines().skip(1).map(|l| l.split(" = ").next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(keys.len(), Command::Render.keys().len());
    }

    #[test]
    fn index_ranges() {
        assert_eq!(parse_indices("0, 3,5-7").unwrap(), vec![0, 3, 5, 6, 7]);
        assert!(parse_indices("4-2").is_err());
        assert!(parse_indices("x").is_err());
    }
}
