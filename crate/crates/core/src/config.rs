//! Run configuration: `key = value` text, `#` comments, unknown keys
//! rejected.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::{parse, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Processed dataset directory.
    pub data: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: None,
            output: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Sets one key. `vocab` is derived from the dataset and cannot be set.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "vocab" => return Err(Error::Config("vocab comes from the dataset".into())),
            "lr" => t.lr = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "adam_eps" => t.eps = parse(key, v)?,
            "max_epochs" => t.max_epochs = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "clip" => t.clip = if v == "none" { None } else { Some(parse(key, v)?) },
            "eval_batch" => t.eval_batch = parse(key, v)?,
            "mask_seen" => t.mask_seen = parse(key, v)?,
            "data" => self.data = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "output" => self.output = PathBuf::from(v),
            _ => {
                if !self.model.set(key, v)? {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key with its current value, loadable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::from("# model\n");
        for (k, v) in self.model.to_pairs() {
            if k != "vocab" {
                writeln!(s, "{k} = {v}").unwrap();
            }
        }
        s.push_str("# training\n");
        let pairs = [
            ("lr", t.lr.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.eps.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("seed", t.seed.to_string()),
            ("clip", t.clip.map_or("none".into(), |c| c.to_string())),
            ("eval_batch", t.eval_batch.to_string()),
            ("mask_seen", t.mask_seen.to_string()),
        ];
        for (k, v) in pairs {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s.push_str("# paths\n");
        writeln!(s, "data = {}", self.data.as_ref().map_or(String::new(), |p| p.display().to_string())).unwrap();
        writeln!(s, "output = {}", self.output.display()).unwrap();
        s
    }

    /// Full-dataset settings: batch 2048 and sequence length 200 as used for
    /// MovieLens-1M.
    pub fn movielens_preset() -> Self {
        let mut c = RunConfig::default();
        c.train.batch_size = 2048;
        c.model.max_len = 200;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = RunConfig::default();
        c.set("d_model", "16").unwrap();
        c.set("clip", "5").unwrap();
        c.set("mode", "linear-approx").unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key() {
        assert!(matches!(RunConfig::parse("colour = red"), Err(Error::Config(_))));
        assert!(RunConfig::parse("lr = fast").is_err());
    }

    #[test]
    fn comments_and_blanks() {
        let c = RunConfig::parse("# hi\n\nlr = 0.5  # faster\n").unwrap();
        assert_eq!(c.train.lr, 0.5);
    }
}
