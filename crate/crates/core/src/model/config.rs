use crate::error::{Error, Result};
use crate::ssd::DecayMode;

/// Network shape and switches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of items plus one; id 0 is padding.
    pub vocab: usize,
    pub d_model: usize,
    pub expand: usize,
    pub state_size: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub layers: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub mode: DecayMode,
    pub chunk: usize,
    /// Bypass the time path; the decay uses `Δ` alone.
    pub no_time: bool,
    /// Drop the feed-forward sub-block.
    pub no_ffn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab: 0,
            d_model: 64,
            expand: 2,
            state_size: 32,
            heads: 4,
            conv_kernel: 4,
            layers: 2,
            max_len: 50,
            dropout: 0.4,
            mode: DecayMode::ExactExp,
            chunk: 16,
            no_time: false,
            no_ffn: false,
        }
    }
}

impl ModelConfig {
    pub fn d_inner(&self) -> usize {
        self.d_model * self.expand
    }

    pub fn head_dim(&self) -> usize {
        self.d_inner() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab < 2 {
            return bad("vocab must hold the pad id and at least one item");
        }
        if self.d_model == 0 || self.expand == 0 || self.state_size == 0 {
            return bad("d_model, expand and state_size must be positive");
        }
        if self.heads == 0 || self.d_inner() % self.heads != 0 {
            return Err(Error::Config(format!(
                "inner width {} not divisible by {} heads",
                self.d_inner(),
                self.heads
            )));
        }
        if self.conv_kernel == 0 || self.max_len == 0 || self.chunk == 0 {
            return bad("conv_kernel, max_len and chunk must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// `key = value` pairs, stable order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("vocab", self.vocab.to_string()),
            ("d_model", self.d_model.to_string()),
            ("expand", self.expand.to_string()),
            ("state_size", self.state_size.to_string()),
            ("heads", self.heads.to_string()),
            ("conv_kernel", self.conv_kernel.to_string()),
            ("layers", self.layers.to_string()),
            ("max_len", self.max_len.to_string()),
            ("dropout", self.dropout.to_string()),
            ("mode", self.mode.as_str().to_string()),
            ("chunk", self.chunk.to_string()),
            ("no_time", self.no_time.to_string()),
            ("no_ffn", self.no_ffn.to_string()),
        ]
    }

    /// Applies one `key = value` setting. Returns `Ok(false)` for keys this
    /// struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        match key {
            "vocab" => self.vocab = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "expand" => self.expand = parse(key, v)?,
            "state_size" => self.state_size = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "conv_kernel" => self.conv_kernel = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "chunk" => self.chunk = parse(key, v)?,
            "no_time" => self.no_time = parse(key, v)?,
            "no_ffn" => self.no_ffn = parse(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}
