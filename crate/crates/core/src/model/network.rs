use super::config::ModelConfig;
use super::params::{init_params, Bound, ParamStore, EMBEDDING};
use super::LN_EPS;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::ops::{softmax_row, DropoutRng};
use crate::ssd::{ssd, DecayMode, SsdPath};
use crate::tape::{Tape, Var};
use crate::temporal::{enhance_deltas, gate_deltas, layer_transition, normalize_deltas, DeltaPathParams};
use crate::tensor::Tensor;

/// Configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    path: SsdPath,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self::from_parts(config, params))
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Self {
        let path = SsdPath::Chunked(config.chunk);
        Model { config, params, path }
    }

    /// Evaluation order of the SSD op; chunked by default.
    pub fn set_ssd_path(&mut self, path: SsdPath) {
        self.path = path;
    }

    pub fn ssd_path(&self) -> SsdPath {
        self.path
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let (b, w) = (batch.size(), batch.width());
        if b == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        if w == 0 || w > self.config.max_len {
            return Err(Error::shape(format!(
                "batch width {w} outside 1..={}",
                self.config.max_len
            )));
        }
        for r in 0..b {
            if batch.valid.data()[r * w + w - 1] == 0.0 {
                return Err(Error::Data(format!("sequence {r} has no valid position")));
            }
        }
        Ok(())
    }

    /// Final hidden states `[B, W, D]`.
    pub fn encode<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t, '_>,
        batch: &Batch,
        train: bool,
        rng: &mut DropoutRng,
    ) -> Result<Var<'t>> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (b, w) = (batch.size(), batch.width());
        let rate = cfg.dropout;
        let valid_rows = tape.constant(batch.valid.clone());

        let mut x = Var::gather_rows(p.get(EMBEDDING)?, &batch.items, &[b, w])?
            .layer_norm(p.get("emb_norm.gain")?, p.get("emb_norm.bias")?, LN_EPS)?
            .dropout(rate, train, rng)?
            .mul_rows(valid_rows)?;

        let mut time = if cfg.no_time {
            None
        } else {
            let raw = tape.constant(batch.deltas.clone());
            Some(normalize_deltas(
                raw,
                &batch.valid,
                p.get("delta_norm.gain")?,
                p.get("delta_norm.bias")?,
                rate,
                train,
                rng,
            )?)
        };

        for l in 0..cfg.layers {
            let (nx, nd) = self.layer(tape, p, l, x, time, batch, train, rng)?;
            x = nx;
            time = nd;
        }
        Ok(x)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t, '_>,
        l: usize,
        x: Var<'t>,
        time: Option<Var<'t>>,
        batch: &Batch,
        train: bool,
        rng: &mut DropoutRng,
    ) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let cfg = &self.config;
        let g = |s: &str| p.get(&format!("layers.{l}.{s}"));
        let (b, w) = (batch.size(), batch.width());
        let (di, n) = (cfg.d_inner(), cfg.state_size);
        let valid = tape.constant(batch.valid.clone());

        let z = x
            .layer_norm(g("norm1.gain")?, g("norm1.bias")?, LN_EPS)?
            .matmul(g("expand.weight")?)?
            .matmul(g("in_proj.weight")?)?
            .add_bias(g("in_proj.bias")?)?;
        let xbc = z
            .narrow(0, di + 2 * n)?
            .causal_conv1d(g("conv.weight")?, g("conv.bias")?)?
            .silu();
        let xs = xbc.narrow(0, di)?;
        let bs = xbc.narrow(di, n)?;
        let cs = xbc.narrow(di + n, n)?;
        let dt = z.narrow(di + 2 * n, 1)?.reshape(&[b, w])?.softplus();

        let (dt_hat, next_time) = match time {
            None => (dt, None),
            Some(d_in) => {
                let tp = DeltaPathParams {
                    w1: g("time_gate.w1")?,
                    b1: g("time_gate.b1")?,
                    w2: g("time_gate.w2")?,
                    b2: g("time_gate.b2")?,
                    kernel: g("time_conv.weight")?,
                    conv_bias: g("time_conv.bias")?,
                };
                let used = enhance_deltas(gate_deltas(d_in, &batch.valid, &tp)?, &batch.valid, &tp)?;
                let signal = match cfg.mode {
                    DecayMode::ExactExp => used.softplus(),
                    DecayMode::LinearApprox => used,
                };
                let next = layer_transition(d_in, used, g("time_transition")?)?;
                (dt.mul(signal)?, Some(next))
            }
        };
        // pads: zero step size, so unit decay and no input into the state
        let dt_hat = dt_hat.mul(valid)?;
        let a = g("a_log")?.exp().neg();
        let decay = dt_hat.head_outer(a)?;
        let b_bar = bs.mul_rows(dt_hat)?;
        let y = ssd(xs, b_bar, cs, decay, cfg.mode, self.path)?
            .matmul(g("out_proj.weight")?)?
            .dropout(cfg.dropout, train, rng)?;
        let mut h = x.add(y)?;

        if !cfg.no_ffn {
            let f = h
                .layer_norm(g("norm2.gain")?, g("norm2.bias")?, LN_EPS)?
                .matmul(g("ffn.w1")?)?
                .add_bias(g("ffn.b1")?)?
                .gelu()
                .matmul(g("ffn.w2")?)?
                .add_bias(g("ffn.b2")?)?
                .dropout(cfg.dropout, train, rng)?;
            h = h.add(f)?;
        }
        Ok((h.mul_rows(valid)?, next_time))
    }

    /// Unnormalized scores `[B, V]` against the tied embedding table.
    pub fn logits<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t, '_>,
        batch: &Batch,
        train: bool,
        rng: &mut DropoutRng,
    ) -> Result<Var<'t>> {
        let h = self.encode(tape, p, batch, train, rng)?;
        h.take_step(batch.width() - 1)?.matmul_t(p.get(EMBEDDING)?)
    }

    /// Mean last-position cross-entropy against `batch.targets`.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        p: &Bound<'t, '_>,
        batch: &Batch,
        train: bool,
        rng: &mut DropoutRng,
    ) -> Result<Var<'t>> {
        self.logits(tape, p, batch, train, rng)?.cross_entropy(&batch.targets)
    }

    /// Loss and one gradient per parameter (store order).
    pub fn loss_and_grads(&self, batch: &Batch, train: bool, rng: &mut DropoutRng) -> Result<(f64, Vec<Tensor>)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let loss = self.loss(&tape, &p, batch, train, rng)?;
        let grads = loss.backward()?;
        let value = loss.value().item()?;
        Ok((value, p.vars().iter().map(|&v| grads.wrt(v)).collect()))
    }

    /// Evaluation-mode loss.
    pub fn eval_loss(&self, batch: &Batch) -> Result<f64> {
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        self.loss(&tape, &p, batch, false, &mut DropoutRng::new(0, 0))?
            .value()
            .item()
    }

    /// Evaluation-mode probabilities `[B, V]`; column 0 (padding) is 0.
    pub fn scores(&self, batch: &Batch) -> Result<Tensor> {
        let logits = self.eval_logits(batch)?;
        let v = logits.dim(1);
        let mut out = vec![0.0; logits.len()];
        for r in 0..logits.dim(0) {
            softmax_row(&logits.row(r)[1..], &mut out[r * v + 1..(r + 1) * v]);
        }
        Tensor::new(logits.shape().to_vec(), out)
    }

    /// Evaluation-mode logits `[B, V]`.
    pub fn eval_logits(&self, batch: &Batch) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        let l = self.logits(&tape, &p, batch, false, &mut DropoutRng::new(0, 0))?;
        Ok((*l.value()).clone())
    }

    /// Evaluation-mode final hidden states `[B, W, D]`.
    pub fn hidden_states(&self, batch: &Batch) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        let h = self.encode(&tape, &p, batch, false, &mut DropoutRng::new(0, 0))?;
        Ok((*h.value()).clone())
    }
}
