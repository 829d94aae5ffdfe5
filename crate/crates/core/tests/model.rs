use tim4rec::data::{make_batch, Batch, Example, Width};
use tim4rec::model::{checkpoint, Model, ModelConfig};
use tim4rec::ops::{gelu, silu, softplus, with_corrupted_silu_backward};
use tim4rec::ssd::{DecayMode, SsdPath};
use tim4rec::trainer::{check_model_gradients, tiny_config, toy_batch, verify_gradients};
use tim4rec::Tensor;

fn example(items: &[usize], ts: &[i64], target: usize) -> Example {
    Example {
        items: items.to_vec(),
        timestamps: ts.to_vec(),
        target,
    }
}

fn examples() -> Vec<Example> {
    vec![
        example(&[3, 5, 7], &[100, 160, 5000], 2),
        example(&[1, 2, 3, 4, 5, 6], &[0, 10, 20, 400, 9000, 9010], 9),
        example(&[11], &[42], 4),
        example(&[8, 8, 9, 12], &[10, 20, 30, 40], 1),
    ]
}

fn batch(exs: &[Example], cfg: &ModelConfig, width: Width) -> Batch {
    let refs: Vec<&Example> = exs.iter().collect();
    make_batch(&refs, cfg.max_len, width).unwrap()
}

fn with_dropout(cfg: ModelConfig) -> ModelConfig {
    ModelConfig { dropout: 0.3, ..cfg }
}

#[test]
fn trimmed_width_matches_full_width() {
    for cfg in [tiny_config(), ModelConfig { mode: DecayMode::LinearApprox, ..tiny_config() }] {
        let model = Model::new(cfg.clone(), 3).unwrap();
        let exs = examples();
        let full = model.eval_logits(&batch(&exs, &cfg, Width::Full)).unwrap();
        let trim_batch = batch(&exs, &cfg, Width::Trimmed);
        assert!(trim_batch.width() < cfg.max_len);
        let trim = model.eval_logits(&trim_batch).unwrap();
        assert!(trim.rel_err(&full).unwrap() < 1e-10);
    }
}

#[test]
fn naive_and_chunked_paths_agree() {
    let cfg = tiny_config();
    let mut model = Model::new(cfg.clone(), 4).unwrap();
    let b = toy_batch(&cfg, 5, 4).unwrap();
    let chunked = model.eval_logits(&b).unwrap();
    model.set_ssd_path(SsdPath::Naive);
    let naive = model.eval_logits(&b).unwrap();
    assert!(chunked.rel_err(&naive).unwrap() < 1e-10);
}

fn assert_causal_at(cfg: &ModelConfig, a: Example, b: Example, pos: usize) {
    let model = Model::new(cfg.clone(), 5).unwrap();
    let ha = model.hidden_states(&batch(&[a], cfg, Width::Full)).unwrap();
    let hb = model.hidden_states(&batch(&[b], cfg, Width::Full)).unwrap();
    let d = cfg.d_model;
    assert_eq!(ha.data()[..pos * d], hb.data()[..pos * d]);
    assert_ne!(ha.data()[pos * d..(pos + 1) * d], hb.data()[pos * d..(pos + 1) * d]);
}

#[test]
fn hidden_states_are_causal_in_items() {
    let a = example(&[1, 2, 3, 4, 5, 6, 7, 8], &[0, 5, 10, 15, 20, 25, 30, 35], 9);
    let mut b = a.clone();
    b.items[6] = 19;
    assert_causal_at(&tiny_config(), a, b, 6);
}

// Delta normalization uses statistics of the whole valid window, so only
// the no-time build is causal in timestamps.
#[test]
fn no_time_hidden_states_ignore_timestamps() {
    let cfg = ModelConfig { no_time: true, ..tiny_config() };
    let a = example(&[1, 2, 3, 4, 5, 6, 7, 8], &[0, 5, 10, 15, 20, 25, 30, 35], 9);
    let mut b = a.clone();
    b.timestamps[6] = 33;
    b.items[7] = 2;
    assert_causal_at(&cfg, a, b, 7);
}

#[test]
fn batch_rows_are_independent() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), 6).unwrap();
    let exs = examples();
    let mut rev = exs.clone();
    rev.reverse();
    let fwd = model.eval_logits(&batch(&exs, &cfg, Width::Full)).unwrap();
    let bwd = model.eval_logits(&batch(&rev, &cfg, Width::Full)).unwrap();
    let n = exs.len();
    for r in 0..n {
        assert_eq!(fwd.row(r), bwd.row(n - 1 - r));
    }
}

#[test]
fn initial_loss_near_uniform() {
    let cfg = ModelConfig { vocab: 201, ..tiny_config() };
    let model = Model::new(cfg.clone(), 7).unwrap();
    let loss = model.eval_loss(&toy_batch(&cfg, 32, 7).unwrap()).unwrap();
    assert!((loss - 200f64.ln()).abs() < 0.05, "loss {loss}");
}

#[test]
fn scores_are_a_distribution_over_items() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), 8).unwrap();
    let s = model.scores(&toy_batch(&cfg, 3, 8).unwrap()).unwrap();
    for r in 0..3 {
        assert_eq!(s.row(r)[0], 0.0);
        assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = with_dropout(tiny_config());
    let model = Model::new(cfg.clone(), 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, model);
    let b = toy_batch(&cfg, 4, 9).unwrap();
    assert_eq!(back.eval_logits(&b).unwrap(), model.eval_logits(&b).unwrap());
}

#[test]
fn corrupt_checkpoint_rejected() {
    let model = Model::new(tiny_config(), 10).unwrap();
    let mut bytes = checkpoint::to_bytes(&model);
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    bytes[0] ^= 1;
    assert!(checkpoint::from_bytes(&bytes).is_err());
    assert!(checkpoint::load("/nonexistent/model.ckpt").is_err());
}

#[test]
fn ablations_share_backbone_weights() {
    let full = Model::new(tiny_config(), 11).unwrap();
    let no_time = Model::new(ModelConfig { no_time: true, ..tiny_config() }, 11).unwrap();
    let no_ffn = Model::new(ModelConfig { no_ffn: true, ..tiny_config() }, 11).unwrap();
    for m in [&no_time, &no_ffn] {
        assert!(m.params.len() < full.params.len());
        for (name, v) in m.params.iter() {
            assert_eq!(full.params.get(name), Some(v), "{name}");
        }
    }
}

#[test]
fn model_gradients_pass_in_both_modes() {
    for mode in [DecayMode::ExactExp, DecayMode::LinearApprox] {
        let r = verify_gradients(&ModelConfig { mode, ..tiny_config() }, 12).unwrap();
        assert!(r.passed(), "{mode:?}: {:?}", r.worst());
    }
    let r = verify_gradients(&ModelConfig { no_time: true, no_ffn: true, ..tiny_config() }, 12).unwrap();
    assert!(r.passed());
}

#[test]
fn corrupted_rule_is_caught() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), 13).unwrap();
    let b = toy_batch(&cfg, 3, 13).unwrap();
    let r = with_corrupted_silu_backward(|| check_model_gradients(&model, &b)).unwrap();
    assert!(!r.passed());
}

#[test]
fn rejects_bad_batches() {
    let cfg = tiny_config();
    let model = Model::new(cfg.clone(), 14).unwrap();
    let mut b = toy_batch(&cfg, 2, 14).unwrap();
    let w = b.width();
    b.valid.data_mut()[w - 1] = 0.0;
    assert!(model.eval_logits(&b).is_err());
}

// Plain-tensor forward of the no-time model, written from the layer
// definition without the tape or the chunked kernel.
mod oracle {
    use super::*;

    fn lin(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
        let (i, o) = (w.dim(0), w.dim(1));
        let mut y = vec![0.0; rows * o];
        for r in 0..rows {
            for k in 0..i {
                for c in 0..o {
                    y[r * o + c] += x[r * i + k] * w.data()[k * o + c];
                }
            }
        }
        y
    }

    fn ln(x: &mut [f64], f: usize, g: &Tensor, b: &Tensor) {
        for row in x.chunks_mut(f) {
            let m = row.iter().sum::<f64>() / f as f64;
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / f as f64;
            for (c, a) in row.iter_mut().enumerate() {
                *a = (*a - m) / (v + 1e-12).sqrt() * g.data()[c] + b.data()[c];
            }
        }
    }

    /// Last-step logits of one left-padded sequence.
    pub fn logits(model: &Model, items: &[usize], valid: &[f64]) -> Vec<f64> {
        let cfg = &model.config;
        let p = |n: &str| model.params.get(n).unwrap();
        let (t, d, di, n, h) = (items.len(), cfg.d_model, cfg.d_inner(), cfg.state_size, cfg.heads);
        let hp = di / h;
        let emb = p("item_embedding");
        let mut x: Vec<f64> = items.iter().flat_map(|&i| emb.row(i).to_vec()).collect();
        ln(&mut x, d, p("emb_norm.gain"), p("emb_norm.bias"));
        for s in 0..t {
            x[s * d..(s + 1) * d].iter_mut().for_each(|v| *v *= valid[s]);
        }
        for l in 0..cfg.layers {
            let q = |s: &str| p(&format!("layers.{l}.{s}"));
            let mut z = x.clone();
            ln(&mut z, d, q("norm1.gain"), q("norm1.bias"));
            let z = lin(&lin(&z, t, q("expand.weight")), t, q("in_proj.weight"));
            let zw = di + 2 * n + 1;
            let z: Vec<f64> = z.iter().enumerate().map(|(i, v)| v + q("in_proj.bias").data()[i % zw]).collect();
            let cw = di + 2 * n;
            let kern = q("conv.weight");
            let mut u = vec![0.0; t * cw];
            for s in 0..t {
                for c in 0..cw {
                    let mut acc = q("conv.bias").data()[c];
                    for m in 0..kern.dim(0) {
                        let src = s.saturating_sub(m);
                        acc += kern.data()[m * cw + c] * z[src * zw + c];
                    }
                    u[s * cw + c] = silu(acc);
                }
            }
            let dt: Vec<f64> = (0..t).map(|s| softplus(z[s * zw + zw - 1]) * valid[s]).collect();
            let a: Vec<f64> = q("a_log").data().iter().map(|v| -v.exp()).collect();
            let mut y = vec![0.0; t * di];
            for i in 0..t {
                for j in 0..=i {
                    let cb: f64 = (0..n).map(|k| u[i * cw + di + n + k] * u[j * cw + di + k]).sum::<f64>() * dt[j];
                    for hh in 0..h {
                        let decay: f64 = ((j + 1)..=i).map(|k| (dt[k] * a[hh]).exp()).product();
                        for c in hh * hp..(hh + 1) * hp {
                            y[i * di + c] += decay * cb * u[j * cw + c];
                        }
                    }
                }
            }
            let y = lin(&y, t, q("out_proj.weight"));
            let mut hdn: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
            if !cfg.no_ffn {
                let mut f = hdn.clone();
                ln(&mut f, d, q("norm2.gain"), q("norm2.bias"));
                let mut f = lin(&f, t, q("ffn.w1"));
                for (i, v) in f.iter_mut().enumerate() {
                    *v = gelu(*v + q("ffn.b1").data()[i % (4 * d)]);
                }
                let f = lin(&f, t, q("ffn.w2"));
                for (i, v) in hdn.iter_mut().enumerate() {
                    *v += f[i] + q("ffn.b2").data()[i % d];
                }
            }
            for s in 0..t {
                hdn[s * d..(s + 1) * d].iter_mut().for_each(|v| *v *= valid[s]);
            }
            x = hdn;
        }
        let last = &x[(t - 1) * d..];
        (0..cfg.vocab).map(|v| emb.row(v).iter().zip(last).map(|(a, b)| a * b).sum()).collect()
    }
}

#[test]
fn no_time_model_matches_plain_oracle() {
    let cfg = ModelConfig { no_time: true, ..tiny_config() };
    let model = Model::new(cfg.clone(), 15).unwrap();
    let exs = examples();
    let b = batch(&exs, &cfg, Width::Full);
    let got = model.eval_logits(&b).unwrap();
    let w = b.width();
    for r in 0..b.size() {
        let want = oracle::logits(&model, &b.items[r * w..(r + 1) * w], &b.valid.data()[r * w..(r + 1) * w]);
        let want = Tensor::from_vec(want);
        let have = Tensor::from_vec(got.row(r).to_vec());
        assert!(have.rel_err(&want).unwrap() < 1e-10, "row {r}");
    }
}

