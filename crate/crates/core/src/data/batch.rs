use super::sequences::Example;
use crate::error::{Error, Result};
use crate::temporal::{time_deltas, TimestampSeq};
use crate::tensor::Tensor;

/// Left-padded model input.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B·W]` item ids, row-major, 0 on pads.
    pub items: Vec<usize>,
    /// `[B, W]` raw gaps in seconds; 0 on pads and at each first event.
    pub deltas: Tensor,
    /// `[B, W]` 1 on real events, 0 on pads.
    pub valid: Tensor,
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.targets.len()
    }

    pub fn width(&self) -> usize {
        self.valid.dim(1)
    }
}

/// How wide a batch is laid out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Width {
    /// Always `max_len`.
    Full,
    /// `min(max_len, longest + 1)`: at least one pad column whenever the
    /// batch is narrower than `max_len`, which leaves the network output
    /// unchanged.
    Trimmed,
}

/// Keeps the last `max_len` events of each example and left-pads. Pad
/// timestamps repeat the first kept timestamp, so pad gaps are 0.
pub fn make_batch(examples: &[&Example], max_len: usize, width: Width) -> Result<Batch> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    if let Some(e) = examples.iter().find(|e| e.items.is_empty() || e.items.len() != e.timestamps.len()) {
        return Err(Error::Data(format!(
            "example with {} items and {} timestamps",
            e.items.len(),
            e.timestamps.len()
        )));
    }
    let longest = examples.iter().map(|e| e.items.len().min(max_len)).max().unwrap_or(0);
    let w = match width {
        Width::Full => max_len,
        Width::Trimmed => (longest + 1).min(max_len),
    };
    let b = examples.len();
    let mut items = vec![0; b * w];
    let mut deltas = Vec::with_capacity(b * w);
    let mut valid = vec![0.0; b * w];
    for (r, e) in examples.iter().enumerate() {
        let keep = e.items.len().min(max_len);
        let start = e.items.len() - keep;
        let pad = w - keep;
        let first = e.timestamps[start] as f64;
        let mut ts = vec![first; w];
        for k in 0..keep {
            items[r * w + pad + k] = e.items[start + k];
            ts[pad + k] = e.timestamps[start + k] as f64;
            valid[r * w + pad + k] = 1.0;
        }
        let mask = (0..w).map(|c| c >= pad).collect();
        let d = time_deltas(&TimestampSeq::with_mask(ts, mask)?)?;
        deltas.extend_from_slice(d.d.data());
    }
    Ok(Batch {
        items,
        deltas: Tensor::new(vec![b, w], deltas)?,
        valid: Tensor::new(vec![b, w], valid)?,
        targets: examples.iter().map(|e| e.target).collect(),
    })
}

/// Consecutive batches of at most `batch_size` examples, in order.
pub fn batchify(examples: &[Example], max_len: usize, batch_size: usize, width: Width) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let refs: Vec<&Example> = examples.iter().collect();
    refs.chunks(batch_size).map(|c| make_batch(c, max_len, width)).collect()
}
