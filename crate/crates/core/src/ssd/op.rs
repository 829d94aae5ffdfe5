use super::backward::{naive_ssd_backward, scan_ssd_backward};
use super::chunked::{chunked_ssd_forward, KernelConfig};
use super::mask::{build_mask, DecayMode, DecaySequence};
use super::naive::naive_ssd_forward;
use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Which evaluation order the differentiable SSD op uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SsdPath {
    /// Materialized mask forward, quadratic backward.
    Naive,
    /// Chunked forward with the given chunk length, linear scan backward.
    Chunked(usize),
}

fn slice3(t: &Tensor, b: usize) -> Tensor {
    let per = t.len() / t.dim(0);
    Tensor::new(t.shape()[1..].to_vec(), t.data()[b * per..(b + 1) * per].to_vec()).unwrap()
}

/// Batched differentiable SSD map.
///
/// Shapes: `x [B, T, H·P]`, `b`/`c [B, T, N]`, `decay [B, H, T]` holding
/// log decays (exact-exp) or raw factors (linear-approx).
pub fn ssd<'t>(
    x: Var<'t>,
    b: Var<'t>,
    c: Var<'t>,
    decay: Var<'t>,
    mode: DecayMode,
    path: SsdPath,
) -> Result<Var<'t>> {
    let (xv, bv, cv, dv) = (x.value(), b.value(), c.value(), decay.value());
    if xv.ndim() != 3 || bv.ndim() != 3 || cv.ndim() != 3 || dv.ndim() != 3 {
        return Err(Error::shape("batched ssd needs rank-3 inputs"));
    }
    let batch = xv.dim(0);
    let (heads, t, n) = (dv.dim(1), xv.dim(1), bv.dim(2));
    if bv.dim(0) != batch || cv.dim(0) != batch || dv.dim(0) != batch || dv.dim(2) != t {
        return Err(Error::shape(format!(
            "ssd batch shapes disagree: x {:?} b {:?} c {:?} decay {:?}",
            xv.shape(),
            bv.shape(),
            cv.shape(),
            dv.shape()
        )));
    }
    let cfg = KernelConfig {
        heads,
        state_size: n,
        chunk: match path {
            SsdPath::Chunked(q) => q,
            SsdPath::Naive => t.max(1),
        },
        mode,
    };
    let mut out = Vec::with_capacity(xv.len());
    for bi in 0..batch {
        let (xs, bs, cs) = (slice3(&xv, bi), slice3(&bv, bi), slice3(&cv, bi));
        let ds = DecaySequence::new(slice3(&dv, bi), mode)?;
        let y = match path {
            SsdPath::Naive => naive_ssd_forward(&xs, &bs, &cs, &build_mask(&ds))?,
            SsdPath::Chunked(_) => chunked_ssd_forward(&xs, &bs, &cs, &ds, &cfg)?.0,
        };
        out.extend_from_slice(y.data());
    }
    let value = Tensor::new(xv.shape().to_vec(), out)?;
    let tape = x.tape();
    Ok(tape.record(value, &[x, b, c, decay], move |g, need| {
        let mut grads: [Vec<f64>; 4] = [
            Vec::with_capacity(xv.len()),
            Vec::with_capacity(bv.len()),
            Vec::with_capacity(cv.len()),
            Vec::with_capacity(dv.len()),
        ];
        for bi in 0..batch {
            let (xs, bs, cs) = (slice3(&xv, bi), slice3(&bv, bi), slice3(&cv, bi));
            let ds = DecaySequence::new(slice3(&dv, bi), mode).expect("validated in forward");
            let gs = slice3(g, bi);
            let r = match path {
                SsdPath::Naive => naive_ssd_backward(&xs, &bs, &cs, &ds, &gs),
                SsdPath::Chunked(_) => scan_ssd_backward(&xs, &bs, &cs, &ds, &gs),
            }
            .expect("shapes validated in forward");
            grads[0].extend_from_slice(r.dx.data());
            grads[1].extend_from_slice(r.db.data());
            grads[2].extend_from_slice(r.dc.data());
            grads[3].extend_from_slice(r.ddecay.data());
        }
        let shapes = [xv.shape(), bv.shape(), cv.shape(), dv.shape()];
        grads
            .into_iter()
            .zip(shapes)
            .zip(need)
            .map(|((d, s), &nd)| nd.then(|| Tensor::new(s.to_vec(), d).unwrap()))
            .collect()
    }))
}
