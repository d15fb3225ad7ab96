// SPDX-License-Identifier: MIT OR Apache-2.0

//! `EMT1` trace files, framed like the weight format: magic, length-prefixed
//! canonical JSON header, little-endian `f64` payload, trailing CRC-32.
//!
//! The header lists dimensions, the input fingerprint (hex) and one
//! `[family, layer, head, pos, len]` entry per cell; the payload holds the
//! cells in that order.

use serde::{Deserialize, Serialize};

use super::{ActivationTrace, Family};
use crate::canon;
use crate::error::{Error, Result};
use crate::model::io::{frame, unframe};

pub const TRACE_MAGIC: &[u8; 4] = b"EMT1";

#[derive(Serialize, Deserialize)]
struct Header {
    n_layers: usize,
    n_heads: usize,
    d_model: usize,
    d_head: usize,
    d_mlp: usize,
    input_len: usize,
    seq_len: usize,
    fingerprint: String,
    cells: Vec<(Family, usize, usize, usize, usize)>,
}

pub fn trace_to_bytes(t: &ActivationTrace) -> Result<Vec<u8>> {
    let cells = t.cells();
    let header = Header {
        n_layers: t.n_layers,
        n_heads: t.n_heads,
        d_model: t.d_model,
        d_head: t.d_head,
        d_mlp: t.d_mlp,
        input_len: t.input_len,
        seq_len: t.seq_len,
        fingerprint: format!("{:016x}", t.fingerprint),
        cells: cells
            .iter()
            .map(|(f, l, h, p, v)| (*f, *l, *h, *p, v.len()))
            .collect(),
    };
    let blocks: Vec<&[f64]> = cells.iter().map(|c| c.4).collect();
    Ok(frame(TRACE_MAGIC, &canon::to_string(&header)?, &blocks))
}

pub fn trace_from_bytes(bytes: &[u8]) -> Result<ActivationTrace> {
    let (text, data) = unframe(TRACE_MAGIC, bytes)?;
    let h: Header =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("trace header: {e}")))?;
    let fingerprint = u64::from_str_radix(&h.fingerprint, 16)
        .map_err(|_| Error::Format("bad fingerprint".into()))?;
    let mut t = ActivationTrace {
        n_layers: h.n_layers,
        n_heads: h.n_heads,
        d_model: h.d_model,
        d_head: h.d_head,
        d_mlp: h.d_mlp,
        input_len: h.input_len,
        seq_len: h.seq_len,
        fingerprint,
        embedding: Vec::new(),
        residual: vec![Vec::new(); h.n_layers],
        attn_out: vec![Vec::new(); h.n_layers],
        head_out: vec![vec![Vec::new(); h.n_heads]; h.n_layers],
        scores: vec![vec![Vec::new(); h.n_heads]; h.n_layers],
        neurons: vec![Vec::new(); h.n_layers],
    };
    let mut off = 0;
    for (f, l, hd, p, n) in h.cells {
        if l >= h.n_layers || hd >= h.n_heads.max(1) || off + n > data.len() {
            return Err(Error::Format("trace cell out of range".into()));
        }
        t.store(f, l, hd, p, &data[off..off + n]);
        off += n;
    }
    if off != data.len() {
        return Err(Error::Format("trailing trace payload".into()));
    }
    t.seq_len = h.seq_len;
    t.check_dims()?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InputSequence, ModelBundle, ModelConfig};
    use crate::numerics::SeededRng;
    use crate::trace::{run_with_capture, CaptureFilter};

    #[test]
    fn round_trip_bit_exact() {
        let b = ModelBundle::init_random(ModelConfig::small(2, 2, 8, 16, 30, 3), 1).unwrap();
        let mut r = SeededRng::new(2);
        let x = InputSequence::new(r.gaussian_matrix(3, 8, 1.0), vec![5, 6]);
        let (_, t) = run_with_capture(&b, &x, &CaptureFilter::all()).unwrap();
        let bytes = trace_to_bytes(&t).unwrap();
        let back = trace_from_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(trace_to_bytes(&back).unwrap(), bytes);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(trace_from_bytes(&bad).is_err());
    }
}
