// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::{Hook, InputSequence, ModelBundle, NoHook, Session};
use crate::error::{Error, Result};
use crate::numerics::kernels;
use crate::veena::{InterventionSpec, VeenaHook};

/// Tokens produced by a greedy decode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    pub tokens: Vec<usize>,
}

/// Greedy decode with an arbitrary hook active at prefill and every step.
/// Ties go to the lowest token id.
pub fn greedy_decode_with(
    bundle: &ModelBundle,
    input: &InputSequence,
    max_new: usize,
    hook: &mut dyn Hook,
) -> Result<Decoded> {
    if max_new == 0 {
        return Err(Error::Input("max_new must be at least 1".into()));
    }
    let mut s = Session::new(bundle);
    let logits = s.prefill(input, hook)?;
    let mut tok = kernels::argmax(logits.row(logits.rows() - 1));
    let mut tokens = vec![tok];
    while tokens.len() < max_new {
        let l = s.step(tok, hook)?;
        tok = kernels::argmax(&l);
        tokens.push(tok);
    }
    Ok(Decoded { tokens })
}

/// Greedy decode, optionally under a VEENA intervention.
pub fn greedy_decode(
    bundle: &ModelBundle,
    input: &InputSequence,
    max_new: usize,
    intervention: Option<&InterventionSpec>,
) -> Result<Decoded> {
    match intervention {
        None => greedy_decode_with(bundle, input, max_new, &mut NoHook),
        Some(spec) => {
            spec.validate(&bundle.config)?;
            let mut h = VeenaHook::new(spec, false);
            greedy_decode_with(bundle, input, max_new, &mut h)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};
    use crate::numerics::SeededRng;

    #[test]
    fn one_token_is_last_argmax() {
        let b = ModelBundle::init_random(ModelConfig::small(2, 2, 8, 16, 40, 2), 3).unwrap();
        let mut r = SeededRng::new(1);
        let x = InputSequence::new(r.gaussian_matrix(2, 8, 1.0), vec![1, 2, 3]);
        let l = forward(&b, &x, &mut NoHook).unwrap();
        let d = greedy_decode(&b, &x, 1, None).unwrap();
        assert_eq!(d.tokens, vec![kernels::argmax(l.row(x.len() - 1))]);
        let first = greedy_decode(&b, &x, 6, None).unwrap();
        for _ in 0..100 {
            assert_eq!(greedy_decode(&b, &x, 6, None).unwrap(), first);
        }
    }
}
