use crate::error::{Error, Result};

use super::rng::Rng;
use super::scalar::Scalar;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Gumbel-Softmax sampling options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelOptions {
    pub temperature: f64,
    /// Straight-through one-hot forward values.
    pub hard: bool,
    /// When false the Gumbel noise is zero, leaving a tempered softmax (or argmax).
    pub noise: bool,
}

impl Default for GumbelOptions {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            hard: true,
            noise: true,
        }
    }
}

/// Samples a relaxed categorical over the last axis of `logits`.
///
/// Soft mode returns `softmax((logits + g) / τ)`; hard mode returns the one-hot
/// argmax of that sample with the soft sample's gradient.
pub fn gumbel_softmax<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    opts: GumbelOptions,
    rng: &mut Rng,
) -> Result<Var> {
    if !(opts.temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(opts.temperature));
    }
    let shape = tape.shape(logits).to_vec();
    let perturbed = if opts.noise {
        let noise: Vec<T> = (0..tape.value(logits).len())
            .map(|_| T::of(rng.gumbel()))
            .collect();
        let g = tape.constant(&Tensor::new(&shape, noise)?);
        tape.add(logits, g)?
    } else {
        logits
    };
    let scaled = tape.scale(perturbed, T::of(1.0 / opts.temperature));
    let soft = tape.softmax(scaled, shape.len() - 1)?;
    Ok(if opts.hard {
        tape.straight_through(soft)
    } else {
        soft
    })
}

/// Two-category Gumbel-Softmax over `(keep, drop)` pairs on the last axis,
/// returning only the keep component (shape without the pair axis).
///
/// The difference of the two categories' Gumbel perturbations is drawn
/// directly as one logistic sample per pair, which gives the same
/// distribution as [`gumbel_softmax`] followed by taking component 0.
pub fn binary_gumbel_softmax<T: Scalar>(
    tape: &mut Tape<T>,
    pairs: Var,
    opts: GumbelOptions,
    rng: &mut Rng,
) -> Result<Var> {
    if !(opts.temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(opts.temperature));
    }
    let n = tape.value(pairs).len() / 2;
    let noise: Vec<T> = if opts.noise {
        (0..n)
            .map(|_| {
                let u = rng.uniform_open();
                T::of(u.ln() - (-u).ln_1p())
            })
            .collect()
    } else {
        vec![T::zero(); n]
    };
    tape.binary_concrete(pairs, &noise, T::of(opts.temperature), opts.hard)
}
