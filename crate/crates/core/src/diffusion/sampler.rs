//! Classifier-free-guided ancestral sampling on a strided sub-schedule.

use super::loss::model_input;
use super::Backbone;
use crate::nn::Ctx;
use crate::rng::Rng;
use crate::synthworld::{EdgeMap, Image};
use crate::tensor::{Arr, Tape};
use crate::textencode::{encode_prompt, FactorLookup, FactorTrainMask, PromptSpec};
use crate::{Error, Result};
use ndarray::IxDyn;

/// Sampling preset; defaults follow the documented evaluation configuration.
#[derive(Clone, Copy, Debug)]
pub struct SampleOpts {
    pub steps: usize,
    pub guidance: f32,
    pub seed: u64,
}

impl Default for SampleOpts {
    fn default() -> Self {
        SampleOpts { steps: 25, guidance: 2.5, seed: 0 }
    }
}

/// Encode a prompt once into a plain conditioning matrix for reuse across
/// sampling steps and images.
pub fn encode_cond(backbone: &Backbone, prompt: &PromptSpec, lookup: &dyn FactorLookup) -> Result<Arr> {
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &backbone.params, false);
    let encoded = encode_prompt(&mut ctx, prompt, &backbone.vocab, lookup, &backbone.encoder, FactorTrainMask::Frozen)?;
    Ok(tape.value(encoded.cond).clone())
}

fn predict(backbone: &Backbone, x: &Arr, t: usize, cond: &Arr, control: Option<&EdgeMap>) -> Result<Arr> {
    let input = model_input(x, control, backbone)?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::new(&mut tape, &backbone.params, false);
    let z = ctx.tape.constant(input);
    let c = ctx.tape.constant(cond.clone());
    let out = backbone.unet.forward(&mut ctx, z, t, c);
    Ok(tape.value(out).clone())
}

/// Ancestral sampling with classifier-free guidance
/// `eps = eps_null + g * (eps_cond - eps_null)`.
///
/// The guidance identities are exact: `g == 1` evaluates only the conditional
/// branch and `g == 0` only the null branch, and the noise stream never
/// depends on which branches run, so those calls are bit-identical to
/// single-branch sampling with the same seed.
pub fn guided_sample(
    backbone: &Backbone,
    cond: &Arr,
    null_cond: &Arr,
    opts: &SampleOpts,
    control: Option<&EdgeMap>,
) -> Result<Image> {
    if opts.steps == 0 {
        return Err(Error::Precondition("sampler needs steps >= 1".into()));
    }
    if opts.guidance < 0.0 {
        return Err(Error::Precondition("guidance must be >= 0".into()));
    }
    let t_count = backbone.schedule.len();
    let steps = opts.steps.min(t_count);
    let stride = t_count / steps;
    let taus: Vec<usize> = (0..steps).map(|i| i * stride).collect();
    let size = backbone.config.image_size;
    let mut rng = Rng::stream(opts.seed, "sample-noise", 0);
    let shape = IxDyn(&[3, size, size]);
    let mut x = Arr::from_shape_fn(shape.clone(), |_| rng.normal());

    for i in (0..steps).rev() {
        let t = taus[i];
        let ab_t = backbone.schedule.alpha_bar[t] as f64;
        let ab_prev = if i > 0 { backbone.schedule.alpha_bar[taus[i - 1]] as f64 } else { 1.0 };
        let a_eff = ab_t / ab_prev;

        let eps_hat = if opts.guidance == 1.0 {
            predict(backbone, &x, t, cond, control)?
        } else if opts.guidance == 0.0 {
            predict(backbone, &x, t, null_cond, control)?
        } else {
            let e_cond = predict(backbone, &x, t, cond, control)?;
            let e_null = predict(backbone, &x, t, null_cond, control)?;
            let g = opts.guidance;
            let mut out = e_null.clone();
            out.zip_mut_with(&e_cond, |n, c| *n += g * (*c - *n));
            out
        };

        let coef_eps = ((1.0 - a_eff) / (1.0 - ab_t).sqrt()) as f32;
        let inv_sqrt_a = (1.0 / a_eff.sqrt()) as f32;
        x.zip_mut_with(&eps_hat, |xv, ev| *xv = (*xv - coef_eps * ev) * inv_sqrt_a);
        if i > 0 {
            let sigma = (((1.0 - ab_prev) / (1.0 - ab_t)) * (1.0 - a_eff)).sqrt() as f32;
            for v in x.iter_mut() {
                *v += sigma * rng.normal();
            }
        }
    }
    Ok(Backbone::from_latent(&x))
}
