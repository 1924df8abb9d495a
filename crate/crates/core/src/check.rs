//! Finite-difference check of the whole model, parameters to total loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmc_tensor::gradcheck::{grad_check_coords, GradReport};
use tmc_tensor::{Graph, Tensor, TensorError, Var};

use crate::cross::ma_loss_total;
use crate::data::prompt_vocabulary;
use crate::error::Result;
use crate::metrics::{bce_loss, total_loss};
use crate::params::Session;
use crate::seg::{ForwardFlags, ModelConfig, TmcModel};
use crate::text::tokenize;

pub const E2E_PROMPT: &str = "two target regions, upper left and lower right";
/// Large enough that roundoff in the loss stays far below the tolerance on
/// gradients near 1e-8, small enough that few coordinates straddle a kink.
pub const E2E_EPS: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct EndToEndReport {
    pub seed: u64,
    pub params: usize,
    pub report: GradReport,
}

/// Builds the tiny model from `seed` on a random image and mask and checks
/// `coords_per_tensor` random elements of every parameter tensor against the
/// analytic gradient of `L_seg + 0.1 L_align`.
pub fn end_to_end_gradcheck(seed: u64, coords_per_tensor: usize, eps: f64) -> Result<EndToEndReport> {
    let vocab = prompt_vocabulary();
    let cfg = ModelConfig::tiny(vocab.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (model, store) = TmcModel::new(&cfg, &mut rng)?;
    let n = cfg.image_size;
    let image = Tensor::uniform(&[1, n, n], 0.0, 1.0, &mut rng);
    let mask = Tensor::from_fn(&[1, n, n], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });
    let tokens = tokenize(E2E_PROMPT, &vocab)?;

    let inputs: Vec<Tensor> = store.iter().map(|(_, _, t)| t.clone()).collect();
    let mut coords = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        for _ in 0..coords_per_tensor.min(t.numel()) {
            coords.push((k, rng.gen_range(0..t.numel())));
        }
    }
    coords.sort_unstable();
    coords.dedup();

    let f = |g: &mut Graph, vars: &[Var]| -> tmc_tensor::Result<Var> {
        let mut s = Session::adopt(std::mem::take(g), &store, vars);
        let loss = (|| -> Result<Var> {
            let out = model.forward(&mut s, &image, &tokens, ForwardFlags::default())?;
            let seg = bce_loss(&mut s, out.prob, &mask)?;
            let terms: Vec<Var> = out.align.iter().map(|(_, t)| t.loss).collect();
            let align = ma_loss_total(&mut s, &terms)?;
            Ok(total_loss(&mut s, seg, Some(align), 0.1)?.0)
        })();
        *g = s.into_graph();
        loss.map_err(|e| match e {
            crate::Error::Tensor(t) => t,
            other => TensorError::Shape {
                op: "model",
                msg: other.to_string(),
            },
        })
    };
    let report = grad_check_coords(f, &inputs, eps, &coords)?;
    Ok(EndToEndReport {
        seed,
        params: store.numel(),
        report,
    })
}
