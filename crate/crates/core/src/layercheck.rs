//! Whole-layer gradient verification. Each normalizer's training graph is
//! rebuilt from leaf tensors and compared against central differences under
//! a randomized linear readout, so a passing check certifies every backward
//! rule the layer composes.

use crate::error::Result;
use crate::gradcheck::{check_grads, CheckReport, CheckSettings};
use crate::norm::baselines::{
    adabn_train_graph, autodial_train_graph, bn_train_graph, dsbn_train_graph, tn_frozen_graph,
};
use crate::norm::rn::{rn_train_graph, RnGraphVars};
use crate::norm::{Measure, NormKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub struct LayerCheckSpec {
    pub kind: NormKind,
    pub c: usize,
    pub n: usize,
    pub measure: Measure,
    pub group_size: usize,
    pub seed: u64,
    pub settings: CheckSettings,
}

impl LayerCheckSpec {
    pub fn new(kind: NormKind, c: usize, n: usize, seed: u64) -> Self {
        LayerCheckSpec {
            kind,
            c,
            n,
            measure: Measure::NegL2,
            group_size: 512,
            seed,
            settings: CheckSettings::default(),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..numel).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Verify one layer's analytic gradients against finite differences.
///
/// The readout is a fixed random weighting of both outputs; a plain sum
/// would be constant in most of the parameters (standardized outputs sum to
/// `N*beta` per channel) and would verify nothing.
pub fn check_layer(spec: &LayerCheckSpec) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let eps = 1e-5;
    let batch_shape = [spec.n, spec.c, 1, 1];
    let x_s = uniform(&mut rng, &batch_shape, -2.0, 2.0);
    let x_t = uniform(&mut rng, &batch_shape, -2.0, 2.0);
    let gamma = uniform(&mut rng, &[spec.c], 0.7, 1.3);
    let beta = uniform(&mut rng, &[spec.c], -0.3, 0.3);
    let w_s = uniform(&mut rng, &batch_shape, -1.0, 1.0);
    let w_t = uniform(&mut rng, &batch_shape, -1.0, 1.0);

    let readout = move |tape: &mut Tape, out_s: Var, out_t: Var| -> Result<Var> {
        let ws = tape.leaf(w_s.clone());
        let wt = tape.leaf(w_t.clone());
        let a = tape.mul(out_s, ws)?;
        let b = tape.mul(out_t, wt)?;
        let sa = tape.sum_all(a);
        let sb = tape.sum_all(b);
        tape.add(sa, sb)
    };

    match spec.kind {
        NormKind::Bn => {
            let inputs = vec![x_s, x_t, gamma, beta];
            check_grads(&inputs, &[0, 1, 2, 3], spec.settings, &|tape, v| {
                let g = bn_train_graph(tape, v[0], v[1], v[2], v[3], eps)?;
                readout(tape, g.out_s, g.out_t)
            })
        }
        NormKind::AdaBn => {
            let inputs = vec![x_s, x_t, gamma, beta];
            check_grads(&inputs, &[0, 1, 2, 3], spec.settings, &|tape, v| {
                let g = adabn_train_graph(tape, v[0], v[1], v[2], v[3], eps)?;
                readout(tape, g.out_s, g.out_t)
            })
        }
        NormKind::AutoDial => {
            let mix = uniform(&mut rng, &[spec.c], 0.6, 0.9);
            let inputs = vec![x_s, x_t, gamma, beta, mix];
            check_grads(&inputs, &[0, 1, 2, 3, 4], spec.settings, &|tape, v| {
                let g = autodial_train_graph(tape, v[0], v[1], v[2], v[3], v[4], eps)?;
                readout(tape, g.out_s, g.out_t)
            })
        }
        NormKind::Dsbn => {
            let gamma_t = uniform(&mut rng, &[spec.c], 0.7, 1.3);
            let beta_t = uniform(&mut rng, &[spec.c], -0.3, 0.3);
            let inputs = vec![x_s, x_t, gamma, beta, gamma_t, beta_t];
            check_grads(&inputs, &[0, 1, 2, 3, 4, 5], spec.settings, &|tape, v| {
                let g = dsbn_train_graph(tape, v[0], v[1], v[2], v[3], v[4], v[5], eps)?;
                readout(tape, g.out_s, g.out_t)
            })
        }
        NormKind::Tn => {
            // statistics enter as fixed leaves: training detaches them, so
            // the differentiable surface is exactly x, gamma, beta
            let mu_s = uniform(&mut rng, &[spec.c], -1.0, 1.0);
            let var_s = uniform(&mut rng, &[spec.c], 0.5, 2.0);
            let mu_t = uniform(&mut rng, &[spec.c], -1.0, 1.0);
            let var_t = uniform(&mut rng, &[spec.c], 0.5, 2.0);
            let inputs = vec![x_s, x_t, mu_s, var_s, mu_t, var_t, gamma, beta];
            check_grads(&inputs, &[0, 1, 6, 7], spec.settings, &|tape, v| {
                let (out_s, out_t) =
                    tn_frozen_graph(tape, v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], eps)?;
                readout(tape, out_s, out_t)
            })
        }
        NormKind::Rn => {
            let gates: Vec<Tensor> = (0..4)
                .map(|_| uniform(&mut rng, &[spec.c], 0.6, 0.9))
                .collect();
            let mut inputs = vec![x_s, x_t, gamma, beta];
            inputs.extend(gates);
            let measure = spec.measure;
            let group_size = spec.group_size;
            check_grads(
                &inputs,
                &[0, 1, 2, 3, 4, 5, 6, 7],
                spec.settings,
                &|tape, v| {
                    let vars = RnGraphVars {
                        x_s: v[0],
                        x_t: v[1],
                        gamma: v[2],
                        beta: v[3],
                        g_mu_s: v[4],
                        g_var_s: v[5],
                        g_mu_t: v[6],
                        g_var_t: v[7],
                    };
                    let g = rn_train_graph(tape, &vars, measure, group_size, eps)?;
                    readout(tape, g.out_s, g.out_t)
                },
            )
        }
    }
}
