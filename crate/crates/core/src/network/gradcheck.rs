use rand_chacha::ChaCha8Rng;

use super::model::{Mode, Network, Trace};
use super::spec::LayerSpec;
use super::tensor::Tensor;
use crate::dataset::TreatmentLabel;
use crate::{Error, Result};

/// Largest network the checker accepts; each parameter costs two passes.
pub const MAX_CHECKED_PARAMS: usize = 10_000;

/// Relative errors are taken against at least this magnitude so that
/// gradients that vanish analytically do not divide by zero.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameters compared.
    pub checked: usize,
    /// Parameters whose perturbation flipped a ReLU or moved a pooling
    /// argmax, where the loss is not differentiable.
    pub skipped: usize,
    /// `(tensor, element)` with the largest error.
    pub worst: Option<(usize, usize)>,
}

/// Compares back-propagated gradients of the mean loss with central
/// differences `(L(w + eps) - L(w - eps)) / 2 eps`, dropout disabled.
pub fn gradient_check(
    net: &Network<f64>,
    inputs: &[Tensor<f64>],
    labels: &[TreatmentLabel],
    epsilon: f64,
) -> Result<GradCheckReport> {
    if net.param_count() > MAX_CHECKED_PARAMS {
        return Err(Error::Precondition(format!(
            "{} parameters exceeds the checker limit of {MAX_CHECKED_PARAMS}",
            net.param_count()
        )));
    }
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(Error::Precondition(
            "epsilon must be positive and finite".into(),
        ));
    }
    let (_, analytic) = net.loss_and_gradients(inputs, labels)?;
    let flat: Vec<f64> = inputs
        .iter()
        .flat_map(|x| x.data().iter().copied())
        .collect();
    let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let eval = |n: &Network<f64>| -> Result<(f64, Vec<u32>)> {
        let trace =
            n.forward_batch::<ChaCha8Rng>(&flat, inputs.len(), Mode::InferDeterministic, &mut [])?;
        let sig = signature(n, &trace);
        let loss = mean_loss(&trace, &idx);
        Ok((loss, sig))
    };
    let (_, base_sig) = eval(net)?;

    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        worst: None,
    };
    for t in 0..net.params().len() {
        for e in 0..net.params()[t].len() {
            let w = net.params()[t].data()[e];
            probe.params_mut()[t].data_mut()[e] = w + epsilon;
            let (plus, sig_plus) = eval(&probe)?;
            probe.params_mut()[t].data_mut()[e] = w - epsilon;
            let (minus, sig_minus) = eval(&probe)?;
            probe.params_mut()[t].data_mut()[e] = w;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[t].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((t, e));
            }
        }
    }
    Ok(report)
}

fn mean_loss(trace: &Trace<f64>, labels: &[usize]) -> f64 {
    // log-sum-exp on the logits keeps tiny probabilities exact
    let logits = &trace.acts[trace.acts.len() - 2];
    let mut sum = 0.0;
    for (row, &y) in logits.chunks_exact(4).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        sum += lse - row[y];
    }
    sum / labels.len() as f64
}

/// ReLU activity pattern and pooling argmax positions.
fn signature(net: &Network<f64>, trace: &Trace<f64>) -> Vec<u32> {
    let mut sig = Vec::new();
    for (i, layer) in net.spec().layers.iter().enumerate() {
        match layer {
            LayerSpec::ReLU => sig.extend(trace.acts[i].iter().map(|&v| u32::from(v > 0.0))),
            LayerSpec::MaxPool2D => sig.extend_from_slice(&trace.pool_argmax[i]),
            _ => {}
        }
    }
    sig
}
