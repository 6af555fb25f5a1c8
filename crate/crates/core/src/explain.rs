//! Grad-CAM temporal attribution over the network's feature maps.

use crate::error::{Error, Result};
use crate::network::{ForwardTrace, Network};
use crate::tensor::{Mode, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::Path;

/// Named feature maps Grad-CAM can tap. `FrOutput` is the default: the
/// reweighted features are the mechanism under study.
pub const LAYERS: &[&str] = &[
    "input", "stem", "mfe", "fr_mixed", "f1", "f2", "f_hat", "fr",
];

#[derive(Debug, Clone)]
pub struct AttributionMap {
    /// Non-negative, max-normalized to [0,1]; all zeros when the raw map is
    /// identically zero.
    pub values: Vec<f64>,
    pub target_class: usize,
    pub layer_name: String,
    pub trial_id: usize,
}

fn tap<'a>(trace: &'a ForwardTrace, layer: &str) -> Result<&'a Tensor> {
    let missing = |what: &str| {
        Error::InvalidConfig(format!(
            "layer '{what}' is not present under the current ablation"
        ))
    };
    match layer {
        "input" => Ok(&trace.input),
        "stem" => Ok(&trace.stem_out),
        "mfe" => trace.mfe_out.as_ref().ok_or_else(|| missing("mfe")),
        "fr_mixed" => trace.fr.as_ref().map(|f| &f.mixed).ok_or_else(|| missing("fr_mixed")),
        "f1" => trace.fr.as_ref().map(|f| &f.f1).ok_or_else(|| missing("f1")),
        "f2" => trace.fr.as_ref().map(|f| &f.f2).ok_or_else(|| missing("f2")),
        "f_hat" => trace.fr.as_ref().map(|f| &f.f_hat).ok_or_else(|| missing("f_hat")),
        "fr" => trace.fr.as_ref().map(|f| &f.output).ok_or_else(|| missing("fr")),
        other => Err(Error::InvalidConfig(format!(
            "unknown layer '{other}', expected one of {LAYERS:?}"
        ))),
    }
}

/// Backpropagate the target-class logit to the chosen layer's activations,
/// weight each feature-map channel by the temporal mean of its gradient,
/// rectify the weighted channel sum, and max-normalize.
///
/// The `input` layer reinterprets the raw (1,1,C,W) trial as a (C,W) grid,
/// giving the per-electrode analogue of the temporal map.
pub fn grad_cam(
    network: &Network,
    trial: &Tensor,
    trial_id: usize,
    target_class: usize,
    layer: &str,
) -> Result<AttributionMap> {
    if target_class >= network.config.classes {
        return Err(Error::InvalidInput(format!(
            "target class {} out of {} classes",
            target_class, network.config.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0); // eval mode, unused
    network.zero_grad();
    let trace = network.forward_trace(trial, Mode::Eval, &mut rng)?;
    let tapped = tap(&trace, layer)?.clone();
    let logit = trace.logits.index_scalar(target_class)?;
    logit.backward();

    let shape = tapped.shape();
    let (channels, t) = if layer == "input" {
        (shape[2], shape[3])
    } else {
        (shape[1], shape[2] * shape[3])
    };
    let act = tapped.data_clone();
    let grad = tapped
        .grad_clone()
        .ok_or_else(|| Error::InvalidInput("tapped layer received no gradient".into()))?;

    let mut map = vec![0.0; t];
    for k in 0..channels {
        let g = &grad[k * t..(k + 1) * t];
        let weight = g.iter().sum::<f64>() / t as f64;
        let a = &act[k * t..(k + 1) * t];
        for (m, &ai) in map.iter_mut().zip(a) {
            *m += weight * ai;
        }
    }
    for v in map.iter_mut() {
        *v = v.max(0.0);
    }
    let peak = map.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        for v in map.iter_mut() {
            *v /= peak;
        }
    }
    Ok(AttributionMap {
        values: map,
        target_class,
        layer_name: layer.to_string(),
        trial_id,
    })
}

/// CSV export: header `time_index,activation`, one row per time step,
/// 9 significant digits.
pub fn export_map(map: &AttributionMap, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "time_index,activation")?;
    for (i, v) in map.values.iter().enumerate() {
        writeln!(f, "{i},{v:.9e}")?;
    }
    Ok(())
}
