//! Integrated Gradients over FFN hidden activations.

use std::str::FromStr;

use rayon::prelude::*;

use crate::autodiff::{Graph, NodeId};
use crate::error::{NritError, Result};
use crate::model::{ActivationProbe, ChoiceScope, MicroTransformer, ProbeContext, TokenId, NO, YES};
use crate::tensor::Tensor;

/// Scalar whose path integral is attributed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IgTarget {
    /// P(gold choice).
    Probability,
    /// -log P(gold choice).
    Loss,
}

impl FromStr for IgTarget {
    type Err = NritError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probability" => Ok(IgTarget::Probability),
            "loss" => Ok(IgTarget::Loss),
            other => Err(NritError::Config(format!("ig.target must be probability or loss, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IgConfig {
    /// Midpoint Riemann steps.
    pub steps: usize,
    pub target: IgTarget,
    pub scope: ChoiceScope,
}

impl Default for IgConfig {
    fn default() -> Self {
        IgConfig {
            steps: 20,
            target: IgTarget::Probability,
            scope: ChoiceScope::Restricted(vec![YES, NO]),
        }
    }
}

impl IgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(NritError::Config("ig.steps must be at least 1".into()));
        }
        Ok(())
    }

}

/// One attribution instance in token form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IgInput {
    pub id: String,
    /// Query and context; the probe sits on its last token.
    pub target_prompt: Vec<TokenId>,
    /// Query only; supplies the baseline activation at its last token.
    pub baseline_prompt: Vec<TokenId>,
    pub gold: TokenId,
}

/// Activations and cached state shared by all layers of one instance.
#[derive(Debug, Clone)]
pub struct IgPrepared {
    pub ctx: ProbeContext,
    /// Baseline hidden vector per layer.
    pub baseline: Vec<Tensor>,
}

pub fn prepare(model: &MicroTransformer, input: &IgInput) -> Result<IgPrepared> {
    let ctx = model.probe_context(&input.target_prompt)?;
    let mut probes: Vec<ActivationProbe> = (0..model.config().n_layers).map(ActivationProbe::capture).collect();
    model.forward(&input.baseline_prompt, &mut probes)?;
    let baseline = probes.into_iter().map(|p| p.captured.expect("capture probe")).collect();
    Ok(IgPrepared { ctx, baseline })
}

fn target_node(
    model: &MicroTransformer,
    g: &mut Graph<'_>,
    logits: NodeId,
    gold: TokenId,
    cfg: &IgConfig,
) -> Result<NodeId> {
    let p = model.choice_probability_node(g, logits, gold, &cfg.scope)?;
    Ok(match cfg.target {
        IgTarget::Probability => p,
        IgTarget::Loss => {
            let l = g.log(p);
            let s = g.sum(l);
            g.scale(s, -1.0)
        }
    })
}

/// The attributed scalar with layer `layer`'s probe replaced by `v`, on the
/// target prompt cached in `prep`.
pub fn target_value(
    model: &MicroTransformer,
    prep: &IgPrepared,
    layer: usize,
    v: &Tensor,
    gold: TokenId,
    cfg: &IgConfig,
) -> Result<f64> {
    if layer >= prep.baseline.len() {
        return Err(NritError::Index(format!("layer {layer}")));
    }
    let mut g = Graph::new();
    let h = g.constant(v.clone());
    let z = model.suffix_logits(&mut g, &prep.ctx, layer, h)?;
    let t = target_node(model, &mut g, z, gold, cfg)?;
    Ok(g.value(t).item())
}

fn interpolate(base: &Tensor, target: &Tensor, alpha: f64) -> Tensor {
    Tensor::vector(
        base.data()
            .iter()
            .zip(target.data())
            .map(|(b, t)| b + alpha * (t - b))
            .collect(),
    )
}

/// Midpoint-rule path integral along the straight line from `base` to
/// `target`: `(target - base) * mean_s grad(base + alpha_s * (target - base))`.
/// `grad` receives the 1-based step and the interpolated point.
pub fn integrate_path<G>(base: &Tensor, target: &Tensor, steps: usize, mut grad: G) -> Result<Vec<f64>>
where
    G: FnMut(usize, Tensor) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(NritError::Config("ig.steps must be at least 1".into()));
    }
    if base.len() != target.len() {
        return Err(NritError::Shape(format!("baseline {} vs target {}", base.len(), target.len())));
    }
    let mut grad_sum = vec![0.0; target.len()];
    for s in 1..=steps {
        let alpha = (s as f64 - 0.5) / steps as f64;
        let g = grad(s, interpolate(base, target, alpha))?;
        if g.len() != grad_sum.len() {
            return Err(NritError::Shape(format!("gradient of length {} at step {s}", g.len())));
        }
        for (acc, v) in grad_sum.iter_mut().zip(g.data()) {
            *acc += v;
        }
    }
    Ok(base
        .data()
        .iter()
        .zip(target.data())
        .zip(&grad_sum)
        .map(|((b, t), g)| (t - b) * (g / steps as f64))
        .collect())
}

fn check_layer(model: &MicroTransformer, layer: usize) -> Result<()> {
    let n = model.config().n_layers;
    if layer >= n {
        return Err(NritError::Index(format!("layer {layer} of {n}")));
    }
    Ok(())
}

fn step_error(id: &str, layer: usize, step: usize, e: NritError) -> NritError {
    let location = format!("instance {id}, layer {layer}, step {step}");
    match e {
        NritError::Numeric { location: inner, detail } => NritError::numeric(location, format!("{detail} ({inner})")),
        other => other,
    }
}

/// Scores of all `d_ff` neurons of `layer`: `(v_t - v_b) * mean_s dF/dv(v_s)`
/// with `v_s` on the straight line between baseline and target. Every
/// interpolation step replays only the final position from `layer` onward.
pub fn integrated_gradients_layer(
    model: &MicroTransformer,
    input: &IgInput,
    prep: &IgPrepared,
    layer: usize,
    cfg: &IgConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_layer(model, layer)?;
    integrate_path(&prep.baseline[layer], &prep.ctx.hidden[layer], cfg.steps, |s, v| {
        let mut g = Graph::new();
        let h = g.input(v);
        let z = model.suffix_logits(&mut g, &prep.ctx, layer, h)?;
        let t = target_node(model, &mut g, z, input.gold, cfg)?;
        let back = g.backward(t).map_err(|e| step_error(&input.id, layer, s, e))?;
        let grad = back.grad_or_zero(&g, h);
        if !grad.all_finite() {
            return Err(step_error(&input.id, layer, s, NritError::numeric("probe", "non-finite gradient")));
        }
        Ok(grad)
    })
}

/// Reference implementation recording the whole prompt for every step.
/// Slower than [`integrated_gradients_layer`]; kept to cross-check it.
pub fn integrated_gradients_layer_full(
    model: &MicroTransformer,
    input: &IgInput,
    layer: usize,
    cfg: &IgConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_layer(model, layer)?;
    let prep = prepare(model, input)?;
    integrate_path(&prep.baseline[layer], &prep.ctx.hidden[layer], cfg.steps, |s, v| {
        let mut g = Graph::new();
        let (logits, h) = model.probed_last_logits(&mut g, &input.target_prompt, layer, v)?;
        let t = target_node(model, &mut g, logits, input.gold, cfg)?;
        let back = g.backward(t).map_err(|e| step_error(&input.id, layer, s, e))?;
        Ok(back.grad_or_zero(&g, h))
    })
}

/// Scores for every layer of one instance, laid out `layer * d_ff + index`.
pub fn attribute_instance(model: &MicroTransformer, input: &IgInput, cfg: &IgConfig) -> Result<Vec<f64>> {
    let prep = prepare(model, input)?;
    let mut out = Vec::with_capacity(model.config().n_layers * model.config().d_ff);
    for layer in 0..model.config().n_layers {
        out.extend(integrated_gradients_layer(model, input, &prep, layer, cfg)?);
    }
    Ok(out)
}

/// [`attribute_instance`] over many instances in parallel; output order
/// follows `inputs` and values do not depend on scheduling.
pub fn attribute_all(model: &MicroTransformer, inputs: &[IgInput], cfg: &IgConfig) -> Result<Vec<Vec<f64>>> {
    inputs.par_iter().map(|i| attribute_instance(model, i, cfg)).collect()
}
