//! Whole-model gradient check in `f64` against central finite differences.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::{ForwardMode, MatModel, Window};
use crate::numerics::{Graph, OpKind, Tensor, FD_STEP_F64};
use crate::params::ParamStore;
use crate::rng::substream;
use crate::training::loss::{
    compute_total_loss, LossWeights, MixedShortLabels, SupervisionTargets,
};

pub const GRADCHECK_TOLERANCE: f64 = 1e-2;
/// Denominator floor of the elementwise relative error.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Group of a parameter name: `round.{i}.{short|future}`, `post.{i}`, or
/// the first dotted component.
pub fn parameter_group(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let keep = match parts[0] {
        "round" => 3,
        "post" => 2,
        _ => 1,
    };
    parts[..keep.min(parts.len())].join(".")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: String,
    pub parameters: usize,
    pub elements: usize,
    pub max_relative_error: f64,
    /// Euclidean norm of the analytic gradient, to spot dead groups.
    pub gradient_norm: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub config: ModelConfig,
    pub tolerance: f64,
    pub step: f64,
    pub groups: Vec<GroupResult>,
    pub passed: bool,
}

/// Deterministic probe input: a partly padded window, hard and mixed
/// short-term targets, random future targets.
pub fn probe_example(cfg: &ModelConfig) -> (Window<f64>, SupervisionTargets) {
    let mut rng = substream(cfg.seed, "gradcheck");
    let len = cfg.window_len();
    let data: Vec<f64> = (0..len * cfg.d_model)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let padded = (cfg.long_len / 2).min(3);
    let valid: Vec<bool> = (0..len).map(|i| i >= padded).collect();
    let window = Window::new(
        Tensor::new(vec![len, cfg.d_model], data).expect("shape"),
        valid,
    )
    .expect("window");
    let c = cfg.num_outputs();
    let short_labels: Vec<usize> = (0..cfg.short_len).map(|_| rng.random_range(0..c)).collect();
    let donor_labels: Vec<usize> = (0..cfg.short_len).map(|_| rng.random_range(0..c)).collect();
    let lambda: Vec<f64> = (0..cfg.short_len)
        .map(|_| rng.random_range(0.0..0.5))
        .collect();
    let targets = SupervisionTargets {
        short_valid: vec![true; cfg.short_len],
        short_labels,
        future_labels: (0..cfg.future_steps())
            .map(|_| rng.random_range(0..c))
            .collect(),
        short_mix: Some(MixedShortLabels {
            donor_labels,
            lambda,
        }),
    };
    (window, targets)
}

fn loss_value(
    model: &MatModel,
    store: &ParamStore<f64>,
    window: &Window<f64>,
    targets: &SupervisionTargets,
) -> Result<f64> {
    let cfg = model.config();
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let out = model.forward(&mut g, &p, window, ForwardMode::Train)?;
    let terms = compute_total_loss(
        &mut g,
        &p,
        &model.classifier,
        &out,
        targets,
        &LossWeights::from_config(cfg),
        cfg.future_steps(),
    )?;
    Ok(g.value(terms.total).item())
}

/// Checks every parameter group of a model built from `cfg`. `fault`
/// corrupts one backward rule to demonstrate that the check can fail.
pub fn gradcheck_model(cfg: &ModelConfig, fault: Option<(OpKind, f64)>) -> Result<GradcheckReport> {
    let (model, store32) = MatModel::new::<f32>(cfg)?;
    let mut store: ParamStore<f64> = store32.cast();
    let (window, targets) = probe_example(cfg);

    let mut g = Graph::new();
    if let Some((kind, factor)) = fault {
        g.inject_fault(kind, factor);
    }
    let p = store.bind(&mut g);
    let out = model.forward(&mut g, &p, &window, ForwardMode::Train)?;
    let terms = compute_total_loss(
        &mut g,
        &p,
        &model.classifier,
        &out,
        &targets,
        &LossWeights::from_config(cfg),
        cfg.future_steps(),
    )?;
    let grads = g.backward(terms.total)?;
    let analytic = store.collect_grads(&g, &grads, &p);

    let mut groups: Vec<GroupResult> = Vec::new();
    let ids: Vec<_> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        let group = parameter_group(store.name(id));
        let mut numeric = Vec::with_capacity(grad.numel());
        for i in 0..grad.numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + FD_STEP_F64;
            let fp = loss_value(&model, &store, &window, &targets)?;
            store.get_mut(id).data_mut()[i] = orig - FD_STEP_F64;
            let fm = loss_value(&model, &store, &window, &targets)?;
            store.get_mut(id).data_mut()[i] = orig;
            numeric.push((fp - fm) / (2.0 * FD_STEP_F64));
        }
        let err = crate::numerics::max_relative_error(grad.data(), &numeric, GRADCHECK_FLOOR);
        let sq: f64 = grad.data().iter().map(|x| x * x).sum();
        match groups.iter_mut().find(|r| r.group == group) {
            Some(r) => {
                r.parameters += 1;
                r.elements += grad.numel();
                r.max_relative_error = r.max_relative_error.max(err);
                r.gradient_norm = (r.gradient_norm.powi(2) + sq).sqrt();
            }
            None => groups.push(GroupResult {
                group,
                parameters: 1,
                elements: grad.numel(),
                max_relative_error: err,
                gradient_norm: sq.sqrt(),
                passed: false,
            }),
        }
    }
    for r in &mut groups {
        r.passed = r.max_relative_error <= GRADCHECK_TOLERANCE && r.gradient_norm > 0.0;
    }
    Ok(GradcheckReport {
        config: cfg.clone(),
        tolerance: GRADCHECK_TOLERANCE,
        step: FD_STEP_F64,
        passed: groups.iter().all(|r| r.passed),
        groups,
    })
}

impl GradcheckReport {
    /// Fixed-width table, one line per group.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<18} {:>6} {:>8} {:>12} {:>12}  result\n",
            "group", "params", "elements", "max_rel_err", "grad_norm"
        );
        for r in &self.groups {
            s.push_str(&format!(
                "{:<18} {:>6} {:>8} {:>12.3e} {:>12.3e}  {}\n",
                r.group,
                r.parameters,
                r.elements,
                r.max_relative_error,
                r.gradient_norm,
                if r.passed { "PASS" } else { "FAIL" }
            ));
        }
        s
    }
}
