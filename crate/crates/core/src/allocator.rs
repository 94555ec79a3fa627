//! Mask training loop, joint objective, proportional rescaling to the target
//! ratio and construction of the compressed model.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::baselines::{self, uniform_allocate, BaselineKind};
use crate::error::{AraError, Result};
use crate::factorization::{whiten_with_gram, WhitenedFactorization};
use crate::guidance::{capacity_preserved, effective_apply, guidance_term, LayerVars, Mode};
use crate::linalg::DEFAULT_DAMPING;
use crate::mask::{kept_rank, ste_mask, MaskGraph, MaskParams};
use crate::optim::{AdamWConfig, AdamWState, Param};
use crate::tensor::Matrix;
use crate::zoo::calibrate::CalibrationSet;
use crate::zoo::model::{Batch, CompressibleNet, Linear, LinearWeights, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ara,
    Uniform,
    Tanh,
    Gumbel,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ara => "ara",
            Method::Uniform => "uniform",
            Method::Tanh => "tanh",
            Method::Gumbel => "gumbel",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = AraError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ara" => Ok(Method::Ara),
            "uniform" => Ok(Method::Uniform),
            "tanh" | "tanh-mask" => Ok(Method::Tanh),
            "gumbel" | "gumbel-mask" => Ok(Method::Gumbel),
            other => Err(AraError::config(
                "method",
                format!("unknown method `{other}` (expected ara, uniform, tanh or gumbel)"),
            )),
        }
    }
}

/// Tanh cutoff learning rate: `5 * 64 / 4096`.
pub const DEFAULT_TANH_LR: f64 = 0.078125;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub target_ratio: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Staircase steps `D`, clamped to each layer's mask length.
    pub d: usize,
    pub lr: f64,
    pub epochs: usize,
    pub samples: usize,
    pub seq_len: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub clamp_guidance: bool,
    /// Use the dense matrix for layers whose ratio reaches 1.
    pub dense_switch: bool,
    pub weight_decay: f64,
    /// Global gradient-norm clip on mask parameters; off when `None`.
    pub clip_norm: Option<f64>,
    /// Tanh sharpness per mask index: `beta = tanh_beta_scale * len`.
    pub tanh_beta_scale: f64,
    /// Learning rate of the tanh cutoffs; `lr` when `None`. The default
    /// scales a step of 5 on a 4096-long mask to a 64-long one.
    pub tanh_lr: Option<f64>,
    pub gumbel_temperature: f64,
    /// Learning-rate override for the Gumbel baseline; `lr` when `None`.
    pub gumbel_lr: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            target_ratio: 0.8,
            lambda1: 100.0,
            lambda2: 100.0,
            d: 100,
            lr: 1e-3,
            epochs: 10,
            samples: 256,
            seq_len: 512,
            batch_size: 1,
            seed: 0,
            clamp_guidance: true,
            dense_switch: true,
            weight_decay: 0.0,
            clip_norm: None,
            tanh_beta_scale: baselines::DEFAULT_TANH_BETA_SCALE,
            tanh_lr: Some(DEFAULT_TANH_LR),
            gumbel_temperature: baselines::DEFAULT_GUMBEL_TEMPERATURE,
            gumbel_lr: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_ratio > 0.0 && self.target_ratio <= 1.0) {
            return Err(AraError::config("target_ratio", "must lie in (0, 1]"));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AraError::config(name, "must be a nonnegative finite number"));
            }
        }
        for (name, v) in [
            ("lr", self.lr),
            ("tanh_beta_scale", self.tanh_beta_scale),
            ("tanh_lr", self.tanh_lr.unwrap_or(self.lr)),
            ("gumbel_temperature", self.gumbel_temperature),
            ("gumbel_lr", self.gumbel_lr.unwrap_or(self.lr)),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AraError::config(name, "must be a positive finite number"));
            }
        }
        for (name, v) in [
            ("d", self.d),
            ("epochs", self.epochs),
            ("samples", self.samples),
            ("seq_len", self.seq_len),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(AraError::config(name, "must be positive"));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(AraError::config("clip_norm", "must be a positive finite number"));
            }
        }
        Ok(())
    }

    pub fn baseline_kind(&self, method: Method) -> Option<BaselineKind> {
        match method {
            Method::Ara => None,
            Method::Uniform => Some(BaselineKind::Uniform),
            Method::Tanh => Some(BaselineKind::TanhMask {
                beta_scale: self.tanh_beta_scale,
                lr: self.tanh_lr.unwrap_or(self.lr),
            }),
            Method::Gumbel => Some(BaselineKind::GumbelMask {
                temperature: self.gumbel_temperature,
                lr: self.gumbel_lr.unwrap_or(self.lr),
            }),
        }
    }
}

/// Final decision for one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Allocation {
    Dense,
    LowRank(usize),
}

impl Allocation {
    pub fn params(self, m: usize, n: usize) -> usize {
        match self {
            Allocation::Dense => m * n,
            Allocation::LowRank(r) => r * (m + n),
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            Allocation::Dense => Mode::Dense,
            Allocation::LowRank(_) => Mode::LowRank,
        }
    }

    pub fn rank(self) -> Option<usize> {
        match self {
            Allocation::Dense => None,
            Allocation::LowRank(r) => Some(r),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lm: f64,
    /// Mean guidance loss over layers.
    pub lg: f64,
    pub lc: f64,
    pub total: f64,
    /// Stored parameters at the current kept ranks over `C_t`.
    pub realized_ratio: f64,
    pub dense_layers: usize,
}

/// A layer's state at the end of training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedLayer {
    pub name: String,
    pub m: usize,
    pub n: usize,
    pub ratio: f64,
    pub mode: Mode,
}

/// One row of the allocation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerAllocation {
    pub name: String,
    pub m: usize,
    pub n: usize,
    pub mode: Mode,
    pub rank: Option<usize>,
    /// Stored over dense parameters: 1 for dense layers.
    #[serde(rename = "R")]
    pub ratio: f64,
    #[serde(rename = "G_R")]
    pub capacity: f64,
    pub trained_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub method: Method,
    pub steps: Vec<StepRecord>,
    pub trained: Vec<TrainedLayer>,
    /// Global factor applied to low-rank ratios; 1 when no rescaling ran.
    pub scale: f64,
    pub allocation: Vec<LayerAllocation>,
    pub compressible_params: usize,
    pub stored_params: usize,
    pub realized_ratio: f64,
    /// Layers whose staircase steps were clamped to the mask length.
    pub clamped_steps: Vec<String>,
    /// Layers raised from rank 0 to rank 1.
    pub clamped_ranks: Vec<String>,
}

/// Weights of the three objective terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub target: f64,
}

/// Objective node and its term values.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub lm: f64,
    pub lg: f64,
    pub lc: f64,
}

/// `L = L_m + lambda1 * mean_i L_g,i + lambda2 * (sum_i C_i / C_t - target)^2`.
/// `guidance[i]` is `None` where the penalty is zero; `counts[i]` is the
/// differentiable parameter count of layer `i`.
pub fn objective(
    tape: &mut Tape,
    lm: Var,
    guidance: &[Option<Var>],
    counts: &[Var],
    c_total: f64,
    w: ObjectiveWeights,
) -> Result<Objective> {
    if guidance.is_empty() || guidance.len() != counts.len() {
        return Err(AraError::dim(format!(
            "objective needs matching nonempty layer lists, got {} guidance and {} counts",
            guidance.len(),
            counts.len()
        )));
    }
    let n_layers = guidance.len() as f64;
    let mut lg_sum: Option<Var> = None;
    for g in guidance.iter().flatten() {
        lg_sum = Some(match lg_sum {
            Some(acc) => tape.add(acc, *g)?,
            None => *g,
        });
    }
    let mut count_sum = counts[0];
    for c in &counts[1..] {
        count_sum = tape.add(count_sum, *c)?;
    }
    let share = tape.scale(count_sum, 1.0 / c_total);
    let gap = tape.add_const(share, -w.target);
    let lc = tape.square(gap);

    let lm_value = tape.scalar_value(lm);
    let lc_value = tape.scalar_value(lc);
    let lc_term = tape.scale(lc, w.lambda2);
    let mut total = tape.add(lm, lc_term)?;
    let mut lg_value = 0.0;
    if let Some(sum) = lg_sum {
        let lg = tape.scale(sum, 1.0 / n_layers);
        lg_value = tape.scalar_value(lg);
        let term = tape.scale(lg, w.lambda1);
        total = tape.add(total, term)?;
    }
    Ok(Objective {
        total,
        lm: lm_value,
        lg: lg_value,
        lc: lc_value,
    })
}

/// Whitened factorizations of every compressible layer from the calibration
/// activations.
pub fn factorize<N: CompressibleNet + ?Sized>(net: &N, calib: &CalibrationSet) -> Result<Vec<WhitenedFactorization>> {
    let grams = calib.grams()?;
    if grams.len() != net.layer_count() {
        return Err(AraError::dim(format!(
            "calibration covers {} layers, network has {}",
            grams.len(),
            net.layer_count()
        )));
    }
    (0..net.layer_count())
        .map(|i| whiten_with_gram(net.layer_weight(i), &grams[i], DEFAULT_DAMPING))
        .collect()
}

enum MaskState {
    Ara(MaskParams),
    Tanh { beta: f64, len: usize },
    Gumbel { temperature: f64, len: usize },
}

struct Layer {
    m: usize,
    n: usize,
    state: MaskState,
}

impl Layer {
    fn record(&self, tape: &mut Tape, param: Var, rng: &mut ChaCha8Rng) -> Result<MaskGraph> {
        match &self.state {
            MaskState::Ara(mp) => mp.record(tape, param),
            MaskState::Tanh { beta, len } => baselines::record_tanh(tape, param, *beta, *len, self.m, self.n),
            MaskState::Gumbel { temperature, len } => {
                let noise = baselines::logistic_noise(*len, rng);
                baselines::record_gumbel(tape, param, &noise, *temperature, self.m, self.n)
            }
        }
    }

    /// Noise-free ratio for the current parameter value.
    fn ratio(&self, param: &Matrix) -> f64 {
        let scale = (self.m + self.n) as f64 / (self.m * self.n) as f64;
        match &self.state {
            MaskState::Ara(mp) => {
                let mut mp = mp.clone();
                mp.theta = param.as_slice().to_vec();
                mp.ratio()
            }
            MaskState::Tanh { beta, len } => {
                baselines::tanh_mask(param.item(), *beta, *len).iter().sum::<f64>() * scale
            }
            MaskState::Gumbel { .. } => {
                param
                    .as_slice()
                    .iter()
                    .map(|&l| crate::autodiff::sigmoid(l))
                    .sum::<f64>()
                    * scale
            }
        }
    }
}

fn diagnostic(names: &[String], factors: &[WhitenedFactorization], ratios: &[f64]) -> String {
    let mut out = String::new();
    for ((name, f), r) in names.iter().zip(factors).zip(ratios) {
        let head: Vec<String> = f.sigma.iter().take(3).map(|s| format!("{s:.4e}")).collect();
        let last = f.sigma.last().copied().unwrap_or(0.0);
        out.push_str(&format!(
            "\n  {name}: R={r:.6} sigma=[{}, .., {last:.4e}]",
            head.join(", ")
        ));
    }
    out
}

/// Trains the per-layer masks of `method` on the calibration windows. Only
/// mask parameters change; the network and factorizations are read-only.
fn train_masks<N: CompressibleNet + ?Sized>(
    net: &N,
    factors: &[WhitenedFactorization],
    calib: &CalibrationSet,
    cfg: &TrainConfig,
    method: Method,
) -> Result<(Vec<StepRecord>, Vec<TrainedLayer>, Vec<String>)> {
    cfg.validate()?;
    let n_layers = net.layer_count();
    if n_layers == 0 {
        return Err(AraError::input("network has no compressible layers"));
    }
    if factors.len() != n_layers {
        return Err(AraError::dim("one factorization per layer required"));
    }
    if calib.windows.is_empty() {
        return Err(AraError::input("calibration set has no windows"));
    }
    let (lambda1, switch, lr) = match method {
        Method::Ara => (cfg.lambda1, cfg.dense_switch, cfg.lr),
        Method::Tanh => (0.0, false, cfg.tanh_lr.unwrap_or(cfg.lr)),
        Method::Gumbel => (0.0, false, cfg.gumbel_lr.unwrap_or(cfg.lr)),
        Method::Uniform => return Err(AraError::Usage("uniform allocation is closed-form".into())),
    };

    let names: Vec<String> = (0..n_layers).map(|i| net.layer_name(i).to_string()).collect();
    let mut layers = Vec::with_capacity(n_layers);
    let mut params = Vec::with_capacity(n_layers);
    let mut clamped = Vec::new();
    for (i, f) in factors.iter().enumerate() {
        let (m, n) = (f.m, f.n);
        let len = f.rank_capacity();
        let (state, init) = match method {
            Method::Ara => {
                let (mp, was_clamped) = MaskParams::new(cfg.d, m, n)?;
                if was_clamped {
                    clamped.push(net.layer_name(i).to_string());
                }
                let init = Matrix::row_vector(&mp.theta);
                (MaskState::Ara(mp), init)
            }
            Method::Tanh => (
                MaskState::Tanh {
                    beta: cfg.tanh_beta_scale * len as f64,
                    len,
                },
                Matrix::scalar(baselines::tanh_init(cfg.target_ratio, m, n)),
            ),
            Method::Gumbel => (
                MaskState::Gumbel {
                    temperature: cfg.gumbel_temperature,
                    len,
                },
                Matrix::filled(1, len, baselines::gumbel_init(cfg.target_ratio, m, n, len)),
            ),
            Method::Uniform => unreachable!(),
        };
        layers.push(Layer { m, n, state });
        params.push(Param::new(init));
    }

    let c_total = factors.iter().map(|f| (f.m * f.n) as f64).sum::<f64>();
    let weights = ObjectiveWeights {
        lambda1,
        lambda2: cfg.lambda2,
        target: cfg.target_ratio,
    };
    let mut opt = AdamWState::new(
        AdamWConfig {
            lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &params,
    );
    let full: Vec<_> = factors.iter().map(|f| f.full_factors()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..calib.windows.len()).collect();
    let mut steps = Vec::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let windows: Vec<Vec<usize>> = chunk.iter().map(|&i| calib.windows[i].clone()).collect();
            let batch = Batch::from_windows(&windows, net.context());
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.value.clone())).collect();

            let mut graphs = Vec::with_capacity(n_layers);
            for (layer, &v) in layers.iter().zip(&vars) {
                graphs.push(layer.record(&mut tape, v, &mut rng)?);
            }
            let modes: Vec<Mode> = graphs
                .iter()
                .map(|g| if switch { Mode::for_ratio(g.ratio_value) } else { Mode::LowRank })
                .collect();
            let mut layer_vars = Vec::with_capacity(n_layers);
            let mut masks = Vec::with_capacity(n_layers);
            for i in 0..n_layers {
                masks.push(ste_mask(&mut tape, graphs[i].p, &graphs[i].binary)?);
                layer_vars.push(LayerVars {
                    dense: tape.constant(net.layer_weight(i).clone()),
                    wu: tape.constant(full[i].wu.clone()),
                    wv: tape.constant(full[i].wv.clone()),
                });
            }

            let logits = net.forward_layers(&mut tape, &batch, &mut |t, i, x| {
                effective_apply(t, x, layer_vars[i], masks[i], modes[i])
            })?;
            let lm = tape.cross_entropy(logits, &batch.targets)?;

            let mut guidance = Vec::with_capacity(n_layers);
            let mut counts = Vec::with_capacity(n_layers);
            for (i, g) in graphs.iter().enumerate() {
                guidance.push(if lambda1 > 0.0 {
                    let cap = capacity_preserved(&factors[i], g.ratio_value).value;
                    guidance_term(&mut tape, g.ratio, cap, cfg.clamp_guidance)
                } else {
                    None
                });
                counts.push(tape.scale(g.sum_p, (layers[i].m + layers[i].n) as f64));
            }
            let obj = objective(&mut tape, lm, &guidance, &counts, c_total, weights)?;
            let total = tape.scalar_value(obj.total);
            if !total.is_finite() {
                let ratios: Vec<f64> = graphs.iter().map(|g| g.ratio_value).collect();
                return Err(AraError::Numerical(format!(
                    "non-finite loss at step {} (L_m={}, L_g={}, L_c={}); per-layer state:{}",
                    steps.len(),
                    obj.lm,
                    obj.lg,
                    obj.lc,
                    diagnostic(&names, factors, &ratios)
                )));
            }

            let stored: usize = (0..n_layers)
                .map(|i| match modes[i] {
                    Mode::Dense => layers[i].m * layers[i].n,
                    Mode::LowRank => graphs[i].kept_rank * (layers[i].m + layers[i].n),
                })
                .sum();
            steps.push(StepRecord {
                step: steps.len(),
                epoch,
                lm: obj.lm,
                lg: obj.lg,
                lc: obj.lc,
                total,
                realized_ratio: stored as f64 / c_total,
                dense_layers: modes.iter().filter(|&&m| m == Mode::Dense).count(),
            });

            tape.backward(obj.total)?;
            for (p, v) in params.iter_mut().zip(&vars) {
                p.grad = Some(tape.take_grad(*v).unwrap_or_else(|| Matrix::zeros(p.value.rows(), p.value.cols())));
            }
            if let Some(max) = cfg.clip_norm {
                clip_grads(&mut params, max);
            }
            opt.step(&mut params)?;
        }
    }

    let trained = layers
        .iter()
        .zip(&params)
        .enumerate()
        .map(|(i, (layer, p))| {
            let ratio = layer.ratio(&p.value);
            TrainedLayer {
                name: net.layer_name(i).to_string(),
                m: layer.m,
                n: layer.n,
                ratio,
                mode: if switch { Mode::for_ratio(ratio) } else { Mode::LowRank },
            }
        })
        .collect();
    Ok((steps, trained, clamped))
}

fn clip_grads(params: &mut [Param], max: f64) {
    let norm = params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max {
        for g in params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            *g = g.scale(max / norm);
        }
    }
}

/// Allocation of a low-rank layer at scaled ratio `x`: with the switch, dense
/// from 1 upwards; otherwise the kept rank, at least 1 and at most `min(m, n)`.
fn scaled_allocation(x: f64, m: usize, n: usize, switch: bool) -> Allocation {
    if switch && x >= 1.0 {
        Allocation::Dense
    } else {
        Allocation::LowRank(kept_rank(x, m, n).clamp(1, m.min(n)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rescaled {
    pub scale: f64,
    pub allocation: Vec<Allocation>,
}

/// Finds the largest global factor `c` such that scaling every low-rank
/// layer's ratio by `c` keeps total stored parameters at or below
/// `target * C_t`. Dense layers stay dense; without `switch` no layer becomes
/// dense.
pub fn rescale_to_target(trained: &[TrainedLayer], target: f64, switch: bool) -> Result<Rescaled> {
    let c_total: usize = trained.iter().map(|l| l.m * l.n).sum();
    let budget = target * c_total as f64;
    let realized = |c: f64| -> (usize, Vec<Allocation>) {
        let alloc: Vec<Allocation> = trained
            .iter()
            .map(|l| match l.mode {
                Mode::Dense => Allocation::Dense,
                Mode::LowRank => scaled_allocation(c * l.ratio, l.m, l.n, switch),
            })
            .collect();
        let total = alloc.iter().zip(trained).map(|(a, l)| a.params(l.m, l.n)).sum();
        (total, alloc)
    };
    let fits = |p: usize| p as f64 <= budget * (1.0 + 1e-12);

    let (floor, _) = realized(0.0);
    if !fits(floor) {
        let dense: Vec<&str> = trained
            .iter()
            .filter(|l| l.mode == Mode::Dense)
            .map(|l| l.name.as_str())
            .collect();
        return Err(AraError::Input(format!(
            "target ratio {target} is unreachable: dense layers [{}] plus rank 1 elsewhere already store {floor} of {c_total} parameters; lower lambda1 or raise the target",
            dense.join(", ")
        )));
    }
    let (at_one, alloc_one) = realized(1.0);
    if at_one as f64 == budget {
        return Ok(Rescaled {
            scale: 1.0,
            allocation: alloc_one,
        });
    }
    // beyond `hi` every low-rank layer is dense or at full rank
    let hi = trained
        .iter()
        .filter(|l| l.mode == Mode::LowRank && l.ratio > 0.0)
        .map(|l| l.m.min(l.n) as f64 * (l.m + l.n) as f64 / ((l.m * l.n) as f64 * l.ratio))
        .fold(1.0f64, f64::max)
        .max(
            trained
                .iter()
                .filter(|l| l.mode == Mode::LowRank && l.ratio > 0.0)
                .map(|l| 1.0 / l.ratio)
                .fold(1.0f64, f64::max),
        );
    let (at_hi, alloc_hi) = realized(hi);
    if fits(at_hi) {
        return Ok(Rescaled {
            scale: hi,
            allocation: alloc_hi,
        });
    }
    let (mut lo, mut up) = (0.0, hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + up);
        if fits(realized(mid).0) {
            lo = mid;
        } else {
            up = mid;
        }
    }
    Ok(Rescaled {
        scale: lo,
        allocation: realized(lo).1,
    })
}

fn capacity_at(f: &WhitenedFactorization, alloc: Allocation) -> f64 {
    match alloc {
        Allocation::Dense => 1.0,
        Allocation::LowRank(r) => {
            let l0 = f.total_norm();
            if l0 == 0.0 {
                1.0
            } else {
                let lr = f.truncation_loss(r.min(f.rank_capacity())).expect("rank capped");
                ((l0 - lr) / l0).clamp(0.0, 1.0)
            }
        }
    }
}

fn build_report(
    method: Method,
    steps: Vec<StepRecord>,
    trained: Vec<TrainedLayer>,
    names: &[String],
    factors: &[WhitenedFactorization],
    scale: f64,
    allocation: &[Allocation],
) -> TrainRun {
    let trained_ratio = |i: usize| trained.get(i).map(|t| t.ratio);
    let rows: Vec<LayerAllocation> = allocation
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let f = &factors[i];
            LayerAllocation {
                name: names[i].clone(),
                m: f.m,
                n: f.n,
                mode: a.mode(),
                rank: a.rank(),
                ratio: a.params(f.m, f.n) as f64 / (f.m * f.n) as f64,
                capacity: capacity_at(f, a),
                trained_ratio: trained_ratio(i),
            }
        })
        .collect();
    let compressible: usize = factors.iter().map(|f| f.m * f.n).sum();
    let stored: usize = allocation
        .iter()
        .zip(factors)
        .map(|(a, f)| a.params(f.m, f.n))
        .sum();
    TrainRun {
        method,
        steps,
        trained,
        scale,
        allocation: rows,
        compressible_params: compressible,
        stored_params: stored,
        realized_ratio: stored as f64 / compressible as f64,
        clamped_steps: Vec::new(),
        clamped_ranks: Vec::new(),
    }
}

/// ARA training followed by rescaling to the target.
pub fn train<N: CompressibleNet + ?Sized>(
    net: &N,
    factors: &[WhitenedFactorization],
    calib: &CalibrationSet,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    run_method(Method::Ara, net, factors, calib, cfg)
}

/// Any method, sharing factorizations, calibration windows, seed and
/// rescaling.
pub fn run_method<N: CompressibleNet + ?Sized>(
    method: Method,
    net: &N,
    factors: &[WhitenedFactorization],
    calib: &CalibrationSet,
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    let names: Vec<String> = (0..net.layer_count()).map(|i| net.layer_name(i).to_string()).collect();
    if method == Method::Uniform {
        let shapes: Vec<(usize, usize)> = factors.iter().map(|f| (f.m, f.n)).collect();
        let uni = uniform_allocate(&shapes, cfg.target_ratio)?;
        let alloc: Vec<Allocation> = uni.ranks.iter().map(|&r| Allocation::LowRank(r)).collect();
        let mut run = build_report(method, Vec::new(), Vec::new(), &names, factors, 1.0, &alloc);
        run.clamped_ranks = uni.clamped.iter().map(|&i| names[i].clone()).collect();
        return Ok(run);
    }
    let (steps, trained, clamped) = train_masks(net, factors, calib, cfg, method)?;
    let switch = method == Method::Ara && cfg.dense_switch;
    let rescaled = rescale_to_target(&trained, cfg.target_ratio, switch)?;
    let mut run = build_report(method, steps, trained, &names, factors, rescaled.scale, &rescaled.allocation);
    run.clamped_steps = clamped;
    Ok(run)
}

/// Compressed copy of `model`: dense layers keep their weights unchanged,
/// low-rank layers store the truncated factor pair.
pub fn materialize(model: &Model, factors: &[WhitenedFactorization], run: &TrainRun) -> Result<Model> {
    if run.allocation.len() != model.layers.len() || factors.len() != model.layers.len() {
        return Err(AraError::dim("allocation does not match the model's layers"));
    }
    let mut out = model.clone();
    for ((layer, row), f) in out.layers.iter_mut().zip(&run.allocation).zip(factors) {
        if let (Mode::LowRank, Some(r)) = (row.mode, row.rank) {
            let pair = f.truncate(r)?;
            *layer = Linear {
                name: layer.name.clone(),
                out_dim: layer.out_dim,
                in_dim: layer.in_dim,
                weights: LinearWeights::LowRank {
                    wu: pair.wu,
                    wv: pair.wv,
                },
            };
        }
    }
    Ok(out)
}
