//! Desk-scale quantization-aware training experiments.
//!
//! Six presets mirror the quantization ladder on a tiny encoder and a
//! synthetic sequence-classification task:
//!
//! | id | weights                                            |
//! |----|----------------------------------------------------|
//! | E0 | float32 baseline                                   |
//! | E1 | 2-bit asymmetric, per-channel, scale backprop      |
//! | E2 | E1 + static clip + block-64 sub-channels           |
//! | E3 | 1-bit asymmetric + static clip                     |
//! | E4 | 1-bit absmean, per-channel                         |
//! | E5 | E4 + block-64 sub-channels                         |
//!
//! The toy model is `input proj -> N x (linear -> relu -> layer norm) ->
//! mean pool -> classifier`; only the inner dense blocks are quantized,
//! the first and last projections stay float. Quantized runs get a longer
//! step budget (1.35x at 2 bits, 2.23x at 1 bit), matching the relative
//! training lengths the full-scale recipes need. Runs are deterministic
//! per seed; a diverging run is a reported outcome, not an error.

mod data;

pub use data::{synth_dataset, Dataset, INPUT_DIM};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::time::Instant;

use crate::autodiff::{optim::Adam, FakeQuantOpts, Graph, NodeId, SteKind, Tensor};
use crate::error::{Error, Result};
use crate::modelpack::{size_report, LayerSpec, MetaDtype, ModelManifest, SizeReport};
use crate::quant::QuantScheme;

/// A run counts as diverged when its final accuracy is not above chance by
/// at least this margin (or its loss is non-finite).
pub const DIVERGENCE_MARGIN: f64 = 0.1;

/// Experiment identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExpId {
    E0,
    E1,
    E2,
    E3,
    E4,
    E5,
}

impl ExpId {
    pub const ALL: [ExpId; 6] = [
        ExpId::E0,
        ExpId::E1,
        ExpId::E2,
        ExpId::E3,
        ExpId::E4,
        ExpId::E5,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "e0" => Ok(Self::E0),
            "e1" => Ok(Self::E1),
            "e2" => Ok(Self::E2),
            "e3" => Ok(Self::E3),
            "e4" => Ok(Self::E4),
            "e5" => Ok(Self::E5),
            other => Err(Error::InvalidScheme(format!(
                "unknown experiment `{other}` (valid: E0..E5)"
            ))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::E0 => "E0",
            Self::E1 => "E1",
            Self::E2 => "E2",
            Self::E3 => "E3",
            Self::E4 => "E4",
            Self::E5 => "E5",
        }
    }

    /// Weight scheme of the experiment; `None` is the float baseline.
    pub fn scheme(&self) -> Option<QuantScheme> {
        match self {
            Self::E0 => None,
            Self::E1 => Some(QuantScheme::e1()),
            Self::E2 => Some(QuantScheme::e2()),
            Self::E3 => Some(QuantScheme::e3()),
            Self::E4 => Some(QuantScheme::e4()),
            Self::E5 => Some(QuantScheme::e5()),
        }
    }

    /// Step-budget multiplier relative to the float baseline, following
    /// the 200k/270k/446k iteration ratio of the full-scale recipes.
    pub fn steps_multiplier(&self) -> f64 {
        match self {
            Self::E0 => 1.0,
            Self::E1 | Self::E2 => 1.35,
            Self::E3 | Self::E4 | Self::E5 => 2.23,
        }
    }
}

/// Toy encoder dimensions.
#[derive(Debug, Clone, Copy)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden: usize,
    /// Number of quantized dense blocks.
    pub blocks: usize,
    pub classes: usize,
    pub seq_len: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            input_dim: INPUT_DIM,
            hidden: 128,
            blocks: 2,
            classes: 2,
            seq_len: 8,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct OptimHyper {
    pub lr: f64,
    pub batch: usize,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            batch: 32,
        }
    }
}

/// Full description of one experiment run.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub exp: ExpId,
    pub seed: u64,
    pub dims: ModelDims,
    /// Baseline (E0) step count; quantized runs scale it by
    /// [`ExpId::steps_multiplier`].
    pub base_steps: usize,
    pub train_examples: usize,
    pub eval_examples: usize,
    pub optim: OptimHyper,
    /// Evaluate every this many steps (and once at the end).
    pub eval_every: usize,
    pub scale_backprop: bool,
    pub ste: SteKind,
}

impl ExperimentConfig {
    pub fn new(exp: ExpId, seed: u64) -> Self {
        Self {
            exp,
            seed,
            dims: ModelDims::default(),
            base_steps: 300,
            train_examples: 4096,
            eval_examples: 1024,
            optim: OptimHyper::default(),
            eval_every: 100,
            scale_backprop: true,
            ste: SteKind::Identity,
        }
    }

    /// Actual step budget for this experiment.
    pub fn steps(&self) -> usize {
        (self.base_steps as f64 * self.exp.steps_multiplier()).round() as usize
    }

    fn quant_opts(&self) -> FakeQuantOpts {
        FakeQuantOpts {
            scale_backprop: self.scale_backprop,
            ste: self.ste,
        }
    }
}

/// Outcome of one run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub exp: ExpId,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub eval_acc: f64,
    /// Set iff the loss is non-finite or the final accuracy is not above
    /// chance + [`DIVERGENCE_MARGIN`].
    pub diverged: bool,
    pub wall_time_s: f64,
    pub size: SizeReport,
}

// ---------------------------------------------------------------------------
// Toy model
// ---------------------------------------------------------------------------

struct ToyModel {
    params: Vec<Tensor>,
    dims: ModelDims,
}

// Parameter layout: proj_w, proj_b, then per block (w, b, ln_gain,
// ln_bias), then head_w, head_b.
const BLOCK_PARAMS: usize = 4;

impl ToyModel {
    fn init(dims: ModelDims, rng: &mut ChaCha8Rng) -> Self {
        let mut params = Vec::new();
        params.push(init_matrix(rng, dims.hidden, dims.input_dim));
        params.push(Tensor::zeros((1, dims.hidden)).with_grad());
        for _ in 0..dims.blocks {
            params.push(init_matrix(rng, dims.hidden, dims.hidden));
            params.push(Tensor::zeros((1, dims.hidden)).with_grad());
            params.push(ones(dims.hidden).with_grad());
            params.push(Tensor::zeros((1, dims.hidden)).with_grad());
        }
        params.push(init_matrix(rng, dims.classes, dims.hidden));
        params.push(Tensor::zeros((1, dims.classes)).with_grad());
        Self { params, dims }
    }

    fn block_weight_index(&self, block: usize) -> usize {
        2 + block * BLOCK_PARAMS
    }

    /// Run the forward pass; returns per-parameter node ids and the logits.
    fn forward(
        &self,
        g: &mut Graph,
        x: Tensor,
        quant: Option<(&QuantScheme, FakeQuantOpts)>,
    ) -> Result<(Vec<NodeId>, NodeId)> {
        let param_ids: Vec<NodeId> = self.params.iter().map(|p| g.leaf(p.clone())).collect();
        let x = g.leaf(x);
        let mut h = g.linear(x, param_ids[0])?;
        h = g.add_row_bias(h, param_ids[1])?;
        for block in 0..self.dims.blocks {
            let base = self.block_weight_index(block);
            let w = match quant {
                None => param_ids[base],
                Some((scheme, opts)) => g.fake_quant(param_ids[base], scheme, opts)?,
            };
            h = g.linear(h, w)?;
            h = g.add_row_bias(h, param_ids[base + 1])?;
            h = g.relu(h);
            h = g.layer_norm(h, param_ids[base + 2], param_ids[base + 3], 1e-5)?;
        }
        let pooled = g.mean_pool(h, self.dims.seq_len)?;
        let mut logits = g.linear(pooled, param_ids[self.params.len() - 2])?;
        logits = g.add_row_bias(logits, param_ids[self.params.len() - 1])?;
        Ok((param_ids, logits))
    }

    /// Layer manifest for size accounting: block weights carry the scheme,
    /// everything else stays float.
    fn manifest(&self, scheme: Option<QuantScheme>) -> ModelManifest {
        let d = &self.dims;
        let mut layers = vec![
            LayerSpec::float("proj.w", vec![d.hidden, d.input_dim]),
            LayerSpec::float("proj.b", vec![1, d.hidden]),
        ];
        for i in 0..d.blocks {
            let w_shape = vec![d.hidden, d.hidden];
            layers.push(match scheme {
                Some(s) => LayerSpec::quantized(format!("block{i}.w"), w_shape, s),
                None => LayerSpec::float(format!("block{i}.w"), w_shape),
            });
            layers.push(LayerSpec::float(format!("block{i}.b"), vec![1, d.hidden]));
            layers.push(LayerSpec::float(
                format!("block{i}.ln_gain"),
                vec![1, d.hidden],
            ));
            layers.push(LayerSpec::float(
                format!("block{i}.ln_bias"),
                vec![1, d.hidden],
            ));
        }
        layers.push(LayerSpec::float("head.w", vec![d.classes, d.hidden]));
        layers.push(LayerSpec::float("head.b", vec![1, d.classes]));
        ModelManifest { layers }
    }
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::new(data, (rows, cols)).unwrap().with_grad()
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![1.0; n], (1, n)).unwrap()
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Train the toy model under the experiment's scheme and report metrics.
/// Identical configs produce identical reports on the same platform.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let start = Instant::now();
    let dims = cfg.dims;
    let all = data::synth_dataset_with_dim(
        cfg.seed,
        cfg.train_examples + cfg.eval_examples,
        dims.seq_len,
        dims.classes,
        dims.input_dim,
    );
    let (train, eval) = all.split(cfg.train_examples);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
    let mut model = ToyModel::init(dims, &mut rng);
    let mut adam = Adam::new(cfg.optim.lr);
    let scheme = cfg.exp.scheme();
    let opts = cfg.quant_opts();

    let steps = cfg.steps();
    let mut final_loss = f64::NAN;
    for _step in 0..steps {
        let (x, labels) = sample_batch(&train, cfg.optim.batch, &mut rng);
        let mut g = Graph::new();
        let quant = scheme.as_ref().map(|s| (s, opts));
        let (param_ids, logits) = model.forward(&mut g, x, quant)?;
        let loss = g.softmax_cross_entropy(logits, &labels)?;
        final_loss = g.value(loss).item()?;
        if !final_loss.is_finite() {
            // Diverged: stop training, report what happened.
            break;
        }
        let grads = g.backward(loss)?;
        for (i, id) in param_ids.iter().enumerate() {
            if let Some(grad) = grads.get(*id) {
                adam.step(i, &mut model.params[i], grad)?;
            }
        }
    }

    let eval_acc = evaluate(&model, &eval, scheme.as_ref(), opts)?;
    let chance = 1.0 / dims.classes as f64;
    let diverged = !final_loss.is_finite() || eval_acc <= chance + DIVERGENCE_MARGIN;
    let size = size_report(&model.manifest(scheme), MetaDtype::F32)?;

    Ok(RunReport {
        exp: cfg.exp,
        seed: cfg.seed,
        steps,
        final_loss,
        eval_acc,
        diverged,
        wall_time_s: start.elapsed().as_secs_f64(),
        size,
    })
}

fn sample_batch(data: &Dataset, batch: usize, rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let stride = data.seq_len * data.input_dim;
    let mut x = Vec::with_capacity(batch * stride);
    let mut labels = Vec::with_capacity(batch);
    for _ in 0..batch {
        let i = rng.random_range(0..data.n);
        let (tokens, label) = data.example(i);
        x.extend_from_slice(tokens);
        labels.push(label);
    }
    let tensor = Tensor::new(x, (batch * data.seq_len, data.input_dim)).unwrap();
    (tensor, labels)
}

/// Accuracy of the (fake-quantized, when applicable) model on a dataset.
fn evaluate(
    model: &ToyModel,
    data: &Dataset,
    scheme: Option<&QuantScheme>,
    opts: FakeQuantOpts,
) -> Result<f64> {
    let stride = data.seq_len * data.input_dim;
    let chunk = 256usize;
    let mut correct = 0usize;
    let mut done = 0usize;
    while done < data.n {
        let take = chunk.min(data.n - done);
        let x = Tensor::new(
            data.inputs[done * stride..(done + take) * stride].to_vec(),
            (take * data.seq_len, data.input_dim),
        )?;
        let mut g = Graph::new();
        let quant = scheme.map(|s| (s, opts));
        let (_, logits) = model.forward(&mut g, x, quant)?;
        let v = g.value(logits);
        let (_, classes) = v.shape();
        for (row, i) in v.data().chunks(classes).zip(done..done + take) {
            // total_cmp keeps the argmax well-defined even when a diverged
            // model emits NaN logits.
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(c, _)| c)
                .unwrap();
            if pred == data.labels[i] {
                correct += 1;
            }
        }
        done += take;
    }
    Ok(correct as f64 / data.n as f64)
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

/// CSV with header
/// `exp_id,seed,steps,final_loss,eval_acc,diverged,total_bits,reduction`.
pub fn report_csv(reports: &[RunReport]) -> String {
    let mut out =
        String::from("exp_id,seed,steps,final_loss,eval_acc,diverged,total_bits,reduction\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.4},{},{},{}",
            r.exp.label(),
            r.seed,
            r.steps,
            r.final_loss,
            r.eval_acc,
            r.diverged,
            r.size.total_bits_quantized,
            reduction_label(r),
        );
    }
    out
}

/// Aligned text table, one row per run.
pub fn report_table(reports: &[RunReport]) -> String {
    let mut out = format!(
        "{:<4} {:>6} {:>7} {:>12} {:>9} {:>9} {:>14} {:>10}\n",
        "exp", "seed", "steps", "final_loss", "eval_acc", "diverged", "total_bits", "reduction"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<4} {:>6} {:>7} {:>12.6} {:>9.4} {:>9} {:>14} {:>10}",
            r.exp.label(),
            r.seed,
            r.steps,
            r.final_loss,
            r.eval_acc,
            r.diverged,
            r.size.total_bits_quantized,
            reduction_label(r),
        );
    }
    out
}

fn reduction_label(r: &RunReport) -> String {
    if r.exp == ExpId::E0 {
        "N/A".to_string()
    } else {
        format!("{:.2}x", r.size.reduction_factor)
    }
}
