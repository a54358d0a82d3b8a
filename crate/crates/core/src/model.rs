//! Layer assembly: per-layer view encoders, local and global channels,
//! adaptive local-global integration, task heads and losses.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::global::{
    candidate_set, dense_global_aggregate, global_aggregate, global_view_attention, sample,
    sample_scores, sampled_attribute_attention, CandidateSet, GlobalAttentionParams,
    SamplingStrategy,
};
use crate::attention::local::{
    local_aggregate, local_integrate, local_scores, pair_scores, LocalAttentionParams,
};
use crate::attention::{local_pairs, PairSet};
use crate::autograd::{Tape, Tensor};
use crate::encodings::{EncodingSet, PeKind, SeKind};
use crate::error::{DegtaError, Result};
use crate::graph::Graph;
use crate::linalg::Matrix;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Model variants used by the ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    CoupledAttention,
    SummedIntegration,
    NoGlobal,
    DenseGlobal,
}

impl std::str::FromStr for Ablation {
    type Err = DegtaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "coupled_attention" => Ok(Ablation::CoupledAttention),
            "summed_integration" => Ok(Ablation::SummedIntegration),
            "no_global" => Ok(Ablation::NoGlobal),
            "dense_global" => Ok(Ablation::DenseGlobal),
            other => Err(DegtaError::InvalidParameter(format!(
                "unknown ablation '{other}'"
            ))),
        }
    }
}

/// Prediction task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    NodeClassification,
    GraphClassification,
    GraphRegression,
}

impl Task {
    pub fn is_graph_level(self) -> bool {
        matches!(self, Task::GraphClassification | Task::GraphRegression)
    }
}

/// Full hyperparameter set of one model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeGTAConfig {
    /// Receptive field of the initial encodings.
    pub k: usize,
    /// Attribute width `d` used throughout the layers.
    pub d: usize,
    /// Encoded structural / positional widths (small by design).
    pub d_s: usize,
    pub d_p: usize,
    /// Attention hidden widths `d'` and `d''`.
    pub d_hidden: usize,
    pub d_attr_hidden: usize,
    pub layers: usize,
    pub pe_kind: PeKind,
    pub se_kind: SeKind,
    /// Gaussian bandwidth for the Jaccard positional encoding.
    pub jaccard_bandwidth: f64,
    pub sampling: SamplingStrategy,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub dropout: f64,
    pub residual: bool,
    pub ablation: Ablation,
    /// Use the fixed pairwise Jaccard matrix as local positional logits.
    pub pairwise_positional_logits: bool,
    /// Literal reading of the sampling softmax: softmax over all entries of
    /// the candidate-masked scores instead of a masked softmax.
    pub literal_sampling_softmax: bool,
}

impl Default for DeGTAConfig {
    fn default() -> Self {
        DeGTAConfig {
            k: 8,
            d: 64,
            d_s: 8,
            d_p: 8,
            d_hidden: 16,
            d_attr_hidden: 64,
            layers: 2,
            pe_kind: PeKind::Jaccard,
            se_kind: SeKind::Rwse,
            jaccard_bandwidth: 1.0,
            sampling: SamplingStrategy::TopK { k: 8 },
            learning_rate: 0.01,
            weight_decay: 5e-4,
            epochs: 200,
            seed: 0,
            dropout: 0.0,
            residual: false,
            ablation: Ablation::Full,
            pairwise_positional_logits: false,
            literal_sampling_softmax: false,
        }
    }
}

impl DeGTAConfig {
    /// Default configuration with receptive field `k` (also sets the
    /// encoded widths and the top-k sampling cardinality).
    pub fn with_k(k: usize) -> Self {
        DeGTAConfig {
            k,
            d_s: k,
            d_p: k,
            sampling: SamplingStrategy::TopK { k },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("k", self.k),
            ("d", self.d),
            ("d_s", self.d_s),
            ("d_p", self.d_p),
            ("d_hidden", self.d_hidden),
            ("d_attr_hidden", self.d_attr_hidden),
            ("layers", self.layers),
        ] {
            if v < 1 {
                return Err(DegtaError::InvalidParameter(format!(
                    "{name} must be at least 1"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DegtaError::InvalidParameter(format!(
                "dropout must lie in [0,1), got {}",
                self.dropout
            )));
        }
        if self.pairwise_positional_logits && self.pe_kind != PeKind::Jaccard {
            return Err(DegtaError::InvalidParameter(
                "pairwise positional logits require the jaccard positional encoding".into(),
            ));
        }
        self.sampling.validate()
    }
}

/// Two-layer perceptron weights.
#[derive(Debug, Clone)]
pub struct MlpParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

impl<T> MlpParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> MlpParams<U> {
        MlpParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'static str, &'a T)) {
        f("w1", &self.w1);
        f("b1", &self.b1);
        f("w2", &self.w2);
        f("b2", &self.b2);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&'static str, &mut T)) {
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
        f("w2", &mut self.w2);
        f("b2", &mut self.b2);
    }
}

fn mlp_forward(x: &Tensor, p: &MlpParams<Tensor>) -> Result<Tensor> {
    let h = x.matmul(&p.w1.transpose())?.add(&p.b1)?.leaky_relu(LEAKY_SLOPE);
    h.matmul(&p.w2.transpose())?.add(&p.b2)
}

/// Attention parameters of one layer, decoupled or coupled.
#[derive(Debug, Clone)]
pub enum AttnParams<T> {
    Decoupled {
        local: LocalAttentionParams<T>,
        global: Option<GlobalAttentionParams<T>>,
    },
    Coupled {
        w_cat: T,
        q_cat: T,
        w_c_q: T,
        w_c_k: T,
    },
}

impl<T> AttnParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> AttnParams<U> {
        match self {
            AttnParams::Decoupled { local, global } => AttnParams::Decoupled {
                local: local.map(&mut f),
                global: global.as_ref().map(|g| g.map(&mut f)),
            },
            AttnParams::Coupled {
                w_cat,
                q_cat,
                w_c_q,
                w_c_k,
            } => AttnParams::Coupled {
                w_cat: f(w_cat),
                q_cat: f(q_cat),
                w_c_q: f(w_c_q),
                w_c_k: f(w_c_k),
            },
        }
    }
}

/// All learnable weights of one layer.
#[derive(Debug, Clone)]
pub struct LayerParams<T> {
    pub enc_s: MlpParams<T>,
    pub enc_p: MlpParams<T>,
    pub enc_a: MlpParams<T>,
    pub attn: AttnParams<T>,
    pub w_l: Option<T>,
    pub w_g: Option<T>,
}

impl<T> LayerParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LayerParams<U> {
        LayerParams {
            enc_s: self.enc_s.map(&mut f),
            enc_p: self.enc_p.map(&mut f),
            enc_a: self.enc_a.map(&mut f),
            attn: self.attn.map(&mut f),
            w_l: self.w_l.as_ref().map(&mut f),
            w_g: self.w_g.as_ref().map(&mut f),
        }
    }
}

/// All learnable weights of one model.
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub input_proj: Option<(T, T)>,
    pub layers: Vec<LayerParams<T>>,
    pub head_w: T,
    pub head_b: T,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            input_proj: self.input_proj.as_ref().map(|(w, b)| (f(w), f(b))),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
        }
    }

    /// Visits every parameter in a fixed order with a hierarchical name.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        if let Some((w, b)) = &self.input_proj {
            f("input_proj.w".into(), w);
            f("input_proj.b".into(), b);
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = format!("layers.{i}");
            layer.enc_s.visit(&mut |n, t| f(format!("{pre}.enc_s.{n}"), t));
            layer.enc_p.visit(&mut |n, t| f(format!("{pre}.enc_p.{n}"), t));
            layer.enc_a.visit(&mut |n, t| f(format!("{pre}.enc_a.{n}"), t));
            match &layer.attn {
                AttnParams::Decoupled { local, global } => {
                    local.visit(&mut |n, t| f(format!("{pre}.local.{n}"), t));
                    if let Some(g) = global {
                        g.visit(&mut |n, t| f(format!("{pre}.global.{n}"), t));
                    }
                }
                AttnParams::Coupled {
                    w_cat,
                    q_cat,
                    w_c_q,
                    w_c_k,
                } => {
                    f(format!("{pre}.coupled.w_cat"), w_cat);
                    f(format!("{pre}.coupled.q_cat"), q_cat);
                    f(format!("{pre}.coupled.w_c_q"), w_c_q);
                    f(format!("{pre}.coupled.w_c_k"), w_c_k);
                }
            }
            if let Some(w) = &layer.w_l {
                f(format!("{pre}.w_l"), w);
            }
            if let Some(w) = &layer.w_g {
                f(format!("{pre}.w_g"), w);
            }
        }
        f("head.w".into(), &self.head_w);
        f("head.b".into(), &self.head_b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        if let Some((w, b)) = &mut self.input_proj {
            f("input_proj.w".into(), w);
            f("input_proj.b".into(), b);
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let pre = format!("layers.{i}");
            layer.enc_s.visit_mut(&mut |n, t| f(format!("{pre}.enc_s.{n}"), t));
            layer.enc_p.visit_mut(&mut |n, t| f(format!("{pre}.enc_p.{n}"), t));
            layer.enc_a.visit_mut(&mut |n, t| f(format!("{pre}.enc_a.{n}"), t));
            match &mut layer.attn {
                AttnParams::Decoupled { local, global } => {
                    local.visit_mut(&mut |n, t| f(format!("{pre}.local.{n}"), t));
                    if let Some(g) = global {
                        g.visit_mut(&mut |n, t| f(format!("{pre}.global.{n}"), t));
                    }
                }
                AttnParams::Coupled {
                    w_cat,
                    q_cat,
                    w_c_q,
                    w_c_k,
                } => {
                    f(format!("{pre}.coupled.w_cat"), w_cat);
                    f(format!("{pre}.coupled.q_cat"), q_cat);
                    f(format!("{pre}.coupled.w_c_q"), w_c_q);
                    f(format!("{pre}.coupled.w_c_k"), w_c_k);
                }
            }
            if let Some(w) = &mut layer.w_l {
                f(format!("{pre}.w_l"), w);
            }
            if let Some(w) = &mut layer.w_g {
                f(format!("{pre}.w_g"), w);
            }
        }
        f("head.w".into(), &mut self.head_w);
        f("head.b".into(), &mut self.head_b);
    }
}

impl ModelParams<Matrix> {
    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn to_tape(&self, tape: &Tape) -> ModelParams<Tensor> {
        self.map(|m| tape.var(m.clone()))
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, m| n += m.data().len());
        n
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random::<f64>() * 2.0 * a - a)
            .collect(),
    )
}

fn bias(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Matrix {
    let a = 1.0 / (d_in as f64).sqrt();
    Matrix::from_vec(
        1,
        d_out,
        (0..d_out).map(|_| rng.random::<f64>() * 2.0 * a - a).collect(),
    )
}

fn init_mlp(d_in: usize, d_out: usize, rng: &mut impl Rng) -> MlpParams<Matrix> {
    MlpParams {
        w1: glorot(d_out, d_in, rng),
        b1: bias(d_in, d_out, rng),
        w2: glorot(d_out, d_out, rng),
        b2: bias(d_out, d_out, rng),
    }
}

fn init_local(cfg: &DeGTAConfig, rng: &mut impl Rng) -> LocalAttentionParams<Matrix> {
    LocalAttentionParams {
        w_str: glorot(cfg.d_hidden, cfg.d_s, rng),
        w_pos: glorot(cfg.d_hidden, cfg.d_p, rng),
        w_atr: glorot(cfg.d_attr_hidden, cfg.d, rng),
        q_s: glorot(2 * cfg.d_hidden, 1, rng),
        q_p: glorot(2 * cfg.d_hidden, 1, rng),
        q_a: glorot(2 * cfg.d_attr_hidden, 1, rng),
        view_logits: Matrix::zeros(1, 3),
    }
}

fn init_global(cfg: &DeGTAConfig, rng: &mut impl Rng) -> GlobalAttentionParams<Matrix> {
    GlobalAttentionParams {
        w_s_q: glorot(cfg.d_s, cfg.d_hidden, rng),
        w_s_k: glorot(cfg.d_s, cfg.d_hidden, rng),
        w_p_q: glorot(cfg.d_p, cfg.d_hidden, rng),
        w_p_k: glorot(cfg.d_p, cfg.d_hidden, rng),
        w_a_q: glorot(cfg.d, cfg.d_attr_hidden, rng),
        w_a_k: glorot(cfg.d, cfg.d_attr_hidden, rng),
        view_logits: Matrix::zeros(1, 3),
    }
}

/// One trained or trainable model instance.
#[derive(Debug, Clone)]
pub struct DeGTAModel {
    pub config: DeGTAConfig,
    pub params: ModelParams<Matrix>,
    pub d_raw: usize,
    pub num_outputs: usize,
    pub task: Task,
}

impl DeGTAModel {
    /// Initializes from the config's own seed.
    pub fn new_seeded(
        config: DeGTAConfig,
        d_raw: usize,
        num_outputs: usize,
        task: Task,
    ) -> Result<DeGTAModel> {
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(config.seed);
        DeGTAModel::new(config, d_raw, num_outputs, task, &mut rng)
    }

    pub fn new(
        config: DeGTAConfig,
        d_raw: usize,
        num_outputs: usize,
        task: Task,
        rng: &mut impl Rng,
    ) -> Result<DeGTAModel> {
        config.validate()?;
        let input_proj = if d_raw != config.d {
            Some((glorot(config.d, d_raw, rng), bias(d_raw, config.d, rng)))
        } else {
            None
        };
        let d_cat = config.d_s + config.d_p + config.d;
        let layers = (0..config.layers)
            .map(|_| {
                let attn = match config.ablation {
                    Ablation::CoupledAttention => AttnParams::Coupled {
                        w_cat: glorot(config.d_hidden, d_cat, rng),
                        q_cat: glorot(2 * config.d_hidden, 1, rng),
                        w_c_q: glorot(d_cat, config.d_hidden, rng),
                        w_c_k: glorot(d_cat, config.d_hidden, rng),
                    },
                    Ablation::NoGlobal => AttnParams::Decoupled {
                        local: init_local(&config, rng),
                        global: None,
                    },
                    _ => AttnParams::Decoupled {
                        local: init_local(&config, rng),
                        global: Some(init_global(&config, rng)),
                    },
                };
                let summed = config.ablation == Ablation::SummedIntegration;
                let no_global = config.ablation == Ablation::NoGlobal;
                LayerParams {
                    enc_s: init_mlp(config.k, config.d_s, rng),
                    enc_p: init_mlp(config.k, config.d_p, rng),
                    enc_a: init_mlp(config.d, config.d, rng),
                    attn,
                    w_l: (!summed).then(|| glorot(config.d, config.d, rng)),
                    w_g: (!summed && !no_global).then(|| glorot(config.d, config.d, rng)),
                }
            })
            .collect();
        Ok(DeGTAModel {
            params: ModelParams {
                input_proj,
                layers,
                head_w: glorot(num_outputs, config.d, rng),
                head_b: bias(config.d, num_outputs, rng),
            },
            config,
            d_raw,
            num_outputs,
            task,
        })
    }
}

/// Per-graph structures every forward pass reuses.
pub struct ModelInputs {
    pub encodings: EncodingSet,
    pub local: PairSet,
    pub candidates: CandidateSet,
}

impl ModelInputs {
    pub fn prepare(g: &Graph, cfg: &DeGTAConfig) -> Result<ModelInputs> {
        let encodings = EncodingSet::compute(
            g,
            cfg.pe_kind,
            cfg.se_kind,
            cfg.k,
            cfg.jaccard_bandwidth,
        )?;
        Ok(ModelInputs {
            encodings,
            local: local_pairs(g),
            candidates: candidate_set(g),
        })
    }
}

/// Per-layer intermediate values kept for the interpretability export and
/// the normalization tests.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub local_weights: Option<[f64; 3]>,
    pub global_weights: Option<[f64; 3]>,
    pub local_pairs: PairSet,
    pub local_s: Vec<f64>,
    pub local_p: Vec<f64>,
    pub local_a: Vec<f64>,
    pub local_zhat: Vec<f64>,
    pub global_pairs: PairSet,
    pub global_us: Vec<f64>,
    pub global_up: Vec<f64>,
    pub global_ua: Vec<f64>,
    pub global_zhat: Vec<f64>,
    pub mask_values: Option<Matrix>,
    pub empty_rows: Vec<bool>,
}

/// Result of one forward pass.
pub struct ForwardPass {
    /// Node embeddings after the last layer, `N x d`.
    pub embeddings: Tensor,
    /// Node logits `N x C`, or the pooled graph-level output `1 x C`.
    pub output: Tensor,
    pub traces: Option<Vec<LayerTrace>>,
    pub local_nanos: u128,
    pub global_nanos: u128,
}

fn triple(weights: &Tensor) -> [f64; 3] {
    let v = weights.value();
    [v[(0, 0)], v[(0, 1)], v[(0, 2)]]
}

/// Per-pair keep mask for attention-weight dropout: 0 with probability `p`,
/// `1/(1-p)` otherwise.
fn keep_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Matrix {
    let scale = 1.0 / (1.0 - p);
    Matrix::from_vec(
        len,
        1,
        (0..len)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect(),
    )
}

struct LayerOutcome {
    h_next: Tensor,
    trace: Option<LayerTrace>,
    local_nanos: u128,
    global_nanos: u128,
}

#[allow(clippy::too_many_arguments)]
fn layer_forward(
    cfg: &DeGTAConfig,
    layer: &LayerParams<Tensor>,
    inputs: &ModelInputs,
    s0: &Tensor,
    p0: &Tensor,
    h_prev: &Tensor,
    collect: bool,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<LayerOutcome> {
    let s_enc = mlp_forward(s0, &layer.enc_s)?;
    let p_enc = mlp_forward(p0, &layer.enc_p)?;
    let h_enc = mlp_forward(h_prev, &layer.enc_a)?;
    let n = h_enc.rows();
    let dropout_p = cfg.dropout;
    let make_keep = |len: usize, rng: &mut Option<&mut ChaCha8Rng>| -> Option<Matrix> {
        match rng.as_deref_mut() {
            Some(r) if dropout_p > 0.0 => Some(keep_mask(r, len, dropout_p)),
            _ => None,
        }
    };

    let (local_agg, global_agg, trace, local_nanos, global_nanos) = match &layer.attn {
        AttnParams::Decoupled { local, global } => {
            let t0 = Instant::now();
            let pairwise = cfg
                .pairwise_positional_logits
                .then_some(inputs.encodings.pairwise_jaccard.as_ref())
                .flatten();
            let scores = local_scores(
                &s_enc,
                &p_enc,
                &h_enc,
                &inputs.local,
                local,
                LEAKY_SLOPE,
                pairwise,
            )?;
            let (z, local_w) = local_integrate(&scores, &local.view_logits)?;
            let keep = make_keep(inputs.local.len(), &mut dropout_rng);
            let (local_agg, local_zhat) =
                local_aggregate(&z, &h_enc, &inputs.local, keep.as_ref())?;
            let local_nanos = t0.elapsed().as_nanos();

            let t1 = Instant::now();
            let (global_agg, gtrace, global_w) = match global {
                Some(gp) => {
                    let (u_s, u_p) = global_view_attention(&s_enc, &p_enc, gp)?;
                    let weights = gp.view_logits.row_softmax();
                    if cfg.ablation == Ablation::DenseGlobal {
                        let (agg, zhat, pairs) =
                            dense_global_aggregate(&u_s, &u_p, &h_enc, gp, &weights)?;
                        let g = collect.then(|| GlobalTraceParts {
                            pairs: pairs.clone(),
                            us: column(&u_s, &pairs),
                            up: column(&u_p, &pairs),
                            ua: vec![0.0; pairs.len()],
                            zhat: zhat.value().data().to_vec(),
                            mask: None,
                            empty: vec![false; n],
                        });
                        (agg, g, Some(triple(&weights)))
                    } else {
                        let (m, empty) = if cfg.literal_sampling_softmax {
                            let w_pos = weights.gather_entries(&[(0, 0)])?;
                            let w_str = weights.gather_entries(&[(0, 1)])?;
                            let cand = u_s
                                .tape()
                                .constant((*inputs.candidates.mask).clone());
                            let scores =
                                u_s.mul(&w_str)?.add(&u_p.mul(&w_pos)?)?.mul(&cand)?;
                            let m = scores.row_softmax();
                            let empty = inputs
                                .candidates
                                .lists
                                .iter()
                                .map(|l| l.is_empty())
                                .collect();
                            (m, empty)
                        } else {
                            sample_scores(&u_s, &u_p, &inputs.candidates, &weights)?
                        };
                        let mask = sample(&m, &inputs.candidates, cfg.sampling)?;
                        let u_a = sampled_attribute_attention(&h_enc, &mask.pairs, gp)?;
                        let keep = make_keep(mask.pairs.len(), &mut dropout_rng);
                        let (agg, zhat) = global_aggregate(
                            &u_s, &u_p, &u_a, &mask, &h_enc, &weights, keep.as_ref(),
                        )?;
                        let g = collect.then(|| GlobalTraceParts {
                            pairs: mask.pairs.clone(),
                            us: column(&u_s, &mask.pairs),
                            up: column(&u_p, &mask.pairs),
                            ua: u_a.value().data().to_vec(),
                            zhat: zhat.value().data().to_vec(),
                            mask: Some(mask.mask.value()),
                            empty: empty.clone(),
                        });
                        (agg, g, Some(triple(&weights)))
                    }
                }
                None => {
                    let zero = h_enc.tape().constant(Matrix::zeros(n, cfg.d));
                    (zero, None, None)
                }
            };
            let global_nanos = t1.elapsed().as_nanos();

            let trace = collect.then(|| {
                let g = gtrace.unwrap_or_else(|| GlobalTraceParts {
                    pairs: PairSet::from_lists(&vec![vec![]; n]),
                    us: vec![],
                    up: vec![],
                    ua: vec![],
                    zhat: vec![],
                    mask: None,
                    empty: vec![true; n],
                });
                LayerTrace {
                    local_weights: Some(triple(&local_w)),
                    global_weights: global_w,
                    local_pairs: inputs.local.clone(),
                    local_s: scores.s.value().data().to_vec(),
                    local_p: scores.p.value().data().to_vec(),
                    local_a: scores.a.value().data().to_vec(),
                    local_zhat: local_zhat.value().data().to_vec(),
                    global_pairs: g.pairs,
                    global_us: g.us,
                    global_up: g.up,
                    global_ua: g.ua,
                    global_zhat: g.zhat,
                    mask_values: g.mask,
                    empty_rows: g.empty,
                }
            });
            (local_agg, global_agg, trace, local_nanos, global_nanos)
        }
        AttnParams::Coupled {
            w_cat,
            q_cat,
            w_c_q,
            w_c_k,
        } => {
            let cat = s_enc.concat_cols(&p_enc)?.concat_cols(&h_enc)?;
            let t0 = Instant::now();
            let z = pair_scores(&cat, w_cat, q_cat, &inputs.local, LEAKY_SLOPE)?;
            let keep = make_keep(inputs.local.len(), &mut dropout_rng);
            let (local_agg, local_zhat) =
                local_aggregate(&z, &h_enc, &inputs.local, keep.as_ref())?;
            let local_nanos = t0.elapsed().as_nanos();

            let t1 = Instant::now();
            let q = cat.matmul(w_c_q)?;
            let k = cat.matmul(w_c_k)?;
            let scale = 1.0 / (cat.cols() as f64).sqrt();
            let u_c = q.scaled_attention(&k, scale)?;
            let (m, empty) = u_c.masked_row_softmax(&inputs.candidates.mask, true)?;
            let mask = sample(&m, &inputs.candidates, cfg.sampling)?;
            let pair_idx = mask.pairs.pairs();
            let zg = u_c.gather_entries(&pair_idx)?;
            let zhat = zg.segment_softmax(&mask.pairs.offsets)?;
            let gate = mask.mask.gather_entries(&pair_idx)?;
            let hj = h_enc.gather_rows(&mask.pairs.dst)?;
            let global_agg = hj
                .mul(&zhat.mul(&gate)?)?
                .scatter_add_rows(&mask.pairs.src, n)?;
            let global_nanos = t1.elapsed().as_nanos();

            let trace = collect.then(|| LayerTrace {
                local_weights: None,
                global_weights: None,
                local_pairs: inputs.local.clone(),
                local_s: vec![],
                local_p: vec![],
                local_a: vec![],
                local_zhat: local_zhat.value().data().to_vec(),
                global_pairs: mask.pairs.clone(),
                global_us: vec![],
                global_up: vec![],
                global_ua: vec![],
                global_zhat: zhat.value().data().to_vec(),
                mask_values: Some(mask.mask.value()),
                empty_rows: empty,
            });
            (local_agg, global_agg, trace, local_nanos, global_nanos)
        }
    };

    // Adaptive integration; the summed variant adds the channels directly.
    let mut h_next = match (&layer.w_l, &layer.w_g) {
        (Some(w_l), Some(w_g)) => local_agg
            .matmul(&w_l.transpose())?
            .add(&global_agg.matmul(&w_g.transpose())?)?,
        (Some(w_l), None) => local_agg.matmul(&w_l.transpose())?,
        _ => local_agg.add(&global_agg)?,
    };
    if cfg.residual {
        h_next = h_next.add(h_prev)?;
    }
    Ok(LayerOutcome {
        h_next,
        trace,
        local_nanos,
        global_nanos,
    })
}

struct GlobalTraceParts {
    pairs: PairSet,
    us: Vec<f64>,
    up: Vec<f64>,
    ua: Vec<f64>,
    zhat: Vec<f64>,
    mask: Option<Matrix>,
    empty: Vec<bool>,
}

fn column(u: &Tensor, pairs: &PairSet) -> Vec<f64> {
    let v = u.value();
    pairs
        .src
        .iter()
        .zip(&pairs.dst)
        .map(|(&i, &j)| v[(i, j)])
        .collect()
}

impl DeGTAModel {
    /// Forward pass with parameters already registered on `tape`.
    /// `dropout_rng` enables attention-weight dropout (training only).
    pub fn forward_with(
        &self,
        tape: &Tape,
        tp: &ModelParams<Tensor>,
        g: &Graph,
        inputs: &ModelInputs,
        collect: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        if g.features().cols() != self.d_raw {
            return Err(DegtaError::ShapeMismatch {
                op: "model_forward",
                expected: format!("{} feature columns", self.d_raw),
                got: format!("{}", g.features().cols()),
            });
        }
        let s0 = tape.constant(inputs.encodings.s.clone());
        let p0 = tape.constant(inputs.encodings.p.clone());
        let x = tape.constant(g.features().clone());
        let mut h = match &tp.input_proj {
            Some((w, b)) => x.matmul(&w.transpose())?.add(b)?,
            None => x,
        };

        let mut traces = collect.then(Vec::new);
        let mut local_nanos = 0u128;
        let mut global_nanos = 0u128;
        for layer in &tp.layers {
            let out = layer_forward(
                &self.config,
                layer,
                inputs,
                &s0,
                &p0,
                &h,
                collect,
                dropout_rng.as_deref_mut(),
            )?;
            h = out.h_next;
            local_nanos += out.local_nanos;
            global_nanos += out.global_nanos;
            if let (Some(ts), Some(tr)) = (&mut traces, out.trace) {
                ts.push(tr);
            }
        }

        let head = |x: &Tensor| -> Result<Tensor> {
            x.matmul(&tp.head_w.transpose())?.add(&tp.head_b)
        };
        let output = if self.task.is_graph_level() {
            head(&h.mean_rows())?
        } else {
            head(&h)?
        };
        Ok(ForwardPass {
            embeddings: h,
            output,
            traces,
            local_nanos,
            global_nanos,
        })
    }

    /// Registers parameters on a fresh view of `tape` and runs forward.
    pub fn forward(
        &self,
        tape: &Tape,
        g: &Graph,
        inputs: &ModelInputs,
        collect: bool,
    ) -> Result<(ForwardPass, ModelParams<Tensor>)> {
        let tp = self.params.to_tape(tape);
        let pass = self.forward_with(tape, &tp, g, inputs, collect, None)?;
        Ok((pass, tp))
    }
}

/// Cross-entropy over the labeled subset of node logits.
pub fn node_loss(output: &Tensor, labels: &[i64], idx: &[usize]) -> Result<Tensor> {
    let sel = output.gather_rows(idx)?;
    let lbl: Vec<usize> = idx.iter().map(|&i| labels[i] as usize).collect();
    sel.cross_entropy(&lbl)
}

/// Fraction of correctly argmax-classified rows among `idx`.
pub fn accuracy(logits: &Matrix, labels: &[i64], idx: &[usize]) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for &i in idx {
        let row = logits.row(i);
        let mut pred = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[pred] {
                pred = c;
            }
        }
        if pred as i64 == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / idx.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn small_graph(seed: u64) -> Graph {
        let mut rng = StdRng::seed_from_u64(seed);
        let n = 10;
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.random::<f64>() < 0.3 {
                    edges.push((u, v));
                }
            }
        }
        edges.push((0, 1));
        let feats = Matrix::from_vec(n, 3, (0..3 * n).map(|_| rng.random::<f64>()).collect());
        build_graph(&edges, feats).unwrap().0
    }

    fn small_config() -> DeGTAConfig {
        DeGTAConfig {
            d: 6,
            d_hidden: 4,
            d_attr_hidden: 5,
            ..DeGTAConfig::with_k(4)
        }
    }

    #[test]
    fn zero_wg_means_pure_local() {
        let g = small_graph(1);
        let cfg = small_config();
        let mut rng = StdRng::seed_from_u64(2);
        let mut model = DeGTAModel::new(cfg.clone(), 3, 2, Task::NodeClassification, &mut rng)
            .unwrap();
        let inputs = ModelInputs::prepare(&g, &cfg).unwrap();

        // Zero W_g: output equals the no-global path with shared weights.
        for layer in &mut model.params.layers {
            if let Some(wg) = &mut layer.w_g {
                *wg = Matrix::zeros(cfg.d, cfg.d);
            }
        }
        let tape = Tape::new();
        let (pass, _) = model.forward(&tape, &g, &inputs, false).unwrap();

        let mut local_only = model.clone();
        local_only.config.ablation = Ablation::NoGlobal;
        for layer in &mut local_only.params.layers {
            layer.w_g = None;
            if let AttnParams::Decoupled { global, .. } = &mut layer.attn {
                *global = None;
            }
        }
        let tape2 = Tape::new();
        let (pass2, _) = local_only.forward(&tape2, &g, &inputs, false).unwrap();
        assert!(pass.output.value().max_abs_diff(&pass2.output.value()) < 1e-12);
    }

    #[test]
    fn integration_is_linear_in_weights() {
        let g = small_graph(3);
        let cfg = DeGTAConfig {
            layers: 1,
            ..small_config()
        };
        let mut rng = StdRng::seed_from_u64(4);
        let model =
            DeGTAModel::new(cfg.clone(), 3, 2, Task::NodeClassification, &mut rng).unwrap();
        let inputs = ModelInputs::prepare(&g, &cfg).unwrap();
        let tape = Tape::new();
        let (pass, _) = model.forward(&tape, &g, &inputs, false).unwrap();
        let h1 = pass.embeddings.value();

        let mut scaled = model.clone();
        let c = 2.5;
        for layer in &mut scaled.params.layers {
            if let Some(w) = &mut layer.w_l {
                *w = w.map(|v| c * v);
            }
            if let Some(w) = &mut layer.w_g {
                *w = w.map(|v| c * v);
            }
        }
        let tape2 = Tape::new();
        let (pass2, _) = scaled.forward(&tape2, &g, &inputs, false).unwrap();
        let h2 = pass2.embeddings.value();
        assert!(h2.max_abs_diff(&h1.map(|v| c * v)) < 1e-9);
    }

    #[test]
    fn mean_pooling_and_permutation_invariance() {
        let tape = Tape::new();
        let x = tape.constant(Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let pooled = x.mean_rows().value();
        assert_eq!(pooled.data(), &[2.0, 3.0]);

        // Graph-level output is invariant under node permutation.
        let g = small_graph(5);
        let cfg = small_config();
        let mut rng = StdRng::seed_from_u64(6);
        let model =
            DeGTAModel::new(cfg.clone(), 3, 3, Task::GraphClassification, &mut rng).unwrap();
        let inputs = ModelInputs::prepare(&g, &cfg).unwrap();
        let t1 = Tape::new();
        let (p1, _) = model.forward(&t1, &g, &inputs, false).unwrap();

        let pi: Vec<usize> = {
            let mut pi: Vec<usize> = (0..10).collect();
            for i in (1..10usize).rev() {
                let j = rng.random_range(0..=i);
                pi.swap(i, j);
            }
            pi
        };
        let gp = g.permute(&pi).unwrap();
        let inputs_p = ModelInputs::prepare(&gp, &cfg).unwrap();
        let t2 = Tape::new();
        let (p2, _) = model.forward(&t2, &gp, &inputs_p, false).unwrap();
        assert!(p1.output.value().max_abs_diff(&p2.output.value()) < 1e-9);
    }

    #[test]
    fn parameter_count_independent_of_graph_size() {
        let cfg = small_config();
        let mut rng = StdRng::seed_from_u64(7);
        let m1 = DeGTAModel::new(cfg.clone(), 3, 2, Task::NodeClassification, &mut rng).unwrap();
        let mut rng = StdRng::seed_from_u64(7);
        let m2 = DeGTAModel::new(cfg, 3, 2, Task::NodeClassification, &mut rng).unwrap();
        // Same config on two graph sizes: parameters never depend on N.
        let g1 = small_graph(8);
        let g2 = {
            let mut rng = StdRng::seed_from_u64(9);
            let n = 17;
            let mut edges = Vec::new();
            for u in 0..n {
                for v in (u + 1)..n {
                    if rng.random::<f64>() < 0.3 {
                        edges.push((u, v));
                    }
                }
            }
            let feats =
                Matrix::from_vec(n, 3, (0..3 * n).map(|_| rng.random::<f64>()).collect());
            build_graph(&edges, feats).unwrap().0
        };
        let _ = (g1, g2);
        assert_eq!(m1.params.num_scalars(), m2.params.num_scalars());
        assert!(m1.params.num_scalars() > 0);
    }

    #[test]
    fn fresh_view_logits_export_uniform_triples() {
        let g = small_graph(11);
        let cfg = small_config();
        let mut rng = StdRng::seed_from_u64(12);
        let model =
            DeGTAModel::new(cfg.clone(), 3, 2, Task::NodeClassification, &mut rng).unwrap();
        let inputs = ModelInputs::prepare(&g, &cfg).unwrap();
        let tape = Tape::new();
        let (pass, _) = model.forward(&tape, &g, &inputs, true).unwrap();
        for trace in pass.traces.unwrap() {
            for t in [trace.local_weights.unwrap(), trace.global_weights.unwrap()] {
                for w in t {
                    assert!((w - 1.0 / 3.0).abs() < 1e-12);
                }
                let s: f64 = t.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn node_loss_and_accuracy() {
        let tape = Tape::new();
        let logits = tape.var(Matrix::from_vec(3, 2, vec![0.0, 0.0, 5.0, -5.0, -5.0, 5.0]));
        let labels = vec![0i64, 0, 1];
        let loss = node_loss(&logits, &labels, &[0]).unwrap();
        assert!((loss.scalar_value() - (2.0f64).ln()).abs() < 1e-12);
        // Row [0,0] ties; the first class wins, matching label 0.
        let acc = accuracy(&logits.value(), &labels, &[0, 1, 2]);
        assert_eq!(acc, 1.0);
    }
}
