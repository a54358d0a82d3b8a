//! The finite-difference verification suite: every autograd primitive, each
//! encoding-to-loss sub-path, and a full two-layer forward+loss.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::attention::global::SamplingStrategy;
use crate::autograd::{Tape, Tensor};
use crate::data::gen_sbm;
use crate::encodings::{PeKind, SeKind};
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::graph::Graph;
use crate::linalg::Matrix;
use crate::model::{
    node_loss, Ablation, DeGTAConfig, DeGTAModel, ModelInputs, ModelParams, Task,
};

/// Outcome of one suite component.
#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    /// Worst-agreeing entry, for diagnostics.
    pub detail: String,
}

impl ComponentReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

const PRIMITIVE_TOL: f64 = 1e-6;
const PIPELINE_TOL: f64 = 1e-4;
const CASES_PER_PRIMITIVE: usize = 10;

fn rand_matrix(r: usize, c: usize, rng: &mut StdRng) -> Matrix {
    Matrix::from_vec(
        r,
        c,
        (0..r * c).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect(),
    )
}

/// Contracts a tensor to a scalar with fixed random weights so the check
/// exercises the full Jacobian.
fn contract(t: &Tensor, w: &Matrix) -> Result<Tensor> {
    Ok(t.mul(&t.tape().constant(w.clone()))?.sum())
}

type PrimFn = Box<dyn Fn(&Tape, &[Tensor], &PrimCase) -> Result<Tensor>>;

struct PrimCase {
    params: Vec<Matrix>,
    contract_w: Matrix,
    aux_mask: Option<Matrix>,
    aux_index: Vec<usize>,
    aux_pairs: Vec<(usize, usize)>,
    aux_offsets: Vec<usize>,
    aux_labels: Vec<usize>,
    aux_target: Matrix,
}

fn primitive(
    name: &str,
    eps: f64,
    rng: &mut StdRng,
    make_case: impl Fn(&mut StdRng) -> PrimCase,
    f: PrimFn,
) -> Result<ComponentReport> {
    let mut worst = 0.0f64;
    for _ in 0..CASES_PER_PRIMITIVE {
        let case = make_case(rng);
        let report = grad_check(
            |tape, leaves| f(tape, leaves, &case),
            &case.params,
            eps,
        )?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(ComponentReport {
        name: format!("primitive/{name}"),
        max_rel_err: worst,
        threshold: PRIMITIVE_TOL,
        detail: String::new(),
    })
}

fn simple_case(shapes: &[(usize, usize)], out: (usize, usize), rng: &mut StdRng) -> PrimCase {
    PrimCase {
        params: shapes.iter().map(|&(r, c)| rand_matrix(r, c, rng)).collect(),
        contract_w: rand_matrix(out.0, out.1, rng),
        aux_mask: None,
        aux_index: vec![],
        aux_pairs: vec![],
        aux_offsets: vec![],
        aux_labels: vec![],
        aux_target: Matrix::zeros(1, 1),
    }
}

fn primitive_reports(eps: f64, seed: u64) -> Result<Vec<ComponentReport>> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Vec::new();

    out.push(primitive(
        "add",
        eps,
        &mut rng,
        |r| simple_case(&[(3, 4), (3, 4)], (3, 4), r),
        Box::new(|_, xs, c| contract(&xs[0].add(&xs[1])?, &c.contract_w)),
    )?);
    out.push(primitive(
        "add_broadcast_row",
        eps,
        &mut rng,
        |r| simple_case(&[(4, 3), (1, 3)], (4, 3), r),
        Box::new(|_, xs, c| contract(&xs[0].add(&xs[1])?, &c.contract_w)),
    )?);
    out.push(primitive(
        "sub",
        eps,
        &mut rng,
        |r| simple_case(&[(3, 3), (3, 3)], (3, 3), r),
        Box::new(|_, xs, c| contract(&xs[0].sub(&xs[1])?, &c.contract_w)),
    )?);
    out.push(primitive(
        "scale",
        eps,
        &mut rng,
        |r| simple_case(&[(3, 4)], (3, 4), r),
        Box::new(|_, xs, c| contract(&xs[0].scale(-1.7), &c.contract_w)),
    )?);
    out.push(primitive(
        "elementwise_mul",
        eps,
        &mut rng,
        |r| simple_case(&[(3, 4), (3, 4)], (3, 4), r),
        Box::new(|_, xs, c| contract(&xs[0].mul(&xs[1])?, &c.contract_w)),
    )?);
    out.push(primitive(
        "mul_colvec",
        eps,
        &mut rng,
        |r| simple_case(&[(4, 3), (4, 1)], (4, 3), r),
        Box::new(|_, xs, c| contract(&xs[0].mul(&xs[1])?, &c.contract_w)),
    )?);
    out.push(primitive(
        "mul_scalar",
        eps,
        &mut rng,
        |r| simple_case(&[(4, 3), (1, 1)], (4, 3), r),
        Box::new(|_, xs, c| contract(&xs[0].mul(&xs[1])?, &c.contract_w)),
    )?);
    out.push(primitive(
        "matmul",
        eps,
        &mut rng,
        |r| simple_case(&[(3, 4), (4, 2)], (3, 2), r),
        Box::new(|_, xs, c| contract(&xs[0].matmul(&xs[1])?, &c.contract_w)),
    )?);
    out.push(primitive(
        "transpose",
        eps,
        &mut rng,
        |r| simple_case(&[(3, 5)], (5, 3), r),
        Box::new(|_, xs, c| contract(&xs[0].transpose(), &c.contract_w)),
    )?);
    out.push(primitive(
        "concat_rows",
        eps,
        &mut rng,
        |r| simple_case(&[(2, 3), (4, 3)], (6, 3), r),
        Box::new(|_, xs, c| contract(&xs[0].concat_rows(&xs[1])?, &c.contract_w)),
    )?);
    out.push(primitive(
        "concat_cols",
        eps,
        &mut rng,
        |r| simple_case(&[(3, 2), (3, 4)], (3, 6), r),
        Box::new(|_, xs, c| contract(&xs[0].concat_cols(&xs[1])?, &c.contract_w)),
    )?);
    out.push(primitive(
        "leaky_relu",
        eps,
        &mut rng,
        |r| simple_case(&[(4, 4)], (4, 4), r),
        Box::new(|_, xs, c| contract(&xs[0].leaky_relu(0.2), &c.contract_w)),
    )?);
    out.push(primitive(
        "exp",
        eps,
        &mut rng,
        |r| simple_case(&[(3, 4)], (3, 4), r),
        Box::new(|_, xs, c| contract(&xs[0].exp(), &c.contract_w)),
    )?);
    out.push(primitive(
        "row_softmax",
        eps,
        &mut rng,
        |r| simple_case(&[(4, 5)], (4, 5), r),
        Box::new(|_, xs, c| contract(&xs[0].row_softmax(), &c.contract_w)),
    )?);
    out.push(primitive(
        "masked_row_softmax",
        eps,
        &mut rng,
        |r| {
            let mut case = simple_case(&[(4, 5)], (4, 5), r);
            let mut mask = Matrix::zeros(4, 5);
            for i in 0..4 {
                let forced = r.random_range(0..5);
                for j in 0..5 {
                    if j == forced || r.random::<f64>() < 0.5 {
                        mask[(i, j)] = 1.0;
                    }
                }
            }
            case.aux_mask = Some(mask);
            case
        },
        Box::new(|_, xs, c| {
            let (y, _) = xs[0].masked_row_softmax(c.aux_mask.as_ref().unwrap(), true)?;
            contract(&y, &c.contract_w)
        }),
    )?);
    out.push(primitive(
        "segment_softmax",
        eps,
        &mut rng,
        |r| {
            let mut case = simple_case(&[(7, 1)], (7, 1), r);
            case.aux_offsets = vec![0, 3, 3, 5, 7];
            case
        },
        Box::new(|_, xs, c| contract(&xs[0].segment_softmax(&c.aux_offsets)?, &c.contract_w)),
    )?);
    out.push(primitive(
        "sum",
        eps,
        &mut rng,
        |r| simple_case(&[(3, 4)], (1, 1), r),
        Box::new(|_, xs, c| contract(&xs[0].sum(), &c.contract_w)),
    )?);
    out.push(primitive(
        "mean_rows",
        eps,
        &mut rng,
        |r| simple_case(&[(5, 3)], (1, 3), r),
        Box::new(|_, xs, c| contract(&xs[0].mean_rows(), &c.contract_w)),
    )?);
    out.push(primitive(
        "row_sums",
        eps,
        &mut rng,
        |r| simple_case(&[(4, 5)], (4, 1), r),
        Box::new(|_, xs, c| contract(&xs[0].row_sums(), &c.contract_w)),
    )?);
    out.push(primitive(
        "gather_rows",
        eps,
        &mut rng,
        |r| {
            let mut case = simple_case(&[(5, 3)], (6, 3), r);
            case.aux_index = (0..6).map(|_| r.random_range(0..5)).collect();
            case
        },
        Box::new(|_, xs, c| contract(&xs[0].gather_rows(&c.aux_index)?, &c.contract_w)),
    )?);
    out.push(primitive(
        "scatter_add_rows",
        eps,
        &mut rng,
        |r| {
            let mut case = simple_case(&[(6, 3)], (4, 3), r);
            case.aux_index = (0..6).map(|_| r.random_range(0..4)).collect();
            case
        },
        Box::new(|_, xs, c| {
            contract(&xs[0].scatter_add_rows(&c.aux_index, 4)?, &c.contract_w)
        }),
    )?);
    out.push(primitive(
        "gather_entries",
        eps,
        &mut rng,
        |r| {
            let mut case = simple_case(&[(5, 4)], (6, 1), r);
            case.aux_pairs = (0..6)
                .map(|_| (r.random_range(0..5), r.random_range(0..4)))
                .collect();
            case
        },
        Box::new(|_, xs, c| contract(&xs[0].gather_entries(&c.aux_pairs)?, &c.contract_w)),
    )?);
    out.push(primitive(
        "straight_through_threshold",
        eps,
        &mut rng,
        |r| simple_case(&[(3, 4)], (3, 4), r),
        Box::new(|_, xs, c| contract(&xs[0].straight_through_threshold(0.1), &c.contract_w)),
    )?);
    out.push(primitive(
        "cross_entropy",
        eps,
        &mut rng,
        |r| {
            let mut case = simple_case(&[(4, 3)], (1, 1), r);
            case.aux_labels = (0..4).map(|_| r.random_range(0..3)).collect();
            case
        },
        Box::new(|_, xs, c| contract(&xs[0].cross_entropy(&c.aux_labels)?, &c.contract_w)),
    )?);
    out.push(primitive(
        "l1_loss",
        eps,
        &mut rng,
        |r| {
            let mut case = simple_case(&[(4, 2)], (1, 1), r);
            case.aux_target = rand_matrix(4, 2, r);
            case
        },
        Box::new(|_, xs, c| contract(&xs[0].l1_loss(&c.aux_target)?, &c.contract_w)),
    )?);

    // stop_gradient blocks by definition, so its declared backward is not
    // the derivative of its forward; assert the algebraic contract instead.
    let mut worst = 0.0f64;
    for _ in 0..CASES_PER_PRIMITIVE {
        let tape = Tape::new();
        let x = tape.var(rand_matrix(3, 3, &mut rng));
        let w = tape.constant(rand_matrix(3, 3, &mut rng));
        let y = x.stop_gradient().mul(&w)?.sum();
        y.backward()?;
        if let Some(g) = x.grad() {
            worst = worst.max(g.data().iter().fold(0.0f64, |a, &b| a.max(b.abs())));
        }
    }
    out.push(ComponentReport {
        name: "primitive/stop_gradient_blocks".into(),
        max_rel_err: worst,
        threshold: PRIMITIVE_TOL,
        detail: String::new(),
    });

    Ok(out)
}

/// Gradient-checks one model configuration end to end on `g`.
fn model_path(
    name: &str,
    model: &DeGTAModel,
    g: &Graph,
    idx: &[usize],
    eps: f64,
) -> Result<ComponentReport> {
    let inputs = ModelInputs::prepare(g, &model.config)?;
    let labels = g.labels().map(<[i64]>::to_vec).unwrap_or_default();
    let mut flat = Vec::new();
    let mut names = Vec::new();
    model.params.visit(&mut |n, m| {
        names.push(n);
        flat.push(m.clone());
    });

    let report = grad_check(
        |tape, leaves| {
            let mut i = 0;
            let tp: ModelParams<Tensor> = model.params.map(|_| {
                let t = leaves[i].clone();
                i += 1;
                t
            });
            let pass = model.forward_with(tape, &tp, g, &inputs, false, None)?;
            match model.task {
                Task::NodeClassification => node_loss(&pass.output, &labels, idx),
                Task::GraphClassification => pass.output.cross_entropy(&[1]),
                Task::GraphRegression => pass.output.l1_loss(&Matrix::from_vec(
                    1,
                    1,
                    vec![0.37],
                )),
            }
        },
        &flat,
        eps,
    )?;
    Ok(ComponentReport {
        name: name.to_string(),
        max_rel_err: report.max_rel_err,
        threshold: PIPELINE_TOL,
        detail: format!(
            "worst at {}[{}]: analytic {:.6e} vs numeric {:.6e}",
            names[report.worst.0], report.worst.1, report.analytic_at_worst, report.numeric_at_worst
        ),
    })
}

fn path_config(pe: PeKind, se: SeKind) -> DeGTAConfig {
    DeGTAConfig {
        d: 5,
        d_hidden: 3,
        d_attr_hidden: 4,
        layers: 1,
        pe_kind: pe,
        se_kind: se,
        ..DeGTAConfig::with_k(3)
    }
}

fn path_reports(eps: f64, seed: u64) -> Result<Vec<ComponentReport>> {
    let ds = gen_sbm(10, 2, 0.45, 0.1, 0.4, seed)?;
    let g = &ds.graph;
    let idx: Vec<usize> = (0..g.num_nodes()).collect();
    let mut out = Vec::new();

    for (pe, se) in [
        (PeKind::Jaccard, SeKind::Rwse),
        (PeKind::LapPe, SeKind::Dse),
        (PeKind::Rwpe, SeKind::Tcse),
        (PeKind::Jaccard, SeKind::Tcse),
        (PeKind::LapPe, SeKind::Rwse),
        (PeKind::Rwpe, SeKind::Dse),
    ] {
        let cfg = path_config(pe, se);
        let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
        let model = DeGTAModel::new(
            cfg,
            g.features().cols(),
            2,
            Task::NodeClassification,
            &mut rng,
        )?;
        out.push(model_path(
            &format!("path/{pe}_{se}_to_loss"),
            &model,
            g,
            &idx,
            eps,
        )?);
    }

    let variants: Vec<(&str, DeGTAConfig)> = vec![
        (
            "path/no_global",
            DeGTAConfig {
                ablation: Ablation::NoGlobal,
                ..path_config(PeKind::Jaccard, SeKind::Rwse)
            },
        ),
        (
            "path/dense_global",
            DeGTAConfig {
                ablation: Ablation::DenseGlobal,
                ..path_config(PeKind::Jaccard, SeKind::Rwse)
            },
        ),
        (
            "path/coupled_attention",
            DeGTAConfig {
                ablation: Ablation::CoupledAttention,
                ..path_config(PeKind::Jaccard, SeKind::Rwse)
            },
        ),
        (
            "path/summed_integration",
            DeGTAConfig {
                ablation: Ablation::SummedIntegration,
                ..path_config(PeKind::Jaccard, SeKind::Rwse)
            },
        ),
        (
            "path/threshold_sampling",
            DeGTAConfig {
                sampling: SamplingStrategy::Threshold { tau: Some(0.2) },
                ..path_config(PeKind::Jaccard, SeKind::Rwse)
            },
        ),
        (
            "path/literal_sampling_softmax",
            DeGTAConfig {
                literal_sampling_softmax: true,
                ..path_config(PeKind::Jaccard, SeKind::Rwse)
            },
        ),
        (
            "path/pairwise_positional_logits",
            DeGTAConfig {
                pairwise_positional_logits: true,
                ..path_config(PeKind::Jaccard, SeKind::Rwse)
            },
        ),
        (
            "path/residual",
            DeGTAConfig {
                residual: true,
                ..path_config(PeKind::Jaccard, SeKind::Rwse)
            },
        ),
    ];
    for (name, cfg) in variants {
        let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed + 1);
        let model = DeGTAModel::new(
            cfg,
            g.features().cols(),
            2,
            Task::NodeClassification,
            &mut rng,
        )?;
        out.push(model_path(name, &model, g, &idx, eps)?);
    }

    // Graph-level heads: mean pooling into cross-entropy and into MAE.
    for (name, task) in [
        ("path/graph_classification_head", Task::GraphClassification),
        ("path/graph_regression_head", Task::GraphRegression),
    ] {
        let cfg = path_config(PeKind::Jaccard, SeKind::Rwse);
        let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed + 2);
        let outputs = if task == Task::GraphRegression { 1 } else { 3 };
        let model = DeGTAModel::new(cfg, g.features().cols(), outputs, task, &mut rng)?;
        out.push(model_path(name, &model, g, &idx, eps)?);
    }

    Ok(out)
}

fn full_model_report(eps: f64, seed: u64) -> Result<ComponentReport> {
    let ds = gen_sbm(12, 2, 0.4, 0.12, 0.4, seed ^ 0xf00d)?;
    let cfg = DeGTAConfig {
        d: 5,
        d_hidden: 3,
        d_attr_hidden: 4,
        layers: 2,
        ..DeGTAConfig::with_k(3)
    };
    let mut rng: rand_chacha::ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let model = DeGTAModel::new(
        cfg,
        ds.graph.features().cols(),
        2,
        Task::NodeClassification,
        &mut rng,
    )?;
    let idx: Vec<usize> = (0..ds.graph.num_nodes()).collect();
    model_path("model/full_2layer_forward_loss", &model, &ds.graph, &idx, eps)
}

/// Runs the whole suite. Every component must report an error below its
/// threshold for the suite to pass.
pub fn gradcheck_suite(eps: f64, seed: u64) -> Result<Vec<ComponentReport>> {
    let mut out = primitive_reports(eps, seed)?;
    out.extend(path_reports(eps, seed)?);
    out.push(full_model_report(eps, seed)?);
    Ok(out)
}
