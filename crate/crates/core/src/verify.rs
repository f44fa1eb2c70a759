//! Finite-difference verification of every differentiable primitive and the
//! composed backbone.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, GraphOperator, Variant};
use crate::linalg::{Matrix, SparseMatrix};
use crate::nn::gradcheck::{grad_check_with, DEFAULT_STEP};
use crate::nn::{Tape, Tensor, Var};
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

/// Largest accepted relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;
/// Fresh draws tried per seed when a relu input lands too close to zero.
const MAX_REDRAWS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub name: String,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

type Inputs = Vec<(String, Tensor)>;
type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One random instance of a check: its inputs and scalar loss.
struct Case {
    inputs: Inputs,
    loss: Loss,
}

fn tensor(r: &mut StreamRng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng::normal(r)).collect()).expect("shape")
}

/// Entries bounded away from zero so relu and dropout stay differentiable.
fn off_zero(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng::uniform(r, 0.1, 1.5);
            if rng::uniform(r, 0.0, 1.0) < 0.5 { -v } else { v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn random_graph(r: &mut StreamRng, n: usize) -> Matrix {
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        let j = (i + 1) % n;
        let w = rng::uniform(r, 0.2, 1.0);
        a.set(i, j, w);
        a.set(j, i, w);
    }
    for i in 0..n {
        for j in i + 2..n {
            if rng::uniform(r, 0.0, 1.0) < 0.3 {
                let w = rng::uniform(r, 0.1, 1.0);
                a.set(i, j, w);
                a.set(j, i, w);
            }
        }
    }
    a
}

fn operator(r: &mut StreamRng, variant: Variant, n: usize) -> Result<GraphOperator> {
    GraphOperator::from_adjacency(variant, &random_graph(r, n))
}

fn sparse(op: &GraphOperator) -> Arc<SparseMatrix> {
    match op {
        GraphOperator::Spatial(a) => a.clone(),
        GraphOperator::Spectral(l) => l.clone(),
    }
}

/// Reduces a tensor output to a scalar with fixed random weights.
fn probe(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    tensor(r, shape, 1.0)
}

fn inputs(list: Vec<(&str, Tensor)>) -> Inputs {
    list.into_iter().map(|(n, t)| (n.into(), t)).collect()
}

fn weighted(case_probe: Tensor, f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> Loss {
    Box::new(move |t, v| {
        let y = f(t, v)?;
        t.weighted_sum(y, &case_probe)
    })
}

/// Names of every check in suite order.
pub const CHECKS: [&str; 16] = [
    "add",
    "linear",
    "matmul",
    "concat_rows",
    "relu",
    "node_bias",
    "graph_conv_spatial",
    "graph_conv_cheb",
    "temporal_conv",
    "mean_pool_time",
    "swap_last_axes",
    "dropout",
    "mse_loss",
    "weighted_sum",
    "backbone_spatial",
    "backbone_spectral",
];

fn backbone_case(r: &mut StreamRng, variant: Variant) -> Result<Case> {
    let (n, t_in, d) = (4, 6, 3);
    let cfg = BackboneConfig { variant, channels: 1, hidden: d, kernel: 3, cheb_order: 2, t_out: 3, dropout: 0.0 };
    let bb = Backbone::build(cfg, rng::uniform(r, 0.0, 1e9) as u64)?;
    let op = operator(r, variant, n)?;
    let mut list: Inputs = bb.parameters().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    list.push(("prompt".into(), tensor(r, &[n, d], 0.5)));
    list.push(("x".into(), tensor(r, &[2, t_in, n, 1], 1.0)));
    let p = probe(r, &[2, 3, n]);
    let count = bb.parameters().len();
    let loss = weighted(p, move |t, v| bb.forward(t, &v[..count], &op, v[count + 1], Some(v[count]), None));
    Ok(Case { inputs: list, loss })
}

fn make_case(name: &str, r: &mut StreamRng) -> Result<Case> {
    let (n, c, c2) = (5, 3, 4);
    let case = match name {
        "add" => Case {
            inputs: inputs(vec![("a", tensor(r, &[3, 4], 1.0)), ("b", tensor(r, &[3, 4], 1.0))]),
            loss: weighted(probe(r, &[3, 4]), |t, v| t.add(v[0], v[1])),
        },
        "linear" => Case {
            inputs: inputs(vec![("x", tensor(r, &[2, 3, c], 1.0)), ("w", tensor(r, &[c, c2], 1.0)), ("b", tensor(r, &[c2], 1.0))]),
            loss: weighted(probe(r, &[2, 3, c2]), |t, v| t.linear(v[0], v[1], Some(v[2]))),
        },
        "matmul" => Case {
            inputs: inputs(vec![("a", tensor(r, &[3, c], 1.0)), ("b", tensor(r, &[c, c2], 1.0))]),
            loss: weighted(probe(r, &[3, c2]), |t, v| t.matmul(v[0], v[1])),
        },
        "concat_rows" => Case {
            inputs: inputs(vec![("a", tensor(r, &[2, c], 1.0)), ("b", tensor(r, &[3, c], 1.0))]),
            loss: weighted(probe(r, &[5, c]), |t, v| t.concat_rows(&[v[0], v[1]])),
        },
        "relu" => Case {
            inputs: inputs(vec![("x", off_zero(r, &[4, c]))]),
            loss: weighted(probe(r, &[4, c]), |t, v| t.relu(v[0])),
        },
        "node_bias" => Case {
            inputs: inputs(vec![("h", tensor(r, &[2, 3, n, c], 1.0)), ("p", tensor(r, &[n, c], 1.0))]),
            loss: weighted(probe(r, &[2, 3, n, c]), |t, v| t.node_bias(v[0], v[1])),
        },
        "graph_conv_spatial" | "graph_conv_cheb" => {
            let spatial = name == "graph_conv_spatial";
            let variant = if spatial { Variant::Spatial } else { Variant::Spectral };
            let s = sparse(&operator(r, variant, n)?);
            let w = if spatial { tensor(r, &[c, c2], 1.0) } else { tensor(r, &[3, c, c2], 1.0) };
            Case {
                inputs: inputs(vec![("h", tensor(r, &[2, 3, n, c], 1.0)), ("w", w)]),
                loss: weighted(probe(r, &[2, 3, n, c2]), move |t, v| {
                    if spatial {
                        t.graph_conv_spatial(&s, v[0], v[1])
                    } else {
                        t.graph_conv_cheb(&s, v[0], v[1])
                    }
                }),
            }
        }
        "temporal_conv" => Case {
            inputs: inputs(vec![
                ("x", tensor(r, &[2, 6, n, c], 1.0)),
                ("w", tensor(r, &[3, c, c2], 1.0)),
                ("b", tensor(r, &[c2], 1.0)),
            ]),
            loss: weighted(probe(r, &[2, 6, n, c2]), |t, v| t.temporal_conv(v[0], v[1], v[2])),
        },
        "mean_pool_time" => Case {
            inputs: inputs(vec![("x", tensor(r, &[2, 6, n, c], 1.0))]),
            loss: weighted(probe(r, &[2, n, c]), |t, v| t.mean_pool_time(v[0])),
        },
        "swap_last_axes" => Case {
            inputs: inputs(vec![("x", tensor(r, &[2, 3, n], 1.0))]),
            loss: weighted(probe(r, &[2, n, 3]), |t, v| t.swap_last_axes(v[0])),
        },
        "dropout" => {
            let mask_seed = rng::uniform(r, 0.0, 1e9) as u64;
            Case {
                inputs: inputs(vec![("x", tensor(r, &[4, c], 1.0))]),
                loss: weighted(probe(r, &[4, c]), move |t, v| t.dropout(v[0], 0.3, &mut rng::stream(mask_seed, "mask"))),
            }
        }
        "mse_loss" => {
            let target = tensor(r, &[3, c], 1.0);
            Case { inputs: inputs(vec![("pred", tensor(r, &[3, c], 1.0))]), loss: Box::new(move |t, v| t.mse_loss(v[0], &target)) }
        }
        "weighted_sum" => {
            let p = probe(r, &[3, c]);
            Case { inputs: inputs(vec![("x", tensor(r, &[3, c], 1.0))]), loss: Box::new(move |t, v| t.weighted_sum(v[0], &p)) }
        }
        "backbone_spatial" => backbone_case(r, Variant::Spatial)?,
        "backbone_spectral" => backbone_case(r, Variant::Spectral)?,
        other => return Err(Error::invalid("check", format!("unknown check `{other}`"))),
    };
    Ok(case)
}

/// Runs one check over `seeds` seeds. `corrupt` scales the gradients of the
/// named primitive on the analytic pass, which must then fail.
pub fn run_check(name: &str, seeds: usize, corrupt: Option<&'static str>) -> Result<CheckRow> {
    let mut row = CheckRow { name: name.into(), seeds, max_rel_error: 0.0, worst_seed: 0, passed: true };
    for seed in 0..seeds as u64 {
        let mut attempt = 0;
        let err = loop {
            let mut r = rng::stream(seed, &format!("gradcheck/{name}/{attempt}"));
            let case = make_case(name, &mut r)?;
            match grad_check_with(&*case.loss, &case.inputs, DEFAULT_STEP, |t| {
                if let Some(op) = corrupt {
                    t.corrupt_gradients_of(op);
                }
            }) {
                Ok(report) => break report.max_rel_error,
                Err(Error::NotDifferentiable(_)) if attempt + 1 < MAX_REDRAWS => attempt += 1,
                Err(e) => return Err(e),
            }
        };
        if err > row.max_rel_error || seed == 0 {
            row.max_rel_error = err;
            row.worst_seed = seed;
        }
    }
    row.passed = row.max_rel_error < GRADCHECK_TOL;
    Ok(row)
}

/// Every primitive and both backbone variants.
pub fn gradcheck_suite(seeds: usize, corrupt: Option<&'static str>) -> Result<Vec<CheckRow>> {
    CHECKS.into_iter().map(|name| run_check(name, seeds, corrupt)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_pass_on_a_few_seeds() {
        for row in gradcheck_suite(2, None).unwrap() {
            assert!(row.passed, "{row:?}");
        }
    }

    #[test]
    fn corruption_is_named() {
        let row = run_check("temporal_conv", 1, Some("temporal_conv")).unwrap();
        assert!(!row.passed, "{row:?}");
        let other = run_check("linear", 1, Some("temporal_conv")).unwrap();
        assert!(other.passed);
    }

    #[test]
    fn unknown_check() {
        assert!(run_check("conv3d", 1, None).is_err());
    }
}
