//! Registry of finite-difference gradient checks behind `gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{attend, attention_logits, cam_forward, CamOptions, CamVars, NormMode};
use crate::losses::{
    attention_loss, cross_entropy_loss, gt_attention_weights, ordinal_loss, total_loss, LossWeights,
};
use crate::model::{forward_with, init_params, EncoderStage, Mode, NetworkConfig};
use crate::tensor::gradcheck::{self, GradCheck};
use crate::tensor::{Result, RunningStats, Tape, Tensor, TensorError, Var};

/// Tolerance for pointwise and purely linear ops.
pub const ELEMENTWISE_TOLERANCE: f64 = 1e-6;
/// Tolerance for composite ops and losses.
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
/// Tolerance for the full network.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum CheckError {
    #[error("unknown op {0:?}; run `gradcheck list` for the registered names")]
    UnknownOp(String),
}

#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: fn() -> Result<GradCheck>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub tolerance: f64,
    /// `None` when the check itself errored.
    pub max_rel_error: Option<f64>,
    pub evaluations: usize,
    pub error: Option<String>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_some_and(|e| e < self.tolerance)
    }
}

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xC4EC_u64 ^ tag)
}

fn uniform(shape: &[usize], tag: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = rng(tag);
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1]` and random sign, away from kinks.
fn off_kink(shape: &[usize], tag: u64) -> Tensor {
    let mut r = rng(tag);
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.1..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ r ⊙ v` with a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape, v: Var, tag: u64) -> Result<Var> {
    let r = tape.constant(uniform(tape.shape(v), tag ^ 0xFF, -1.0, 1.0));
    let p = tape.mul(v, r)?;
    Ok(tape.sum(p))
}

macro_rules! case {
    ($name:literal, $tol:expr, $body:expr) => {
        GradCase {
            name: $name,
            tolerance: $tol,
            run: $body,
        }
    };
}

fn tiny_network() -> NetworkConfig {
    let stage = |channels, stride, dilation| EncoderStage {
        channels,
        stride,
        dilation,
    };
    NetworkConfig {
        input_height: 8,
        input_width: 16,
        stages: vec![
            stage(2, 2, 1),
            stage(3, 2, 1),
            stage(3, 2, 1),
            stage(3, 1, 2),
        ],
        key_channels: 2,
        value_channels: 2,
        bins: 4,
        ..Default::default()
    }
}

pub fn registry() -> Vec<GradCase> {
    const E: f64 = ELEMENTWISE_TOLERANCE;
    const C: f64 = COMPOSITE_TOLERANCE;
    vec![
        case!("add", E, || {
            gradcheck::check(
                &[uniform(&[3, 4], 1, -1.0, 1.0), uniform(&[4], 2, -1.0, 1.0)],
                |t, v| {
                    let y = t.add(v[0], v[1])?;
                    project(t, y, 1)
                },
            )
        }),
        case!("sub", E, || {
            gradcheck::check(
                &[
                    uniform(&[3, 4], 3, -1.0, 1.0),
                    uniform(&[3, 4], 4, -1.0, 1.0),
                ],
                |t, v| {
                    let y = t.sub(v[0], v[1])?;
                    project(t, y, 2)
                },
            )
        }),
        case!("mul", E, || {
            gradcheck::check(
                &[
                    uniform(&[2, 3, 4], 5, -1.0, 1.0),
                    uniform(&[3, 4], 6, -1.0, 1.0),
                ],
                |t, v| {
                    let y = t.mul(v[0], v[1])?;
                    project(t, y, 3)
                },
            )
        }),
        case!("scale", E, || {
            gradcheck::check(&[uniform(&[5], 7, -1.0, 1.0)], |t, v| {
                let y = t.scale(v[0], -1.7);
                project(t, y, 4)
            })
        }),
        case!("add_scalar", E, || {
            gradcheck::check(&[uniform(&[5], 8, -1.0, 1.0)], |t, v| {
                let y = t.add_scalar(v[0], 0.3);
                project(t, y, 5)
            })
        }),
        case!("exp", E, || {
            gradcheck::check(&[uniform(&[6], 9, -1.0, 1.0)], |t, v| {
                let y = t.exp(v[0]);
                project(t, y, 6)
            })
        }),
        case!("ln", E, || {
            gradcheck::check(&[uniform(&[6], 10, 0.5, 2.0)], |t, v| {
                let y = t.ln(v[0])?;
                project(t, y, 7)
            })
        }),
        case!("relu", E, || {
            gradcheck::check(&[off_kink(&[8], 11)], |t, v| {
                let y = t.relu(v[0]);
                project(t, y, 8)
            })
        }),
        case!("abs", E, || {
            gradcheck::check(&[off_kink(&[8], 12)], |t, v| {
                let y = t.abs(v[0]);
                project(t, y, 9)
            })
        }),
        case!("sum", E, || {
            gradcheck::check(&[uniform(&[2, 3], 13, -1.0, 1.0)], |t, v| {
                let s = t.sum(v[0]);
                let s2 = t.mul(s, s)?;
                Ok(t.scale(s2, 0.5))
            })
        }),
        case!("mean", E, || {
            gradcheck::check(&[uniform(&[2, 3], 14, -1.0, 1.0)], |t, v| {
                let s = t.mean(v[0]);
                t.mul(s, s)
            })
        }),
        case!("reshape", E, || {
            gradcheck::check(&[uniform(&[2, 6], 15, -1.0, 1.0)], |t, v| {
                let y = t.reshape(v[0], &[3, 4])?;
                project(t, y, 10)
            })
        }),
        case!("transpose", E, || {
            gradcheck::check(&[uniform(&[2, 3, 4], 16, -1.0, 1.0)], |t, v| {
                let y = t.transpose(v[0])?;
                project(t, y, 11)
            })
        }),
        case!("matmul", C, || {
            gradcheck::check(
                &[
                    uniform(&[3, 4], 17, -1.0, 1.0),
                    uniform(&[4, 2], 18, -1.0, 1.0),
                ],
                |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    project(t, y, 12)
                },
            )
        }),
        case!("matmul_batched", C, || {
            gradcheck::check(
                &[
                    uniform(&[2, 3, 4], 19, -1.0, 1.0),
                    uniform(&[2, 4, 2], 20, -1.0, 1.0),
                ],
                |t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    project(t, y, 13)
                },
            )
        }),
        case!("softmax_rows", C, || {
            gradcheck::check(&[uniform(&[2, 3, 5], 21, -2.0, 2.0)], |t, v| {
                let y = t.softmax_rows(v[0])?;
                project(t, y, 14)
            })
        }),
        case!("conv2d", C, || {
            gradcheck::check(
                &[
                    uniform(&[2, 2, 5, 5], 22, -1.0, 1.0),
                    uniform(&[3, 2, 3, 3], 23, -1.0, 1.0),
                    uniform(&[3], 24, -1.0, 1.0),
                ],
                |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                    project(t, y, 15)
                },
            )
        }),
        case!("conv2d_strided", C, || {
            gradcheck::check(
                &[
                    uniform(&[1, 2, 6, 6], 25, -1.0, 1.0),
                    uniform(&[2, 2, 3, 3], 26, -1.0, 1.0),
                ],
                |t, v| {
                    let y = t.conv2d(v[0], v[1], None, 2, 1)?;
                    project(t, y, 16)
                },
            )
        }),
        case!("conv2d_dilated", C, || {
            gradcheck::check(
                &[
                    uniform(&[1, 2, 7, 7], 27, -1.0, 1.0),
                    uniform(&[2, 2, 3, 3], 28, -1.0, 1.0),
                ],
                |t, v| {
                    let y = t.conv2d(v[0], v[1], None, 1, 2)?;
                    project(t, y, 17)
                },
            )
        }),
        case!("batch_norm_train", C, || {
            gradcheck::check(
                &[
                    uniform(&[2, 3, 3, 3], 29, -1.0, 1.0),
                    uniform(&[3], 30, 0.5, 1.5),
                    uniform(&[3], 31, -0.5, 0.5),
                ],
                |t, v| {
                    let (y, _) = t.batch_norm_train(v[0], v[1], v[2])?;
                    project(t, y, 18)
                },
            )
        }),
        case!("batch_norm_eval", C, || {
            let running = RunningStats {
                mean: vec![0.1, -0.2, 0.3],
                var: vec![0.5, 1.5, 0.8],
                populated: true,
            };
            gradcheck::check(
                &[
                    uniform(&[2, 3, 2, 2], 32, -1.0, 1.0),
                    uniform(&[3], 33, 0.5, 1.5),
                    uniform(&[3], 34, -0.5, 0.5),
                ],
                move |t, v| {
                    let y = t.batch_norm_eval(v[0], v[1], v[2], &running)?;
                    project(t, y, 19)
                },
            )
        }),
        case!("global_avg_pool", C, || {
            gradcheck::check(&[uniform(&[2, 3, 2, 3], 35, -1.0, 1.0)], |t, v| {
                let y = t.global_avg_pool(v[0])?;
                project(t, y, 20)
            })
        }),
        case!("spatial_broadcast", C, || {
            gradcheck::check(&[uniform(&[2, 3], 36, -1.0, 1.0)], |t, v| {
                let y = t.spatial_broadcast(v[0], 2, 3)?;
                project(t, y, 21)
            })
        }),
        case!("concat_channels", C, || {
            gradcheck::check(
                &[
                    uniform(&[2, 2, 2, 2], 37, -1.0, 1.0),
                    uniform(&[2, 3, 2, 2], 38, -1.0, 1.0),
                ],
                |t, v| {
                    let y = t.concat_channels(v[0], v[1])?;
                    project(t, y, 22)
                },
            )
        }),
        case!("attention_logits", C, || {
            gradcheck::check(
                &[
                    uniform(&[4, 3], 39, -1.0, 1.0),
                    uniform(&[4, 3], 40, -1.0, 1.0),
                ],
                |t, v| {
                    let y = attention_logits(t, v[0], v[1])?;
                    project(t, y, 23)
                },
            )
        }),
        case!("attend", C, || {
            gradcheck::check(
                &[
                    uniform(&[4, 4], 41, -1.0, 1.0),
                    uniform(&[4, 3], 42, -1.0, 1.0),
                ],
                |t, v| {
                    let w = t.softmax_rows(v[0])?;
                    let y = attend(t, w, v[1])?;
                    project(t, y, 24)
                },
            )
        }),
        case!("cam_forward", C, || cam_case(true)),
        case!("cam_forward_no_pooling", C, || cam_case(false)),
        case!("attention_loss", C, || {
            let targets = vec![
                gt_attention_weights(
                    &[1.0, 2.0, 4.0, 3.0],
                    10.0,
                    Some(&[true, true, false, true]),
                )
                .unwrap(),
                gt_attention_weights(&[5.0, 0.7, 1.2, 8.0], 10.0, None).unwrap(),
            ];
            gradcheck::check(&[uniform(&[2, 4, 4], 43, -1.0, 1.0)], move |t, v| {
                let w = t.softmax_rows(v[0])?;
                attention_loss(t, w, &targets)
            })
        }),
        case!("ordinal_loss", C, || {
            gradcheck::check(&[uniform(&[5, 8], 44, -2.0, 2.0)], |t, v| {
                ordinal_loss(t, v[0], &[0, 1, 2, 3, 1], &[true, true, false, true, true])
            })
        }),
        case!("cross_entropy_loss", C, || {
            gradcheck::check(&[uniform(&[2, 4, 2, 2], 45, -2.0, 2.0)], |t, v| {
                cross_entropy_loss(t, v[0], &[0, 1, 2, 3, 3, 2, 1, 0], &[true; 8])
            })
        }),
        case!("total_loss", C, || {
            let targets = vec![gt_attention_weights(&[1.0, 2.0, 4.0], 10.0, None).unwrap()];
            gradcheck::check(
                &[
                    uniform(&[3, 3], 46, -1.0, 1.0),
                    uniform(&[3, 6], 47, -2.0, 2.0),
                ],
                move |t, v| {
                    let w = t.softmax_rows(v[0])?;
                    let att = attention_loss(t, w, &targets)?;
                    let ord = ordinal_loss(t, v[1], &[0, 2, 1], &[true; 3])?;
                    total_loss(t, att, ord, LossWeights::default())
                },
            )
        }),
        case!("network", END_TO_END_TOLERANCE, network_case),
    ]
}

fn cam_case(image_pooling: bool) -> Result<GradCheck> {
    let inputs = [
        uniform(&[2, 3, 2, 2], 48, -1.0, 1.0),
        uniform(&[2, 3, 1, 1], 49, -1.0, 1.0),
        uniform(&[2], 50, 0.5, 1.5),
        uniform(&[2], 51, 0.2, 0.6),
        uniform(&[2, 3, 1, 1], 52, -1.0, 1.0),
        uniform(&[2], 53, -0.5, 0.5),
    ];
    gradcheck::check(&inputs, move |t, v| {
        let vars = CamVars {
            key_kernel: v[1],
            key_gamma: v[2],
            key_beta: v[3],
            value_kernel: v[4],
            value_bias: v[5],
        };
        let out = cam_forward(
            t,
            v[0],
            &vars,
            NormMode::Train,
            CamOptions { image_pooling },
        )?;
        project(t, out.features, 25)
    })
}

fn network_case() -> Result<GradCheck> {
    let cfg = tiny_network();
    let store = init_params(&cfg, 54).map_err(|e| TensorError::Contract(e.to_string()))?;
    let names: Vec<String> = store.iter().map(|(k, _)| k.to_string()).collect();
    let values: Vec<Tensor> = store.iter().map(|(_, p)| p.value.clone()).collect();
    let input = uniform(&[2, 3, 8, 16], 55, -0.5, 0.5);
    let targets = vec![
        gt_attention_weights(&[2.0, 3.0], 10.0, None)?,
        gt_attention_weights(&[1.0, 6.0], 10.0, None)?,
    ];
    gradcheck::check(&values, move |t, v| {
        let map = names.iter().cloned().zip(v.iter().copied()).collect();
        let x = t.constant(input.clone());
        let out = forward_with(t, &cfg, &store, map, x, Mode::Train, CamOptions::default())
            .map_err(|e| TensorError::Contract(e.to_string()))?;
        let ord = ordinal_loss(t, out.logits, &[1, 2, 0, 3], &[true; 4])?;
        let att = attention_loss(t, out.attention, &targets)?;
        total_loss(t, att, ord, LossWeights::default())
    })
}

pub fn run_case(case: &GradCase) -> CaseResult {
    match (case.run)() {
        Ok(c) => CaseResult {
            name: case.name.to_string(),
            tolerance: case.tolerance,
            max_rel_error: Some(c.max_rel_error),
            evaluations: c.evaluations,
            error: None,
        },
        Err(e) => CaseResult {
            name: case.name.to_string(),
            tolerance: case.tolerance,
            max_rel_error: None,
            evaluations: 0,
            error: Some(e.to_string()),
        },
    }
}

/// Runs one named check, or every check for `"all"`.
pub fn run(scope: &str) -> Result<Vec<CaseResult>, CheckError> {
    let cases = registry();
    let selected: Vec<&GradCase> = if scope == "all" {
        cases.iter().collect()
    } else {
        cases.iter().filter(|c| c.name == scope).collect()
    };
    if selected.is_empty() {
        return Err(CheckError::UnknownOp(scope.to_string()));
    }
    Ok(selected.into_iter().map(run_case).collect())
}

pub fn format_table(results: &[CaseResult]) -> String {
    let mut out = format!(
        "{:<24} {:>12} {:>10}  status\n",
        "op", "max rel err", "tolerance"
    );
    for r in results {
        let err = match r.max_rel_error {
            Some(e) => format!("{e:.3e}"),
            None => "error".into(),
        };
        let status = if r.passed() { "ok" } else { "FAIL" };
        out.push_str(&format!(
            "{:<24} {:>12} {:>10.0e}  {status}",
            r.name, err, r.tolerance
        ));
        if let Some(e) = &r.error {
            out.push_str(&format!("  ({e})"));
        }
        out.push('\n');
    }
    out
}
