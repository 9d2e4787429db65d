//! Eval-mode prediction and validation summaries.

use serde::{Deserialize, Serialize};

use super::Result;
use crate::attention::{AttentionMap, CamOptions};
use crate::discretization::{
    ce_hard_infer, ce_soft_infer, hard_infer, soft_infer, DepthDiscretization, OrdinalOutput,
};
use crate::losses::{gt_attention_weights, kl_rows};
use crate::metrics::{confusion_matrix, evaluate, ConfusionMatrix, MetricReport};
use crate::model::{
    downsample_targets, forward, upsample_bilinear, Head, Mode, NetworkConfig, ParamStore,
    OUTPUT_STRIDE,
};
use crate::scenes::SceneSample;
use crate::tensor::{softmax_row, Tape, Tensor};

/// Images per eval-mode forward.
pub const EVAL_BATCH: usize = 8;

/// Factor applied to `d_max` for the attention target, which needs a bound
/// strictly above every depth.
pub const ATTENTION_DMAX_MARGIN: f64 = 1.01;

/// Planar, zero-centred `[B, 3, H, W]` network input.
pub fn input_tensor(samples: &[&SceneSample]) -> Tensor {
    let (h, w) = (samples[0].height, samples[0].width);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        assert_eq!(
            (s.height, s.width),
            (h, w),
            "mixed image sizes in one batch"
        );
        data.extend(s.rgb_planar().iter().map(|v| v - 0.5));
    }
    Tensor::new(vec![samples.len(), 3, h, w], data).expect("input shape")
}

/// Per-image network outputs on the `h × w` output grid.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub grid: (usize, usize),
    /// Ordinal curves `P^k` per cell; for the cross-entropy head these are
    /// the tail sums `Σ_{j>k} p_j`.
    pub curves: OrdinalOutput,
    /// Class distribution per cell (cross-entropy head only).
    pub class_probs: Option<Tensor>,
    pub hard_depth: Vec<f64>,
    pub soft_depth: Vec<f64>,
    pub labels: Vec<usize>,
    pub attention: AttentionMap,
}

impl Prediction {
    pub fn depth(&self, soft: bool) -> &[f64] {
        if soft {
            &self.soft_depth
        } else {
            &self.hard_depth
        }
    }

    pub fn upsampled(&self, soft: bool, height: usize, width: usize) -> Vec<f64> {
        let (h, w) = self.grid;
        upsample_bilinear(self.depth(soft), h, w, height, width)
    }
}

fn decode(
    map: &Tensor,
    head: Head,
    disc: &DepthDiscretization,
) -> Result<(
    OrdinalOutput,
    Option<Tensor>,
    Vec<f64>,
    Vec<f64>,
    Vec<usize>,
)> {
    let &[c, h, w] = map.shape() else {
        unreachable!("logit map rank")
    };
    let n = h * w;
    match head {
        Head::Ordinal => {
            let curves = OrdinalOutput::from_logit_map(map)?;
            let hard = hard_infer(&curves, disc);
            let soft = soft_infer(&curves, disc);
            let labels = hard
                .labels()
                .iter()
                .map(|&l| l.min(disc.bins() - 1))
                .collect();
            Ok((curves, None, hard.depths(), soft.depths(), labels))
        }
        Head::CrossEntropy => {
            let mut probs = vec![0.0; n * c];
            for i in 0..n {
                let row = &mut probs[i * c..(i + 1) * c];
                for (k, p) in row.iter_mut().enumerate() {
                    *p = map.data()[k * n + i];
                }
                softmax_row(row);
            }
            let probs = Tensor::new(vec![n, c], probs)?;
            let labels = ce_hard_infer(&probs, disc);
            let hard = labels.iter().map(|&l| disc.midpoint(l)).collect();
            let soft = ce_soft_infer(&probs, disc)?;
            let mut tails = vec![0.0; n * c];
            for i in 0..n {
                let row = &probs.data()[i * c..(i + 1) * c];
                let mut acc = 0.0;
                for k in (0..c).rev() {
                    tails[i * c + k] = acc;
                    acc += row[k];
                }
            }
            let curves = OrdinalOutput::from_probs(n, c, tails)?;
            Ok((curves, Some(probs), hard, soft, labels))
        }
    }
}

/// Eval-mode predictions for every sample, in order.
pub fn predict(
    cfg: &NetworkConfig,
    store: &ParamStore,
    disc: &DepthDiscretization,
    samples: &[SceneSample],
    options: CamOptions,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let mut tape = Tape::new();
        let x = tape.constant(input_tensor(&refs));
        let f = forward(&mut tape, cfg, store, x, Mode::Eval, options)?;
        let logits = tape.value(f.logits);
        let &[b, c, h, w] = logits.shape() else {
            unreachable!("logit rank")
        };
        let plane = c * h * w;
        let maps = AttentionMap::split_batch(tape.value(f.attention))?;
        for (bi, attention) in maps.into_iter().enumerate().take(b) {
            let map = Tensor::new(
                vec![c, h, w],
                logits.data()[bi * plane..(bi + 1) * plane].to_vec(),
            )?;
            let (curves, class_probs, hard_depth, soft_depth, labels) =
                decode(&map, cfg.head, disc)?;
            out.push(Prediction {
                grid: (h, w),
                curves,
                class_probs,
                hard_depth,
                soft_depth,
                labels,
                attention,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub hard: MetricReport,
    pub soft: MetricReport,
    pub confusion: ConfusionMatrix,
    /// Mean row-wise `KL(W* ‖ W)` over valid output cells.
    pub attention_kl: f64,
}

impl EvalSummary {
    pub fn report(&self, soft: bool) -> &MetricReport {
        if soft {
            &self.soft
        } else {
            &self.hard
        }
    }
}

/// Metrics at full resolution (bilinearly upsampled predictions), confusion
/// and attention KL on the output grid.
pub fn summarize(
    predictions: &[Prediction],
    samples: &[SceneSample],
    disc: &DepthDiscretization,
) -> Result<EvalSummary> {
    let (mut gt, mut valid, mut hard, mut soft) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut pred_labels, mut gt_labels, mut cell_valid) = (Vec::new(), Vec::new(), Vec::new());
    let (mut kl_sum, mut kl_rows_total) = (0.0, 0usize);
    for (p, s) in predictions.iter().zip(samples) {
        hard.extend(p.upsampled(false, s.height, s.width));
        soft.extend(p.upsampled(true, s.height, s.width));
        gt.extend(
            s.depth
                .iter()
                .zip(&s.valid)
                .map(|(&d, &v)| if v { d } else { 1.0 }),
        );
        valid.extend_from_slice(&s.valid);

        let cells = downsample_targets(&s.depth, &s.valid, s.height, s.width, OUTPUT_STRIDE, disc);
        pred_labels.extend_from_slice(&p.labels);
        gt_labels.extend_from_slice(&cells.labels);
        cell_valid.extend_from_slice(&cells.valid);
        if cells.valid.iter().any(|&v| v) {
            let target = gt_attention_weights(
                &cells.depth,
                disc.d_max() * ATTENTION_DMAX_MARGIN,
                Some(&cells.valid),
            )?;
            let (sum, rows) = kl_rows(p.attention.tensor().data(), &target);
            kl_sum += sum * rows as f64;
            kl_rows_total += rows;
        }
    }
    Ok(EvalSummary {
        hard: evaluate(&hard, &gt, &valid)?,
        soft: evaluate(&soft, &gt, &valid)?,
        confusion: confusion_matrix(&pred_labels, &gt_labels, &cell_valid, disc.bins()),
        attention_kl: if kl_rows_total > 0 {
            kl_sum / kl_rows_total as f64
        } else {
            0.0
        },
    })
}

pub fn evaluate_samples(
    cfg: &NetworkConfig,
    store: &ParamStore,
    disc: &DepthDiscretization,
    samples: &[SceneSample],
    options: CamOptions,
) -> Result<EvalSummary> {
    let predictions = predict(cfg, store, disc, samples, options)?;
    summarize(&predictions, samples, disc)
}
