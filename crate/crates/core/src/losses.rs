//! Training objective: KL attention supervision, ordinal loss, and the
//! cross-entropy baseline. All per-pixel terms honour a validity mask.

use serde::{Deserialize, Serialize};

use crate::discretization::sigmoid;
use crate::tensor::{Function, Result, Tape, Tensor, TensorError, Var};

/// Lower clamp applied to predicted weights inside the KL logarithm.
pub const KL_WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_att: f64,
    pub alpha_ord: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_att: 0.1,
            alpha_ord: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |a: f64| a.is_finite() && a >= 0.0;
        if !ok(self.alpha_att)
            || !ok(self.alpha_ord)
            || (self.alpha_att == 0.0 && self.alpha_ord == 0.0)
        {
            return Err(TensorError::Param(format!(
                "loss weights must be finite, non-negative and not both zero: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Target attention built from ground-truth depth.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthAttention {
    /// `N × N`; rows of invalid pixels are all zero.
    pub weights: Tensor,
    pub valid_rows: Vec<bool>,
    pub d_max: f64,
}

/// `w*_ij = softmax_j(ln d_max − |ln d_i − ln d_j|)` over valid `j`.
///
/// With `valid == None` every pixel participates.
pub fn gt_attention_weights(
    depths: &[f64],
    d_max: f64,
    valid: Option<&[bool]>,
) -> Result<GroundTruthAttention> {
    let n = depths.len();
    if n == 0 {
        return Err(TensorError::Param("empty depth list".into()));
    }
    let mask: Vec<bool> = match valid {
        Some(m) if m.len() != n => {
            return Err(TensorError::Shape {
                op: "gt_attention_weights",
                lhs: vec![n],
                rhs: vec![m.len()],
            })
        }
        Some(m) => m.to_vec(),
        None => vec![true; n],
    };
    let mut max_depth = 0.0f64;
    for (i, (&d, &ok)) in depths.iter().zip(&mask).enumerate() {
        if ok {
            if !(d > 0.0) {
                return Err(TensorError::Domain {
                    op: "gt_attention_weights",
                    index: i,
                    value: d,
                });
            }
            max_depth = max_depth.max(d);
        }
    }
    if !(d_max > max_depth) {
        return Err(TensorError::Param(format!(
            "d_max {d_max} must exceed the largest depth {max_depth}"
        )));
    }
    let logs: Vec<f64> = depths
        .iter()
        .map(|&d| if d > 0.0 { d.ln() } else { 0.0 })
        .collect();
    let ln_dmax = d_max.ln();
    let mut weights = vec![0.0; n * n];
    for i in (0..n).filter(|&i| mask[i]) {
        let row = &mut weights[i * n..(i + 1) * n];
        // the ln d_max offset cancels in the normalisation; keep it anyway and
        // stabilise with the row maximum, which is ln d_max at j = i
        let mut total = 0.0;
        for j in (0..n).filter(|&j| mask[j]) {
            let logit = ln_dmax - (logs[i] - logs[j]).abs();
            row[j] = (logit - ln_dmax).exp();
            total += row[j];
        }
        row.iter_mut().for_each(|w| *w /= total);
    }
    Ok(GroundTruthAttention {
        weights: Tensor::new(vec![n, n], weights)?,
        valid_rows: mask,
        d_max,
    })
}

/// Mean row-wise `KL(w* ‖ w)` over valid rows of one image, plus the number
/// of rows that contributed.
pub fn kl_rows(predicted: &[f64], target: &GroundTruthAttention) -> (f64, usize) {
    let n = target.valid_rows.len();
    let mut total = 0.0;
    let mut rows = 0;
    for i in (0..n).filter(|&i| target.valid_rows[i]) {
        rows += 1;
        let t = &target.weights.data()[i * n..(i + 1) * n];
        let p = &predicted[i * n..(i + 1) * n];
        total += t
            .iter()
            .zip(p)
            .filter(|(&ti, _)| ti > 0.0)
            .map(|(&ti, &pi)| ti * (ti / pi.max(KL_WEIGHT_FLOOR)).ln())
            .sum::<f64>();
    }
    (total, rows)
}

#[derive(Debug)]
struct AttentionKl {
    targets: Vec<GroundTruthAttention>,
    valid_rows: usize,
}

impl Function for AttentionKl {
    fn name(&self) -> &'static str {
        "attention_kl"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let n = self.targets[0].valid_rows.len();
        let g = grad.item();
        let batch = self.targets.len();
        let mut dw = vec![0.0; batch * n * n];
        if self.valid_rows > 0 {
            let scale = g / self.valid_rows as f64;
            for (b, target) in self.targets.iter().enumerate() {
                for i in (0..n).filter(|&i| target.valid_rows[i]) {
                    for j in 0..n {
                        let t = target.weights.data()[i * n + j];
                        if t > 0.0 {
                            let idx = (b * n + i) * n + j;
                            let w = inputs[0].data()[idx];
                            if w > KL_WEIGHT_FLOOR {
                                dw[idx] = -scale * t / w;
                            }
                        }
                    }
                }
            }
        }
        let shape = inputs[0].shape().to_vec();
        vec![Some(Tensor::new(shape, dw).expect("shape"))]
    }
}

/// `(1/N_valid) Σ_i Σ_j w*_ij ln(w*_ij / w_ij)` over the valid rows of every
/// image. `weights` is `[N, N]` (one target) or `[B, N, N]` (one per image).
pub fn attention_loss(
    tape: &mut Tape,
    weights: Var,
    targets: &[GroundTruthAttention],
) -> Result<Var> {
    let shape = tape.shape(weights).to_vec();
    let (batch, n) = match *shape.as_slice() {
        [n, m] if n == m => (1, n),
        [b, n, m] if n == m => (b, n),
        _ => {
            return Err(TensorError::Shape {
                op: "attention_loss",
                lhs: shape,
                rhs: vec![],
            })
        }
    };
    if targets.len() != batch || targets.iter().any(|t| t.valid_rows.len() != n) {
        return Err(TensorError::Shape {
            op: "attention_loss",
            lhs: shape,
            rhs: vec![
                targets.len(),
                targets.first().map_or(0, |t| t.valid_rows.len()),
            ],
        });
    }
    let w = tape.value(weights).data();
    let mut total = 0.0;
    let mut rows = 0;
    for (b, t) in targets.iter().enumerate() {
        let (s, r) = kl_rows(&w[b * n * n..(b + 1) * n * n], t);
        total += s;
        rows += r;
    }
    let value = if rows > 0 { total / rows as f64 } else { 0.0 };
    Ok(tape.custom(
        &[weights],
        Tensor::scalar(value),
        Box::new(AttentionKl {
            targets: targets.to_vec(),
            valid_rows: rows,
        }),
    ))
}

/// Where per-pixel logits live inside a tensor.
#[derive(Clone, Copy, Debug)]
enum Layout {
    /// `[N, C]`
    Rows { channels: usize },
    /// `[B, C, h, w]` or `[C, h, w]`
    Map { channels: usize, plane: usize },
}

impl Layout {
    fn detect(shape: &[usize], op: &'static str) -> Result<(Self, usize)> {
        match *shape {
            [n, c] => Ok((Layout::Rows { channels: c }, n)),
            [c, h, w] => Ok((
                Layout::Map {
                    channels: c,
                    plane: h * w,
                },
                h * w,
            )),
            [b, c, h, w] => Ok((
                Layout::Map {
                    channels: c,
                    plane: h * w,
                },
                b * h * w,
            )),
            _ => Err(TensorError::Shape {
                op,
                lhs: shape.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn channels(self) -> usize {
        match self {
            Layout::Rows { channels } | Layout::Map { channels, .. } => channels,
        }
    }

    fn index(self, pixel: usize, channel: usize) -> usize {
        match self {
            Layout::Rows { channels } => pixel * channels + channel,
            Layout::Map { channels, plane } => {
                (pixel / plane * channels + channel) * plane + pixel % plane
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn check_labels(
    labels: &[usize],
    valid: &[bool],
    pixels: usize,
    bins: usize,
    op: &'static str,
) -> Result<usize> {
    if labels.len() != pixels || valid.len() != pixels {
        return Err(TensorError::Shape {
            op,
            lhs: vec![pixels],
            rhs: vec![labels.len(), valid.len()],
        });
    }
    if let Some((i, &l)) = labels
        .iter()
        .enumerate()
        .find(|(i, &l)| valid[*i] && l >= bins)
    {
        return Err(TensorError::Param(format!(
            "label {l} at pixel {i} outside [0, {bins})"
        )));
    }
    Ok(valid.iter().filter(|&&v| v).count())
}

#[derive(Debug)]
struct OrdinalNll {
    layout: Layout,
    labels: Vec<usize>,
    valid: Vec<bool>,
    count: usize,
}

impl Function for OrdinalNll {
    fn name(&self) -> &'static str {
        "ordinal_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let y = inputs[0].data();
        let mut dy = vec![0.0; y.len()];
        if self.count > 0 {
            let scale = grad.item() / self.count as f64;
            let bins = self.layout.channels() / 2;
            for (p, &label) in self.labels.iter().enumerate() {
                if !self.valid[p] {
                    continue;
                }
                for k in 0..bins {
                    let (lo, hi) = (self.layout.index(p, 2 * k), self.layout.index(p, 2 * k + 1));
                    let target = if k < label { 1.0 } else { 0.0 };
                    let d = scale * (sigmoid(y[hi] - y[lo]) - target);
                    dy[hi] += d;
                    dy[lo] -= d;
                }
            }
        }
        vec![Some(
            Tensor::new(inputs[0].shape().to_vec(), dy).expect("shape"),
        )]
    }
}

/// Mean over valid pixels of
/// `θ = −Σ_{k<l*} ln P^k − Σ_{k≥l*} ln(1 − P^k)`, evaluated from logit pairs.
///
/// `logits` is `[N, 2K]` or a `[B, 2K, h, w]` map whose pixels are ordered
/// batch-major.
pub fn ordinal_loss(tape: &mut Tape, logits: Var, labels: &[usize], valid: &[bool]) -> Result<Var> {
    let (layout, pixels) = Layout::detect(tape.shape(logits), "ordinal_loss")?;
    if layout.channels() % 2 != 0 {
        return Err(TensorError::Param(format!(
            "ordinal logits need an even channel count, got {}",
            layout.channels()
        )));
    }
    let bins = layout.channels() / 2;
    let count = check_labels(labels, valid, pixels, bins, "ordinal_loss")?;
    let y = tape.value(logits).data();
    let mut total = 0.0;
    for (p, &label) in labels.iter().enumerate() {
        if !valid[p] {
            continue;
        }
        for k in 0..bins {
            let z = y[layout.index(p, 2 * k + 1)] - y[layout.index(p, 2 * k)];
            // −ln σ(z) = softplus(−z), −ln(1 − σ(z)) = softplus(z)
            total += if k < label { softplus(-z) } else { softplus(z) };
        }
    }
    let value = if count > 0 { total / count as f64 } else { 0.0 };
    Ok(tape.custom(
        &[logits],
        Tensor::scalar(value),
        Box::new(OrdinalNll {
            layout,
            labels: labels.to_vec(),
            valid: valid.to_vec(),
            count,
        }),
    ))
}

#[derive(Debug)]
struct SoftmaxNll {
    layout: Layout,
    labels: Vec<usize>,
    valid: Vec<bool>,
    count: usize,
}

impl Function for SoftmaxNll {
    fn name(&self) -> &'static str {
        "cross_entropy_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let y = inputs[0].data();
        let mut dy = vec![0.0; y.len()];
        if self.count > 0 {
            let scale = grad.item() / self.count as f64;
            let k = self.layout.channels();
            let mut probs = vec![0.0; k];
            for (p, &label) in self.labels.iter().enumerate() {
                if !self.valid[p] {
                    continue;
                }
                for (c, pr) in probs.iter_mut().enumerate() {
                    *pr = y[self.layout.index(p, c)];
                }
                crate::tensor::softmax_row(&mut probs);
                for (c, pr) in probs.iter().enumerate() {
                    let target = if c == label { 1.0 } else { 0.0 };
                    dy[self.layout.index(p, c)] = scale * (pr - target);
                }
            }
        }
        vec![Some(
            Tensor::new(inputs[0].shape().to_vec(), dy).expect("shape"),
        )]
    }
}

/// Mean negative log-softmax of the true bin over valid pixels.
/// `logits` is `[N, K]` or `[B, K, h, w]`.
pub fn cross_entropy_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    valid: &[bool],
) -> Result<Var> {
    let (layout, pixels) = Layout::detect(tape.shape(logits), "cross_entropy_loss")?;
    let k = layout.channels();
    let count = check_labels(labels, valid, pixels, k, "cross_entropy_loss")?;
    let y = tape.value(logits).data();
    let mut total = 0.0;
    for (p, &label) in labels.iter().enumerate() {
        if !valid[p] {
            continue;
        }
        let row: Vec<f64> = (0..k).map(|c| y[layout.index(p, c)]).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    let value = if count > 0 { total / count as f64 } else { 0.0 };
    Ok(tape.custom(
        &[logits],
        Tensor::scalar(value),
        Box::new(SoftmaxNll {
            layout,
            labels: labels.to_vec(),
            valid: valid.to_vec(),
            count,
        }),
    ))
}

/// `α_att · L_att + α_ord · L_ord`.
pub fn total_loss(
    tape: &mut Tape,
    attention: Var,
    ordinal: Var,
    weights: LossWeights,
) -> Result<Var> {
    let a = tape.scale(attention, weights.alpha_att);
    let o = tape.scale(ordinal, weights.alpha_ord);
    tape.add(a, o)
}
