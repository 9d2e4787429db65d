//! Context aggregation: pixel-level self-attention plus image pooling.

use crate::tensor::{BatchStats, Result, RunningStats, Tape, Tensor, TensorError, Var};

/// Row-stochastic `N × N` matrix of attention weights for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    weights: Tensor,
}

impl AttentionMap {
    /// Validates non-negativity and that every row sums to one (±1e-9).
    pub fn new(weights: Tensor) -> Result<Self> {
        let &[n, m] = weights.shape() else {
            return Err(TensorError::Shape {
                op: "attention map",
                lhs: weights.shape().to_vec(),
                rhs: vec![],
            });
        };
        if n != m {
            return Err(TensorError::Shape {
                op: "attention map",
                lhs: vec![n],
                rhs: vec![m],
            });
        }
        for (i, row) in weights.data().chunks_exact(n).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&w| !(w >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(TensorError::Contract(format!(
                    "attention row {i} is not a distribution (sum {total})"
                )));
            }
        }
        Ok(Self { weights })
    }

    /// Splits a batched `[B, N, N]` tensor into per-image maps.
    pub fn split_batch(weights: &Tensor) -> Result<Vec<Self>> {
        let &[b, n, m] = weights.shape() else {
            return Ok(vec![Self::new(weights.clone())?]);
        };
        (0..b)
            .map(|i| {
                let data = weights.data()[i * n * m..(i + 1) * n * m].to_vec();
                Self::new(Tensor::new(vec![n, m], data)?)
            })
            .collect()
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.size();
        &self.weights.data()[i * n..(i + 1) * n]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.weights
    }

    /// Row `i` reshaped to an image and rescaled so its maximum maps to 65535.
    pub fn row_image_u16(&self, i: usize) -> Vec<u16> {
        let row = self.row(i);
        let max = row.iter().copied().fold(0.0, f64::max);
        row.iter()
            .map(|&w| {
                if max > 0.0 {
                    (w / max * 65535.0).round() as u16
                } else {
                    0
                }
            })
            .collect()
    }
}

/// `logit[i][j] = ⟨Q_i, K_j⟩ / √C` for `[N, C]` or `[B, N, C]` embeddings.
pub fn attention_logits(tape: &mut Tape, keys: Var, queries: Var) -> Result<Var> {
    let (ks, qs) = (tape.shape(keys).to_vec(), tape.shape(queries).to_vec());
    if ks != qs || !(ks.len() == 2 || ks.len() == 3) {
        return Err(TensorError::Shape {
            op: "attention_logits",
            lhs: ks,
            rhs: qs,
        });
    }
    let channels = *ks.last().expect("rank >= 2");
    let kt = tape.transpose(keys)?;
    let raw = tape.matmul(queries, kt)?;
    Ok(tape.scale(raw, 1.0 / (channels as f64).sqrt()))
}

/// Row-wise softmax: row `i` is pixel `i`'s distribution over all positions.
pub fn attention_weights(tape: &mut Tape, logits: Var) -> Result<Var> {
    tape.softmax_rows(logits)
}

/// `c_i = Σ_j w_ij v_j`.
pub fn attend(tape: &mut Tape, weights: Var, values: Var) -> Result<Var> {
    tape.matmul(weights, values)
}

/// Global average pooling replicated back over the input grid.
pub fn image_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (h, w) = match shape.len() {
        3 | 4 => (shape[shape.len() - 2], shape[shape.len() - 1]),
        _ => {
            return Err(TensorError::Shape {
                op: "image_pool",
                lhs: shape,
                rhs: vec![],
            })
        }
    };
    let pooled = tape.global_avg_pool(x)?;
    tape.spatial_broadcast(pooled, h, w)
}

/// Tape handles of the module's parameters.
///
/// The key and query embeddings share one transform (1×1 conv, batch norm,
/// ReLU), so there is a single set of handles for both.
#[derive(Clone, Copy, Debug)]
pub struct CamVars {
    pub key_kernel: Var,
    pub key_gamma: Var,
    pub key_beta: Var,
    pub value_kernel: Var,
    pub value_bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    Train,
    Eval(&'a RunningStats),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CamOptions {
    /// When false the pooled branch is replaced by zeros (same channel count).
    pub image_pooling: bool,
}

impl Default for CamOptions {
    fn default() -> Self {
        Self {
            image_pooling: true,
        }
    }
}

#[derive(Debug)]
pub struct CamOutput {
    /// `[B, C_V + C_in, h, w]`: attended context followed by the pooled map.
    pub features: Var,
    /// `[B, N, N]` attention weights.
    pub attention: Var,
    /// Batch statistics of the key/query batch norm in training mode.
    pub key_stats: Option<BatchStats>,
}

/// Runs the context aggregation module on a `[B, C_in, h, w]` feature map.
pub fn cam_forward(
    tape: &mut Tape,
    x: Var,
    vars: &CamVars,
    norm: NormMode<'_>,
    options: CamOptions,
) -> Result<CamOutput> {
    let &[b, c_in, h, w] = tape.shape(x) else {
        return Err(TensorError::Shape {
            op: "cam_forward",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![],
        });
    };
    let n = h * w;

    let key = tape.conv2d(x, vars.key_kernel, None, 1, 1)?;
    let (key, key_stats) = match norm {
        NormMode::Train => {
            let (y, stats) = tape.batch_norm_train(key, vars.key_gamma, vars.key_beta)?;
            (y, Some(stats))
        }
        NormMode::Eval(running) => (
            tape.batch_norm_eval(key, vars.key_gamma, vars.key_beta, running)?,
            None,
        ),
    };
    let key = tape.relu(key);
    let c_k = tape.shape(key)[1];
    let key = tape.reshape(key, &[b, c_k, n])?;
    let embed = tape.transpose(key)?; // [B, N, C_K], serves as both K and Q
    let logits = attention_logits(tape, embed, embed)?;
    let attention = attention_weights(tape, logits)?;

    let value = tape.conv2d(x, vars.value_kernel, Some(vars.value_bias), 1, 1)?;
    let c_v = tape.shape(value)[1];
    let value = tape.reshape(value, &[b, c_v, n])?;
    let value = tape.transpose(value)?;
    let context = attend(tape, attention, value)?;
    let context = tape.transpose(context)?;
    let context = tape.reshape(context, &[b, c_v, h, w])?;

    let pooled = if options.image_pooling {
        image_pool(tape, x)?
    } else {
        tape.constant(Tensor::zeros(&[b, c_in, h, w]))
    };
    let features = tape.concat_channels(context, pooled)?;
    Ok(CamOutput {
        features,
        attention,
        key_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
    }

    #[test]
    fn logits_examples() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let l = attention_logits(&mut tape, e, e).unwrap();
        let r = 1.0 / 2f64.sqrt();
        assert_eq!(tape.value(l).data(), &[r, 0.0, 0.0, r]);

        let same = tape.constant(Tensor::full(&[3, 2], 0.7));
        let l = attention_logits(&mut tape, same, same).unwrap();
        let v = tape.value(l).data()[0];
        assert!(tape.value(l).data().iter().all(|&x| x == v));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random(&[4, 3], &mut rng, 1.0);
        let q = random(&[4, 3], &mut rng, 1.0);
        let (kv, qv) = (tape.constant(k.clone()), tape.constant(q.clone()));
        let base = attention_logits(&mut tape, kv, qv).unwrap();
        let (k2, q2) = (
            tape.constant(k.map(|x| 2.0 * x)),
            tape.constant(q.map(|x| 2.0 * x)),
        );
        let doubled = attention_logits(&mut tape, k2, q2).unwrap();
        for (a, b) in tape
            .value(base)
            .data()
            .iter()
            .zip(tape.value(doubled).data())
        {
            assert!((4.0 * a - b).abs() < 1e-12);
        }

        let bad = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(attention_logits(&mut tape, kv, bad).is_err());
    }

    #[test]
    fn weights_examples() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[5, 5], 0.3));
        let w = attention_weights(&mut tape, c).unwrap();
        assert!(tape
            .value(w)
            .data()
            .iter()
            .all(|&x| (x - 0.2).abs() < 1e-15));

        let mut dominant = Tensor::zeros(&[1, 6]);
        dominant.data_mut()[2] = 20.0;
        let d = tape.constant(dominant);
        let w = attention_weights(&mut tape, d).unwrap();
        assert!(tape.value(w).data()[2] > 0.999);
    }

    #[test]
    fn attend_examples() {
        let mut tape = Tape::new();
        let v = Tensor::from_rows(&[&[1.0, 10.0], &[2.0, 20.0], &[6.0, 0.0]]);
        let vv = tape.constant(v);
        let uniform = tape.constant(Tensor::full(&[3, 3], 1.0 / 3.0));
        let c = attend(&mut tape, uniform, vv).unwrap();
        for row in tape.value(c).data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 10.0).abs() < 1e-12);
        }
        let perm = tape.constant(Tensor::from_rows(&[
            &[0.0, 0.0, 1.0],
            &[1.0, 0.0, 0.0],
            &[0.0, 1.0, 0.0],
        ]));
        let c = attend(&mut tape, perm, vv).unwrap();
        assert_eq!(tape.value(c).data(), &[6.0, 0.0, 1.0, 10.0, 2.0, 20.0]);
    }

    #[test]
    fn image_pool_examples() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[2, 3, 3], 1.5));
        let p = image_pool(&mut tape, c).unwrap();
        assert_eq!(tape.value(p), tape.value(c));

        let x = tape.constant(Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sqrt()));
        let p = image_pool(&mut tape, x).unwrap();
        for ch in tape.value(p).data().chunks(12) {
            assert!(ch.iter().all(|&v| v == ch[0]));
        }
        let pp = image_pool(&mut tape, p).unwrap();
        for (a, b) in tape.value(pp).data().iter().zip(tape.value(p).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_map_validation_and_export() {
        assert!(AttentionMap::new(Tensor::from_rows(&[&[0.5, 0.6], &[0.5, 0.5]])).is_err());
        let m = AttentionMap::new(Tensor::from_rows(&[&[0.25, 0.75], &[1.0, 0.0]])).unwrap();
        assert_eq!(m.row_image_u16(0), vec![21845, 65535]);
        assert_eq!(m.row_image_u16(1), vec![65535, 0]);
    }

    pub(crate) fn cam_inputs(c_in: usize, c_k: usize, c_v: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vec![
            random(&[1, c_in, 4, 4], &mut rng, 1.0),
            random(&[c_k, c_in, 1, 1], &mut rng, 0.8),
            Tensor::from_fn(&[c_k], |i| 1.0 + 0.1 * i as f64),
            Tensor::from_fn(&[c_k], |i| 0.3 - 0.05 * i as f64),
            random(&[c_v, c_in, 1, 1], &mut rng, 0.8),
            random(&[c_v], &mut rng, 0.2),
        ]
    }

    fn cam_vars(v: &[Var]) -> CamVars {
        CamVars {
            key_kernel: v[1],
            key_gamma: v[2],
            key_beta: v[3],
            value_kernel: v[4],
            value_bias: v[5],
        }
    }

    #[test]
    fn cam_output_shape_and_ablation() {
        let inputs = cam_inputs(4, 2, 3, 1);
        let mut tape = Tape::new();
        let v: Vec<Var> = inputs.into_iter().map(|t| tape.param(t)).collect();
        let out = cam_forward(
            &mut tape,
            v[0],
            &cam_vars(&v),
            NormMode::Train,
            CamOptions::default(),
        )
        .unwrap();
        assert_eq!(tape.shape(out.features), &[1, 3 + 4, 4, 4]);
        assert_eq!(tape.shape(out.attention), &[1, 16, 16]);
        AttentionMap::split_batch(tape.value(out.attention)).unwrap();

        let off = cam_forward(
            &mut tape,
            v[0],
            &cam_vars(&v),
            NormMode::Train,
            CamOptions {
                image_pooling: false,
            },
        )
        .unwrap();
        let f = tape.value(off.features);
        assert!(f.data()[3 * 16..].iter().all(|&x| x == 0.0));
        assert_eq!(
            &f.data()[..3 * 16],
            &tape.value(out.features).data()[..3 * 16]
        );
    }

    #[test]
    fn cam_gradcheck() {
        let inputs = cam_inputs(4, 2, 3, 7);
        // fixed random projection so every output channel matters
        let proj = Tensor::from_fn(&[7, 4, 4], |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
        let report = gradcheck::check(&inputs, |tape, v| {
            let out = cam_forward(
                tape,
                v[0],
                &cam_vars(v),
                NormMode::Train,
                CamOptions::default(),
            )?;
            let f = tape.reshape(out.features, &[7, 4, 4])?;
            let p = tape.constant(proj.clone());
            let m = tape.mul(f, p)?;
            Ok(tape.sum(m))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn both_branches_receive_gradient() {
        let inputs = cam_inputs(4, 2, 3, 11);
        let mut tape = Tape::new();
        let v: Vec<Var> = inputs.into_iter().map(|t| tape.param(t)).collect();
        let vars = cam_vars(&v);
        let out = cam_forward(
            &mut tape,
            v[0],
            &vars,
            NormMode::Train,
            CamOptions::default(),
        )
        .unwrap();
        // weight only the pooled channels for the input path check
        let weights = tape.constant(Tensor::from_fn(&[1, 7, 4, 4], |i| (i as f64 * 0.61).sin()));
        let m = tape.mul(out.features, weights).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        for p in [
            vars.key_kernel,
            vars.key_gamma,
            vars.value_kernel,
            vars.value_bias,
        ] {
            assert!(g.get(p).unwrap().max_abs() > 0.0);
        }

        // pooled branch alone still reaches the input
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[1, 4, 4, 4], |i| (i as f64).cos()));
        let pooled = image_pool(&mut tape, x).unwrap();
        let s = tape.sum(pooled);
        let g = tape.backward(s).unwrap();
        assert!(g
            .get(x)
            .unwrap()
            .data()
            .iter()
            .all(|&d| (d - 1.0).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn attention_rows_are_distributions(seed in 0u64..10_000, n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let e = tape.constant(random(&[n, 3], &mut rng, 4.0));
            let q = tape.constant(random(&[n, 3], &mut rng, 4.0));
            let l = attention_logits(&mut tape, e, q).unwrap();
            let w = attention_weights(&mut tape, l).unwrap();
            for row in tape.value(w).data().chunks(n) {
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn attend_stays_in_value_hull(seed in 0u64..10_000, n in 1usize..10, c in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let logits = tape.constant(random(&[n, n], &mut rng, 5.0));
            let w = attention_weights(&mut tape, logits).unwrap();
            let values = random(&[n, c], &mut rng, 3.0);
            let v = tape.constant(values.clone());
            let out = attend(&mut tape, w, v).unwrap();
            for ch in 0..c {
                let col: Vec<f64> = (0..n).map(|j| values.at(&[j, ch])).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for i in 0..n {
                    let o = tape.value(out).at(&[i, ch]);
                    prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
                }
            }
        }
    }
}
