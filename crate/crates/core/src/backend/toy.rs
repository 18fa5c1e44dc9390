use crate::backend::{
    check_batch, check_observation, check_tag, ActionChunk, Backend, BackendConfig,
    BackendError, CostModelParams, Observation, Timed,
};
use crate::kv_manager::{BackendTag, BatchedState, KvCache};
use crate::rng::SplitMix64;

const WEIGHT_SCALE: f64 = 0.1;

/// Deliberate defects used to check that the oracle suites catch bugs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Decoded tokens are emitted without appending their keys and values.
    SkipKvAppend,
}

/// Row-major `rows x cols` matrix applied as `x · W`.
#[derive(Debug, Clone)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    fn seeded(rng: &mut SplitMix64, rows: usize, cols: usize) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.next_symmetric(WEIGHT_SCALE))
            .collect();
        Self { rows, cols, data }
    }

    fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn apply(&self, x: &[f32]) -> Vec<f32> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0f32; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += xr * w;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Layer {
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w_up: Matrix,
    w_down: Matrix,
}

/// Decoder-only transformer with seeded weights, causal attention, one
/// feed-forward block per layer and no normalization.
///
/// Each request attends only to its own cache, so a request's output never
/// depends on what else is in the batch.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    config: BackendConfig,
    costs: CostModelParams,
    embed: Matrix,
    layers: Vec<Layer>,
    head: Matrix,
    /// One `action_dim x d_model` map per horizon row.
    action_maps: Vec<Matrix>,
    fault: Option<Fault>,
}

impl ToyBackend {
    pub fn new(config: BackendConfig, costs: CostModelParams) -> Self {
        let d = config.d_model;
        let ff = 2 * d;
        let mut rng = SplitMix64::new(config.seed);
        let embed = Matrix::seeded(&mut rng, config.vocab as usize, d);
        let layers = (0..config.layers)
            .map(|_| Layer {
                wq: Matrix::seeded(&mut rng, d, d),
                wk: Matrix::seeded(&mut rng, d, d),
                wv: Matrix::seeded(&mut rng, d, d),
                wo: Matrix::seeded(&mut rng, d, d),
                w_up: Matrix::seeded(&mut rng, d, ff),
                w_down: Matrix::seeded(&mut rng, ff, d),
            })
            .collect();
        let head = Matrix::seeded(&mut rng, d, config.vocab as usize);
        let action_maps = (0..config.horizon)
            .map(|_| Matrix::seeded(&mut rng, d, config.action_dim))
            .collect();
        Self {
            config,
            costs,
            embed,
            layers,
            head,
            action_maps,
            fault: None,
        }
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    fn position_encoding(&self, pos: usize) -> Vec<f32> {
        let d = self.config.d_model;
        (0..d)
            .map(|i| {
                let pair = (i / 2) as f64;
                let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
                (if i % 2 == 0 { angle.sin() } else { angle.cos() }) as f32
            })
            .collect()
    }

    /// Runs one position through the stack against `kv`, optionally
    /// appending its keys and values, and returns the final hidden state.
    fn forward(&self, token: u32, kv: &mut KvCache, append: bool) -> Vec<f32> {
        let pos = kv.seq_len();
        let d = self.config.d_model;
        let head_dim = d / self.config.n_heads;
        let scale = 1.0 / (head_dim as f32).sqrt();

        let mut x: Vec<f32> = self
            .embed
            .row(token as usize)
            .iter()
            .zip(self.position_encoding(pos))
            .map(|(e, p)| e + p)
            .collect();

        for (layer, block) in self.layers.iter().zip(kv.layers.iter_mut()) {
            let q = layer.wq.apply(&x);
            let k = layer.wk.apply(&x);
            let v = layer.wv.apply(&x);

            let mut attended = vec![0.0f32; d];
            for h in 0..self.config.n_heads {
                let span = h * head_dim..(h + 1) * head_dim;
                let dot = |key: &[f32]| -> f32 {
                    q[span.clone()]
                        .iter()
                        .zip(&key[span.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f32>()
                        * scale
                };
                let mut scores: Vec<f32> = (0..block.len).map(|j| dot(block.key(j))).collect();
                scores.push(dot(&k));
                let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let weights: Vec<f32> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f32 = weights.iter().sum();
                let out = &mut attended[span.clone()];
                for (j, w) in weights.iter().enumerate() {
                    let value = if j < block.len { block.value(j) } else { &v[..] };
                    for (o, val) in out.iter_mut().zip(&value[span.clone()]) {
                        *o += w / total * val;
                    }
                }
            }
            if append {
                block.push(&k, &v);
            }

            for (xi, a) in x.iter_mut().zip(layer.wo.apply(&attended)) {
                *xi += a;
            }
            let hidden: Vec<f32> = layer.w_up.apply(&x).into_iter().map(|h| h.max(0.0)).collect();
            for (xi, f) in x.iter_mut().zip(layer.w_down.apply(&hidden)) {
                *xi += f;
            }
        }
        x
    }

    /// Greedy argmax over the vocabulary; ties go to the lowest id.
    fn next_token(&self, readout: &[f32]) -> u32 {
        let logits = self.head.apply(readout);
        let mut best = 0usize;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        best as u32
    }

    fn target(&self, kv: &KvCache) -> Vec<Vec<f32>> {
        let last = kv.layers.last().expect("at least one layer");
        let d = self.config.d_model;
        let mut context = vec![0.0f32; d];
        for j in 0..last.len {
            for (c, v) in context.iter_mut().zip(last.value(j)) {
                *c += v;
            }
        }
        let n = last.len.max(1) as f32;
        context.iter_mut().for_each(|c| *c /= n);
        self.action_maps.iter().map(|m| m.apply(&context)).collect()
    }
}

impl Backend for ToyBackend {
    fn tag(&self) -> BackendTag {
        BackendTag::Toy(self.config.seed)
    }

    fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn costs(&self) -> &CostModelParams {
        &self.costs
    }

    fn prefill(&self, obs: &Observation) -> Result<Timed<KvCache>, BackendError> {
        check_observation(obs, self.config.vocab)?;
        let mut kv = KvCache::new(self.tag(), self.config.layers, self.config.d_model);
        for &token in &obs.tokens {
            kv.readout = self.forward(token, &mut kv, true);
        }
        Ok(Timed {
            value: kv,
            micros: self.costs.prefill(obs.tokens.len()),
        })
    }

    /// Euler flow from a zero chunk toward `target(c)`. The blend form puts a
    /// weight of exactly 1 on the target in the last step, so the result is
    /// `target(c)` bit-for-bit regardless of the step count.
    fn action_denoise(&self, kv: &KvCache, steps: u32) -> Result<Timed<ActionChunk>, BackendError> {
        check_tag(self.tag(), kv)?;
        if steps == 0 {
            return Err(BackendError::ZeroSteps);
        }
        let target = self.target(kv);
        let mut rows: Vec<Vec<f32>> = target.iter().map(|r| vec![0.0; r.len()]).collect();
        for s in 0..steps {
            let w = 1.0 / (steps - s) as f32;
            for (row, goal) in rows.iter_mut().zip(&target) {
                for (a, g) in row.iter_mut().zip(goal) {
                    *a = *a * (1.0 - w) + g * w;
                }
            }
        }
        Ok(Timed {
            value: ActionChunk { rows },
            micros: self.costs.denoise(steps),
        })
    }

    fn batched_language_decode(
        &self,
        mut batched: BatchedState,
        k: u32,
    ) -> Result<Timed<BatchedState>, BackendError> {
        check_batch(&batched, k)?;
        for kv in &batched.kv_batch {
            check_tag(self.tag(), kv)?;
        }
        let m = batched.len();
        let append = self.fault != Some(Fault::SkipKvAppend);
        for i in 0..m {
            let max_len = batched.meta[i].max_len;
            let kv = &mut batched.kv_batch[i];
            let tokens = &mut batched.token_buffers[i];
            let flag = &mut batched.flags[i];
            for _ in 0..k {
                if *flag {
                    break;
                }
                let token = self.next_token(&kv.readout);
                tokens.push(token);
                kv.readout = self.forward(token, kv, append);
                *flag = token == self.config.eos_token || tokens.len() >= max_len;
            }
        }
        Ok(Timed {
            value: batched,
            micros: self.costs.decode(k, m),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kv_manager::{batch, unbatch, GenerationState, RequestId};

    fn backend() -> ToyBackend {
        ToyBackend::new(BackendConfig::default(), CostModelParams::default())
    }

    fn obs(tokens: &[u32]) -> Observation {
        Observation {
            frame: 0,
            tokens: tokens.to_vec(),
        }
    }

    #[test]
    fn prefill_shape_and_determinism() {
        let b = backend();
        let o = obs(&[3, 14, 15, 9, 26, 5]);
        let a = b.prefill(&o).unwrap().value;
        assert_eq!(a.num_layers(), 2);
        assert!(a.layers.iter().all(|l| l.len == 6));
        assert!(a.is_consistent());
        let again = b.prefill(&o).unwrap().value;
        assert_eq!(a, again);
    }

    #[test]
    fn prefill_rejects_out_of_vocab() {
        let b = backend();
        assert_eq!(
            b.prefill(&obs(&[1, 64])).unwrap_err(),
            BackendError::TokenOutOfRange { token: 64, vocab: 64 }
        );
        assert_eq!(b.prefill(&obs(&[])).unwrap_err(), BackendError::EmptyObservation);
    }

    #[test]
    fn denoise_lands_on_target_for_any_step_count() {
        let b = backend();
        let kv = b.prefill(&obs(&[1, 2, 3, 4])).unwrap().value;
        let target = b.target(&kv);
        let five = b.action_denoise(&kv, 5).unwrap().value;
        let ten = b.action_denoise(&kv, 10).unwrap().value;
        let one = b.action_denoise(&kv, 1).unwrap().value;
        assert_eq!(five.rows, target);
        assert_eq!(five, ten);
        assert_eq!(one, ten);
        assert_eq!(ten.horizon(), 10);
        assert!(ten.is_finite());
    }

    #[test]
    fn denoise_rejects_foreign_cache() {
        let b = backend();
        let other = ToyBackend::new(
            BackendConfig {
                seed: 99,
                ..BackendConfig::default()
            },
            CostModelParams::default(),
        );
        let kv = other.prefill(&obs(&[1, 2])).unwrap().value;
        assert!(matches!(
            b.action_denoise(&kv, 3),
            Err(BackendError::TagMismatch { .. })
        ));
        assert_eq!(
            b.action_denoise(&b.prefill(&obs(&[1])).unwrap().value, 0).unwrap_err(),
            BackendError::ZeroSteps
        );
    }

    #[test]
    fn decode_advances_and_clamps() {
        let b = ToyBackend::new(
            BackendConfig {
                eos_token: 0,
                ..BackendConfig::default()
            },
            CostModelParams::default(),
        );
        let kv = b.prefill(&obs(&[7, 8, 9])).unwrap().value;
        let state = GenerationState::init(kv, 0, 3);
        let batched = batch(vec![state], vec![RequestId(0)]).unwrap();
        let out = b.batched_language_decode(batched, 8).unwrap().value;
        let (_, s) = unbatch(out).unwrap().remove(0);
        assert!(s.terminated);
        assert!(s.tokens.len() <= 3);
        s.check(0).unwrap();
    }

    #[test]
    fn denoise_does_not_touch_cache() {
        let b = backend();
        let kv = b.prefill(&obs(&[5, 6, 7])).unwrap().value;
        let before = kv.clone();
        b.action_denoise(&kv, 10).unwrap();
        assert_eq!(kv, before);
    }
}
