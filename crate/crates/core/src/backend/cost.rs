use crate::backend::{
    check_batch, check_observation, check_tag, ActionChunk, Backend, BackendConfig,
    BackendError, CostModelParams, Observation, Timed,
};
use crate::kv_manager::{BackendTag, BatchedState, KvCache};

/// Latency-only backend. Caches hold position counts; tokens are synthesized
/// from each request's decode counter and never equal EOS, so requests always
/// run to their budget.
#[derive(Debug, Clone)]
pub struct CostBackend {
    config: BackendConfig,
    costs: CostModelParams,
}

impl CostBackend {
    pub fn new(config: BackendConfig, costs: CostModelParams) -> Self {
        Self { config, costs }
    }

    fn synth_token(&self, index: usize) -> u32 {
        let vocab = self.config.vocab;
        let t = (index as u32) % vocab;
        if t == self.config.eos_token {
            (t + 1) % vocab
        } else {
            t
        }
    }
}

impl Backend for CostBackend {
    fn tag(&self) -> BackendTag {
        BackendTag::CostModel
    }

    fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn costs(&self) -> &CostModelParams {
        &self.costs
    }

    fn prefill(&self, obs: &Observation) -> Result<Timed<KvCache>, BackendError> {
        check_observation(obs, self.config.vocab)?;
        let mut kv = KvCache::new(self.tag(), self.config.layers, 0);
        for layer in &mut kv.layers {
            layer.len = obs.tokens.len();
        }
        Ok(Timed {
            value: kv,
            micros: self.costs.prefill(obs.tokens.len()),
        })
    }

    fn action_denoise(&self, kv: &KvCache, steps: u32) -> Result<Timed<ActionChunk>, BackendError> {
        check_tag(self.tag(), kv)?;
        if steps == 0 {
            return Err(BackendError::ZeroSteps);
        }
        let rows = vec![vec![0.0; self.config.action_dim]; self.config.horizon];
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
        for i in 0..m {
            let max_len = batched.meta[i].max_len;
            let advance = (k as usize).min(max_len.saturating_sub(batched.token_buffers[i].len()));
            for _ in 0..advance {
                let next = self.synth_token(batched.token_buffers[i].len());
                batched.token_buffers[i].push(next);
            }
            for layer in &mut batched.kv_batch[i].layers {
                layer.len += advance;
            }
            batched.flags[i] = batched.token_buffers[i].len() >= max_len;
        }
        Ok(Timed {
            value: batched,
            micros: self.costs.decode(k, m),
        })
    }
}
