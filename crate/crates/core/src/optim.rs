//! Decoupled-weight-decay Adam and the warmup+cosine learning-rate schedule.

use crate::nn::ParamStore;
use crate::tensor::Scalar;
use indexmap::IndexMap;
use ndarray::ArrayD;

/// AdamW with bias correction. Weight decay is decoupled (applied directly
/// to the parameter, scaled by lr) and skipped for biases and normalization
/// affines, identified by their `.bias` / `.gamma` / `.beta` name suffixes.
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    m: IndexMap<String, ArrayD<f64>>,
    v: IndexMap<String, ArrayD<f64>>,
    step: u64,
}

fn decay_exempt(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta")
}

impl AdamW {
    pub fn new(betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        AdamW { betas, eps, weight_decay, m: IndexMap::new(), v: IndexMap::new(), step: 0 }
    }

    /// Applies one update. `grads` holds (parameter name, gradient) pairs in
    /// a caller-fixed order; moment state is kept in f64 regardless of the
    /// parameter dtype so long runs do not drift between f32 and f64 builds.
    pub fn step<S: Scalar>(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &[(String, ArrayD<S>)],
        lr: f64,
    ) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            assert_eq!(m.shape(), grad.shape(), "moment/grad shape drift for {name}");
            let wd = if decay_exempt(name) { 0.0 } else { self.weight_decay };
            store.update(name, |value| {
                for (((pv, gv), mv), vv) in
                    value.iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut())
                {
                    let g = (*gv).to_f64();
                    *mv = b1 * *mv + (1.0 - b1) * g;
                    *vv = b2 * *vv + (1.0 - b2) * g * g;
                    let m_hat = *mv / bc1;
                    let v_hat = *vv / bc2;
                    let p = (*pv).to_f64();
                    let upd = m_hat / (v_hat.sqrt() + self.eps) + wd * p;
                    *pv = S::from_f64(p - lr * upd);
                }
            });
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Linear warmup to `base_lr`, then cosine decay to exactly zero at the
/// final step. `step` is zero-based.
pub fn lr_at_step(base_lr: f64, step: usize, total_steps: usize, warmup_steps: usize) -> f64 {
    assert!(total_steps > 0 && step < total_steps, "step out of range");
    assert!(warmup_steps < total_steps, "warmup must leave decay room");
    if step < warmup_steps {
        base_lr * (step + 1) as f64 / warmup_steps as f64
    } else {
        let progress = (step + 1 - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
        base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
