/// RMSProp hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        RmsProp {
            lr: 2.5e-4,
            decay: 0.95,
            eps: 1e-8,
        }
    }
}

/// In-place update: `acc = d·acc + (1-d)·g²`, `p -= lr·g / sqrt(acc + eps)`.
pub fn rmsprop_update(params: &mut [f64], grads: &[f64], acc: &mut [f64], opt: RmsProp) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), acc.len());
    for ((p, &g), a) in params.iter_mut().zip(grads).zip(acc.iter_mut()) {
        *a = opt.decay * *a + (1.0 - opt.decay) * g * g;
        *p -= opt.lr * g / (*a + opt.eps).sqrt();
    }
}
