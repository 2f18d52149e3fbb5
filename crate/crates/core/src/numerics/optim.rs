use super::mat::Mat;
use super::param::ParamSet;

pub const DEFAULT_LR: f64 = 0.0008;

/// Adam with bias correction. Moments are allocated lazily per parameter
/// group on the first step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Vec<(Mat, Mat)>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(DEFAULT_LR)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every group, then zeroes all gradients.
    ///
    /// Non-finite gradient entries are treated as zero; the return value is
    /// how many were replaced.
    pub fn step(&mut self, groups: &mut [&mut ParamSet]) -> usize {
        if self.moments.len() < groups.len() {
            self.moments.resize_with(groups.len(), Vec::new);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut replaced = 0;
        for (set, moments) in groups.iter_mut().zip(self.moments.iter_mut()) {
            if moments.is_empty() {
                *moments = set
                    .iter()
                    .map(|p| {
                        let (r, c) = p.value.shape();
                        (Mat::zeros(r, c), Mat::zeros(r, c))
                    })
                    .collect();
            }
            for (p, (m, v)) in set.iter_mut().zip(moments.iter_mut()) {
                let grads = p.grad.data();
                let values = p.value.data_mut();
                for (k, &g0) in grads.iter().enumerate() {
                    let g = if g0.is_finite() {
                        g0
                    } else {
                        replaced += 1;
                        0.0
                    };
                    let mk = &mut m.data_mut()[k];
                    *mk = self.beta1 * *mk + (1.0 - self.beta1) * g;
                    let mhat = *mk / bc1;
                    let vk = &mut v.data_mut()[k];
                    *vk = self.beta2 * *vk + (1.0 - self.beta2) * g * g;
                    let vhat = *vk / bc2;
                    values[k] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
            set.zero_grads();
        }
        replaced
    }
}
