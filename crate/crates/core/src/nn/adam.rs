use std::collections::HashMap;

use super::{Param, ParamKind};

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u32,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Apply one update to every trainable parameter the visitor yields.
    pub fn step(&mut self, visit: impl FnOnce(&mut dyn FnMut(&str, &mut Param))) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        visit(&mut |name, p| {
            if p.kind != ParamKind::Trainable {
                return;
            }
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p.value[i] -= lr * mh / (vh.sqrt() + eps);
            }
        });
    }
}
