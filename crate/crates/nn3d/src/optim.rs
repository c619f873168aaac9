use crate::param::Parameterized;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f32,
    pub betas: (f32, f32),
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(lr: f32, betas: (f32, f32), weight_decay: f32) -> Self {
        Self {
            lr,
            betas,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held by `model`.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - (b1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (b2 as f64).powi(self.step as i32);
        let step_size = (self.lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let decay = 1.0 - self.lr * self.weight_decay;
        let eps = self.eps;
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        model.visit_params(&mut |p| {
            if ms.len() <= idx {
                ms.push(vec![0.0; p.len()]);
                vs.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut ms[idx], &mut vs[idx]);
            assert_eq!(m.len(), p.len(), "parameter set changed between optimizer steps");
            for (((w, g), mi), vi) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= decay;
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let denom = vi.sqrt() / bc2_sqrt + eps;
                *w -= step_size * *mi / denom;
            }
            idx += 1;
        });
    }
}
