use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Classic L2: `weight_decay * param` is added to the gradient before
    /// the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Moment accumulators for a fixed list of flat parameter buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every buffer in `params`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), NumericsError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NumericsError::InvalidArgument {
                op: "adam_step",
                message: format!(
                    "{} params / {} grads for {} buffers",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[k].len() || g.len() != p.len() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    left: vec![p.len()],
                    right: vec![g.len()],
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..p.len() {
                let grad = g[j] + c.weight_decay * p[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * grad;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * grad * grad;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(NumericsError::NonFinite("adam_step"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(weight_decay: f64) -> AdamConfig {
        AdamConfig {
            weight_decay,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut s = AdamState::new(cfg(0.0), &[3]);
        let mut p = vec![0.5, -1.0, 2.0];
        for _ in 0..5 {
            s.step(&mut [&mut p], &[&[0.0; 3]]).unwrap();
        }
        assert_eq!(p, vec![0.5, -1.0, 2.0]);
        assert_eq!(s.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t = 1: m̂ = g, v̂ = g², update = lr · g / (|g| + eps)
        let mut s = AdamState::new(cfg(0.0), &[1]);
        let mut p = vec![0.0];
        s.step(&mut [&mut p], &[&[1.0]]).unwrap();
        let expected = -0.002 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn pure_decay_shrinks_magnitude() {
        let mut s = AdamState::new(cfg(1e-2), &[2]);
        let mut p = vec![1.5, -0.75];
        let mut prev = p.clone();
        for _ in 0..10 {
            s.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
            for (a, b) in p.iter().zip(&prev) {
                assert!(a.abs() < b.abs());
            }
            prev = p.clone();
        }
    }

    #[test]
    fn misaligned_buffers_rejected() {
        let mut s = AdamState::new(cfg(0.0), &[2]);
        let mut p = vec![0.0; 3];
        assert!(s.step(&mut [&mut p], &[&[0.0; 3]]).is_err());
    }
}
