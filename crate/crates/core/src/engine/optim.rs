use crate::engine::{Graph, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter vector.
#[derive(Clone, Debug)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Bias-corrected Adam. Moments are kept in 64-bit regardless of the graph's
/// scalar type.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        AdamState {
            config,
            step: 0,
            moments: sizes
                .iter()
                .map(|&n| Moments {
                    first: vec![0.0; n],
                    second: vec![0.0; n],
                })
                .collect(),
        }
    }

    /// State covering every trainable parameter of `graph`, in parameter order.
    pub fn for_graph<T: Real>(config: AdamConfig, graph: &Graph<T>) -> Self {
        let sizes: Vec<usize> = graph
            .params()
            .iter()
            .filter(|p| p.role.trainable())
            .map(|p| p.tensor.len())
            .collect();
        Self::new(config, &sizes)
    }

    /// One update over raw parameter/gradient slices.
    pub fn step_slices<T: Real>(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != self.moments.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} params / {} grads for {} moment slots",
                    params.len(),
                    grads.len(),
                    self.moments.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.moments) {
            if p.len() != m.first.len() || g.len() != m.first.len() {
                return Err(Error::shape("adam_step", "parameter and moment sizes differ"));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            for i in 0..p.len() {
                let gi = g[i].to_f64c();
                m.first[i] = c.beta1 * m.first[i] + (1.0 - c.beta1) * gi;
                m.second[i] = c.beta2 * m.second[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m.first[i] / bc1;
                let vhat = m.second[i] / bc2;
                let update = c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
                if update != 0.0 {
                    p[i] = T::from_f64c(p[i].to_f64c() - update);
                }
            }
        }
        Ok(())
    }

    /// Update every trainable parameter of `graph` from its gradient slot
    /// (missing gradients count as zero). Frozen graphs are left untouched.
    pub fn step<T: Real>(&mut self, graph: &mut Graph<T>) -> Result<()> {
        if graph.is_frozen() {
            return Ok(());
        }
        let mut params: Vec<&mut [T]> = Vec::new();
        let mut grads: Vec<Vec<T>> = Vec::new();
        for p in graph.params_mut().iter_mut().filter(|p| p.role.trainable()) {
            let n = p.tensor.len();
            grads.push(p.tensor.grad.take().unwrap_or_else(|| vec![T::zero(); n]));
            params.push(p.tensor.data_mut());
        }
        let grad_refs: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
        self.step_slices(&mut params, &grad_refs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &[3]);
        let mut p = vec![1.0f64, -2.0, 3.5];
        let orig = p.clone();
        for _ in 0..10 {
            st.step_slices(&mut [&mut p[..]], &[&[0.0, 0.0, 0.0][..]]).unwrap();
        }
        assert_eq!(p, orig);
        assert_eq!(st.step, 10);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let lr = 0.01;
        let mut st = AdamState::new(AdamConfig::with_lr(lr), &[2]);
        let mut p = [0.0f64, 0.0];
        st.step_slices(&mut [&mut p[..]], &[&[3.0, -0.02][..]]).unwrap();
        // m_hat / sqrt(v_hat) = g / |g| on the first step.
        assert!((p[0] + lr).abs() < 1e-8);
        assert!((p[1] - lr).abs() < 1e-6);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let mut st = AdamState::new(AdamConfig::with_lr(0.1), &[1]);
        let mut theta = [1.0f64];
        for _ in 0..500 {
            let g = 2.0 * theta[0];
            st.step_slices(&mut [&mut theta[..]], &[&[g][..]]).unwrap();
        }
        assert!(theta[0].abs() < 1e-3, "theta {}", theta[0]);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut st = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = [0.0f64; 3];
        assert!(st.step_slices(&mut [&mut p[..]], &[&[0.0; 3][..]]).is_err());
        assert_eq!(st.step, 0);
    }
}
