use crate::error::{Error, Result};
use crate::tensor::Element;

/// Adam with bias correction. One moment buffer pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Element = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    /// Zero moments shaped like `sizes` (element count per tensor).
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// Restores a saved state.
    pub fn from_state(lr: f64, step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Shape("Adam moment buffers disagree in shape".into()));
        }
        Ok(Self {
            step,
            m,
            v,
            ..Self::new(lr, &[])
        })
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    /// Applies one update. Parameters are left untouched if any gradient is
    /// not finite.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Shape(format!(
                    "tensor {i}: optimizer expects {} elements, got {} / {}",
                    self.m[i].len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteGradient { step: self.step + 1 });
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let c1 = T::from_f64(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] = p[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::<f64>::new(0.01, &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        adam.step(&mut [&mut p], &[&[3.0, -0.2, 1e4]]).unwrap();
        for (a, b) in p.iter().zip([0.99, -1.99, 0.49]) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = Adam::<f32>::new(0.1, &[2]);
        let mut p = vec![1.5f32, -3.0];
        for _ in 0..3 {
            adam.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, [1.5, -3.0]);
    }

    #[test]
    fn nan_gradient_reports_step() {
        let mut adam = Adam::<f32>::new(0.1, &[1]);
        let mut p = vec![1.0f32];
        adam.step(&mut [&mut p], &[&[1.0]]).unwrap();
        let before = p.clone();
        match adam.step(&mut [&mut p], &[&[f32::NAN]]) {
            Err(Error::NonFiniteGradient { step }) => assert_eq!(step, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(adam.step_count(), 1);
    }
}
