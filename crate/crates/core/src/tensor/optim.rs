use super::Tensor;
use crate::error::{Error, Result};

/// Moment estimates and hyperparameters of an Adam optimizer.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Adam with bias correction over a fixed parameter list.
pub struct Adam {
    params: Vec<Tensor>,
    pub state: AdamState,
}

impl Adam {
    pub const DEFAULT_LR: f64 = 1e-4;

    pub fn new(params: Vec<Tensor>, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            params,
            state: AdamState {
                first_moment: zeros.clone(),
                second_moment: zeros,
                step_count: 0,
                learning_rate,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// One update from the gradients currently stored on the parameters,
    /// which are cleared afterwards.
    pub fn step(&mut self) -> Result<()> {
        let grads = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.grad()
                    .ok_or_else(|| Error::Contract(format!("parameter #{i} {:?} has no gradient", p.shape())))
            })
            .collect::<Result<Vec<_>>>()?;
        let st = &mut self.state;
        st.step_count += 1;
        let t = st.step_count as i32;
        let c1 = 1.0 - st.beta1.powi(t);
        let c2 = 1.0 - st.beta2.powi(t);
        for (i, (p, g)) in self.params.iter().zip(grads).enumerate() {
            let m = &mut st.first_moment[i];
            let v = &mut st.second_moment[i];
            let mut data = p.data_mut();
            for j in 0..g.len() {
                m[j] = st.beta1 * m[j] + (1.0 - st.beta1) * g[j];
                v[j] = st.beta2 * v[j] + (1.0 - st.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                data[j] -= st.learning_rate * mh / (vh.sqrt() + st.epsilon);
            }
            drop(data);
            p.zero_grad();
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }
}
