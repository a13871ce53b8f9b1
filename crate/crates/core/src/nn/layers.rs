//! Layer parameter containers and their graph-side forward builders.
//!
//! Each layer owns plain tensors; `bind` registers them as leaves on a tape
//! and `forward` wires the computation. Keeping the two steps separate lets
//! one parameter set drive many tapes (one per training step) while the
//! optimizer mutates the tensors in between. The `params`/`params_mut`
//! accessors enumerate parameters in the same order as `bind`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Batch-norm defaults; recorded here rather than configured per run.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn uniform_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Same-padded stride-1 1-D convolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub struct Conv1dVars {
    pub weight: Var,
    pub bias: Var,
}

impl Conv1d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_channels * kernel;
        Conv1d {
            in_channels,
            out_channels,
            kernel,
            weight: uniform_init(rng, &[out_channels, in_channels, kernel], fan_in),
            bias: uniform_init(rng, &[out_channels], fan_in),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> Conv1dVars {
        Conv1dVars { weight: g.leaf(self.weight.clone()), bias: g.leaf(self.bias.clone()) }
    }

    pub fn forward(&self, g: &mut Graph, vars: &Conv1dVars, x: Var) -> Var {
        debug_assert_eq!(g.value(x).shape()[1], self.in_channels);
        g.conv1d(x, vars.weight, vars.bias)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Per-channel batch normalization over (N, C, L).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm1d {
    pub channels: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

pub struct BatchNormVars {
    pub gamma: Var,
    pub beta: Var,
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Self {
        BatchNorm1d {
            channels,
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BatchNormVars {
        BatchNormVars { gamma: g.leaf(self.gamma.clone()), beta: g.leaf(self.beta.clone()) }
    }

    /// Training-mode forward; returns the batch statistics so the caller can
    /// fold them into the running estimates via [`BatchNorm1d::update_running`].
    pub fn forward_train(&self, g: &mut Graph, vars: &BatchNormVars, x: Var) -> (Var, Tensor, Tensor) {
        g.batchnorm_train(x, vars.gamma, vars.beta, BN_EPS)
    }

    pub fn forward_eval(&self, g: &mut Graph, vars: &BatchNormVars, x: Var) -> Var {
        g.batchnorm_eval(x, vars.gamma, vars.beta, &self.running_mean, &self.running_var, BN_EPS)
    }

    /// Fold biased batch statistics into the running estimates. `count` is
    /// the number of elements each channel statistic was computed over; the
    /// running variance stores the unbiased version.
    pub fn update_running(&mut self, batch_mean: &Tensor, batch_var: &Tensor, count: usize) {
        let unbias = if count > 1 { count as f64 / (count as f64 - 1.0) } else { 1.0 };
        for c in 0..self.channels {
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * batch_mean.data()[c];
            let rv = &mut self.running_var.data_mut()[c];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * batch_var.data()[c] * unbias;
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Gated recurrent unit: reset and update gates plus a candidate state.
///
/// Gate equations, with column-major weights `x (N,D) @ W (D,H)`:
///   r = sigmoid(x W_rx + h W_rh + b_r)
///   z = sigmoid(x W_zx + h W_zh + b_z)
///   n = tanh(x W_nx + (r * h) W_nh + b_n)
///   h' = z * h + (1 - z) * n
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Gru {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_reset_x: Tensor,
    pub w_reset_h: Tensor,
    pub b_reset: Tensor,
    pub w_update_x: Tensor,
    pub w_update_h: Tensor,
    pub b_update: Tensor,
    pub w_cand_x: Tensor,
    pub w_cand_h: Tensor,
    pub b_cand: Tensor,
}

pub struct GruVars {
    w_reset_x: Var,
    w_reset_h: Var,
    b_reset: Var,
    w_update_x: Var,
    w_update_h: Var,
    b_update: Var,
    w_cand_x: Var,
    w_cand_h: Var,
    b_cand: Var,
}

impl Gru {
    pub fn new(input_size: usize, hidden_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = input_size;
        let h = hidden_size;
        Gru {
            input_size,
            hidden_size,
            w_reset_x: uniform_init(rng, &[d, h], d),
            w_reset_h: uniform_init(rng, &[h, h], h),
            b_reset: uniform_init(rng, &[h], h),
            w_update_x: uniform_init(rng, &[d, h], d),
            w_update_h: uniform_init(rng, &[h, h], h),
            b_update: uniform_init(rng, &[h], h),
            w_cand_x: uniform_init(rng, &[d, h], d),
            w_cand_h: uniform_init(rng, &[h, h], h),
            b_cand: uniform_init(rng, &[h], h),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> GruVars {
        GruVars {
            w_reset_x: g.leaf(self.w_reset_x.clone()),
            w_reset_h: g.leaf(self.w_reset_h.clone()),
            b_reset: g.leaf(self.b_reset.clone()),
            w_update_x: g.leaf(self.w_update_x.clone()),
            w_update_h: g.leaf(self.w_update_h.clone()),
            b_update: g.leaf(self.b_update.clone()),
            w_cand_x: g.leaf(self.w_cand_x.clone()),
            w_cand_h: g.leaf(self.w_cand_h.clone()),
            b_cand: g.leaf(self.b_cand.clone()),
        }
    }

    /// Consumes (N, L, D) and emits the hidden sequence (N, L, H).
    pub fn forward(&self, g: &mut Graph, vars: &GruVars, x: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        debug_assert_eq!(shape.len(), 3);
        debug_assert_eq!(shape[2], self.input_size);
        let (batch, len) = (shape[0], shape[1]);
        let mut h = g.leaf(Tensor::zeros(&[batch, self.hidden_size]));
        let mut steps = Vec::with_capacity(len);
        for t in 0..len {
            let xt = g.slice_time(x, t);
            let r = {
                let xm = g.matmul(xt, vars.w_reset_x);
                let hm = g.matmul(h, vars.w_reset_h);
                let s = g.add(xm, hm);
                let s = g.add_row(s, vars.b_reset);
                g.sigmoid(s)
            };
            let z = {
                let xm = g.matmul(xt, vars.w_update_x);
                let hm = g.matmul(h, vars.w_update_h);
                let s = g.add(xm, hm);
                let s = g.add_row(s, vars.b_update);
                g.sigmoid(s)
            };
            let n = {
                let xm = g.matmul(xt, vars.w_cand_x);
                let rh = g.mul(r, h);
                let hm = g.matmul(rh, vars.w_cand_h);
                let s = g.add(xm, hm);
                let s = g.add_row(s, vars.b_cand);
                g.tanh(s)
            };
            let keep = g.mul(z, h);
            let gate = g.one_minus(z);
            let new = g.mul(gate, n);
            h = g.add(keep, new);
            steps.push(h);
        }
        g.stack_time(&steps)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.w_reset_x,
            &self.w_reset_h,
            &self.b_reset,
            &self.w_update_x,
            &self.w_update_h,
            &self.b_update,
            &self.w_cand_x,
            &self.w_cand_h,
            &self.b_cand,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_reset_x,
            &mut self.w_reset_h,
            &mut self.b_reset,
            &mut self.w_update_x,
            &mut self.w_update_h,
            &mut self.b_update,
            &mut self.w_cand_x,
            &mut self.w_cand_h,
            &mut self.b_cand,
        ]
    }
}

/// Fully connected layer, applied time-distributed over (N, L, In).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl Dense {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            in_features,
            out_features,
            weight: uniform_init(rng, &[in_features, out_features], in_features),
            bias: uniform_init(rng, &[out_features], in_features),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> DenseVars {
        DenseVars { weight: g.leaf(self.weight.clone()), bias: g.leaf(self.bias.clone()) }
    }

    /// (N, L, In) -> (N, L, Out), the same weights at every time step.
    pub fn forward_time_distributed(&self, g: &mut Graph, vars: &DenseVars, x: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        debug_assert_eq!(shape.len(), 3);
        debug_assert_eq!(shape[2], self.in_features);
        let (batch, len) = (shape[0], shape[1]);
        let flat = g.reshape(x, &[batch * len, self.in_features]);
        let prod = g.matmul(flat, vars.weight);
        let prod = g.add_row(prod, vars.bias);
        g.reshape(prod, &[batch, len, self.out_features])
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gru_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gru = Gru::new(58, 32, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[4, 81, 58]));
        let vars = gru.bind(&mut g);
        let h = gru.forward(&mut g, &vars, x);
        assert_eq!(g.value(h).shape(), &[4, 81, 32]);
    }

    #[test]
    fn dense_time_distributed_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dense = Dense::new(32, 1, &mut rng);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[4, 81, 32]));
        let vars = dense.bind(&mut g);
        let y = dense.forward_time_distributed(&mut g, &vars, x);
        assert_eq!(g.value(y).shape(), &[4, 81, 1]);
    }

    #[test]
    fn batchnorm_eval_output_independent_of_batch_mates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bn = BatchNorm1d::new(2);
        let row: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let other_a: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let other_b: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();

        let run = |mate: &[f64]| -> Vec<f64> {
            let mut g = Graph::new();
            let mut data = row.clone();
            data.extend_from_slice(mate);
            let x = g.leaf(Tensor::from_vec(&[2, 2, 5], data));
            let vars = bn.bind(&mut g);
            let y = bn.forward_eval(&mut g, &vars, x);
            g.value(y).data()[..10].to_vec()
        };
        assert_eq!(run(&other_a), run(&other_b));
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut bn = BatchNorm1d::new(1);
        let mean = Tensor::from_vec(&[1], vec![10.0]);
        let var = Tensor::from_vec(&[1], vec![4.0]);
        bn.update_running(&mean, &var, 100);
        assert!((bn.running_mean.data()[0] - 1.0).abs() < 1e-12);
        assert!(bn.running_var.data()[0] > 1.0);
    }
}
