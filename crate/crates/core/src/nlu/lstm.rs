use crate::numerics::{sigmoid, Matrix, Parameter, Rng};

/// One LSTM direction. Gate blocks in the stacked weights are ordered
/// input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    /// `4h x D`
    pub w_ih: Parameter,
    /// `4h x h`
    pub w_hh: Parameter,
    /// `1 x 4h`
    pub b: Parameter,
}

/// Activations of one time step, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct LstmStep {
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// post-activation gates `[i, f, g, o]`
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
}

impl Lstm {
    /// Uniform init in `±1/sqrt(h)`, forget-gate bias 1.
    pub fn new(prefix: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut b = Matrix::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            b.set(0, j, 1.0);
        }
        Lstm {
            w_ih: Parameter::new(format!("{prefix}.w_ih"), Matrix::random_uniform(4 * hidden, input, bound, rng)),
            w_hh: Parameter::new(format!("{prefix}.w_hh"), Matrix::random_uniform(4 * hidden, hidden, bound, rng)),
            b: Parameter::new(format!("{prefix}.b"), b),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.value.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.value.cols()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w_ih, &mut self.w_hh, &mut self.b]
    }

    /// Runs the sequence from zero state; returns hidden states per step.
    pub fn forward(&self, xs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<LstmStep>) {
        let h = self.hidden();
        let mut hs = Vec::with_capacity(xs.len());
        let mut steps = Vec::with_capacity(xs.len());
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        let mut z = vec![0.0; 4 * h];
        for x in xs {
            z.copy_from_slice(self.b.value.data());
            self.w_ih.value.matvec_add(x, &mut z);
            self.w_hh.value.matvec_add(&h_prev, &mut z);
            let mut gates = z.clone();
            for j in 0..h {
                gates[j] = sigmoid(z[j]);
                gates[h + j] = sigmoid(z[h + j]);
                gates[2 * h + j] = z[2 * h + j].tanh();
                gates[3 * h + j] = sigmoid(z[3 * h + j]);
            }
            let mut c = vec![0.0; h];
            let mut tanh_c = vec![0.0; h];
            let mut h_new = vec![0.0; h];
            for j in 0..h {
                c[j] = gates[h + j] * c_prev[j] + gates[j] * gates[2 * h + j];
                tanh_c[j] = c[j].tanh();
                h_new[j] = gates[3 * h + j] * tanh_c[j];
            }
            steps.push(LstmStep {
                h_prev: std::mem::replace(&mut h_prev, h_new.clone()),
                c_prev: std::mem::replace(&mut c_prev, c),
                gates,
                tanh_c,
            });
            hs.push(h_new);
        }
        (hs, steps)
    }

    /// Backpropagation through time. `xs` are the inputs given to
    /// `forward`, `dhs[t]` the loss gradient with respect to `hs[t]`.
    /// Accumulates parameter gradients and returns input gradients.
    pub fn backward(&mut self, xs: &[Vec<f64>], steps: &[LstmStep], dhs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = self.hidden();
        let mut dxs = vec![vec![0.0; self.input_dim()]; xs.len()];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        for t in (0..xs.len()).rev() {
            let s = &steps[t];
            let g = &s.gates;
            for j in 0..h {
                let dh = dhs[t][j] + dh_next[j];
                let (i, f, gg, o) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let tc = s.tanh_c[j];
                let dc = dc_next[j] + dh * o * (1.0 - tc * tc);
                dz[j] = dc * gg * i * (1.0 - i);
                dz[h + j] = dc * s.c_prev[j] * f * (1.0 - f);
                dz[2 * h + j] = dc * i * (1.0 - gg * gg);
                dz[3 * h + j] = dh * tc * o * (1.0 - o);
                dc_next[j] = dc * f;
            }
            self.w_ih.grad.add_outer(&dz, &xs[t]);
            self.w_hh.grad.add_outer(&dz, &s.h_prev);
            for (gb, d) in self.b.grad.data_mut().iter_mut().zip(&dz) {
                *gb += d;
            }
            self.w_ih.value.matvec_t_acc(&dz, &mut dxs[t]);
            dh_next.fill(0.0);
            self.w_hh.value.matvec_t_acc(&dz, &mut dh_next);
        }
        dxs
    }
}

/// Affine layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub w: Parameter,
    /// `1 x out`
    pub b: Parameter,
}

impl Dense {
    pub fn new(prefix: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Dense {
            w: Parameter::new(format!("{prefix}.w"), Matrix::random_uniform(output, input, bound, rng)),
            b: Parameter::new(format!("{prefix}.b"), Matrix::zeros(1, output)),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn input_dim(&self) -> usize {
        self.w.value.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.value.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.b.value.data().to_vec();
        self.w.value.matvec_add(x, &mut y);
        y
    }

    /// Accumulates parameter gradients and adds `W^T dy` into `dx`.
    pub fn backward(&mut self, x: &[f64], dy: &[f64], dx: &mut [f64]) {
        self.w.grad.add_outer(dy, x);
        for (g, d) in self.b.grad.data_mut().iter_mut().zip(dy) {
            *g += d;
        }
        self.w.value.matvec_t_acc(dy, dx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, HasParameters};

    struct Probe {
        lstm: Lstm,
        xs: Vec<Vec<f64>>,
        weights: Vec<Vec<f64>>,
    }

    impl HasParameters for Probe {
        fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
            self.lstm.parameters_mut()
        }
    }

    fn probe_loss(p: &mut Probe, with_grad: bool) -> f64 {
        let (hs, steps) = p.lstm.forward(&p.xs);
        let loss: f64 = hs
            .iter()
            .zip(&p.weights)
            .map(|(h, w)| h.iter().zip(w).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        if with_grad {
            let xs = p.xs.clone();
            let dhs = p.weights.clone();
            p.lstm.backward(&xs, &steps, &dhs);
        }
        loss
    }

    #[test]
    fn bptt_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let (d, h, l) = (3, 4, 5);
        let mut probe = Probe {
            lstm: Lstm::new("t", d, h, &mut rng),
            xs: (0..l).map(|_| (0..d).map(|_| rng.normal()).collect()).collect(),
            weights: (0..l).map(|_| (0..h).map(|_| rng.normal()).collect()).collect(),
        };
        let report = grad_check(&mut probe, probe_loss, 1e-5, 1e-5);
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let mut lstm = Lstm::new("t", 2, 3, &mut rng);
        let xs: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.normal(), rng.normal()]).collect();
        let f = |l: &Lstm, xs: &[Vec<f64>]| -> f64 { l.forward(xs).0.iter().flatten().sum() };
        let (hs, steps) = lstm.forward(&xs);
        let dxs = lstm.backward(&xs, &steps, &vec![vec![1.0; 3]; hs.len()]);
        for t in 0..3 {
            for k in 0..2 {
                let mut p = xs.clone();
                p[t][k] += 1e-6;
                let mut m = xs.clone();
                m[t][k] -= 1e-6;
                let num = (f(&lstm, &p) - f(&lstm, &m)) / 2e-6;
                assert!((num - dxs[t][k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let mut rng = Rng::new(0);
        let mut lstm = Lstm::new("t", 2, 3, &mut rng);
        for p in lstm.parameters_mut() {
            p.value.fill(0.0);
        }
        let (hs, _) = lstm.forward(&[vec![1.0, -2.0]]);
        assert_eq!(hs[0], vec![0.0; 3]);
    }
}
