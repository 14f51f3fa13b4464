use rand::Rng;

use crate::graph::Var;
use crate::params::{ParamId, ParamStore, Session};

/// Affine map `x · W + b` on row-major activations (`rows × in → rows × out`).
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.uniform(format!("{name}.weight"), in_dim, out_dim, in_dim, rng);
        let bias = store.zeros(format!("{name}.bias"), 1, out_dim);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Weight and bias start at zero; the layer outputs exactly 0 until trained.
    pub fn zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.zeros(format!("{name}.weight"), in_dim, out_dim);
        let bias = store.zeros(format!("{name}.bias"), 1, out_dim);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let h = s.matmul(x, s.param(self.weight));
        s.add(h, s.param(self.bias))
    }
}

/// Same-padded 1-D convolution over time, input laid out as `T × C_in`.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub kernel: usize,
    pub proj: Linear,
}

impl Conv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel width must be odd");
        Self {
            kernel,
            proj: Linear::new(store, name, kernel * in_ch, out_ch, rng),
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let cols = if self.kernel == 1 {
            x
        } else {
            s.im2col(x, self.kernel)
        };
        self.proj.forward(s, cols)
    }
}

/// Per-row layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), ndarray::Array2::ones((1, dim)));
        let bias = store.zeros(format!("{name}.bias"), 1, dim);
        Self {
            gain,
            bias,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, s: &Session, x: Var) -> Var {
        let n = s.shape(x).1 as f64;
        let mean = s.scale(s.sum_cols(x), 1.0 / n);
        let centered = s.sub(x, mean);
        let var = s.scale(s.sum_cols(s.square(centered)), 1.0 / n);
        let std = s.sqrt(s.add_scalar(var, self.eps));
        let normed = s.div(centered, std);
        s.add(s.mul(normed, s.param(self.gain)), s.param(self.bias))
    }
}

/// Mean cross-entropy of row-wise logits against integer class targets.
pub fn cross_entropy(s: &Session, logits: Var, targets: &[usize]) -> Var {
    let (rows, classes) = s.shape(logits);
    assert_eq!(rows, targets.len(), "one target per row");
    let mut onehot = ndarray::Array2::zeros((rows, classes));
    for (r, &t) in targets.iter().enumerate() {
        assert!(t < classes, "target {t} out of range for {classes} classes");
        onehot[[r, t]] = 1.0;
    }
    let logp = s.log_softmax_rows(logits);
    let picked = s.mul(logp, s.input(onehot));
    s.scale(s.sum(picked), -1.0 / rows as f64)
}
