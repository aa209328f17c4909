//! Small dense layers with hand-written backward passes.
//!
//! All activations are row-major `Array2<f64>` with one row per item
//! (location or slot). Layers hold positional indices into a
//! [`ParameterSet`] and accumulate gradients into a second set with the
//! same layout.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::params::{ParameterSet, Tensor};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backward of a row-wise softmax given its output `y`.
pub fn softmax_rows_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(y.raw_dim());
    for ((yr, dyr), mut dxr) in y.rows().into_iter().zip(dy.rows()).zip(dx.rows_mut()) {
        let dot: f64 = yr.iter().zip(dyr.iter()).map(|(a, b)| a * b).sum();
        Zip::from(&mut dxr)
            .and(&yr)
            .and(&dyr)
            .for_each(|d, &yv, &g| *d = yv * (g - dot));
    }
    dx
}

fn uniform_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Declares parameters in a fixed order; the same sequence of calls always
/// produces the same layout.
pub struct Builder<'a, R: Rng> {
    pub params: ParameterSet,
    rng: &'a mut R,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self {
            params: ParameterSet::new(),
            rng,
        }
    }

    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> usize {
        let t = uniform_tensor(self.rng, shape, bound);
        self.params.push(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> usize {
        let mut t = Tensor::zeros(shape);
        t.data_mut().fill(value);
        self.params.push(name, t)
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Linear {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = self.uniform(&format!("{name}.weight"), vec![in_dim, out_dim], bound);
        let bias = bias.then(|| self.constant(&format!("{name}.bias"), vec![out_dim], 0.0));
        Linear { weight, bias }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: self.constant(&format!("{name}.gamma"), vec![dim], 1.0),
            beta: self.constant(&format!("{name}.beta"), vec![dim], 0.0),
        }
    }

    pub fn mlp(&mut self, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Mlp {
        Mlp {
            fc1: self.linear(&format!("{name}.fc1"), in_dim, hidden, true),
            fc2: self.linear(&format!("{name}.fc2"), hidden, out_dim, true),
        }
    }

    pub fn gru(&mut self, name: &str, dim: usize) -> GruCell {
        let bound = 1.0 / (dim as f64).sqrt();
        GruCell {
            w_ih: self.uniform(&format!("{name}.w_ih"), vec![dim, 3 * dim], bound),
            w_hh: self.uniform(&format!("{name}.w_hh"), vec![dim, 3 * dim], bound),
            b_ih: self.uniform(&format!("{name}.b_ih"), vec![3 * dim], bound),
            b_hh: self.uniform(&format!("{name}.b_hh"), vec![3 * dim], bound),
            dim,
        }
    }
}

/// `y = x W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
}

impl Linear {
    pub fn forward(&self, p: &ParameterSet, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&p.mat(self.weight));
        if let Some(b) = self.bias {
            y += &p.vector(b);
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        p: &ParameterSet,
        grads: &mut ParameterSet,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        self.backward_params(grads, x, dy);
        dy.dot(&p.mat(self.weight).t())
    }

    pub fn backward_params(&self, grads: &mut ParameterSet, x: ArrayView2<f64>, dy: ArrayView2<f64>) {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grads.mat_mut(self.weight));
        if let Some(b) = self.bias {
            grads.vector_mut(b).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn forward(&self, p: &ParameterSet, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let s = *is;
            row.mapv_inplace(|v| v * s);
        }
        let y = &xhat * &p.vector(self.gamma) + p.vector(self.beta);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        p: &ParameterSet,
        grads: &mut ParameterSet,
        cache: &LayerNormCache,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        grads
            .vector_mut(self.gamma)
            .scaled_add(1.0, &(&dy * &cache.xhat).sum_axis(Axis(0)));
        grads.vector_mut(self.beta).scaled_add(1.0, &dy.sum_axis(Axis(0)));
        let dxhat = &dy * &p.vector(self.gamma);
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((dxh, xh), mut out), &is) in dxhat
            .rows()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(dx.rows_mut())
            .zip(cache.inv_std.iter())
        {
            let m1 = dxh.sum() / d;
            let m2 = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            Zip::from(&mut out)
                .and(&dxh)
                .and(&xh)
                .for_each(|o, &g, &h| *o = is * (g - m1 - h * m2));
        }
        dx
    }
}

/// Two linear layers with a GELU in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct MlpCache {
    pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl Mlp {
    pub fn forward(&self, p: &ParameterSet, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.fc1.forward(p, x);
        let hidden = pre.mapv(gelu);
        let y = self.fc2.forward(p, hidden.view());
        (y, MlpCache { pre, hidden })
    }

    pub fn backward(
        &self,
        p: &ParameterSet,
        grads: &mut ParameterSet,
        x: ArrayView2<f64>,
        cache: &MlpCache,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        let mut dh = self.fc2.backward(p, grads, cache.hidden.view(), dy);
        Zip::from(&mut dh).and(&cache.pre).for_each(|g, &z| *g *= gelu_grad(z));
        self.fc1.backward(p, grads, x, dh.view())
    }
}

/// Gated recurrent cell, gate order (reset, update, candidate).
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub w_ih: usize,
    pub w_hh: usize,
    pub b_ih: usize,
    pub b_hh: usize,
    pub dim: usize,
}

pub struct GruCache {
    r: Array2<f64>,
    z: Array2<f64>,
    n: Array2<f64>,
    gh_n: Array2<f64>,
}

impl GruCell {
    pub fn forward(
        &self,
        p: &ParameterSet,
        x: ArrayView2<f64>,
        h: ArrayView2<f64>,
    ) -> (Array2<f64>, GruCache) {
        let d = self.dim;
        let gi = x.dot(&p.mat(self.w_ih)) + p.vector(self.b_ih);
        let gh = h.dot(&p.mat(self.w_hh)) + p.vector(self.b_hh);
        let r = (&gi.slice(s![.., 0..d]) + &gh.slice(s![.., 0..d])).mapv(sigmoid);
        let z = (&gi.slice(s![.., d..2 * d]) + &gh.slice(s![.., d..2 * d])).mapv(sigmoid);
        let gh_n = gh.slice(s![.., 2 * d..]).to_owned();
        let n = (&gi.slice(s![.., 2 * d..]) + &(&r * &gh_n)).mapv(f64::tanh);
        let out = &n * &z.mapv(|v| 1.0 - v) + &z * &h;
        (out, GruCache { r, z, n, gh_n })
    }

    /// Returns `(dx, dh)`.
    pub fn backward(
        &self,
        p: &ParameterSet,
        grads: &mut ParameterSet,
        x: ArrayView2<f64>,
        h: ArrayView2<f64>,
        cache: &GruCache,
        dout: ArrayView2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let d = self.dim;
        let rows = dout.nrows();
        let GruCache { r, z, n, gh_n } = cache;

        let dn_pre = Zip::from(&dout)
            .and(z)
            .and(n)
            .map_collect(|&g, &zv, &nv| g * (1.0 - zv) * (1.0 - nv * nv));
        let dz_pre = Zip::from(&dout)
            .and(&h)
            .and(n)
            .and(z)
            .map_collect(|&g, &hv, &nv, &zv| g * (hv - nv) * zv * (1.0 - zv));
        let dr_pre = Zip::from(&dn_pre)
            .and(gh_n)
            .and(r)
            .map_collect(|&g, &ghn, &rv| g * ghn * rv * (1.0 - rv));

        let mut dgi = Array2::zeros((rows, 3 * d));
        dgi.slice_mut(s![.., 0..d]).assign(&dr_pre);
        dgi.slice_mut(s![.., d..2 * d]).assign(&dz_pre);
        dgi.slice_mut(s![.., 2 * d..]).assign(&dn_pre);
        let mut dgh = dgi.clone();
        dgh.slice_mut(s![.., 2 * d..]).assign(&(&dn_pre * r));

        ndarray::linalg::general_mat_mul(1.0, &x.t(), &dgi, 1.0, &mut grads.mat_mut(self.w_ih));
        grads.vector_mut(self.b_ih).scaled_add(1.0, &dgi.sum_axis(Axis(0)));
        ndarray::linalg::general_mat_mul(1.0, &h.t(), &dgh, 1.0, &mut grads.mat_mut(self.w_hh));
        grads.vector_mut(self.b_hh).scaled_add(1.0, &dgh.sum_axis(Axis(0)));

        let dx = dgi.dot(&p.mat(self.w_ih).t());
        let dh = &dout * z + dgh.dot(&p.mat(self.w_hh).t());
        (dx, dh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks every parameter of `params` and the input against central
    /// differences of `loss = sum(out ⊙ weights)`.
    fn check<F>(params: &mut ParameterSet, x: &Array2<f64>, forward: F, backward_dx: Array2<f64>, grads: &ParameterSet, w: &Array2<f64>)
    where
        F: Fn(&ParameterSet, &Array2<f64>) -> Array2<f64>,
    {
        let eps = 1e-5;
        let loss = |p: &ParameterSet, x: &Array2<f64>| (&forward(p, x) * w).sum();
        for idx in 0..params.len() {
            for j in 0..params.tensor(idx).len() {
                let orig = params.tensor(idx).data()[j];
                params.tensor_mut(idx).data_mut()[j] = orig + eps;
                let lp = loss(params, x);
                params.tensor_mut(idx).data_mut()[j] = orig - eps;
                let lm = loss(params, x);
                params.tensor_mut(idx).data_mut()[j] = orig;
                let num = (lp - lm) / (2.0 * eps);
                let ana = grads.tensor(idx).data()[j];
                assert!((num - ana).abs() < 1e-6, "{} [{j}]: {num} vs {ana}", params.name(idx));
            }
        }
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = xp.as_slice().unwrap()[i];
            xp.as_slice_mut().unwrap()[i] = orig + eps;
            let lp = loss(params, &xp);
            xp.as_slice_mut().unwrap()[i] = orig - eps;
            let lm = loss(params, &xp);
            xp.as_slice_mut().unwrap()[i] = orig;
            let num = (lp - lm) / (2.0 * eps);
            assert!((num - backward_dx.as_slice().unwrap()[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let num = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_survive_large_inputs() {
        let x = ndarray::arr2(&[[1000.0, 0.0, -1000.0], [1.0, 1.0, 1.0]]);
        let y = softmax_rows(&x);
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((y[[1, 0]] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mlp_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = Builder::new(&mut rng);
        let mlp = b.mlp("m", 3, 5, 2);
        let mut params = b.params;
        let x = random_matrix(&mut rng, 4, 3);
        let w = random_matrix(&mut rng, 4, 2);
        let mut grads = params.zeros_like();
        let (_, cache) = mlp.forward(&params, x.view());
        let dx = mlp.backward(&params, &mut grads, x.view(), &cache, w.view());
        check(&mut params, &x, |p, x| mlp.forward(p, x.view()).0, dx, &grads, &w);
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = Builder::new(&mut rng);
        let ln = b.layer_norm("ln", 4);
        let mut params = b.params;
        for v in params.tensor_mut(0).data_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        let x = random_matrix(&mut rng, 3, 4);
        let w = random_matrix(&mut rng, 3, 4);
        let mut grads = params.zeros_like();
        let (_, cache) = ln.forward(&params, x.view());
        let dx = ln.backward(&params, &mut grads, &cache, w.view());
        check(&mut params, &x, |p, x| ln.forward(p, x.view()).0, dx, &grads, &w);
    }

    #[test]
    fn gru_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = Builder::new(&mut rng);
        let gru = b.gru("g", 3);
        let mut params = b.params;
        let h = random_matrix(&mut rng, 2, 3);
        let x = random_matrix(&mut rng, 2, 3);
        let w = random_matrix(&mut rng, 2, 3);
        let mut grads = params.zeros_like();
        let (_, cache) = gru.forward(&params, x.view(), h.view());
        let (dx, dh) = gru.backward(&params, &mut grads, x.view(), h.view(), &cache, w.view());
        check(&mut params, &x, |p, x| gru.forward(p, x.view(), h.view()).0, dx, &grads, &w);
        // hidden-state path
        let mut grads2 = params.zeros_like();
        let (_, cache) = gru.forward(&params, x.view(), h.view());
        let _ = gru.backward(&params, &mut grads2, x.view(), h.view(), &cache, w.view());
        check(&mut params, &h, |p, h| gru.forward(p, x.view(), h.view()).0, dh, &grads2, &w);
    }

    #[test]
    fn softmax_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 3, 4);
        let w = random_matrix(&mut rng, 3, 4);
        let y = softmax_rows(&x);
        let dx = softmax_rows_backward(&y, &w);
        let mut params = ParameterSet::new();
        let grads = ParameterSet::new();
        check(&mut params, &x, |_, x| softmax_rows(x), dx, &grads, &w);
    }
}
