//! Parameter storage, dense layers, a GRU cell and the Adam optimiser.

use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Arc<Matrix<T>>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter `{name}`");
        self.names.push(name);
        self.tensors.push(Arc::new(value));
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Leaves for every tensor on `g`; gradients flow only when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| g.shared(Arc::clone(t), trainable)).collect() }
    }

    /// SHA-256 over names, shapes and little-endian bytes.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex::encode(h.finalize())
    }

    /// Flattened copy of every tensor, in order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn unflatten(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.num_elements());
        let mut off = 0;
        for t in &mut self.tensors {
            let m = Arc::make_mut(t);
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(|t| Arc::new(t.cast())).collect() }
    }

    /// Element-wise `self = (1 - tau) * self + tau * other`.
    pub fn lerp_from(&mut self, other: &ParamSet<T>, tau: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            let a = Arc::make_mut(a);
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = *x + tau * (y - *x);
            }
        }
    }

    /// Replace the tensor named `name`; shapes must agree.
    pub fn set_by_name(&mut self, name: &str, value: Matrix<T>) -> bool {
        match self.find(name) {
            Some(id) if self.get(id).shape() == value.shape() => {
                self.tensors[id.0] = Arc::new(value);
                true
            }
            _ => false,
        }
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients, zero where nothing flowed.
    pub fn grads<T: Scalar>(&self, grads: &Gradients<T>, ps: &ParamSet<T>) -> Vec<Matrix<T>> {
        self.vars
            .iter()
            .zip(ps.ids())
            .map(|(&v, id)| {
                let (r, c) = ps.get(id).shape();
                grads.get_or_zeros(v, r, c)
            })
            .collect()
    }

    /// True when no gradient at all reached these parameters.
    pub fn untouched<T: Scalar>(&self, grads: &Gradients<T>) -> bool {
        self.vars.iter().all(|&v| grads.get(v).is_none_or(|g| g.data().iter().all(|x| *x == T::zero())))
    }
}

/// Glorot-uniform initialisation.
pub fn glorot<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix<T> {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| T::of(rng.gen_range(-limit..limit)))
}

/// Dense layer `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), glorot(rng, fan_in, fan_out));
        let b = bias.then(|| ps.add(format!("{name}.b"), Matrix::zeros(1, fan_out)));
        Self { w, b, fan_in, fan_out }
    }

    /// Same as [`Linear::new`] with the weight scaled by `scale` (small output heads).
    pub fn new_scaled<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let l = Self::new(ps, name, fan_in, fan_out, true, rng);
        ps.get_mut(l.w).scale_assign(T::of(scale));
        l
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let y = g.matmul(x, p.var(self.w));
        match self.b {
            Some(b) => g.add_row(y, p.var(b)),
            None => y,
        }
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + if self.b.is_some() { self.fan_out } else { 0 }
    }
}

/// Row-wise layer normalisation with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamSet<T>, name: &str, width: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Matrix::filled(1, width, T::one()));
        let bias = ps.add(format!("{name}.bias"), Matrix::zeros(1, width));
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let n = g.layer_norm(x, T::of(1e-5));
        let s = g.mul_row(n, p.var(self.gain));
        g.add_row(s, p.var(self.bias))
    }
}

/// Feed-forward network with SiLU hidden activations and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes = [in, hidden..., out]`. `out_scale` shrinks the final layer's initial weights.
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamSet<T>, name: &str, sizes: &[usize], out_scale: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2);
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let ln = format!("{name}.{i}");
                if i + 1 == n && out_scale != 1.0 {
                    Linear::new_scaled(ps, &ln, sizes[i], sizes[i + 1], out_scale, rng)
                } else {
                    Linear::new(ps, &ln, sizes[i], sizes[i + 1], true, rng)
                }
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let mut h = x;
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h);
            if i + 1 < n {
                h = g.silu(h);
            }
        }
        h
    }

    pub fn fan_in(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn fan_out(&self) -> usize {
        self.layers.last().expect("non-empty mlp").fan_out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }
}

/// Gated recurrent unit with reset, update and candidate gates.
///
/// `r = σ(x Wr + h Ur + br)`, `u = σ(x Wu + h Uu + bu)`,
/// `n = tanh(x Wn + r ⊙ (h Un) + bn)`, `h' = (1 − u) ⊙ n + u ⊙ h`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub input: Linear,
    pub hidden: Linear,
    pub size: usize,
}

impl Gru {
    pub fn new<T: Scalar, R: Rng>(ps: &mut ParamSet<T>, name: &str, fan_in: usize, size: usize, rng: &mut R) -> Self {
        let input = Linear::new(ps, &format!("{name}.x"), fan_in, 3 * size, true, rng);
        let hidden = Linear::new(ps, &format!("{name}.h"), size, 3 * size, false, rng);
        Self { input, hidden, size }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, h: Var) -> Var {
        let d = self.size;
        let xi = self.input.forward(g, p, x);
        let hh = self.hidden.forward(g, p, h);
        let xr = g.slice_cols(xi, 0, d);
        let xu = g.slice_cols(xi, d, d);
        let xn = g.slice_cols(xi, 2 * d, d);
        let hr = g.slice_cols(hh, 0, d);
        let hu = g.slice_cols(hh, d, d);
        let hn = g.slice_cols(hh, 2 * d, d);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let u = g.add(xu, hu);
        let u = g.sigmoid(u);
        let rh = g.mul(r, hn);
        let n = g.add(xn, rh);
        let n = g.tanh(n);
        // h' = n + u (h - n)
        let diff = g.sub(h, n);
        let gated = g.mul(u, diff);
        g.add(n, gated)
    }
}

/// Adam with global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub clip: T,
    pub step: u64,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(ps: &ParamSet<T>, lr: f64, clip: f64) -> Self {
        let zeros: Vec<Matrix<T>> = ps.ids().map(|id| {
            let (r, c) = ps.get(id).shape();
            Matrix::zeros(r, c)
        }).collect();
        Self {
            lr: T::of(lr),
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            clip: T::of(clip),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update and returns the pre-clip global gradient norm.
    pub fn apply(&mut self, ps: &mut ParamSet<T>, grads: &[Matrix<T>]) -> T {
        assert_eq!(grads.len(), ps.len());
        let norm = grads.iter().map(|g| g.sum_sq()).sum::<T>().sqrt();
        let scale = if norm > self.clip && norm > T::zero() { self.clip / norm } else { T::one() };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (i, id) in ps.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = ps.get_mut(id);
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut())
            {
                let gv = gv * scale;
                *mv = self.beta1 * *mv + (T::one() - self.beta1) * gv;
                *vv = self.beta2 * *vv + (T::one() - self.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gru_keeps_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::<f64>::new();
        let gru = Gru::new(&mut ps, "gru", 3, 4, &mut rng);
        for id in ps.ids().collect::<Vec<_>>() {
            ps.get_mut(id).scale_assign(0.0);
        }
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = g.constant(Matrix::zeros(2, 3));
        let h = g.constant(Matrix::zeros(2, 4));
        let h1 = gru.forward(&mut g, &p, x, h);
        assert!(g.value(h1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("x", Matrix::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(&ps, 0.1, 100.0);
        for _ in 0..500 {
            let mut g = Graph::new();
            let p = ps.bind(&mut g, true);
            let sq = g.square(p.var(id));
            let l = g.sum(sq);
            let grads = g.backward(l);
            let gs = p.grads(&grads, &ps);
            opt.apply(&mut ps, &gs);
        }
        assert!(ps.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn hash_changes_with_values() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.add("a", Matrix::zeros(2, 2));
        let h0 = ps.hash();
        assert_eq!(h0, ps.clone().hash());
        ps.get_mut(id).set(0, 0, 1.0);
        assert_ne!(h0, ps.hash());
    }

    #[test]
    fn bound_leaves_share_storage() {
        let mut ps = ParamSet::<f32>::new();
        let id = ps.add("a", Matrix::filled(1, 3, 2.0));
        let mut g = Graph::new();
        let p = ps.bind(&mut g, true);
        assert_eq!(g.value(p.var(id)).data(), &[2.0, 2.0, 2.0]);
        drop(g);
        ps.get_mut(id).set(0, 0, 5.0);
        assert_eq!(ps.get(id).get(0, 0), 5.0);
    }
}
