//! Small fully connected network `t -> x(t)` with SiLU hidden layers.
//!
//! Time derivatives come from propagating (value, tangent) pairs through the
//! layers; parameter gradients run the reverse pass over both channels, so a
//! loss may depend on `x(t)` and on `dx/dt`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
pub fn silu_prime(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

#[inline]
pub fn silu_second(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))
}

/// Affine maps applied around the raw network: `u = (t - center) / half`
/// on the way in, `x = offset + scale * y` on the way out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub center: f64,
    pub half: f64,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(d: usize) -> Self {
        Normalization {
            center: 0.0,
            half: 1.0,
            offset: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    /// Window `[t0, t0 + span]` onto `[-1, 1]`; outputs centred on the data
    /// mean and scaled by the per-component standard deviation.
    pub fn for_data(t0: f64, span: f64, points: ArrayView2<f64>) -> Self {
        let d = points.ncols();
        let n = points.nrows().max(1) as f64;
        let mean = points.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(d));
        let scale = (0..d)
            .map(|k| {
                let var = points.column(k).iter().map(|v| (v - mean[k]).powi(2)).sum::<f64>() / n;
                if var.sqrt() > 1e-8 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Normalization {
            center: t0 + 0.5 * span,
            half: 0.5 * span,
            offset: mean.to_vec(),
            scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSurrogate {
    widths: Vec<usize>,
    /// Per layer: weights `n_in x n_out` row-major, then `n_out` biases.
    params: Vec<f64>,
    offsets: Vec<usize>,
    norm: Normalization,
}

/// Activations kept from a batched forward pass.
pub struct ForwardCache {
    /// Input to each layer (`B x n_in`).
    inputs: Vec<Array2<f64>>,
    /// Tangent of each layer input, when the derivative channel was run.
    tangents: Option<Vec<Array2<f64>>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Array2<f64>>,
    pre_t: Option<Vec<Array2<f64>>>,
}

impl MlpSurrogate {
    /// Glorot-uniform weights, zero biases, identity normalisation.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        let mut r = rng::rng_for(seed, &[rng::stream::NET_INIT]);
        Self::new_with(widths, &mut r)
    }

    pub fn new_with<R: Rng + ?Sized>(widths: &[usize], r: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        for l in 0..net.num_layers() {
            let (n_in, n_out) = (net.widths[l], net.widths[l + 1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            let off = net.offsets[l];
            for w in &mut net.params[off..off + n_in * n_out] {
                *w = r.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths[0] != 1 || widths.contains(&0) {
            return Err(Error::Shape(format!("invalid layer widths {widths:?}")));
        }
        let mut offsets = Vec::with_capacity(widths.len());
        let mut total = 0;
        for w in widths.windows(2) {
            offsets.push(total);
            total += w[0] * w[1] + w[1];
        }
        offsets.push(total);
        Ok(MlpSurrogate {
            widths: widths.to_vec(),
            params: vec![0.0; total],
            offsets,
            norm: Normalization::identity(*widths.last().unwrap()),
        })
    }

    /// `[1, width x hidden, d]`.
    pub fn widths_for(hidden: usize, width: usize, d: usize) -> Vec<usize> {
        let mut w = vec![1];
        w.extend(std::iter::repeat_n(width, hidden));
        w.push(d);
        w
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn set_normalization(&mut self, norm: Normalization) -> Result<()> {
        let d = self.out_dim();
        if norm.offset.len() != d || norm.scale.len() != d || !(norm.half > 0.0) {
            return Err(Error::Shape("normalization does not match the network output".into()));
        }
        self.norm = norm;
        Ok(())
    }

    fn weights(&self, l: usize) -> ArrayView2<'_, f64> {
        let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
        let off = self.offsets[l];
        ArrayView2::from_shape((n_in, n_out), &self.params[off..off + n_in * n_out]).expect("layer shape")
    }

    fn bias(&self, l: usize) -> &[f64] {
        let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
        let off = self.offsets[l] + n_in * n_out;
        &self.params[off..off + n_out]
    }

    /// Batched evaluation. Returns `x` (`B x d`), `dx/dt` when requested, and
    /// the cache needed by [`MlpSurrogate::backward_cached`].
    pub fn forward_batch(&self, ts: &[f64], with_dt: bool) -> (Array2<f64>, Option<Array2<f64>>, ForwardCache) {
        let b = ts.len();
        let mut a = Array2::from_shape_fn((b, 1), |(i, _)| (ts[i] - self.norm.center) / self.norm.half);
        let mut t = with_dt.then(|| Array2::from_elem((b, 1), 1.0 / self.norm.half));
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.num_layers()),
            tangents: with_dt.then(Vec::new),
            pre: Vec::new(),
            pre_t: with_dt.then(Vec::new),
        };
        let last = self.num_layers() - 1;
        for l in 0..=last {
            let w = self.weights(l);
            let mut z = a.dot(&w);
            for mut row in z.rows_mut() {
                row.iter_mut().zip(self.bias(l)).for_each(|(v, bb)| *v += bb);
            }
            let zt = t.as_ref().map(|t| t.dot(&w));
            cache.inputs.push(a);
            if let (Some(ts_), Some(t)) = (cache.tangents.as_mut(), t.take()) {
                ts_.push(t);
            }
            if l == last {
                let d = self.out_dim();
                let mut x = z;
                for mut row in x.rows_mut() {
                    for k in 0..d {
                        row[k] = self.norm.offset[k] + self.norm.scale[k] * row[k];
                    }
                }
                let dx = zt.map(|mut zt| {
                    for mut row in zt.rows_mut() {
                        for k in 0..d {
                            row[k] *= self.norm.scale[k];
                        }
                    }
                    zt
                });
                return (x, dx, cache);
            }
            a = z.mapv(silu);
            if let Some(zt) = zt {
                let mut tn = zt.clone();
                tn.zip_mut_with(&z, |tv, &zv| *tv *= silu_prime(zv));
                t = Some(tn);
                cache.pre_t.as_mut().unwrap().push(zt);
            }
            cache.pre.push(z);
        }
        unreachable!("network has at least one layer")
    }

    pub fn forward(&self, t: f64) -> Vec<f64> {
        self.forward_batch(&[t], false).0.row(0).to_vec()
    }

    /// Value and exact time derivative.
    pub fn forward_dt(&self, t: f64) -> (Vec<f64>, Vec<f64>) {
        let (x, dx, _) = self.forward_batch(&[t], true);
        (x.row(0).to_vec(), dx.expect("derivative channel").row(0).to_vec())
    }

    /// Parameter gradient of `sum_i gx_i . x(t_i) + gdx_i . dx/dt(t_i)`.
    pub fn backward(&self, ts: &[f64], gx: ArrayView2<f64>, gdx: Option<ArrayView2<f64>>) -> Result<Vec<f64>> {
        let (_, _, cache) = self.forward_batch(ts, gdx.is_some());
        self.backward_cached(&cache, gx, gdx)
    }

    pub fn backward_cached(
        &self,
        cache: &ForwardCache,
        gx: ArrayView2<f64>,
        gdx: Option<ArrayView2<f64>>,
    ) -> Result<Vec<f64>> {
        let b = cache.inputs[0].nrows();
        let d = self.out_dim();
        if gx.dim() != (b, d) || gdx.is_some_and(|g| g.dim() != (b, d)) {
            return Err(Error::Shape(format!("upstream gradients must be {b}x{d}")));
        }
        if gdx.is_some() && cache.tangents.is_none() {
            return Err(Error::Shape("derivative gradients need a forward pass with the derivative channel".into()));
        }
        let scale = Array1::from(self.norm.scale.clone());
        let mut zbar = &gx * &scale;
        let mut ztbar = gdx.map(|g| &g * &scale);
        let mut grad = vec![0.0; self.params.len()];
        for l in (0..self.num_layers()).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let off = self.offsets[l];
            let mut gw = cache.inputs[l].t().dot(&zbar);
            if let (Some(ztb), Some(tans)) = (ztbar.as_ref(), cache.tangents.as_ref()) {
                gw += &tans[l].t().dot(ztb);
            }
            grad[off..off + n_in * n_out]
                .iter_mut()
                .zip(gw.iter())
                .for_each(|(g, v)| *g = *v);
            let gb = zbar.sum_axis(Axis(0));
            grad[off + n_in * n_out..off + n_in * n_out + n_out]
                .iter_mut()
                .zip(gb.iter())
                .for_each(|(g, v)| *g = *v);
            if l == 0 {
                break;
            }
            let w = self.weights(l);
            let abar = zbar.dot(&w.t());
            let tbar = ztbar.as_ref().map(|z| z.dot(&w.t()));
            // back through the activation of layer l - 1
            let z = &cache.pre[l - 1];
            let mut nz = abar;
            nz.zip_mut_with(z, |v, &zv| *v *= silu_prime(zv));
            if let Some(tbar) = tbar {
                let zt = &cache.pre_t.as_ref().unwrap()[l - 1];
                ndarray::Zip::from(&mut nz)
                    .and(&tbar)
                    .and(z)
                    .and(zt)
                    .for_each(|v, &tb, &zv, &ztv| *v += tb * silu_second(zv) * ztv);
                let mut nzt = tbar;
                nzt.zip_mut_with(z, |v, &zv| *v *= silu_prime(zv));
                ztbar = Some(nzt);
            }
            zbar = nz;
        }
        Ok(grad)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            widths: self.widths.clone(),
            normalization: self.norm.clone(),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!("unsupported checkpoint version {}", c.version)));
        }
        let mut net = Self::zeros(&c.widths)?;
        if c.params.len() != net.num_params() {
            return Err(Error::Shape(format!(
                "checkpoint has {} parameters, architecture needs {}",
                c.params.len(),
                net.num_params()
            )));
        }
        if c.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("checkpoint contains non-finite parameters".into()));
        }
        net.params = c.params;
        net.set_normalization(c.normalization)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        Self::from_checkpoint(c)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub widths: Vec<usize>,
    pub normalization: Normalization,
    pub params: Vec<f64>,
}

/// AdamW with decoupled weight decay (PyTorch conventions).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamW {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step_masked(params, grads, None);
    }

    /// Entries with `frozen[i] == true` are left untouched.
    pub fn step_masked(&mut self, params: &mut [f64], grads: &[f64], frozen: Option<&[bool]>) {
        assert_eq!(params.len(), self.m.len(), "optimizer state size");
        assert_eq!(grads.len(), self.m.len(), "gradient size");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            if frozen.is_some_and(|f| f[i]) {
                continue;
            }
            let g = grads[i];
            params[i] -= self.lr * self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_net(seed: u64, widths: &[usize]) -> MlpSurrogate {
        let mut net = MlpSurrogate::new(widths, seed).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed + 100);
        // nonzero biases and a non-trivial normalisation exercise every path
        for p in net.params_mut() {
            *p += r.random_range(-0.3..0.3);
        }
        let d = net.out_dim();
        net.set_normalization(Normalization {
            center: 1.5,
            half: 2.0,
            offset: (0..d).map(|k| 0.1 * k as f64).collect(),
            scale: (0..d).map(|k| 1.0 + 0.5 * k as f64).collect(),
        })
        .unwrap();
        net
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        for z in [-3.0, -0.4, 0.0, 0.7, 2.5] {
            let h = 1e-5;
            let fd = (silu(z + h) - silu(z - h)) / (2.0 * h);
            assert!((fd - silu_prime(z)).abs() < 1e-9);
            let fd2 = (silu_prime(z + h) - silu_prime(z - h)) / (2.0 * h);
            assert!((fd2 - silu_second(z)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_and_affine_nets() {
        let net = MlpSurrogate::zeros(&[1, 8, 8, 3]).unwrap();
        assert_eq!(net.forward(0.7), vec![0.0; 3]);
        assert_eq!(net.forward_dt(-2.0).1, vec![0.0; 3]);

        let mut aff = MlpSurrogate::zeros(&[1, 2]).unwrap();
        aff.params_mut().copy_from_slice(&[3.0, -1.0, 0.5, 2.0]);
        let (x, dx) = aff.forward_dt(1.5);
        assert_eq!(x, vec![3.0 * 1.5 + 0.5, -1.5 + 2.0]);
        assert_eq!(dx, vec![3.0, -1.0]);
    }

    #[test]
    fn constant_net_has_zero_derivative() {
        let mut net = random_net(3, &[1, 6, 6, 2]);
        let n_first = net.widths()[1];
        net.params_mut()[..n_first].iter_mut().for_each(|w| *w = 0.0);
        let (_, dx) = net.forward_dt(0.3);
        assert!(dx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn value_channel_is_identical() {
        let net = random_net(1, &[1, 16, 16, 3]);
        let ts = [-1.0, 0.0, 0.25, 3.0];
        let (x, _, _) = net.forward_batch(&ts, false);
        let (x2, _, _) = net.forward_batch(&ts, true);
        assert_eq!(x, x2);
        for (i, &t) in ts.iter().enumerate() {
            assert_eq!(net.forward(t), x.row(i).to_vec());
        }
    }

    #[test]
    fn derivative_matches_central_differences() {
        for seed in 0..10 {
            let net = random_net(seed, &[1, 12, 12, 12, 3]);
            for &t in &[-0.7, 0.4, 2.2] {
                let (_, dx) = net.forward_dt(t);
                let h = 1e-4;
                let (xp, xm) = (net.forward(t + h), net.forward(t - h));
                for k in 0..3 {
                    let fd = (xp[k] - xm[k]) / (2.0 * h);
                    assert!((fd - dx[k]).abs() / fd.abs().max(1e-3) < 1e-5, "seed {seed}");
                }
            }
        }
    }

    #[test]
    fn scalar_affine_gradient() {
        let mut net = MlpSurrogate::zeros(&[1, 1]).unwrap();
        net.params_mut().copy_from_slice(&[0.7, -0.2]);
        let t = 1.3;
        let x = net.forward(t)[0];
        let g = net.backward(&[t], array![[2.0 * x]].view(), None).unwrap();
        assert_eq!(g, vec![2.0 * x * t, 2.0 * x]);
        let zero = net.backward(&[t, 2.0], Array2::zeros((2, 1)).view(), Some(Array2::zeros((2, 1)).view())).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        assert!(net.backward(&[t], Array2::zeros((2, 1)).view(), None).is_err());
    }

    fn loss(net: &MlpSurrogate, ts: &[f64]) -> f64 {
        let (x, dx, _) = net.forward_batch(ts, true);
        x.iter().map(|v| v * v).sum::<f64>() + dx.unwrap().iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let ts = [-0.5, 0.1, 1.0, 2.9];
        for seed in 0..10 {
            let net = random_net(seed, &[1, 5, 5, 2]);
            let (x, dx, cache) = net.forward_batch(&ts, true);
            let g = net
                .backward_cached(&cache, (&x * 2.0).view(), Some((&dx.unwrap() * 2.0).view()))
                .unwrap();
            let h = 1e-6;
            for i in 0..net.num_params() {
                let mut p = net.clone();
                p.params_mut()[i] += h;
                let mut m = net.clone();
                m.params_mut()[i] -= h;
                let fd = (loss(&p, &ts) - loss(&m, &ts)) / (2.0 * h);
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-4);
                assert!(rel < 1e-4, "seed {seed} param {i}: fd {fd} an {}", g[i]);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = random_net(2, &[1, 4, 3]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        assert_eq!(MlpSurrogate::load(&path).unwrap(), net);
        let mut c = net.to_checkpoint();
        c.version = 99;
        assert!(MlpSurrogate::from_checkpoint(c).is_err());
        let mut c = net.to_checkpoint();
        c.params.pop();
        assert!(MlpSurrogate::from_checkpoint(c).is_err());
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let a = MlpSurrogate::new(&[1, 64, 64, 2], 9).unwrap();
        assert_eq!(a, MlpSurrogate::new(&[1, 64, 64, 2], 9).unwrap());
        assert_ne!(a, MlpSurrogate::new(&[1, 64, 64, 2], 10).unwrap());
        let bound = (6.0f64 / 128.0).sqrt();
        let w = a.weights(1);
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(a.bias(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adamw_basics() {
        let mut p = vec![1.0, -2.0];
        let mut opt = AdamW::new(2, 0.1, 0.0);
        opt.step(&mut p, &[0.0, 0.0]);
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![1.0, -2.0, 0.5];
        let mut opt = AdamW::new(3, 0.1, 0.0);
        opt.step(&mut p, &[3.0, -0.5, 1e-3]);
        // first bias-corrected step moves each entry by lr * g / (|g| + eps)
        assert!((p[0] - (1.0 - 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (-2.0 + 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((p[2] - (0.5 - 0.1 * 1e-3 / (1e-3 + 1e-8))).abs() < 1e-15);

        let mut p = vec![1.0];
        let mut opt = AdamW::new(1, 0.01, 0.0);
        for _ in 0..500 {
            let g = 2.0 * p[0];
            opt.step(&mut p, &[g]);
        }
        assert!(p[0].abs() < 1e-2, "{}", p[0]);

        let mut p = vec![1.0, 1.0];
        let mut opt = AdamW::new(2, 0.1, 0.5);
        opt.step_masked(&mut p, &[1.0, 1.0], Some(&[true, false]));
        assert_eq!(p[0], 1.0);
        assert!((p[1] - (1.0 - 0.05 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
    }
}
