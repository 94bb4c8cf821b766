//! Minimal multilayer perceptron with explicit forward/backward passes.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;

static VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<T: Real>(self, v: T) -> T {
        match self {
            Activation::Relu => v.max(T::zero()),
            Activation::None => v,
            Activation::Sigmoid => T::one() / (T::one() + (-v).exp()),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn grad_from_output<T: Real>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::None => T::one(),
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T: Real> {
    /// out x in
    pub w: Array2<T>,
    pub b: Array1<T>,
    pub act: Activation,
}

impl<T: Real> Layer<T> {
    pub fn inputs(&self) -> usize {
        self.w.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.w.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct Mlp<T: Real> {
    layers: Vec<Layer<T>>,
    version: u64,
}

impl<T: Real> PartialEq for Mlp<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations retained by [`Mlp::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Real> {
    version: u64,
    /// `values[0]` is the input, `values[k + 1]` the output of layer `k`.
    values: Vec<Array2<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn output(&self) -> ArrayView2<'_, T> {
        self.values.last().expect("cache holds the input").view()
    }
}

/// Parameter gradients, one `(dw, db)` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Real> {
    pub layers: Vec<(Array2<T>, Array1<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.len())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    pub fn scale(&mut self, k: T) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|v| v * k);
            b.mapv_inplace(|v| v * k);
        }
    }

    pub fn sum_squares(&self) -> T {
        self.layers
            .iter()
            .map(|(w, b)| w.iter().map(|&v| v * v).sum::<T>() + b.iter().map(|&v| v * v).sum::<T>())
            .sum()
    }
}

impl<T: Real> Mlp<T> {
    pub fn from_layers(layers: Vec<Layer<T>>) -> Result<Self> {
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(Error::Validation(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    k,
                    pair[0].outputs(),
                    k + 1,
                    pair[1].inputs()
                )));
            }
        }
        for (k, l) in layers.iter().enumerate() {
            if l.b.len() != l.outputs() {
                return Err(Error::Validation(format!("layer {k}: bias length mismatch")));
            }
            if l.w.iter().chain(l.b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("layer {k}: non-finite parameter")));
            }
        }
        Ok(Self {
            layers,
            version: next_version(),
        })
    }

    /// Layer widths `dims[0] -> dims[1] -> ...` with one activation per layer.
    /// Weights are uniform in `[-sqrt(1/in), sqrt(1/in)]`, biases zero.
    pub fn new(dims: &[usize], acts: &[Activation], rng: &mut Rng) -> Self {
        assert_eq!(dims.len(), acts.len() + 1, "one activation per layer");
        let layers = dims
            .windows(2)
            .zip(acts)
            .map(|(d, &act)| {
                let bound = (1.0 / d[0] as f64).sqrt();
                Layer {
                    w: Array2::from_shape_fn((d[1], d[0]), |_| T::from_f64_lossy(rng.range_f64(-bound, bound))),
                    b: Array1::zeros(d[1]),
                    act,
                }
            })
            .collect();
        Self {
            layers,
            version: next_version(),
        }
    }

    pub fn zeros(dims: &[usize], acts: &[Activation]) -> Self {
        assert_eq!(dims.len(), acts.len() + 1, "one activation per layer");
        let layers = dims
            .windows(2)
            .zip(acts)
            .map(|(d, &act)| Layer {
                w: Array2::zeros((d[1], d[0])),
                b: Array1::zeros(d[1]),
                act,
            })
            .collect();
        Self {
            layers,
            version: next_version(),
        }
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Mutable parameter access; invalidates outstanding caches.
    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        self.version = next_version();
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs())
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs())
    }

    fn check_width(&self, x: &ArrayView2<'_, T>) -> Result<()> {
        if x.ncols() != self.input_width() {
            return Err(Error::arg(
                "x",
                format!("width {} does not match network input {}", x.ncols(), self.input_width()),
            ));
        }
        Ok(())
    }

    fn layer_forward(layer: &Layer<T>, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut z = x.dot(&layer.w.t());
        z += &layer.b;
        let act = layer.act;
        z.mapv_inplace(|v| act.apply(v));
        z
    }

    /// Runs layers `start..` on `x` (the input of layer `start`).
    pub fn forward_from(&self, start: usize, mut x: Array2<T>) -> Array2<T> {
        for layer in &self.layers[start..] {
            x = Self::layer_forward(layer, x.view());
        }
        x
    }

    /// Output only, no cache.
    pub fn predict(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        self.check_width(&x)?;
        let mut cur = x.to_owned();
        for layer in &self.layers {
            cur = Self::layer_forward(layer, cur.view());
        }
        Ok(cur)
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_width(&x)?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_owned());
        for layer in &self.layers {
            let next = Self::layer_forward(layer, values.last().unwrap().view());
            values.push(next);
        }
        let out = values.last().unwrap().clone();
        Ok((
            out,
            ForwardCache {
                version: self.version,
                values,
            },
        ))
    }

    /// Reverse-mode pass: parameter gradients and `dLoss/dInput`.
    pub fn backward(&self, cache: &ForwardCache<T>, d_out: ArrayView2<'_, T>) -> Result<(Gradients<T>, Array2<T>)> {
        if cache.version != self.version {
            return Err(Error::State(
                "forward cache was produced by a different or since-updated network".into(),
            ));
        }
        let out = cache.output();
        if d_out.dim() != out.dim() {
            return Err(Error::arg(
                "d_out",
                format!("shape {:?} does not match output {:?}", d_out.dim(), out.dim()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut upstream = d_out.to_owned();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let y = &cache.values[k + 1];
            let act = layer.act;
            upstream.zip_mut_with(y, |g, &yv| *g *= act.grad_from_output(yv));
            let input = &cache.values[k];
            let dw = upstream.t().dot(input);
            let db = upstream.sum_axis(Axis(0));
            let dx = upstream.dot(&layer.w);
            grads.push((dw, db));
            upstream = dx;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, upstream))
    }

    pub fn sgd_step(&mut self, grads: &Gradients<T>, lr: T) {
        for (layer, (dw, db)) in self.layers.iter_mut().zip(&grads.layers) {
            layer.w.scaled_add(-lr, dw);
            layer.b.scaled_add(-lr, db);
        }
        self.version = next_version();
    }

    pub fn to_json(&self) -> serde_json::Value {
        let layers: Vec<LayerJson> = self
            .layers
            .iter()
            .map(|l| LayerJson {
                w: l.w.iter().map(|v| v.to_f64_lossy()).collect(),
                rows: l.w.nrows(),
                cols: l.w.ncols(),
                b: l.b.iter().map(|v| v.to_f64_lossy()).collect(),
                act: l.act,
            })
            .collect();
        serde_json::to_value(layers).expect("plain data")
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let layers: Vec<LayerJson> =
            serde_json::from_value(value.clone()).map_err(|e| Error::Validation(format!("weights: {e}")))?;
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(k, l)| {
                if l.w.len() != l.rows * l.cols {
                    return Err(Error::Validation(format!(
                        "layer {k}: `w` has {} values for {}x{}",
                        l.w.len(),
                        l.rows,
                        l.cols
                    )));
                }
                Ok(Layer {
                    w: Array2::from_shape_vec((l.rows, l.cols), l.w.into_iter().map(T::from_f64_lossy).collect())
                        .expect("checked"),
                    b: l.b.into_iter().map(T::from_f64_lossy).collect(),
                    act: l.act,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_json()).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Self::from_json(&value)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerJson {
    w: Vec<f64>,
    rows: usize,
    cols: usize,
    b: Vec<f64>,
    act: Activation,
}

/// Per-block elementwise max over valid slots of an `m x s x d` tensor.
///
/// Blocks without a valid slot yield a zero row and `true` in the empty flags.
pub fn masked_maxpool<T: Real>(values: ArrayView3<'_, T>, mask: ArrayView2<'_, bool>) -> (Array2<T>, Vec<bool>) {
    let (m, s, d) = values.dim();
    let mut out = Array2::zeros((m, d));
    let mut empty = vec![true; m];
    for b in 0..m {
        for slot in 0..s {
            if !mask[[b, slot]] {
                continue;
            }
            let row = values.slice(ndarray::s![b, slot, ..]);
            if empty[b] {
                out.row_mut(b).assign(&row);
                empty[b] = false;
            } else {
                out.row_mut(b).zip_mut_with(&row, |o, &v| {
                    if v > *o {
                        *o = v
                    }
                });
            }
        }
    }
    (out, empty)
}

/// Max pool over contiguous row segments `rows[offsets[b]..offsets[b + 1]]`.
///
/// Also returns, per output cell, the row that supplied the max (first on
/// ties) so gradients can be routed back; empty segments give zeros and
/// `u32::MAX`.
pub fn segment_maxpool<T: Real>(rows: ArrayView2<'_, T>, offsets: &[usize]) -> (Array2<T>, Array2<u32>) {
    let m = offsets.len() - 1;
    let d = rows.ncols();
    let mut out = Array2::zeros((m, d));
    let mut arg = Array2::from_elem((m, d), u32::MAX);
    for b in 0..m {
        for r in offsets[b]..offsets[b + 1] {
            for k in 0..d {
                let v = rows[[r, k]];
                if arg[[b, k]] == u32::MAX || v > out[[b, k]] {
                    out[[b, k]] = v;
                    arg[[b, k]] = r as u32;
                }
            }
        }
    }
    (out, arg)
}

/// Scatters pooled gradients back to the rows that won the max.
pub fn segment_maxpool_backward<T: Real>(d_pooled: ArrayView2<'_, T>, arg: &Array2<u32>, n_rows: usize) -> Array2<T> {
    let mut d_rows = Array2::zeros((n_rows, d_pooled.ncols()));
    for ((b, k), &r) in arg.indexed_iter() {
        if r != u32::MAX {
            d_rows[[r as usize, k]] += d_pooled[[b, k]];
        }
    }
    d_rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn single(w: Array2<f64>, b: Array1<f64>, act: Activation) -> Mlp<f64> {
        Mlp::from_layers(vec![Layer { w, b, act }]).unwrap()
    }

    #[test]
    fn identity_layer() {
        let net = single(Array2::eye(3), Array1::zeros(3), Activation::None);
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]];
        assert_eq!(net.predict(x.view()).unwrap(), x);
    }

    #[test]
    fn relu_kills_negatives() {
        let net = single(-Array2::eye(2), Array1::zeros(2), Activation::Relu);
        let y = net.predict(array![[1.0, 2.0]].view()).unwrap();
        assert_eq!(y, array![[0.0, 0.0]]);
    }

    #[test]
    fn sigmoid_of_zero() {
        let net = Mlp::<f64>::zeros(&[4, 3], &[Activation::Sigmoid]);
        let y = net.predict(array![[1.0, 2.0, 3.0, 4.0]].view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn width_mismatch() {
        let net = Mlp::<f64>::zeros(&[4, 3], &[Activation::None]);
        assert!(net.forward(array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn scalar_product_rule() {
        let net = single(array![[1.7]], array![0.0], Activation::None);
        let (_, cache) = net.forward(array![[3.0]].view()).unwrap();
        let (g, dx) = net.backward(&cache, array![[1.0]].view()).unwrap();
        assert_eq!(g.layers[0].0[[0, 0]], 3.0);
        assert_eq!(dx[[0, 0]], 1.7);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let net = Mlp::<f64>::new(&[3, 5, 2], &[Activation::Relu, Activation::None], &mut Rng::new(1));
        let (_, cache) = net.forward(array![[0.1, 0.2, 0.3]].view()).unwrap();
        let (g, _) = net.backward(&cache, Array2::zeros((1, 2)).view()).unwrap();
        assert_eq!(g.sum_squares(), 0.0);
    }

    #[test]
    fn stale_cache_rejected() {
        let mut net = Mlp::<f64>::new(&[2, 2], &[Activation::None], &mut Rng::new(1));
        let (_, cache) = net.forward(array![[1.0, 1.0]].view()).unwrap();
        let g = Gradients::zeros_like(&net);
        net.sgd_step(&g, 0.1);
        assert!(matches!(net.backward(&cache, array![[1.0, 1.0]].view()), Err(Error::State(_))));
        let other = Mlp::<f64>::new(&[2, 2], &[Activation::None], &mut Rng::new(1));
        assert!(other.backward(&cache, array![[1.0, 1.0]].view()).is_err());
    }

    #[test]
    fn sgd_step_cases() {
        let mut net = single(array![[1.0]], array![0.0], Activation::None);
        let g = Gradients {
            layers: vec![(array![[2.0]], array![0.0])],
        };
        let before = net.clone();
        net.sgd_step(&g, 0.0);
        assert_eq!(net.layers(), before.layers());
        net.sgd_step(&g, 0.5);
        assert_eq!(net.layers()[0].w[[0, 0]], 0.0);
    }

    #[test]
    fn sgd_decreases_convex_quadratic() {
        // loss = 0.5 * |W x - t|^2
        let mut net = Mlp::<f64>::new(&[3, 2], &[Activation::None], &mut Rng::new(4));
        let x = array![[1.0, -0.5, 2.0], [0.3, 0.3, -1.0]];
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let loss = |net: &Mlp<f64>| {
            let y = net.predict(x.view()).unwrap();
            0.5 * (&y - &t).mapv(|v| v * v).sum()
        };
        let before = loss(&net);
        let (y, cache) = net.forward(x.view()).unwrap();
        let (g, _) = net.backward(&cache, (&y - &t).view()).unwrap();
        net.sgd_step(&g, 0.05);
        assert!(loss(&net) < before);
    }

    #[test]
    fn json_round_trip() {
        let net = Mlp::<f64>::new(&[9, 16, 16, 32], &[Activation::Relu; 3], &mut Rng::new(2));
        let back = Mlp::<f64>::from_json(&net.to_json()).unwrap();
        assert_eq!(back.layers(), net.layers());
        let v = net.to_json();
        assert_eq!(v[0]["rows"], 16);
        assert_eq!(v[0]["cols"], 9);
        assert_eq!(v[0]["act"], "relu");
    }

    #[test]
    fn maxpool_cases() {
        let mut values = Array3::<f64>::zeros((2, 3, 2));
        let mut mask = Array2::from_elem((2, 3), false);
        values.slice_mut(ndarray::s![0, 0, ..]).assign(&array![1.0, 5.0]);
        values.slice_mut(ndarray::s![0, 1, ..]).assign(&array![3.0, 2.0]);
        mask[[0, 0]] = true;
        mask[[0, 1]] = true;
        let (out, empty) = masked_maxpool(values.view(), mask.view());
        assert_eq!(out.row(0), array![3.0, 5.0]);
        assert_eq!(empty, vec![false, true]);
        assert_eq!(out.row(1), array![0.0, 0.0]);

        mask[[0, 1]] = false;
        let (out, _) = masked_maxpool(values.view(), mask.view());
        assert_eq!(out.row(0), array![1.0, 5.0]);
    }

    #[test]
    fn maxpool_matches_naive_scan_and_segments() {
        let mut rng = Rng::new(8);
        let (m, s, d) = (20, 6, 5);
        let values = Array3::from_shape_fn((m, s, d), |_| rng.range_f64(-1.0, 1.0));
        let counts: Vec<usize> = (0..m).map(|_| rng.below(s + 1)).collect();
        let mask = Array2::from_shape_fn((m, s), |(b, k)| k < counts[b]);
        let (out, empty) = masked_maxpool(values.view(), mask.view());
        let mut offsets = vec![0];
        let mut flat = Vec::new();
        for b in 0..m {
            let mut naive = vec![f64::NEG_INFINITY; d];
            for k in 0..counts[b] {
                for c in 0..d {
                    naive[c] = naive[c].max(values[[b, k, c]]);
                    flat.push(values[[b, k, c]]);
                }
            }
            offsets.push(offsets[b] + counts[b]);
            if counts[b] == 0 {
                assert!(empty[b]);
                continue;
            }
            for c in 0..d {
                assert_eq!(out[[b, c]], naive[c]);
            }
        }
        let rows = Array2::from_shape_vec((offsets[m], d), flat).unwrap();
        let (seg, _) = segment_maxpool(rows.view(), &offsets);
        assert_eq!(seg, out);
    }

    proptest::proptest! {
        #[test]
        fn maxpool_slot_order_invariant(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let values = Array3::from_shape_fn((4, 5, 3), |_| rng.range_f64(-1.0, 1.0));
            let mask = Array2::from_shape_fn((4, 5), |_| rng.uniform() < 0.7);
            let mut perm: Vec<usize> = (0..5).collect();
            for i in (1..5).rev() { perm.swap(i, rng.below(i + 1)); }
            let pv = Array3::from_shape_fn((4, 5, 3), |(b, k, c)| values[[b, perm[k], c]]);
            let pm = Array2::from_shape_fn((4, 5), |(b, k)| mask[[b, perm[k]]]);
            proptest::prop_assert_eq!(masked_maxpool(values.view(), mask.view()), masked_maxpool(pv.view(), pm.view()));
        }

        #[test]
        fn forward_is_batch_equivariant(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let net = Mlp::<f64>::new(&[4, 8, 3], &[Activation::Relu, Activation::Sigmoid], &mut rng);
            let x = Array2::from_shape_fn((6, 4), |_| rng.range_f64(-2.0, 2.0));
            let mut perm: Vec<usize> = (0..6).collect();
            for i in (1..6).rev() { perm.swap(i, rng.below(i + 1)); }
            let px = x.select(Axis(0), &perm);
            let y = net.predict(x.view()).unwrap();
            proptest::prop_assert_eq!(net.predict(px.view()).unwrap(), y.select(Axis(0), &perm));
        }
    }
}
