//! Neighborhood feature diffusion over block centroids.
//!
//! For block `i` and scale `s`, every neighbor `j` within `radii[s]` (at most
//! `max_k`, nearest first, `i` itself always included) contributes
//! `encoder_s([F_j ; C_j - C_i ; |C_j - C_i|])`; contributions are max-pooled
//! and the output net maps `[F_i ; g_1 ; ... ; g_S]` to the diffused feature.

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::ball_query::HashGrid;
use crate::error::{Error, Result};
use crate::nn::{segment_maxpool, segment_maxpool_backward, Activation, ForwardCache, Gradients, Mlp};
use crate::real::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct NfdmConfig<T: Real> {
    pub radii: Vec<f64>,
    pub max_k: usize,
    pub scale_encoders: Vec<Mlp<T>>,
    pub output: Mlp<T>,
}

impl<T: Real> NfdmConfig<T> {
    /// One `(d + 4) -> scale_width` ReLU encoder per radius and a
    /// `(d + S * scale_width) -> out_width` ReLU output layer.
    pub fn new(
        radii: &[f64],
        max_k: usize,
        feature_width: usize,
        scale_width: usize,
        out_width: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let scale_encoders = radii
            .iter()
            .map(|_| Mlp::new(&[feature_width + 4, scale_width], &[Activation::Relu], rng))
            .collect();
        let output = Mlp::new(
            &[feature_width + radii.len() * scale_width, out_width],
            &[Activation::Relu],
            rng,
        );
        let cfg = Self {
            radii: radii.to_vec(),
            max_k,
            scale_encoders,
            output,
        };
        cfg.validate(feature_width)?;
        Ok(cfg)
    }

    pub fn validate(&self, feature_width: usize) -> Result<()> {
        if self.radii.is_empty() {
            return Err(Error::arg("radii", "need at least one scale"));
        }
        if self.radii[0] <= 0.0 || self.radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::arg("radii", format!("{:?} must be positive and strictly increasing", self.radii)));
        }
        if self.max_k == 0 {
            return Err(Error::arg("max_k", "must be at least 1"));
        }
        if self.scale_encoders.len() != self.radii.len() {
            return Err(Error::arg("scale_encoders", "one encoder per radius"));
        }
        let mut concat = feature_width;
        for (s, enc) in self.scale_encoders.iter().enumerate() {
            if enc.input_width() != feature_width + 4 {
                return Err(Error::arg(
                    "scale_encoders",
                    format!("scale {s} expects width {}, features give {}", enc.input_width(), feature_width + 4),
                ));
            }
            concat += enc.output_width();
        }
        if self.output.input_width() != concat {
            return Err(Error::arg(
                "output",
                format!("expects width {}, concatenation gives {concat}", self.output.input_width()),
            ));
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.output.output_width()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "radii": self.radii,
            "max_k": self.max_k,
            "scales": self.scale_encoders.iter().map(|e| e.to_json()).collect::<Vec<_>>(),
            "output": self.output.to_json(),
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let radii: Vec<f64> = serde_json::from_value(v["radii"].clone())
            .map_err(|e| Error::Validation(format!("nfdm.radii: {e}")))?;
        let max_k = v["max_k"]
            .as_u64()
            .ok_or_else(|| Error::Validation("nfdm.max_k: expected an integer".into()))? as usize;
        let scales = v["scales"]
            .as_array()
            .ok_or_else(|| Error::Validation("nfdm.scales: expected a list".into()))?
            .iter()
            .map(Mlp::from_json)
            .collect::<Result<Vec<_>>>()?;
        let output = Mlp::from_json(&v["output"])?;
        let width = scales.first().map_or(0, |e| e.input_width().saturating_sub(4));
        let cfg = Self {
            radii,
            max_k,
            scale_encoders: scales,
            output,
        };
        cfg.validate(width)?;
        Ok(cfg)
    }

    pub fn sgd_step(&mut self, grads: &NfdmGrads<T>, lr: T) {
        for (enc, g) in self.scale_encoders.iter_mut().zip(&grads.scales) {
            enc.sgd_step(g, lr);
        }
        self.output.sgd_step(&grads.output, lr);
    }
}

/// Grid cell used for diffusion neighborhoods. Large radii get a finer grid so
/// the nearest-`max_k` scan can stop early.
fn neighborhood_cell(radius: f64) -> f64 {
    (radius / 8.0).max(0.5).min(radius)
}

/// Ball-query neighborhoods of every position among the positions, self included.
pub fn neighborhoods<C: Real>(positions: &[[C; 3]], radius: f64, max_k: usize) -> Result<Vec<Vec<usize>>> {
    if !(radius > 0.0) || max_k == 0 {
        return Err(Error::arg("radius", "radius and max_k must be positive"));
    }
    let grid = HashGrid::new(positions, neighborhood_cell(radius))?;
    let mut lists = grid.query_all(positions, radius, max_k);
    for (i, list) in lists.iter_mut().enumerate() {
        if !list.contains(&i) {
            list.insert(0, i);
            list.truncate(max_k);
        }
    }
    Ok(lists)
}

fn to_f64_positions<C: Real>(positions: &[[C; 3]]) -> Vec<[f64; 3]> {
    positions.iter().map(|p| p.map(|v| v.to_f64_lossy())).collect()
}

const CHUNK: usize = 512;

/// Max-pooled encoder response for each block at one scale.
///
/// The first layer is split as `W_F F_j + W_D C_j` (per block) plus
/// `b - W_D C_i` (per center) plus `w_d |C_j - C_i|` (per pair).
fn diffuse_scale<T: Real>(
    pos: &[[f64; 3]],
    features: ArrayView2<'_, T>,
    neighbors: &[Vec<usize>],
    encoder: &Mlp<T>,
) -> Array2<T> {
    let d = features.ncols();
    let first = &encoder.layers()[0];
    let h = first.outputs();
    let w_f = first.w.slice(s![.., ..d]);
    let w_d = first.w.slice(s![.., d..d + 3]);
    let w_r: Vec<T> = first.w.column(d + 3).to_vec();
    let p = Array2::from_shape_fn((pos.len(), 3), |(i, a)| T::from_f64_lossy(pos[i][a]));
    let pw = p.dot(&w_d.t());
    let a = features.dot(&w_f.t()) + &pw;
    let base = -pw + &first.b;
    let act = first.act;
    let out_w = encoder.output_width();
    let m = pos.len();
    let chunks: Vec<Array2<T>> = (0..m.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(m);
            if encoder.layers().len() == 1 {
                // Single monotone layer: max-pool pre-activations, activate once.
                let mut out = Array2::<T>::zeros((hi - lo, h));
                let mut acc = vec![T::neg_infinity(); h];
                for (r, i) in (lo..hi).enumerate() {
                    let bi = base.row(i);
                    let bi = bi.as_slice().expect("standard layout");
                    acc.fill(T::neg_infinity());
                    for &j in &neighbors[i] {
                        let dist = T::from_f64_lossy(crate::real::dist2(&pos[i], &pos[j]).sqrt());
                        let aj = a.row(j);
                        let aj = aj.as_slice().expect("standard layout");
                        for k in 0..h {
                            let v = aj[k] + bi[k] + w_r[k] * dist;
                            if v > acc[k] {
                                acc[k] = v;
                            }
                        }
                    }
                    for (o, &v) in out.row_mut(r).iter_mut().zip(&acc) {
                        *o = act.apply(v);
                    }
                }
                return out;
            }
            let mut offsets = Vec::with_capacity(hi - lo + 1);
            offsets.push(0);
            for list in &neighbors[lo..hi] {
                offsets.push(offsets.last().unwrap() + list.len());
            }
            let mut z = Array2::<T>::zeros((*offsets.last().unwrap(), h));
            let mut row = 0;
            for i in lo..hi {
                for &j in &neighbors[i] {
                    let dist = T::from_f64_lossy(crate::real::dist2(&pos[i], &pos[j]).sqrt());
                    let mut zr = z.row_mut(row);
                    for k in 0..h {
                        zr[k] = act.apply(a[[j, k]] + base[[i, k]] + w_r[k] * dist);
                    }
                    row += 1;
                }
            }
            let y = encoder.forward_from(1, z);
            debug_assert_eq!(y.ncols(), out_w);
            segment_maxpool(y.view(), &offsets).0
        })
        .collect();
    let views: Vec<_> = chunks.iter().map(|c| c.view()).collect();
    if views.is_empty() {
        return Array2::zeros((0, out_w));
    }
    ndarray::concatenate(Axis(0), &views).expect("equal widths")
}

/// Inference path over all blocks.
pub fn nfdm<C: Real, T: Real>(positions: &[[C; 3]], features: ArrayView2<'_, T>, cfg: &NfdmConfig<T>) -> Result<Array2<T>> {
    let neighbors = cfg
        .radii
        .iter()
        .map(|&r| neighborhoods(positions, r, cfg.max_k))
        .collect::<Result<Vec<_>>>()?;
    nfdm_with_neighbors(positions, features, &neighbors, cfg)
}

/// Inference with precomputed neighborhoods (`neighbors[scale][block]`).
pub fn nfdm_with_neighbors<C: Real, T: Real>(
    positions: &[[C; 3]],
    features: ArrayView2<'_, T>,
    neighbors: &[Vec<Vec<usize>>],
    cfg: &NfdmConfig<T>,
) -> Result<Array2<T>> {
    cfg.validate(features.ncols())?;
    if positions.len() != features.nrows() {
        return Err(Error::arg(
            "features",
            format!("{} rows for {} positions", features.nrows(), positions.len()),
        ));
    }
    let pos = to_f64_positions(positions);
    let mut parts = vec![features.to_owned()];
    for (s, enc) in cfg.scale_encoders.iter().enumerate() {
        parts.push(diffuse_scale(&pos, features, &neighbors[s], enc));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let concat = ndarray::concatenate(Axis(1), &views).expect("equal rows");
    cfg.output.predict(concat.view())
}

#[derive(Debug, Clone)]
pub struct NfdmGrads<T: Real> {
    pub scales: Vec<Gradients<T>>,
    pub output: Gradients<T>,
}

impl<T: Real> NfdmGrads<T> {
    pub fn sum_squares(&self) -> T {
        self.scales.iter().map(|g| g.sum_squares()).sum::<T>() + self.output.sum_squares()
    }

    pub fn scale(&mut self, k: T) {
        self.scales.iter_mut().for_each(|g| g.scale(k));
        self.output.scale(k);
    }
}

struct ScaleTape<T: Real> {
    cache: ForwardCache<T>,
    arg: Array2<u32>,
    sources: Vec<usize>,
}

/// State kept by [`nfdm_train_forward`] for the backward pass.
pub struct NfdmTape<T: Real> {
    scales: Vec<ScaleTape<T>>,
    out_cache: ForwardCache<T>,
    queries: Vec<usize>,
    rows: usize,
    width: usize,
}

/// Differentiable pass for a subset of blocks.
///
/// `positions`/`features` describe a local block set; `queries` index into it
/// and `neighbors[s][q]` lists local neighbor indices of `queries[q]`.
pub fn nfdm_train_forward<T: Real>(
    cfg: &NfdmConfig<T>,
    positions: &[[f64; 3]],
    features: ArrayView2<'_, T>,
    queries: &[usize],
    neighbors: &[Vec<Vec<usize>>],
) -> Result<(Array2<T>, NfdmTape<T>)> {
    let d = features.ncols();
    cfg.validate(d)?;
    let mut scales = Vec::with_capacity(cfg.radii.len());
    let mut parts = vec![features.select(Axis(0), queries)];
    for (s, enc) in cfg.scale_encoders.iter().enumerate() {
        let mut offsets = vec![0];
        let mut sources = Vec::new();
        for list in &neighbors[s] {
            sources.extend_from_slice(list);
            offsets.push(sources.len());
        }
        let mut x = Array2::<T>::zeros((sources.len(), d + 4));
        let mut row = 0;
        for (q, &i) in queries.iter().enumerate() {
            for &j in &neighbors[s][q] {
                let mut xr = x.row_mut(row);
                xr.slice_mut(s![..d]).assign(&features.row(j));
                for a in 0..3 {
                    xr[d + a] = T::from_f64_lossy(positions[j][a] - positions[i][a]);
                }
                xr[d + 3] = T::from_f64_lossy(crate::real::dist2(&positions[j], &positions[i]).sqrt());
                row += 1;
            }
        }
        let (y, cache) = enc.forward(x.view())?;
        let (g, arg) = segment_maxpool(y.view(), &offsets);
        parts.push(g);
        scales.push(ScaleTape { cache, arg, sources });
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let concat = ndarray::concatenate(Axis(1), &views).expect("equal rows");
    let (out, out_cache) = cfg.output.forward(concat.view())?;
    Ok((
        out,
        NfdmTape {
            scales,
            out_cache,
            queries: queries.to_vec(),
            rows: features.nrows(),
            width: d,
        },
    ))
}

/// Gradients of all NFDM parameters and of the local feature rows.
pub fn nfdm_train_backward<T: Real>(
    cfg: &NfdmConfig<T>,
    tape: &NfdmTape<T>,
    d_out: ArrayView2<'_, T>,
) -> Result<(NfdmGrads<T>, Array2<T>)> {
    let d = tape.width;
    let (out_grads, d_concat) = cfg.output.backward(&tape.out_cache, d_out)?;
    let mut d_features = Array2::<T>::zeros((tape.rows, d));
    for (q, &i) in tape.queries.iter().enumerate() {
        let mut r = d_features.row_mut(i);
        r += &d_concat.slice(s![q, ..d]);
    }
    let mut offset = d;
    let mut scale_grads = Vec::with_capacity(tape.scales.len());
    for (enc, st) in cfg.scale_encoders.iter().zip(&tape.scales) {
        let h = enc.output_width();
        let dg = d_concat.slice(s![.., offset..offset + h]);
        offset += h;
        let dy = segment_maxpool_backward(dg, &st.arg, st.sources.len());
        let (g, dx) = enc.backward(&st.cache, dy.view())?;
        for (p, &j) in st.sources.iter().enumerate() {
            let mut r = d_features.row_mut(j);
            r += &dx.slice(s![p, ..d]);
        }
        scale_grads.push(g);
    }
    Ok((
        NfdmGrads {
            scales: scale_grads,
            output: out_grads,
        },
        d_features,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct evaluation with an exhaustive neighbor scan.
    fn brute_nfdm(pos: &[[f64; 3]], f: &Array2<f64>, cfg: &NfdmConfig<f64>) -> Array2<f64> {
        let m = pos.len();
        let d = f.ncols();
        let mut rows = Vec::new();
        for i in 0..m {
            let mut concat: Vec<f64> = f.row(i).to_vec();
            for (s, enc) in cfg.scale_encoders.iter().enumerate() {
                let r = cfg.radii[s];
                let mut cand: Vec<(f64, usize)> = (0..m)
                    .map(|j| ((0..3).map(|a| (pos[j][a] - pos[i][a]).powi(2)).sum::<f64>(), j))
                    .filter(|&(d2, _)| d2 <= r * r)
                    .collect();
                cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                cand.truncate(cfg.max_k);
                let mut best = vec![f64::NEG_INFINITY; enc.output_width()];
                for &(d2, j) in &cand {
                    let mut x = f.row(j).to_vec();
                    x.extend((0..3).map(|a| pos[j][a] - pos[i][a]));
                    x.push(d2.sqrt());
                    let y = enc.predict(Array2::from_shape_vec((1, d + 4), x).unwrap().view()).unwrap();
                    for k in 0..best.len() {
                        best[k] = best[k].max(y[[0, k]]);
                    }
                }
                concat.extend(best);
            }
            let w = concat.len();
            rows.push(cfg.output.predict(Array2::from_shape_vec((1, w), concat).unwrap().view()).unwrap());
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ndarray::concatenate(Axis(0), &views).unwrap()
    }

    fn random_setup(seed: u64, m: usize, extent: f64) -> (Vec<[f64; 3]>, Array2<f64>, NfdmConfig<f64>) {
        let mut rng = Rng::new(seed);
        let pos: Vec<[f64; 3]> = (0..m)
            .map(|_| [rng.range_f64(-extent, extent), rng.range_f64(-extent, extent), rng.range_f64(-0.5, 0.5)])
            .collect();
        let f = Array2::from_shape_fn((m, 6), |_| rng.range_f64(-1.0, 1.0));
        let cfg = NfdmConfig::new(&[0.2, 0.8], 16, 6, 8, 5, &mut rng).unwrap();
        (pos, f, cfg)
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn matches_brute_force_on_random_blocks() {
        let (pos, f, cfg) = random_setup(50, 50, 1.0);
        let fast = nfdm(&pos, f.view(), &cfg).unwrap();
        assert_close(&fast, &brute_nfdm(&pos, &f, &cfg), 1e-12);
    }

    #[test]
    fn single_block_is_self_only() {
        let (_, f, cfg) = random_setup(1, 1, 1.0);
        let pos = [[3.0, 4.0, 0.0]];
        let out = nfdm(&pos, f.view(), &cfg).unwrap();
        let mut concat = f.row(0).to_vec();
        for enc in &cfg.scale_encoders {
            let mut x = f.row(0).to_vec();
            x.extend([0.0; 4]);
            concat.extend(enc.predict(Array2::from_shape_vec((1, 10), x).unwrap().view()).unwrap());
        }
        let expect = cfg.output.predict(Array2::from_shape_vec((1, concat.len()), concat).unwrap().view()).unwrap();
        assert_close(&out, &expect, 1e-12);
    }

    #[test]
    fn distant_blocks_do_not_interact() {
        let (_, f, cfg) = random_setup(2, 2, 1.0);
        let pos = [[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        let both = nfdm(&pos, f.view(), &cfg).unwrap();
        for i in 0..2 {
            let alone = nfdm(&pos[i..i + 1], f.slice(s![i..i + 1, ..]), &cfg).unwrap();
            assert_close(&both.slice(s![i..i + 1, ..]).to_owned(), &alone, 0.0);
        }
    }

    #[test]
    fn training_path_matches_inference() {
        let (pos, f, cfg) = random_setup(3, 80, 1.5);
        let neighbors: Vec<Vec<Vec<usize>>> = cfg.radii.iter().map(|&r| neighborhoods(&pos, r, cfg.max_k).unwrap()).collect();
        let queries: Vec<usize> = (0..80).step_by(3).collect();
        let local: Vec<Vec<Vec<usize>>> = neighbors.iter().map(|n| queries.iter().map(|&q| n[q].clone()).collect()).collect();
        let (out, _) = nfdm_train_forward(&cfg, &pos, f.view(), &queries, &local).unwrap();
        let full = nfdm(&pos, f.view(), &cfg).unwrap();
        assert_close(&out, &full.select(Axis(0), &queries), 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (pos, f, cfg) = random_setup(4, 30, 0.6);
        let neighbors: Vec<Vec<Vec<usize>>> = cfg.radii.iter().map(|&r| neighborhoods(&pos, r, cfg.max_k).unwrap()).collect();
        let queries: Vec<usize> = (0..30).collect();
        let loss = |cfg: &NfdmConfig<f64>, f: &Array2<f64>| {
            let (out, _) = nfdm_train_forward(cfg, &pos, f.view(), &queries, &neighbors).unwrap();
            out.iter().enumerate().map(|(k, v)| v * ((k % 7) as f64 - 3.0)).sum::<f64>()
        };
        let (out, tape) = nfdm_train_forward(&cfg, &pos, f.view(), &queries, &neighbors).unwrap();
        let d_out = Array2::from_shape_fn(out.dim(), |(r, c)| ((r * out.ncols() + c) % 7) as f64 - 3.0);
        let (grads, d_f) = nfdm_train_backward(&cfg, &tape, d_out.view()).unwrap();
        let eps = 1e-6;
        let mut checked = 0;
        for (r, c) in [(0, 0), (5, 3), (17, 5), (29, 1)] {
            let mut fp = f.clone();
            fp[[r, c]] += eps;
            let mut fm = f.clone();
            fm[[r, c]] -= eps;
            let fd = (loss(&cfg, &fp) - loss(&cfg, &fm)) / (2.0 * eps);
            let an = d_f[[r, c]];
            assert!((fd - an).abs() <= 1e-4 * (1.0 + fd.abs()), "dF[{r},{c}] {an} vs {fd}");
            checked += 1;
        }
        for s in 0..2 {
            for (r, c) in [(0, 0), (3, 9), (7, 6)] {
                let mut p = cfg.clone();
                p.scale_encoders[s].layers_mut()[0].w[[r, c]] += eps;
                let mut mneg = cfg.clone();
                mneg.scale_encoders[s].layers_mut()[0].w[[r, c]] -= eps;
                let fd = (loss(&p, &f) - loss(&mneg, &f)) / (2.0 * eps);
                let an = grads.scales[s].layers[0].0[[r, c]];
                assert!((fd - an).abs() <= 1e-4 * (1.0 + fd.abs()), "scale {s} w[{r},{c}] {an} vs {fd}");
                checked += 1;
            }
        }
        assert_eq!(checked, 10);
    }

    #[test]
    fn adding_far_blocks_leaves_output_unchanged() {
        let (pos, f, cfg) = random_setup(5, 20, 0.5);
        let base = nfdm(&pos, f.view(), &cfg).unwrap();
        let mut more = pos.clone();
        more.extend([[50.0, 50.0, 0.0], [-50.0, 0.0, 0.0]]);
        let extra = Array2::from_shape_fn((2, 6), |(r, c)| (r + c) as f64);
        let f2 = ndarray::concatenate(Axis(0), &[f.view(), extra.view()]).unwrap();
        let out = nfdm(&more, f2.view(), &cfg).unwrap();
        assert_close(&out.slice(s![..20, ..]).to_owned(), &base, 0.0);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let (_, _, cfg) = random_setup(6, 1, 1.0);
        let back = NfdmConfig::<f64>::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let mut bad = cfg.clone();
        bad.radii = vec![0.8, 0.2];
        assert!(bad.validate(6).is_err());
        assert!(cfg.validate(7).is_err());
    }
}
