//! Small feed-forward classifiers: an MLP with an optional patch-conv stem,
//! forward pass with activation cache, and manual backprop.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probekit::RawImage;

/// Non-overlapping `size x size` convolution with stride `size`, followed by
/// ReLU. Implemented as one dense map shared by all patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchStem {
    pub size: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stem: Option<PatchStem>,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Arch {
    /// 3072 -> 256 -> 128 -> K on 32x32 RGB.
    pub fn mlp(classes: usize) -> Self {
        Arch {
            width: 32,
            height: 32,
            channels: 3,
            stem: None,
            hidden: vec![256, 128],
            classes,
        }
    }

    /// 4x4 patch stem with 16 maps, then 1024 -> 128 -> K.
    pub fn conv(classes: usize) -> Self {
        Arch {
            width: 32,
            height: 32,
            channels: 3,
            stem: Some(PatchStem { size: 4, channels: 16 }),
            hidden: vec![128],
            classes,
        }
    }

    pub fn family(&self) -> &'static str {
        if self.stem.is_some() {
            "conv"
        } else {
            "mlp"
        }
    }

    pub fn input_dim(&self) -> usize {
        self.width * self.height * self.channels
    }

    fn patches(&self) -> usize {
        self.stem.map_or(0, |s| (self.width / s.size) * (self.height / s.size))
    }

    /// Width of the vector fed to the first dense layer.
    fn trunk_dim(&self) -> usize {
        match self.stem {
            Some(s) => self.patches() * s.channels,
            None => self.input_dim(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.hidden.last().unwrap_or(&self.trunk_dim())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig("architecture needs at least 2 classes".into()));
        }
        if self.input_dim() == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("architecture has an empty layer".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidConfig(format!("{} input channels", self.channels)));
        }
        if let Some(s) = self.stem {
            if s.size == 0 || s.channels == 0 || self.width % s.size != 0 || self.height % s.size != 0 {
                return Err(Error::InvalidConfig(format!(
                    "patch stem {}x{} does not tile {}x{}",
                    s.size, s.size, self.width, self.height
                )));
            }
        }
        Ok(())
    }

    /// (rows, cols) of every dense map, stem first, head last.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if let Some(s) = self.stem {
            out.push((s.size * s.size * self.channels, s.channels));
        }
        let mut prev = self.trunk_dim();
        for &h in self.hidden.iter().chain(std::iter::once(&self.classes)) {
            out.push((prev, h));
            prev = h;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense {
            w: Array2::zeros((rows, cols)),
            b: Array1::zeros(cols),
        }
    }

    /// He-normal weights, zero bias.
    pub fn he<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, (2.0 / rows as f64).sqrt()).expect("valid std");
        Dense {
            w: Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng)),
            b: Array1::zeros(cols),
        }
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.w);
        z += &self.b;
        z
    }
}

/// Parameters (or gradients) laid out like [`Arch::shapes`].
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub stem: Option<Dense>,
    pub layers: Vec<Dense>,
}

impl Params {
    pub fn init<R: Rng>(arch: &Arch, rng: &mut R) -> Self {
        let mut shapes = arch.shapes().into_iter();
        let stem = arch.stem.map(|_| {
            let (r, c) = shapes.next().unwrap();
            Dense::he(r, c, rng)
        });
        let layers = shapes.map(|(r, c)| Dense::he(r, c, rng)).collect();
        Params { stem, layers }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|d| Dense::zeros(d.w.nrows(), d.w.ncols()))
    }

    fn map(&self, f: impl Fn(&Dense) -> Dense) -> Self {
        Params {
            stem: self.stem.as_ref().map(&f),
            layers: self.layers.iter().map(f).collect(),
        }
    }

    pub fn dense(&self) -> impl Iterator<Item = &Dense> {
        self.stem.iter().chain(self.layers.iter())
    }

    pub fn dense_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.stem.iter_mut().chain(self.layers.iter_mut())
    }

    /// All scalars in a fixed order (per map: weights row-major, then bias).
    pub fn flat(&self) -> Vec<f64> {
        self.dense()
            .flat_map(|d| d.w.iter().chain(d.b.iter()).copied())
            .collect()
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let mut it = v.iter().copied();
        for d in self.dense_mut() {
            for x in d.w.iter_mut().chain(d.b.iter_mut()) {
                *x = it.next().expect("length matches");
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dense()
            .all(|d| d.w.iter().chain(d.b.iter()).all(|v| v.is_finite()))
    }

    pub fn head(&self) -> &Dense {
        self.layers.last().expect("head layer")
    }
}

/// Map pixels to network inputs in `[-0.5, 0.5]`.
pub fn to_input(images: &[&RawImage], arch: &Arch) -> Result<Array2<f64>> {
    let dim = arch.input_dim();
    let mut x = Array2::zeros((images.len(), dim));
    for (mut row, img) in x.rows_mut().into_iter().zip(images) {
        if img.width() != arch.width || img.height() != arch.height || img.channels() != arch.channels {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{}x{} does not fit a {}x{}x{} model",
                img.width(),
                img.height(),
                img.channels(),
                arch.width,
                arch.height,
                arch.channels
            )));
        }
        for (o, &p) in row.iter_mut().zip(img.pixels()) {
            *o = f64::from(p) / 255.0 - 0.5;
        }
    }
    Ok(x)
}

pub const INPUT_MIN: f64 = -0.5;
pub const INPUT_MAX: f64 = 0.5;

/// Rearrange `(B, H*W*C)` rows into `(B*P, s*s*C)` patch rows.
fn im2col(x: ArrayView2<f64>, arch: &Arch, s: usize) -> Array2<f64> {
    let (w, c) = (arch.width, arch.channels);
    let (pw, ph) = (arch.width / s, arch.height / s);
    let p = pw * ph;
    let mut cols = Array2::zeros((x.nrows() * p, s * s * c));
    for (bi, row) in x.rows().into_iter().enumerate() {
        let row = row.as_slice().expect("standard layout");
        for py in 0..ph {
            for px in 0..pw {
                let mut out = cols.row_mut(bi * p + py * pw + px);
                let out = out.as_slice_mut().unwrap();
                for dy in 0..s {
                    let src = ((py * s + dy) * w + px * s) * c;
                    out[dy * s * c..(dy + 1) * s * c].copy_from_slice(&row[src..src + s * c]);
                }
            }
        }
    }
    cols
}

/// Inverse of [`im2col`] (patches do not overlap, so this is a permutation).
fn col2im(cols: ArrayView2<f64>, batch: usize, arch: &Arch, s: usize) -> Array2<f64> {
    let (w, c) = (arch.width, arch.channels);
    let (pw, ph) = (arch.width / s, arch.height / s);
    let p = pw * ph;
    let mut x = Array2::zeros((batch, arch.input_dim()));
    for bi in 0..batch {
        let mut row = x.row_mut(bi);
        let row = row.as_slice_mut().unwrap();
        for py in 0..ph {
            for px in 0..pw {
                let src = cols.row(bi * p + py * pw + px);
                let src = src.as_slice().unwrap();
                for dy in 0..s {
                    let dst = ((py * s + dy) * w + px * s) * c;
                    row[dst..dst + s * c].copy_from_slice(&src[dy * s * c..(dy + 1) * s * c]);
                }
            }
        }
    }
    x
}

fn relu_inplace(z: &mut Array2<f64>) {
    z.mapv_inplace(|v| v.max(0.0));
}

/// Activations kept for backprop.
pub struct Trace {
    batch: usize,
    stem_cols: Option<Array2<f64>>,
    /// `acts[i]` is the input of dense layer `i`.
    acts: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
}

impl Trace {
    /// Post-ReLU output of the last hidden layer.
    pub fn embedding(&self) -> &Array2<f64> {
        self.acts.last().expect("at least one dense layer")
    }
}

pub fn forward(arch: &Arch, params: &Params, x: ArrayView2<f64>) -> Trace {
    let batch = x.nrows();
    let (stem_cols, first) = match (arch.stem, &params.stem) {
        (Some(s), Some(stem)) => {
            let cols = im2col(x, arch, s.size);
            let mut a = stem.apply(cols.view());
            relu_inplace(&mut a);
            let h = a
                .into_shape_with_order((batch, arch.trunk_dim()))
                .expect("contiguous stem output");
            (Some(cols), h)
        }
        _ => (None, x.to_owned()),
    };
    let mut acts = vec![first];
    let last = params.layers.len() - 1;
    let mut logits = None;
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = layer.apply(acts[i].view());
        if i == last {
            logits = Some(z);
        } else {
            relu_inplace(&mut z);
            acts.push(z);
        }
    }
    Trace {
        batch,
        stem_cols,
        acts,
        logits: logits.expect("head layer"),
    }
}

pub fn logits(arch: &Arch, params: &Params, x: ArrayView2<f64>) -> Array2<f64> {
    forward(arch, params, x).logits
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    All,
    Last,
}

/// Backprop `dlogits` through the cached trace. With `Scope::Last` only the
/// head gradient is filled in (other entries stay zero). The input gradient is
/// returned when `want_dx` is set.
pub fn backward(
    arch: &Arch,
    params: &Params,
    trace: &Trace,
    dlogits: Array2<f64>,
    scope: Scope,
    want_dx: bool,
) -> (Params, Option<Array2<f64>>) {
    let mut grads = params.zeros_like();
    let n = params.layers.len();
    let mut g = dlogits;
    for i in (0..n).rev() {
        let input = &trace.acts[i];
        if scope == Scope::All || i == n - 1 {
            grads.layers[i].w = input.t().dot(&g);
            grads.layers[i].b = g.sum_axis(Axis(0));
        }
        let need_below = want_dx || (scope == Scope::All && (i > 0 || params.stem.is_some()));
        if !need_below {
            return (grads, None);
        }
        let mut d = g.dot(&params.layers[i].w.t());
        if i > 0 || params.stem.is_some() {
            Zip::from(&mut d).and(input).for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
        }
        g = d;
    }
    match (arch.stem, &params.stem, &trace.stem_cols) {
        (Some(s), Some(stem), Some(cols)) => {
            let gcols = g
                .into_shape_with_order((trace.batch * arch.patches(), s.channels))
                .expect("contiguous");
            if scope == Scope::All {
                let gs = grads.stem.as_mut().unwrap();
                gs.w = cols.t().dot(&gcols);
                gs.b = gcols.sum_axis(Axis(0));
            }
            let dx = want_dx.then(|| col2im(gcols.dot(&stem.w.t()).view(), trace.batch, arch, s.size));
            (grads, dx)
        }
        _ => (grads, want_dx.then_some(g)),
    }
}

/// Row-wise softmax of `z / t`.
pub fn softmax_t(z: &Array2<f64>, t: f64) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| ((v - m) / t).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

pub fn softmax(z: &Array2<f64>) -> Array2<f64> {
    softmax_t(z, 1.0)
}

fn log_softmax_row(z: ndarray::ArrayView1<f64>, t: f64) -> Array1<f64> {
    let m = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = z.iter().map(|&v| ((v - m) / t).exp()).sum::<f64>().ln();
    z.mapv(|v| (v - m) / t - lse)
}

/// Training objective on logits.
pub enum Objective<'a> {
    /// Mean cross-entropy against hard labels.
    Ce { labels: &'a [usize] },
    /// `alpha * T^2 * KL(teacher_T || student_T) + (1 - alpha) * CE(student, labels)`,
    /// where `soft` holds the teacher's temperature-`T` probabilities.
    Kd {
        soft: ArrayView2<'a, f64>,
        labels: &'a [usize],
        alpha: f64,
        temperature: f64,
    },
}

/// Mean loss over the batch and its gradient with respect to the logits.
pub fn loss_and_dlogits(logits: &Array2<f64>, objective: &Objective<'_>) -> (f64, Array2<f64>) {
    let b = logits.nrows() as f64;
    let p = softmax(logits);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    let (labels, kd) = match objective {
        Objective::Ce { labels } => (*labels, None),
        Objective::Kd {
            soft,
            labels,
            alpha,
            temperature,
        } => (*labels, Some((soft, *alpha, *temperature))),
    };
    let ce_weight = kd.map_or(1.0, |(_, a, _)| 1.0 - a);
    for (r, z) in logits.rows().into_iter().enumerate() {
        let y = labels[r];
        if ce_weight != 0.0 {
            let lp = log_softmax_row(z, 1.0);
            loss -= ce_weight * lp[y];
            let mut gr = grad.row_mut(r);
            gr.scaled_add(ce_weight, &p.row(r));
            gr[y] -= ce_weight;
        }
        if let Some((soft, alpha, t)) = kd {
            let lq = log_softmax_row(z, t);
            let q = lq.mapv(f64::exp);
            let target = soft.row(r);
            let kl: f64 = target
                .iter()
                .zip(lq.iter())
                .filter(|(&pt, _)| pt > 0.0)
                .map(|(&pt, &lqt)| pt * (pt.ln() - lqt))
                .sum();
            loss += alpha * t * t * kl;
            // d/dz of T^2 KL = T (q - p_T)
            let mut gr = grad.row_mut(r);
            Zip::from(&mut gr).and(&q).and(&target).for_each(|g, &qi, &pi| {
                *g += alpha * t * (qi - pi);
            });
        }
    }
    grad /= b;
    (loss / b, grad)
}

/// Single FGSM step: `clip(x + eps * sign(grad))`.
pub fn fgsm(x: ArrayView2<f64>, grad: &Array2<f64>, eps: f64) -> Array2<f64> {
    let mut out = x.to_owned();
    Zip::from(&mut out).and(grad).for_each(|v, &g| {
        let step = if g > 0.0 {
            eps
        } else if g < 0.0 {
            -eps
        } else {
            0.0
        };
        *v = (*v + step).clamp(INPUT_MIN, INPUT_MAX);
    });
    out
}

/// Gradient of the objective with respect to the input batch.
pub fn input_gradient(arch: &Arch, params: &Params, x: ArrayView2<f64>, objective: &Objective<'_>) -> (f64, Array2<f64>) {
    let trace = forward(arch, params, x);
    let (loss, dl) = loss_and_dlogits(&trace.logits, objective);
    let (_, dx) = backward(arch, params, &trace, dl, Scope::Last, true);
    (loss, dx.expect("requested"))
}

/// Loss and parameter gradient on one batch.
pub fn loss_and_grad(
    arch: &Arch,
    params: &Params,
    x: ArrayView2<f64>,
    objective: &Objective<'_>,
    scope: Scope,
) -> (f64, Params) {
    let trace = forward(arch, params, x);
    let (loss, dl) = loss_and_dlogits(&trace.logits, objective);
    (loss, backward(arch, params, &trace, dl, scope, false).0)
}

/// Zero the incoming weights, bias and outgoing weights of the given units of
/// the last hidden layer.
pub fn zero_last_hidden_units(params: &mut Params, units: &[usize]) {
    let n = params.layers.len();
    if n < 2 {
        return;
    }
    for &u in units {
        params.layers[n - 2].w.column_mut(u).fill(0.0);
        params.layers[n - 2].b[u] = 0.0;
        params.layers[n - 1].w.row_mut(u).fill(0.0);
    }
}

/// Replace the head with a fresh `classes`-way layer.
pub fn replace_head<R: Rng>(arch: &mut Arch, params: &mut Params, classes: usize, rng: &mut R) {
    arch.classes = classes;
    let rows = params.head().w.nrows();
    *params.layers.last_mut().unwrap() = Dense::he(rows, classes, rng);
}

/// Slice helper used by batch iteration.
pub fn rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

pub fn row_range(x: &Array2<f64>, start: usize, end: usize) -> ArrayView2<'_, f64> {
    x.slice(s![start..end, ..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(stem: bool) -> Arch {
        Arch {
            width: 8,
            height: 8,
            channels: 3,
            stem: stem.then_some(PatchStem { size: 4, channels: 3 }),
            hidden: vec![6, 5],
            classes: 4,
        }
    }

    #[test]
    fn im2col_roundtrip() {
        let arch = tiny(true);
        let x = Array2::from_shape_fn((2, arch.input_dim()), |(i, j)| (i * 1000 + j) as f64);
        let cols = im2col(x.view(), &arch, 4);
        assert_eq!(cols.dim(), (8, 48));
        // patch (0, 1) of sample 0 starts at pixel (0, 4)
        assert_eq!(cols[[1, 0]], (4 * 3) as f64);
        assert_eq!(col2im(cols.view(), 2, &arch, 4), x);
    }

    #[test]
    fn shapes_follow_arch() {
        assert_eq!(Arch::mlp(10).shapes(), vec![(3072, 256), (256, 128), (128, 10)]);
        assert_eq!(Arch::conv(10).shapes(), vec![(48, 16), (1024, 128), (128, 10)]);
        assert!(Arch::mlp(10).validate().is_ok());
        let mut bad = Arch::conv(10);
        bad.stem = Some(PatchStem { size: 5, channels: 4 });
        assert!(bad.validate().is_err());
    }

    #[test]
    fn softmax_rows_normalize() {
        let z = Array2::from_shape_fn((5, 10), |(i, j)| (i as f64 - 2.0) * 7.0 + j as f64 * 3.3);
        for t in [1.0, 20.0] {
            for row in softmax_t(&z, t).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
        assert_eq!(softmax_t(&z, 1.0), softmax(&z));
    }

    #[test]
    fn kd_with_zero_alpha_is_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arch = tiny(false);
        let p = Params::init(&arch, &mut rng);
        let x = Array2::from_shape_fn((3, arch.input_dim()), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
        let labels = [0, 3, 1];
        let soft = softmax_t(&logits(&arch, &p, x.view()), 20.0);
        let ce = loss_and_grad(&arch, &p, x.view(), &Objective::Ce { labels: &labels }, Scope::All);
        let kd = loss_and_grad(
            &arch,
            &p,
            x.view(),
            &Objective::Kd {
                soft: soft.view(),
                labels: &labels,
                alpha: 0.0,
                temperature: 20.0,
            },
            Scope::All,
        );
        assert_eq!(ce.0, kd.0);
        assert_eq!(ce.1, kd.1);
    }

    #[test]
    fn fgsm_is_bounded() {
        let x = Array2::from_shape_fn((2, 6), |(i, j)| (i as f64 - 0.5) * 0.9 + j as f64 * 0.01);
        let g = Array2::from_shape_fn((2, 6), |(i, j)| (i as f64 - 0.5) * (j as f64 - 2.0));
        let eps = 8.0 / 255.0;
        let adv = fgsm(x.view(), &g, eps);
        for (a, b) in adv.iter().zip(x.iter()) {
            assert!((a - b).abs() <= eps + 1e-15);
            assert!((INPUT_MIN..=INPUT_MAX).contains(a));
        }
    }

    #[test]
    fn pruned_units_are_dead() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let arch = tiny(false);
        let mut p = Params::init(&arch, &mut rng);
        zero_last_hidden_units(&mut p, &[1, 3]);
        let x = Array2::from_shape_fn((4, arch.input_dim()), |(i, j)| ((i + j) % 5) as f64 / 5.0 - 0.5);
        let t = forward(&arch, &p, x.view());
        for row in t.embedding().rows() {
            assert_eq!(row[1], 0.0);
            assert_eq!(row[3], 0.0);
        }
    }
}
