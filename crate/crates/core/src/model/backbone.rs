//! Feature extractors.
//!
//! A [`Backbone`] is a stateless architecture: all weights live in the
//! [`ParamStore`] under the `backbone` group, so both Siamese branches share
//! one storage. Any network that can run forward, backpropagate into its
//! parameters and expose its output dimension plugs into the model, which is
//! how an ImageNet-pretrained GoogLeNet-class extractor is attached. Two
//! implementations ship: [`ToyCnn`] for desk-scale experiments and
//! [`LinearBackbone`], a single projection used in hand-checked tests.

use std::fmt::Debug;

use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use crate::data::Image;
use crate::error::{Error, Result};

pub const BACKBONE_GROUP: &str = "backbone";

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    pub output: Vec<f64>,
    /// Intermediate feature vectors that auxiliary heads attach to.
    pub taps: Vec<Vec<f64>>,
    cache: Vec<Vec<f64>>,
}

pub trait Backbone: Debug + Send + Sync {
    /// Architecture identifier stored in checkpoints.
    fn id(&self) -> String;

    fn input_shape(&self) -> (usize, usize, usize);

    fn output_dim(&self) -> usize;

    /// Dimensions of the auxiliary attachment points, shallowest first.
    fn tap_dims(&self) -> Vec<usize>;

    fn layer_names(&self) -> Vec<String>;

    /// Adds freshly initialised parameters to `store`.
    fn init(&self, store: &mut ParamStore, rng: &mut dyn RngCore);

    fn forward(&self, params: &ParamStore, image: &Image) -> Result<BackboneTrace>;

    /// Accumulates parameter gradients given the gradient of the loss with
    /// respect to the output and each tap (empty slices mean zero).
    fn backward(
        &self,
        params: &ParamStore,
        trace: &BackboneTrace,
        grad_output: &[f64],
        grad_taps: &[Vec<f64>],
        grads: &mut Grads,
    );

    /// Activation map of a named layer as an `H x W x channels` image.
    fn layer_response(&self, params: &ParamStore, image: &Image, layer: &str) -> Result<Image>;
}

/// Serializable description used to rebuild a backbone from a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    Toy {
        input: (usize, usize, usize),
        channels: (usize, usize),
        feature_dim: usize,
    },
    Linear {
        input: (usize, usize, usize),
        feature_dim: usize,
    },
}

impl BackboneConfig {
    pub fn toy(input: (usize, usize, usize), feature_dim: usize) -> Self {
        BackboneConfig::Toy {
            input,
            channels: (6, 8),
            feature_dim,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Backbone>> {
        Ok(match *self {
            BackboneConfig::Toy {
                input,
                channels,
                feature_dim,
            } => Box::new(ToyCnn::new(input, channels, feature_dim)?),
            BackboneConfig::Linear { input, feature_dim } => {
                Box::new(LinearBackbone::new(input, feature_dim))
            }
        })
    }
}

fn check_input(expected: (usize, usize, usize), image: &Image) -> Result<()> {
    if image.shape() != expected {
        let (h, w, c) = expected;
        let (fh, fw, fc) = image.shape();
        return Err(Error::DimensionMismatch {
            expected: h * w * c,
            found: fh * fw * fc,
        });
    }
    Ok(())
}

fn normal_vec(n: usize, std: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Single affine map from flattened pixels to features.
#[derive(Debug, Clone)]
pub struct LinearBackbone {
    input: (usize, usize, usize),
    dim: usize,
}

impl LinearBackbone {
    pub fn new(input: (usize, usize, usize), dim: usize) -> Self {
        Self { input, dim }
    }

    fn in_len(&self) -> usize {
        self.input.0 * self.input.1 * self.input.2
    }
}

impl Backbone for LinearBackbone {
    fn id(&self) -> String {
        let (h, w, c) = self.input;
        format!("linear:{h}x{w}x{c}:d{}", self.dim)
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn tap_dims(&self) -> Vec<usize> {
        Vec::new()
    }

    fn layer_names(&self) -> Vec<String> {
        vec!["proj".into()]
    }

    fn init(&self, store: &mut ParamStore, rng: &mut dyn RngCore) {
        let n = self.in_len();
        let w = normal_vec(self.dim * n, (1.0 / n as f64).sqrt(), rng);
        store.insert("backbone.proj.weight", BACKBONE_GROUP, &[self.dim, n], w);
        store.insert("backbone.proj.bias", BACKBONE_GROUP, &[self.dim], vec![0.0; self.dim]);
    }

    fn forward(&self, params: &ParamStore, image: &Image) -> Result<BackboneTrace> {
        check_input(self.input, image)?;
        let x = image.data();
        let output = affine(
            params.get("backbone.proj.weight"),
            params.get("backbone.proj.bias"),
            x,
        );
        Ok(BackboneTrace {
            output,
            taps: Vec::new(),
            cache: vec![x.to_vec()],
        })
    }

    fn backward(
        &self,
        _params: &ParamStore,
        trace: &BackboneTrace,
        grad_output: &[f64],
        _grad_taps: &[Vec<f64>],
        grads: &mut Grads,
    ) {
        let x = &trace.cache[0];
        outer_acc(grads.get_mut("backbone.proj.weight"), grad_output, x);
        add_into(grads.get_mut("backbone.proj.bias"), grad_output);
    }

    fn layer_response(&self, params: &ParamStore, image: &Image, layer: &str) -> Result<Image> {
        if layer != "proj" {
            return Err(Error::UnknownLayer(layer.to_string()));
        }
        let y = self.forward(params, image)?.output;
        Image::from_vec(1, 1, self.dim, y)
    }
}

/// Two 3x3 conv + ReLU + 2x2 average-pool blocks and a linear projection
/// to `feature_dim`. The global average of each block's ReLU output is an
/// auxiliary tap.
#[derive(Debug, Clone)]
pub struct ToyCnn {
    input: (usize, usize, usize),
    channels: (usize, usize),
    dim: usize,
}

// cache slots
const X: usize = 0;
const PRE1: usize = 1;
const A1: usize = 2;
const P1: usize = 3;
const PRE2: usize = 4;
const A2: usize = 5;
const P2: usize = 6;

impl ToyCnn {
    pub fn new(input: (usize, usize, usize), channels: (usize, usize), dim: usize) -> Result<Self> {
        let (h, w, c) = input;
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::Config(format!(
                "toy backbone needs height and width divisible by 4, got {h}x{w}x{c}"
            )));
        }
        if channels.0 == 0 || channels.1 == 0 || dim == 0 {
            return Err(Error::Config("toy backbone widths must be >= 1".into()));
        }
        Ok(Self {
            input,
            channels,
            dim,
        })
    }

    fn flat_len(&self) -> usize {
        (self.input.0 / 4) * (self.input.1 / 4) * self.channels.1
    }

    fn block_shapes(&self) -> [(usize, usize, usize, usize); 2] {
        let (h, w, c) = self.input;
        [
            (h, w, c, self.channels.0),
            (h / 2, w / 2, self.channels.0, self.channels.1),
        ]
    }
}

impl Backbone for ToyCnn {
    fn id(&self) -> String {
        let (h, w, c) = self.input;
        format!(
            "toy-cnn:{h}x{w}x{c}:c{}-{}:d{}",
            self.channels.0, self.channels.1, self.dim
        )
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn tap_dims(&self) -> Vec<usize> {
        vec![self.channels.0, self.channels.1]
    }

    fn layer_names(&self) -> Vec<String> {
        vec!["conv1".into(), "conv2".into()]
    }

    fn init(&self, store: &mut ParamStore, rng: &mut dyn RngCore) {
        for (k, (_, _, cin, cout)) in self.block_shapes().into_iter().enumerate() {
            let fan_in = 9 * cin;
            let w = normal_vec(cout * fan_in, (2.0 / fan_in as f64).sqrt(), rng);
            store.insert(
                format!("backbone.conv{}.weight", k + 1),
                BACKBONE_GROUP,
                &[cout, 3, 3, cin],
                w,
            );
            store.insert(
                format!("backbone.conv{}.bias", k + 1),
                BACKBONE_GROUP,
                &[cout],
                vec![0.0; cout],
            );
        }
        let n = self.flat_len();
        let w = normal_vec(self.dim * n, (1.0 / n as f64).sqrt(), rng);
        store.insert("backbone.fc.weight", BACKBONE_GROUP, &[self.dim, n], w);
        store.insert("backbone.fc.bias", BACKBONE_GROUP, &[self.dim], vec![0.0; self.dim]);
    }

    fn forward(&self, params: &ParamStore, image: &Image) -> Result<BackboneTrace> {
        check_input(self.input, image)?;
        let [(h1, w1, c0, c1), (h2, w2, _, c2)] = self.block_shapes();
        let x = image.data().to_vec();

        let pre1 = conv3x3(
            &x,
            (h1, w1, c0),
            c1,
            params.get("backbone.conv1.weight"),
            params.get("backbone.conv1.bias"),
        );
        let a1: Vec<f64> = pre1.iter().map(|v| v.max(0.0)).collect();
        let p1 = avg_pool2(&a1, (h1, w1, c1));
        let pre2 = conv3x3(
            &p1,
            (h2, w2, c1),
            c2,
            params.get("backbone.conv2.weight"),
            params.get("backbone.conv2.bias"),
        );
        let a2: Vec<f64> = pre2.iter().map(|v| v.max(0.0)).collect();
        let p2 = avg_pool2(&a2, (h2, w2, c2));
        let output = affine(
            params.get("backbone.fc.weight"),
            params.get("backbone.fc.bias"),
            &p2,
        );
        let taps = vec![global_avg(&a1, c1), global_avg(&a2, c2)];
        Ok(BackboneTrace {
            output,
            taps,
            cache: vec![x, pre1, a1, p1, pre2, a2, p2],
        })
    }

    fn backward(
        &self,
        params: &ParamStore,
        trace: &BackboneTrace,
        grad_output: &[f64],
        grad_taps: &[Vec<f64>],
        grads: &mut Grads,
    ) {
        let [(h1, w1, c0, c1), (h2, w2, _, c2)] = self.block_shapes();
        let cache = &trace.cache;

        // fc
        outer_acc(grads.get_mut("backbone.fc.weight"), grad_output, &cache[P2]);
        add_into(grads.get_mut("backbone.fc.bias"), grad_output);
        let g_p2 = affine_t(params.get("backbone.fc.weight"), grad_output, cache[P2].len());

        // block 2
        let mut g_a2 = avg_pool2_backward(&g_p2, (h2, w2, c2));
        if let Some(g) = grad_taps.get(1).filter(|g| !g.is_empty()) {
            global_avg_backward(&mut g_a2, g, c2);
        }
        let g_pre2 = relu_backward(&g_a2, &cache[PRE2]);
        let g_p1 = conv3x3_backward(
            &cache[P1],
            (h2, w2, c1),
            c2,
            params.get("backbone.conv2.weight"),
            &g_pre2,
            grads,
            "backbone.conv2",
            true,
        );

        // block 1
        let mut g_a1 = avg_pool2_backward(&g_p1, (h1, w1, c1));
        if let Some(g) = grad_taps.first().filter(|g| !g.is_empty()) {
            global_avg_backward(&mut g_a1, g, c1);
        }
        let g_pre1 = relu_backward(&g_a1, &cache[PRE1]);
        conv3x3_backward(
            &cache[X],
            (h1, w1, c0),
            c1,
            params.get("backbone.conv1.weight"),
            &g_pre1,
            grads,
            "backbone.conv1",
            false,
        );
    }

    fn layer_response(&self, params: &ParamStore, image: &Image, layer: &str) -> Result<Image> {
        let [(h1, w1, _, c1), (h2, w2, _, c2)] = self.block_shapes();
        let (slot, (h, w, c)) = match layer {
            "conv1" => (A1, (h1, w1, c1)),
            "conv2" => (A2, (h2, w2, c2)),
            other => return Err(Error::UnknownLayer(other.to_string())),
        };
        let trace = self.forward(params, image)?;
        Image::from_vec(h, w, c, trace.cache[slot].clone())
    }
}

/// `W x + b` for row-major `W` of shape `[b.len(), x.len()]`.
pub(crate) fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(o, &bias)| {
            bias + w[o * n..(o + 1) * n]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .collect()
}

/// `W^T g` for row-major `W` of shape `[g.len(), n]`.
pub(crate) fn affine_t(w: &[f64], g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (o, &go) in g.iter().enumerate() {
        if go == 0.0 {
            continue;
        }
        for (acc, &wv) in out.iter_mut().zip(&w[o * n..(o + 1) * n]) {
            *acc += go * wv;
        }
    }
    out
}

/// `G += g x^T`.
pub(crate) fn outer_acc(grad: &mut [f64], g: &[f64], x: &[f64]) {
    let n = x.len();
    for (o, &go) in g.iter().enumerate() {
        if go == 0.0 {
            continue;
        }
        for (acc, &xv) in grad[o * n..(o + 1) * n].iter_mut().zip(x) {
            *acc += go * xv;
        }
    }
}

pub(crate) fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

fn relu_backward(g: &[f64], pre: &[f64]) -> Vec<f64> {
    g.iter()
        .zip(pre)
        .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
        .collect()
}

fn conv3x3(
    x: &[f64],
    (h, w, cin): (usize, usize, usize),
    cout: usize,
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            let dst = &mut out[(y * w + xx) * cout..(y * w + xx + 1) * cout];
            dst.copy_from_slice(bias);
            for dy in 0..3 {
                let sy = y as isize + dy as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let sx = xx as isize + dx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = &x[(sy as usize * w + sx as usize) * cin..][..cin];
                    for (o, d) in dst.iter_mut().enumerate() {
                        let k = &weight[((o * 3 + dy) * 3 + dx) * cin..][..cin];
                        *d += k.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input` is set.
#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    x: &[f64],
    (h, w, cin): (usize, usize, usize),
    cout: usize,
    weight: &[f64],
    g_out: &[f64],
    grads: &mut Grads,
    prefix: &str,
    need_input: bool,
) -> Vec<f64> {
    let mut g_in = if need_input { vec![0.0; x.len()] } else { Vec::new() };
    {
        let gb = grads.get_mut(&format!("{prefix}.bias"));
        for pos in 0..h * w {
            add_into(gb, &g_out[pos * cout..(pos + 1) * cout]);
        }
    }
    let gw = grads.get_mut(&format!("{prefix}.weight"));
    for y in 0..h {
        for xx in 0..w {
            let go = &g_out[(y * w + xx) * cout..][..cout];
            for dy in 0..3 {
                let sy = y as isize + dy as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let sx = xx as isize + dx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let base = (sy as usize * w + sx as usize) * cin;
                    for (o, &g) in go.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let off = ((o * 3 + dy) * 3 + dx) * cin;
                        for i in 0..cin {
                            gw[off + i] += g * x[base + i];
                        }
                        if need_input {
                            for i in 0..cin {
                                g_in[base + i] += g * weight[off + i];
                            }
                        }
                    }
                }
            }
        }
    }
    g_in
}

fn avg_pool2(x: &[f64], (h, w, c): (usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..oh {
        for xx in 0..ow {
            for ch in 0..c {
                let mut s = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        s += x[((2 * y + a) * w + 2 * xx + b) * c + ch];
                    }
                }
                out[(y * ow + xx) * c + ch] = 0.25 * s;
            }
        }
    }
    out
}

fn avg_pool2_backward(g: &[f64], (h, w, c): (usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; h * w * c];
    for y in 0..oh {
        for xx in 0..ow {
            for ch in 0..c {
                let v = 0.25 * g[(y * ow + xx) * c + ch];
                for a in 0..2 {
                    for b in 0..2 {
                        out[((2 * y + a) * w + 2 * xx + b) * c + ch] = v;
                    }
                }
            }
        }
    }
    out
}

fn global_avg(x: &[f64], c: usize) -> Vec<f64> {
    let positions = x.len() / c;
    let mut out = vec![0.0; c];
    for chunk in x.chunks_exact(c) {
        add_into(&mut out, chunk);
    }
    out.iter_mut().for_each(|v| *v /= positions as f64);
    out
}

fn global_avg_backward(acc: &mut [f64], g: &[f64], c: usize) {
    let scale = 1.0 / (acc.len() / c) as f64;
    for chunk in acc.chunks_exact_mut(c) {
        for (a, gv) in chunk.iter_mut().zip(g) {
            *a += scale * gv;
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn toy() -> (ToyCnn, ParamStore) {
        let net = ToyCnn::new((8, 4, 2), (3, 4), 5).unwrap();
        let mut store = ParamStore::new();
        net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        (net, store)
    }

    #[test]
    fn zero_image_outputs_final_bias() {
        let (net, mut store) = toy();
        let bias = [0.5, -1.0, 2.0, 0.0, 3.25];
        store.get_mut("backbone.fc.bias").copy_from_slice(&bias);
        let y = net.forward(&store, &Image::zeros(8, 4, 2)).unwrap().output;
        assert_eq!(y, bias);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let (net, store) = toy();
        assert!(matches!(
            net.forward(&store, &Image::zeros(4, 4, 2)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(ToyCnn::new((6, 4, 1), (1, 1), 1).is_err());
    }

    // Central differences of a random linear functional of output and taps.
    #[test]
    fn backward_matches_finite_differences() {
        let (net, mut store) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dist = Normal::new(0.0, 1.0).unwrap();
        for (_, p) in store.iter_mut() {
            for v in p.data.iter_mut() {
                *v += 0.1 * dist.sample(&mut rng);
            }
        }
        let img = Image::from_vec(8, 4, 2, (0..64).map(|i| (i as f64 * 0.37).sin().abs()).collect())
            .unwrap();
        let go: Vec<f64> = (0..5).map(|_| dist.sample(&mut rng)).collect();
        let gt: Vec<Vec<f64>> = net
            .tap_dims()
            .iter()
            .map(|&d| (0..d).map(|_| dist.sample(&mut rng)).collect())
            .collect();
        let objective = |s: &ParamStore| {
            let t = net.forward(s, &img).unwrap();
            let mut v: f64 = t.output.iter().zip(&go).map(|(a, b)| a * b).sum();
            for (tap, g) in t.taps.iter().zip(&gt) {
                v += tap.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
            }
            v
        };
        let trace = net.forward(&store, &img).unwrap();
        let mut grads = Grads::zeros_like(&store);
        net.backward(&store, &trace, &go, &gt, &mut grads);
        for (name, off) in store.coordinates() {
            let eps = 1e-6;
            let mut s = store.clone();
            s.get_mut(&name)[off] += eps;
            let up = objective(&s);
            s.get_mut(&name)[off] -= 2.0 * eps;
            let down = objective(&s);
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads.get(&name)[off];
            assert!(
                (numeric - analytic).abs() <= 1e-5 * (1.0 + analytic.abs()),
                "{name}[{off}]: {analytic} vs {numeric}"
            );
        }
    }

    #[test]
    fn zero_bias_layer_on_zero_image_is_silent() {
        let (net, store) = toy();
        let r = net.layer_response(&store, &Image::zeros(8, 4, 2), "conv2").unwrap();
        assert_eq!(r.shape(), (4, 2, 4));
        assert!(r.data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            net.layer_response(&store, &Image::zeros(8, 4, 2), "conv9"),
            Err(Error::UnknownLayer(_))
        ));
    }
}
