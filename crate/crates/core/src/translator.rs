//! Translation network: a content encoder with instance normalization, a
//! style encoder that emits per-layer channel statistics, and a decoder that
//! injects those statistics through adaptive instance normalization.

use pir_tensor::{Bound, Float, Graph, ParamSet, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainingConfig;
use crate::error::{PirError, Result};
use crate::image::{check_images, CHANNELS};
use crate::models::INFER_CHUNK;
use crate::nn::{check_layout, conv, dense, init_conv, init_dense, instance_norm};

/// Variance offset in every normalization: `sigma = sqrt(var + ADAIN_EPS)`.
pub const ADAIN_EPS: f64 = 1e-5;
/// Floor added to the softplus that produces style standard deviations.
pub const STYLE_STD_FLOOR: f64 = 1e-5;
/// AdaIN layers in the decoder: two per residual block.
pub const ADAIN_LAYERS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct TranslatorArch {
    pub resolution: usize,
    /// Channels of the content code and of every AdaIN layer.
    pub content_channels: usize,
    pub base_channels: usize,
    pub style_dim: usize,
}

impl TranslatorArch {
    pub fn from_config(cfg: &TrainingConfig) -> Self {
        Self {
            resolution: cfg.resolution,
            content_channels: cfg.arch.content_channels,
            base_channels: cfg.arch.translator_channels,
            style_dim: cfg.arch.style_dim,
        }
    }

    pub fn content_resolution(&self) -> usize {
        self.resolution / 4
    }
}

/// Per-layer AdaIN targets: `mean` and `std` are (N, ADAIN_LAYERS, C).
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCode<T> {
    pub mean: Tensor<T>,
    pub std: Tensor<T>,
}

/// Graph handles of a style code, one `(mean, std)` pair of (N, C) per layer.
#[derive(Clone, Debug)]
pub struct StyleVars {
    pub layers: Vec<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct Translator<T: Float> {
    pub arch: TranslatorArch,
    pub params: ParamSet<T>,
}

impl<T: Float> Translator<T> {
    pub fn new(arch: TranslatorArch, seed: u64) -> Result<Self> {
        if arch.resolution < 8 || !arch.resolution.is_multiple_of(8) {
            return Err(PirError::config("translator resolution must be a multiple of 8"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let (b, cf, sd) = (arch.base_channels, arch.content_channels, arch.style_dim);
        // Convolutions feeding a normalization carry no bias; it would cancel.
        init_conv(&mut ps, &mut rng, "ec0", CHANNELS, b, 3, false);
        init_conv(&mut ps, &mut rng, "ec1", b, 2 * b, 3, false);
        init_conv(&mut ps, &mut rng, "ec2", 2 * b, cf, 3, false);
        // The style encoder sees 3x3 neighbourhoods only; pooled over the
        // image, its features describe colour and texture but not layout, so
        // the style code cannot smuggle content past the content encoder.
        init_conv(&mut ps, &mut rng, "es0", CHANNELS, b, 3, true);
        init_conv(&mut ps, &mut rng, "es1", b, 2 * b, 1, true);
        init_dense(&mut ps, &mut rng, "es_fc", 2 * b, sd, 1.0, 0.0);
        // softplus(ln(e - 1)) = 1, so fresh style stds start near one.
        let unit_std = (std::f64::consts::E - 1.0).ln();
        for l in 0..ADAIN_LAYERS {
            init_dense(&mut ps, &mut rng, &format!("style{l}.mean"), sd, cf, 1.0, 0.0);
            init_dense(&mut ps, &mut rng, &format!("style{l}.std"), sd, cf, 1.0, unit_std);
        }
        for r in 0..2 {
            init_conv(&mut ps, &mut rng, &format!("res{r}.a"), cf, cf, 3, false);
            init_conv(&mut ps, &mut rng, &format!("res{r}.b"), cf, cf, 3, false);
        }
        init_conv(&mut ps, &mut rng, "up0", cf, b, 3, true);
        init_conv(&mut ps, &mut rng, "up1", b, b, 3, true);
        init_conv(&mut ps, &mut rng, "to_rgb", b, CHANNELS, 3, true);
        Ok(Self { arch, params: ps })
    }

    pub fn from_params(arch: TranslatorArch, params: ParamSet<T>) -> Result<Self> {
        check_layout(&Self::new(arch.clone(), 0)?.params, &params, "translator")?;
        Ok(Self { arch, params })
    }

    pub fn cast<U: Float>(&self) -> Translator<U> {
        Translator {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    pub fn content_var(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let mut h = x;
        for (name, stride) in [("ec0", 1), ("ec1", 2), ("ec2", 2)] {
            h = conv(g, p, name, h, stride);
            h = instance_norm(g, h, ADAIN_EPS);
            h = g.relu(h);
        }
        h
    }

    pub fn style_var(&self, g: &mut Graph<T>, p: &Bound, y: Var) -> StyleVars {
        let mut h = y;
        for name in ["es0", "es1"] {
            h = conv(g, p, name, h, 1);
            h = g.leaky_relu(h, 0.2);
        }
        let pooled = g.spatial_mean(h);
        let s = g.shape(pooled).to_vec();
        let pooled = g.reshape(pooled, &[s[0], s[1]]);
        let e = dense(g, p, "es_fc", pooled, 1.0);
        let e = g.leaky_relu(e, 0.2);
        let layers = (0..ADAIN_LAYERS)
            .map(|l| {
                let mean = dense(g, p, &format!("style{l}.mean"), e, 1.0);
                let raw = dense(g, p, &format!("style{l}.std"), e, 1.0);
                let sp = g.softplus(raw);
                let std = g.add_scalar(sp, STYLE_STD_FLOOR);
                (mean, std)
            })
            .collect();
        StyleVars { layers }
    }

    pub fn decode_var(&self, g: &mut Graph<T>, p: &Bound, content: Var, style: &StyleVars) -> Var {
        let mut h = content;
        for r in 0..2 {
            let skip = h;
            let (m0, s0) = style.layers[2 * r];
            let (m1, s1) = style.layers[2 * r + 1];
            let a = conv(g, p, &format!("res{r}.a"), h, 1);
            let a = adain_var(g, a, m0, s0);
            let a = g.relu(a);
            let b = conv(g, p, &format!("res{r}.b"), a, 1);
            let b = adain_var(g, b, m1, s1);
            h = g.add(skip, b);
        }
        for name in ["up0", "up1"] {
            h = g.upsample2x(h);
            h = conv(g, p, name, h, 1);
            h = g.leaky_relu(h, 0.2);
        }
        let rgb = conv(g, p, "to_rgb", h, 1);
        g.tanh(rgb)
    }

    /// `Dec(E_C(content), E_S(style))` on the graph.
    pub fn translate_var(&self, g: &mut Graph<T>, p: &Bound, content: Var, style: Var) -> Var {
        let c = self.content_var(g, p, content);
        let s = self.style_var(g, p, style);
        self.decode_var(g, p, c, &s)
    }

    /// Content code (N, c_f, R/4, R/4).
    pub fn encode_content(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_images(x, self.arch.resolution)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let c = self.content_var(&mut g, &p, xv);
        Ok(g.value(c).clone())
    }

    pub fn encode_style(&self, y: &Tensor<T>) -> Result<StyleCode<T>> {
        check_images(y, self.arch.resolution)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let yv = g.constant(y.clone());
        let s = self.style_var(&mut g, &p, yv);
        let (n, c) = (y.dim(0), self.arch.content_channels);
        let mut mean = vec![T::zero(); n * ADAIN_LAYERS * c];
        let mut std = mean.clone();
        for (l, &(m, sd)) in s.layers.iter().enumerate() {
            for i in 0..n {
                let dst = (i * ADAIN_LAYERS + l) * c;
                mean[dst..dst + c].copy_from_slice(&g.value(m).data()[i * c..(i + 1) * c]);
                std[dst..dst + c].copy_from_slice(&g.value(sd).data()[i * c..(i + 1) * c]);
            }
        }
        let shape = [n, ADAIN_LAYERS, c];
        Ok(StyleCode {
            mean: Tensor::from_vec(&shape, mean)?,
            std: Tensor::from_vec(&shape, std)?,
        })
    }

    /// Content of `content_img` rendered in the style of `style_img`, paired by batch index.
    pub fn translate(&self, content_img: &Tensor<T>, style_img: &Tensor<T>) -> Result<Tensor<T>> {
        check_images(content_img, self.arch.resolution)?;
        check_images(style_img, self.arch.resolution)?;
        if content_img.dim(0) != style_img.dim(0) {
            return Err(PirError::arg("content and style batches differ in size"));
        }
        let n = content_img.dim(0);
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + INFER_CHUNK).min(n);
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let c = g.constant(content_img.slice_outer(start, end));
            let s = g.constant(style_img.slice_outer(start, end));
            let out = self.translate_var(&mut g, &p, c, s);
            parts.push(g.value(out).clone());
            start = end;
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Ok(Tensor::concat_outer(&refs)?)
    }
}

/// AdaIN on the graph; `mean` and `std` are (N, C).
pub fn adain_var<T: Float>(g: &mut Graph<T>, x: Var, mean: Var, std: Var) -> Var {
    let (n, c) = (g.shape(x)[0], g.shape(x)[1]);
    let normed = instance_norm(g, x, ADAIN_EPS);
    let s = g.reshape(std, &[n, c, 1, 1]);
    let m = g.reshape(mean, &[n, c, 1, 1]);
    let scaled = g.mul(normed, s);
    g.add(scaled, m)
}

/// Per-channel spatial `(mean, sqrt(var + ADAIN_EPS))` of an (N, C, H, W) map, each (N, C).
pub fn channel_stats<T: Float>(x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if x.ndim() != 4 {
        return Err(PirError::arg(format!("expected an (N, C, H, W) map, got {:?}", x.shape())));
    }
    let (n, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    let mut mean = Vec::with_capacity(n * c);
    let mut std = Vec::with_capacity(n * c);
    for ch in x.data().chunks(hw) {
        let m = ch.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
        let var = ch.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / hw as f64;
        mean.push(T::of(m));
        std.push(T::of((var + ADAIN_EPS).sqrt()));
    }
    Ok((Tensor::from_vec(&[n, c], mean)?, Tensor::from_vec(&[n, c], std)?))
}

/// `std[c] * (x - mu_c) / sigma_c + mean[c]` per sample and channel, with
/// `sigma_c = sqrt(var_c + ADAIN_EPS)`; `mean` and `std` are (N, C).
pub fn adain<T: Float>(content: &Tensor<T>, mean: &Tensor<T>, std: &Tensor<T>) -> Result<Tensor<T>> {
    if content.ndim() != 4 {
        return Err(PirError::arg(format!(
            "expected an (N, C, H, W) map, got {:?}",
            content.shape()
        )));
    }
    let (n, c) = (content.dim(0), content.dim(1));
    if mean.shape() != [n, c] || std.shape() != [n, c] {
        return Err(PirError::arg(format!(
            "style statistics {:?}/{:?} do not match content channels ({n}, {c})",
            mean.shape(),
            std.shape()
        )));
    }
    if content.dim(2) * content.dim(3) < 2 {
        return Err(PirError::arg("AdaIN needs at least two spatial positions"));
    }
    let mut g = Graph::new();
    let x = g.constant(content.clone());
    let m = g.constant(mean.clone());
    let s = g.constant(std.clone());
    let out = adain_var(&mut g, x, m, s);
    Ok(g.value(out).clone())
}
