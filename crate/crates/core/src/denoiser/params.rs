use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::headfield::EXPRESSION_DIM;
use crate::rng;
use crate::scalar::Real;
use crate::schedule::DEFAULT_STEPS;

/// Network shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub blocks: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Width of the query/key/value projections.
    pub d_attn: usize,
    /// Hidden width of the feed-forward sublayer.
    pub d_ff: usize,
    pub in_dim: usize,
    /// Conditioning feature width.
    pub d_cond: usize,
    /// Number of diffusion steps the timestamp embedder accepts.
    pub steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            blocks: 4,
            d_model: 256,
            heads: 8,
            d_attn: 1024,
            d_ff: 1024,
            in_dim: EXPRESSION_DIM,
            d_cond: 40,
            steps: DEFAULT_STEPS,
        }
    }
}

impl DenoiserConfig {
    /// Small network used by the overfitting and gradient-check suites.
    pub fn tiny(blocks: usize, d_model: usize) -> Self {
        Self {
            blocks,
            d_model,
            heads: 4,
            d_attn: d_model,
            d_ff: 2 * d_model,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("blocks", self.blocks),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_attn", self.d_attn),
            ("d_ff", self.d_ff),
            ("in_dim", self.in_dim),
            ("d_cond", self.d_cond),
            ("steps", self.steps),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) || !self.d_attn.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} and d_attn {} must be divisible by heads {}",
                self.d_model, self.d_attn, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::InvalidConfig("d_model must be even".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in x out`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            weight: Array2::zeros((inp, out)),
            bias: Array1::zeros(out),
        }
    }

    /// Uniform in `[-1/sqrt(in), 1/sqrt(in)]`, zero bias.
    fn fan_in<R: Rng>(rng: &mut R, inp: usize, out: usize) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Self {
            weight: Array2::from_shape_simple_fn((inp, out), || T::lit(rng.random_range(-bound..bound))),
            bias: Array1::zeros(out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Array1<T>,
    pub bias: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    fn identity(d: usize) -> Self {
        Self {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gain: Array1::zeros(d),
            bias: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
}

impl<T: Real> Attention<T> {
    fn zeros(d: usize, inner: usize) -> Self {
        Self {
            query: Linear::zeros(d, inner),
            key: Linear::zeros(d, inner),
            value: Linear::zeros(d, inner),
            out: Linear::zeros(inner, d),
        }
    }

    fn init<R: Rng>(rng: &mut R, d: usize, inner: usize) -> Self {
        Self {
            query: Linear::fan_in(rng, d, inner),
            key: Linear::fan_in(rng, d, inner),
            value: Linear::fan_in(rng, d, inner),
            out: Linear::fan_in(rng, inner, d),
        }
    }
}

/// FiLM generator: Mish on the timestamp embedding, then a linear map to
/// `[gamma | beta]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Film<T> {
    pub proj: Linear<T>,
}

impl<T: Real> Film<T> {
    /// `gamma = 1`, `beta = 0` regardless of the timestamp.
    fn identity(d: usize) -> Self {
        let mut proj = Linear::zeros(d, 2 * d);
        proj.bias.slice_mut(ndarray::s![..d]).fill(T::one());
        Self { proj }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock<T> {
    pub norm_self: LayerNorm<T>,
    pub self_attn: Attention<T>,
    pub film_self: Film<T>,
    pub norm_cross: LayerNorm<T>,
    pub cross_attn: Attention<T>,
    pub film_cross: Film<T>,
    pub norm_ff: LayerNorm<T>,
    pub ff_up: Linear<T>,
    pub ff_down: Linear<T>,
    pub film_ff: Film<T>,
}

/// Every learnable tensor of the denoiser. Also used as the gradient
/// container, with identical shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams<T> {
    pub config: DenoiserConfig,
    pub input: Linear<T>,
    pub cond: Linear<T>,
    /// Learned null conditioning row.
    pub null_token: Array1<T>,
    pub time_hidden: Linear<T>,
    pub time_out: Linear<T>,
    pub blocks: Vec<DecoderBlock<T>>,
    pub final_norm: LayerNorm<T>,
    pub output: Linear<T>,
}

impl<T: Real> DenoiserParams<T> {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::keyed(seed, &[rng::stream::INIT]);
        let c = &config;
        let d = c.d_model;
        let blocks = (0..c.blocks)
            .map(|_| DecoderBlock {
                norm_self: LayerNorm::identity(d),
                self_attn: Attention::init(&mut r, d, c.d_attn),
                film_self: Film::identity(d),
                norm_cross: LayerNorm::identity(d),
                cross_attn: Attention::init(&mut r, d, c.d_attn),
                film_cross: Film::identity(d),
                norm_ff: LayerNorm::identity(d),
                ff_up: Linear::fan_in(&mut r, d, c.d_ff),
                ff_down: Linear::fan_in(&mut r, c.d_ff, d),
                film_ff: Film::identity(d),
            })
            .collect();
        Ok(Self {
            input: Linear::fan_in(&mut r, c.in_dim, d),
            cond: Linear::fan_in(&mut r, c.d_cond, d),
            null_token: Array1::zeros(c.d_cond),
            time_hidden: Linear::fan_in(&mut r, d, d),
            time_out: Linear::fan_in(&mut r, d, d),
            blocks,
            final_norm: LayerNorm::identity(d),
            output: Linear::fan_in(&mut r, d, c.in_dim),
            config,
        })
    }

    /// All-zero tensors with this configuration's shapes.
    pub fn zeros(config: DenoiserConfig) -> Self {
        let c = &config;
        let d = c.d_model;
        let blocks = (0..c.blocks)
            .map(|_| DecoderBlock {
                norm_self: LayerNorm::zeros(d),
                self_attn: Attention::zeros(d, c.d_attn),
                film_self: Film { proj: Linear::zeros(d, 2 * d) },
                norm_cross: LayerNorm::zeros(d),
                cross_attn: Attention::zeros(d, c.d_attn),
                film_cross: Film { proj: Linear::zeros(d, 2 * d) },
                norm_ff: LayerNorm::zeros(d),
                ff_up: Linear::zeros(d, c.d_ff),
                ff_down: Linear::zeros(c.d_ff, d),
                film_ff: Film { proj: Linear::zeros(d, 2 * d) },
            })
            .collect();
        Self {
            input: Linear::zeros(c.in_dim, d),
            cond: Linear::zeros(c.d_cond, d),
            null_token: Array1::zeros(c.d_cond),
            time_hidden: Linear::zeros(d, d),
            time_out: Linear::zeros(d, d),
            blocks,
            final_norm: LayerNorm::zeros(d),
            output: Linear::zeros(d, c.in_dim),
            config: config.clone(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone())
    }

    /// Visit every tensor in a fixed order with its dotted name and shape.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, Vec<usize>, &'a [T])) {
        fn lin<'a, T>(f: &mut dyn FnMut(String, Vec<usize>, &'a [T]), name: &str, l: &'a Linear<T>) {
            f(format!("{name}.weight"), l.weight.shape().to_vec(), l.weight.as_slice().expect("standard layout"));
            f(format!("{name}.bias"), l.bias.shape().to_vec(), l.bias.as_slice().expect("standard layout"));
        }
        fn norm<'a, T>(f: &mut dyn FnMut(String, Vec<usize>, &'a [T]), name: &str, l: &'a LayerNorm<T>) {
            f(format!("{name}.gain"), l.gain.shape().to_vec(), l.gain.as_slice().expect("standard layout"));
            f(format!("{name}.bias"), l.bias.shape().to_vec(), l.bias.as_slice().expect("standard layout"));
        }
        fn attn<'a, T>(f: &mut dyn FnMut(String, Vec<usize>, &'a [T]), name: &str, a: &'a Attention<T>) {
            lin(f, &format!("{name}.query"), &a.query);
            lin(f, &format!("{name}.key"), &a.key);
            lin(f, &format!("{name}.value"), &a.value);
            lin(f, &format!("{name}.out"), &a.out);
        }
        lin(f, "input", &self.input);
        lin(f, "cond", &self.cond);
        f("null_token".into(), vec![self.null_token.len()], self.null_token.as_slice().expect("standard layout"));
        lin(f, "time.hidden", &self.time_hidden);
        lin(f, "time.out", &self.time_out);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            norm(f, &format!("{p}.norm_self"), &b.norm_self);
            attn(f, &format!("{p}.self_attn"), &b.self_attn);
            lin(f, &format!("{p}.film_self"), &b.film_self.proj);
            norm(f, &format!("{p}.norm_cross"), &b.norm_cross);
            attn(f, &format!("{p}.cross_attn"), &b.cross_attn);
            lin(f, &format!("{p}.film_cross"), &b.film_cross.proj);
            norm(f, &format!("{p}.norm_ff"), &b.norm_ff);
            lin(f, &format!("{p}.ff_up"), &b.ff_up);
            lin(f, &format!("{p}.ff_down"), &b.ff_down);
            lin(f, &format!("{p}.film_ff"), &b.film_ff.proj);
        }
        norm(f, "final_norm", &self.final_norm);
        lin(f, "output", &self.output);
    }

    /// Mutable counterpart of [`visit`](Self::visit), same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        fn lin<'a, T>(v: &mut Vec<&'a mut [T]>, l: &'a mut Linear<T>) {
            v.push(l.weight.as_slice_mut().expect("standard layout"));
            v.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        fn norm<'a, T>(v: &mut Vec<&'a mut [T]>, l: &'a mut LayerNorm<T>) {
            v.push(l.gain.as_slice_mut().expect("standard layout"));
            v.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        fn attn<'a, T>(v: &mut Vec<&'a mut [T]>, a: &'a mut Attention<T>) {
            lin(v, &mut a.query);
            lin(v, &mut a.key);
            lin(v, &mut a.value);
            lin(v, &mut a.out);
        }
        let mut v = Vec::new();
        lin(&mut v, &mut self.input);
        lin(&mut v, &mut self.cond);
        v.push(self.null_token.as_slice_mut().expect("standard layout"));
        lin(&mut v, &mut self.time_hidden);
        lin(&mut v, &mut self.time_out);
        for b in &mut self.blocks {
            norm(&mut v, &mut b.norm_self);
            attn(&mut v, &mut b.self_attn);
            lin(&mut v, &mut b.film_self.proj);
            norm(&mut v, &mut b.norm_cross);
            attn(&mut v, &mut b.cross_attn);
            lin(&mut v, &mut b.film_cross.proj);
            norm(&mut v, &mut b.norm_ff);
            lin(&mut v, &mut b.ff_up);
            lin(&mut v, &mut b.ff_down);
            lin(&mut v, &mut b.film_ff.proj);
        }
        norm(&mut v, &mut self.final_norm);
        lin(&mut v, &mut self.output);
        v
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        self.visit(&mut |n, s, d| out.push((n, s, d)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn scaled_add(&mut self, scale: T, other: &Self) {
        let src: Vec<&[T]> = other.tensors().into_iter().map(|(_, _, d)| d).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (a, &b) in dst.iter_mut().zip(s) {
                *a += scale * b;
            }
        }
    }

    /// Name of the first tensor holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, _, d)| d.iter().any(|v| !v.is_finite()))
            .map(|(n, _, _)| n)
    }

    /// Element-wise cast to another scalar type.
    pub fn cast<U: Real>(&self) -> DenoiserParams<U> {
        let mut out = DenoiserParams::<U>::zeros(self.config.clone());
        let src: Vec<&[T]> = self.tensors().into_iter().map(|(_, _, d)| d).collect();
        for (dst, s) in out.tensors_mut().into_iter().zip(src) {
            for (a, &b) in dst.iter_mut().zip(s) {
                *a = U::lit(b.as_f64());
            }
        }
        out
    }
}
