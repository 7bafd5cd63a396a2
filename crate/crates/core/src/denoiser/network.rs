use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};

use crate::condstream::{null_stream, ConditioningStream};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::schedule::diffusion_loss;

use super::mask::AttentionMask;
use super::ops::{gelu, gelu_grad, mish, mish_grad, silu, silu_grad, sinusoidal, AttnCache, LnCache};
use super::params::{DenoiserParams, Film};

/// Anything that maps a noisy sequence to a predicted clean sequence.
pub trait Denoise<T: Real>: Sync {
    fn predict(&self, noisy: &Array2<T>, cond: &ConditioningStream<T>, t: usize) -> Result<Array2<T>>;

    /// Unconditional stream of `n` frames.
    fn null_stream(&self, n: usize) -> Result<ConditioningStream<T>>;
}

impl<T: Real> Denoise<T> for DenoiserParams<T> {
    fn predict(&self, noisy: &Array2<T>, cond: &ConditioningStream<T>, t: usize) -> Result<Array2<T>> {
        forward(self, noisy, cond, t)
    }

    fn null_stream(&self, n: usize) -> Result<ConditioningStream<T>> {
        null_stream(n, self.null_token.view())
    }
}

/// Gradients of the training loss with respect to every parameter.
#[derive(Debug, Clone)]
pub struct LossGradients<T> {
    pub loss: T,
    pub grads: DenoiserParams<T>,
}

/// Timestamp embedding: sinusoid of `t`, then `Linear -> SiLU -> Linear`.
pub fn embed_timestamp<T: Real>(params: &DenoiserParams<T>, t: usize) -> Result<Array1<T>> {
    check_step(params, t)?;
    Ok(TimeCache::new(params, t).emb)
}

/// `x * gamma + beta` per row, with `(gamma, beta)` produced from the
/// timestamp embedding by the FiLM generator.
pub fn film_modulate<T: Real>(x: &Array2<T>, t_emb: ArrayView1<T>, film: &Film<T>) -> Array2<T> {
    let act = t_emb.mapv(mish);
    let (gamma, beta) = film_coeffs(film, act.view());
    x * &gamma + &beta
}

/// Predicted clean codes for a noisy sequence at step `t`.
pub fn forward<T: Real>(
    params: &DenoiserParams<T>,
    noisy: &Array2<T>,
    cond: &ConditioningStream<T>,
    t: usize,
) -> Result<Array2<T>> {
    Pass::run(params, noisy, cond, t).map(|p| p.out)
}

/// Mean-squared error against `x0` and its full parameter gradient.
pub fn loss_gradients<T: Real>(
    params: &DenoiserParams<T>,
    x0: &Array2<T>,
    noisy: &Array2<T>,
    cond: &ConditioningStream<T>,
    t: usize,
) -> Result<LossGradients<T>> {
    let pass = Pass::run(params, noisy, cond, t)?;
    let loss = diffusion_loss(x0, &pass.out)?;
    if !loss.is_finite() {
        let culprit = params
            .first_non_finite()
            .unwrap_or_else(|| "activations".to_string());
        return Err(Error::Numerical(format!("non-finite loss at t={t} (first non-finite tensor: {culprit})")));
    }
    let scale = T::lit(2.0) / T::from_count(x0.len());
    let dout = (&pass.out - x0) * scale;
    let grads = pass.backward(params, &dout);
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::Numerical(format!("non-finite gradient in {name} at t={t}")));
    }
    Ok(LossGradients { loss, grads })
}

fn check_step<T: Real>(params: &DenoiserParams<T>, t: usize) -> Result<()> {
    if t > params.config.steps {
        return Err(Error::InvalidStep {
            step: t,
            steps: params.config.steps,
        });
    }
    Ok(())
}

fn film_coeffs<T: Real>(film: &Film<T>, act: ArrayView1<T>) -> (Array1<T>, Array1<T>) {
    let gb = film.proj.forward_vec(act);
    let d = gb.len() / 2;
    (gb.slice(s![..d]).to_owned(), gb.slice(s![d..]).to_owned())
}

struct TimeCache<T> {
    pe: Array1<T>,
    pre: Array1<T>,
    hidden: Array1<T>,
    emb: Array1<T>,
    /// Mish of the embedding, shared input of every FiLM generator.
    act: Array1<T>,
}

impl<T: Real> TimeCache<T> {
    fn new(params: &DenoiserParams<T>, t: usize) -> Self {
        let pe = sinusoidal::<T>(t as f64, params.config.d_model);
        let pre = params.time_hidden.forward_vec(pe.view());
        let hidden = pre.mapv(silu);
        let emb = params.time_out.forward_vec(hidden.view());
        let act = emb.mapv(mish);
        Self { pe, pre, hidden, emb, act }
    }
}

/// One FiLM-wrapped sublayer: `h += sub * gamma + beta`.
struct FilmCache<T> {
    sub: Array2<T>,
    gamma: Array1<T>,
}

impl<T: Real> FilmCache<T> {
    fn apply(film: &Film<T>, act: ArrayView1<T>, sub: Array2<T>, h: &mut Array2<T>) -> Self {
        let (gamma, beta) = film_coeffs(film, act);
        Zip::from(h.rows_mut()).and(sub.rows()).for_each(|mut hr, sr| {
            Zip::from(&mut hr)
                .and(&sr)
                .and(&gamma)
                .and(&beta)
                .for_each(|h, &x, &g, &b| *h += x * g + b);
        });
        Self { sub, gamma }
    }

    /// Returns `dL/dsub`; FiLM weight gradients go to `grad` and the
    /// embedding gradient is accumulated into `dact`.
    fn backward(
        &self,
        film: &Film<T>,
        act: ArrayView1<T>,
        dh: &Array2<T>,
        grad: &mut Film<T>,
        dact: &mut Array1<T>,
    ) -> Array2<T> {
        let dgamma = (dh * &self.sub).sum_axis(Axis(0));
        let dbeta = dh.sum_axis(Axis(0));
        let mut dgb = Array1::zeros(2 * dgamma.len());
        dgb.slice_mut(s![..dgamma.len()]).assign(&dgamma);
        dgb.slice_mut(s![dgamma.len()..]).assign(&dbeta);
        *dact += &film.proj.backward_vec(act, dgb.view(), &mut grad.proj);
        dh * &self.gamma
    }
}

struct BlockCache<T> {
    ln_self: LnCache<T>,
    self_attn: AttnCache<T>,
    film_self: FilmCache<T>,
    ln_cross: LnCache<T>,
    cross_attn: AttnCache<T>,
    film_cross: FilmCache<T>,
    ln_ff: LnCache<T>,
    ff_in: Array2<T>,
    ff_pre: Array2<T>,
    ff_hidden: Array2<T>,
    film_ff: FilmCache<T>,
}

struct Pass<T> {
    noisy: Array2<T>,
    cond_rows: Array2<T>,
    cond_null: bool,
    cond_proj: Array2<T>,
    time: TimeCache<T>,
    blocks: Vec<BlockCache<T>>,
    final_ln: LnCache<T>,
    final_out: Array2<T>,
    target: AttentionMask,
    alignment: AttentionMask,
    out: Array2<T>,
}

impl<T: Real> Pass<T> {
    fn run(params: &DenoiserParams<T>, noisy: &Array2<T>, cond: &ConditioningStream<T>, t: usize) -> Result<Self> {
        let cfg = &params.config;
        check_step(params, t)?;
        let n = noisy.nrows();
        if noisy.ncols() != cfg.in_dim {
            return Err(Error::Dimension(format!(
                "noisy codes have width {}, expected {}",
                noisy.ncols(),
                cfg.in_dim
            )));
        }
        if cond.len() != n {
            return Err(Error::Dimension(format!(
                "conditioning has {} frames but the sequence has {n}",
                cond.len()
            )));
        }
        if cond.width() != cfg.d_cond {
            return Err(Error::Dimension(format!(
                "conditioning width {} differs from the configured {}",
                cond.width(),
                cfg.d_cond
            )));
        }
        let target = AttentionMask::target(n)?;
        let alignment = AttentionMask::alignment(n)?;

        // The unconditional path always reads the model's own null token.
        let cond_null = cond.is_null();
        let cond_rows = if cond_null {
            params
                .null_token
                .broadcast((n, cfg.d_cond))
                .expect("row broadcast")
                .to_owned()
        } else {
            cond.frames.clone()
        };
        let cond_proj = params.cond.forward(&cond_rows);

        let time = TimeCache::new(params, t);
        let mut h = params.input.forward(noisy);
        for (i, mut row) in h.rows_mut().into_iter().enumerate() {
            row += &sinusoidal::<T>(i as f64, cfg.d_model);
        }

        let heads = cfg.heads;
        let mut blocks = Vec::with_capacity(params.blocks.len());
        for b in &params.blocks {
            let (a, ln_self) = b.norm_self.forward_cached(&h);
            let (sa, self_attn) = b.self_attn.forward_cached(&a, &a, heads, &target);
            let film_self = FilmCache::apply(&b.film_self, time.act.view(), sa, &mut h);

            let (a, ln_cross) = b.norm_cross.forward_cached(&h);
            let (ca, cross_attn) = b.cross_attn.forward_cached(&a, &cond_proj, heads, &alignment);
            let film_cross = FilmCache::apply(&b.film_cross, time.act.view(), ca, &mut h);

            let (ff_in, ln_ff) = b.norm_ff.forward_cached(&h);
            let ff_pre = b.ff_up.forward(&ff_in);
            let ff_hidden = ff_pre.mapv(gelu);
            let ff = b.ff_down.forward(&ff_hidden);
            let film_ff = FilmCache::apply(&b.film_ff, time.act.view(), ff, &mut h);

            blocks.push(BlockCache {
                ln_self,
                self_attn,
                film_self,
                ln_cross,
                cross_attn,
                film_cross,
                ln_ff,
                ff_in,
                ff_pre,
                ff_hidden,
                film_ff,
            });
        }
        let (final_out, final_ln) = params.final_norm.forward_cached(&h);
        let out = params.output.forward(&final_out);
        Ok(Self {
            noisy: noisy.clone(),
            cond_rows,
            cond_null,
            cond_proj,
            time,
            blocks,
            final_ln,
            final_out,
            target,
            alignment,
            out,
        })
    }

    fn backward(&self, params: &DenoiserParams<T>, dout: &Array2<T>) -> DenoiserParams<T> {
        let heads = params.config.heads;
        let mut g = params.zeros_like();
        let mut dact = Array1::<T>::zeros(params.config.d_model);
        let mut dcond = Array2::<T>::zeros(self.cond_proj.dim());

        let dfinal = params.output.backward(&self.final_out, dout, &mut g.output);
        let mut dh = params
            .final_norm
            .backward(&self.final_ln, &dfinal, &mut g.final_norm);

        let act = self.time.act.view();
        for ((b, c), gb) in params
            .blocks
            .iter()
            .zip(&self.blocks)
            .zip(g.blocks.iter_mut())
            .rev()
        {
            let dff = c.film_ff.backward(&b.film_ff, act, &dh, &mut gb.film_ff, &mut dact);
            let mut dhid = b.ff_down.backward(&c.ff_hidden, &dff, &mut gb.ff_down);
            Zip::from(&mut dhid)
                .and(&c.ff_pre)
                .for_each(|d, &u| *d *= gelu_grad(u));
            let dln = b.ff_up.backward(&c.ff_in, &dhid, &mut gb.ff_up);
            dh += &b.norm_ff.backward(&c.ln_ff, &dln, &mut gb.norm_ff);

            let dca = c.film_cross.backward(&b.film_cross, act, &dh, &mut gb.film_cross, &mut dact);
            let (dq, dkv) = b
                .cross_attn
                .backward(&c.cross_attn, &dca, heads, &self.alignment, &mut gb.cross_attn);
            dcond += &dkv;
            dh += &b.norm_cross.backward(&c.ln_cross, &dq, &mut gb.norm_cross);

            let dsa = c.film_self.backward(&b.film_self, act, &dh, &mut gb.film_self, &mut dact);
            let (mut da, dkv) = b
                .self_attn
                .backward(&c.self_attn, &dsa, heads, &self.target, &mut gb.self_attn);
            da += &dkv;
            dh += &b.norm_self.backward(&c.ln_self, &da, &mut gb.norm_self);
        }
        params.input.backward(&self.noisy, &dh, &mut g.input);

        let drows = params.cond.backward(&self.cond_rows, &dcond, &mut g.cond);
        if self.cond_null {
            g.null_token += &drows.sum_axis(Axis(0));
        }

        let demb = &dact * &self.time.emb.mapv(mish_grad);
        let dhidden = params
            .time_out
            .backward_vec(self.time.hidden.view(), demb.view(), &mut g.time_out);
        let dpre = &dhidden * &self.time.pre.mapv(silu_grad);
        params
            .time_hidden
            .backward_vec(self.time.pe.view(), dpre.view(), &mut g.time_hidden);
        g
    }
}
