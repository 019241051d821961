use std::collections::BTreeMap;

use super::config::{CondMode, DenoiserConfig};
use super::time::encode_time;
use crate::diffusion::Denoise;
use crate::error::{Error, Result};
use crate::numerics::{Real, RngStream, Tape, Tensor, Var};

#[derive(Clone, Debug)]
struct BlockIdx {
    ln1_g: usize,
    ln1_b: usize,
    wqkv: usize,
    bq: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    proj_w: usize,
    proj_b: usize,
    time_w: usize,
    time_b: usize,
    pos: usize,
    blocks: Vec<BlockIdx>,
    lnf_g: usize,
    lnf_b: usize,
    dec_w: usize,
    dec_b: usize,
    class_emb: Option<usize>,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Parameter names and shapes in their fixed order, plus the index layout.
fn param_specs(cfg: &DenoiserConfig) -> (Vec<(String, Vec<usize>, Init)>, Layout) {
    let (d, dm, h) = (cfg.proto_dim, cfg.d_model, cfg.mlp_hidden);
    let two_l = 2 * cfg.n_freq();
    let resid_std = 1.0 / (dm as f64).sqrt() / (2.0 * cfg.n_layers.max(1) as f64).sqrt();
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        specs.push((name, shape, init));
        specs.len() - 1
    };
    let proj_w = add("proj_in.w".into(), vec![d, dm], Init::Normal(1.0 / (d as f64).sqrt()));
    let proj_b = add("proj_in.b".into(), vec![dm], Init::Zeros);
    let time_w = add(
        "time_proj.w".into(),
        vec![two_l, dm],
        Init::Normal(1.0 / (two_l as f64).sqrt()),
    );
    let time_b = add("time_proj.b".into(), vec![dm], Init::Zeros);
    let pos = add("pos_emb".into(), vec![2 * cfg.max_ways + 1, dm], Init::Normal(0.02));
    let mut blocks = Vec::new();
    for i in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{i}.{s}");
        blocks.push(BlockIdx {
            ln1_g: add(p("ln1.g"), vec![dm], Init::Ones),
            ln1_b: add(p("ln1.b"), vec![dm], Init::Zeros),
            wqkv: add(p("attn.wqkv"), vec![dm, 3 * dm], Init::Normal(1.0 / (dm as f64).sqrt())),
            // Keys get no bias: it shifts every score in a row equally, which
            // softmax ignores, so its gradient is identically zero.
            bq: add(p("attn.bq"), vec![dm], Init::Zeros),
            bv: add(p("attn.bv"), vec![dm], Init::Zeros),
            wo: add(p("attn.wo"), vec![dm, dm], Init::Normal(resid_std)),
            bo: add(p("attn.bo"), vec![dm], Init::Zeros),
            ln2_g: add(p("ln2.g"), vec![dm], Init::Ones),
            ln2_b: add(p("ln2.b"), vec![dm], Init::Zeros),
            w1: add(p("mlp.w1"), vec![dm, h], Init::Normal(1.0 / (dm as f64).sqrt())),
            b1: add(p("mlp.b1"), vec![h], Init::Zeros),
            w2: add(
                p("mlp.w2"),
                vec![h, dm],
                Init::Normal(resid_std * (dm as f64 / h as f64).sqrt()),
            ),
            b2: add(p("mlp.b2"), vec![dm], Init::Zeros),
        });
    }
    let lnf_g = add("ln_f.g".into(), vec![dm], Init::Ones);
    let lnf_b = add("ln_f.b".into(), vec![dm], Init::Zeros);
    let dec_w = add("decoder.w".into(), vec![dm, d], Init::Normal(1.0 / (dm as f64).sqrt()));
    let dec_b = add("decoder.b".into(), vec![d], Init::Zeros);
    let class_emb = (cfg.cond_mode == CondMode::LearnedClassEmbedding)
        .then(|| add("class_emb".into(), vec![cfg.n_classes, d], Init::Normal(0.02)));
    let layout = Layout {
        proj_w,
        proj_b,
        time_w,
        time_b,
        pos,
        blocks,
        lnf_g,
        lnf_b,
        dec_w,
        dec_b,
        class_emb,
    };
    (specs, layout)
}

/// Conditioning rows for one episode.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditioning {
    /// Use the vanilla prototypes passed to the forward pass.
    Vanilla,
    /// Class-embedding row per episode label; `None` marks a class unseen
    /// during meta-training, which gets the mean of all rows.
    Classes(Vec<Option<usize>>),
    Zeros,
}

/// Token sequence of one forward pass, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    /// Projected tokens before position embeddings, `[2N+1 × d_model]`.
    pub projected: Var,
    /// Tokens with position embeddings added.
    pub tokens: Var,
    pub n_way: usize,
}

/// Transformer that maps noised prototype updates to clean ones.
#[derive(Clone, Debug)]
pub struct DenoiserModel<T> {
    cfg: DenoiserConfig,
    params: Vec<(String, Tensor<T>)>,
    layout: Layout,
    /// Dataset class id of each class-embedding row.
    class_ids: Vec<u32>,
}

impl<T: Real> DenoiserModel<T> {
    /// Random initialization of every parameter (decoder included).
    pub fn new(cfg: DenoiserConfig, class_ids: Vec<u32>) -> Result<Self> {
        cfg.validate()?;
        if cfg.cond_mode == CondMode::LearnedClassEmbedding && class_ids.len() != cfg.n_classes {
            return Err(Error::Config(format!(
                "{} class ids for {} embedding rows",
                class_ids.len(),
                cfg.n_classes
            )));
        }
        let (specs, layout) = param_specs(&cfg);
        let mut rng = RngStream::new(cfg.init_seed);
        let params = specs
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Normal(std) => (0..n).map(|_| T::from_f64(std * rng.standard_normal())).collect(),
                };
                (name, Tensor::new(shape, data).expect("spec shape"))
            })
            .collect();
        Ok(DenoiserModel {
            cfg,
            params,
            layout,
            class_ids,
        })
    }

    /// Random initialization followed by [`Self::init_identity`].
    pub fn identity(cfg: DenoiserConfig, class_ids: Vec<u32>) -> Result<Self> {
        let mut m = Self::new(cfg, class_ids)?;
        m.init_identity();
        Ok(m)
    }

    /// Zeroes the decoder head so the model outputs exactly zero.
    pub fn init_identity(&mut self) {
        for i in [self.layout.dec_w, self.layout.dec_b] {
            let shape = self.params[i].1.shape().to_vec();
            self.params[i].1 = Tensor::zeros(shape);
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Replaces parameter values in order. Shapes must match.
    pub fn set_params(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tensors for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for ((name, old), new) in self.params.iter_mut().zip(values) {
            if old.shape() != new.shape() {
                return Err(Error::ParameterShape {
                    name: name.clone(),
                    expected: old.shape().to_vec(),
                    found: new.shape().to_vec(),
                });
            }
            *old = new;
        }
        Ok(())
    }

    /// Builds a model from named tensors, checking every shape.
    pub fn from_named(cfg: DenoiserConfig, class_ids: Vec<u32>, named: &BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut m = Self::new(cfg, class_ids)?;
        for (name, value) in m.params.iter_mut() {
            let found = named.get(name).ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if found.shape() != value.shape() {
                return Err(Error::ParameterShape {
                    name: name.clone(),
                    expected: value.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
            *value = found.clone();
        }
        Ok(m)
    }

    pub fn cast<U: Real>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            cfg: self.cfg.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            layout: self.layout.clone(),
            class_ids: self.class_ids.clone(),
        }
    }

    /// Records every parameter on `tape`, in parameter order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    /// Conditioning for an episode whose labels map to `episode_classes`.
    pub fn conditioning_for(&self, episode_classes: &[u32]) -> Conditioning {
        match self.cfg.cond_mode {
            CondMode::VanillaPrototype => Conditioning::Vanilla,
            CondMode::None => Conditioning::Zeros,
            CondMode::LearnedClassEmbedding => Conditioning::Classes(
                episode_classes
                    .iter()
                    .map(|c| self.class_ids.iter().position(|k| k == c))
                    .collect(),
            ),
        }
    }

    fn check_inputs(&self, tape: &Tape<T>, state: Var, vanilla: Var) -> Result<usize> {
        let (n, d) = tape.value(state).dims2()?;
        if tape.shape(vanilla) != [n, d] || d != self.cfg.proto_dim {
            return Err(Error::ShapeMismatch {
                op: "denoiser input",
                lhs: tape.shape(state).to_vec(),
                rhs: tape.shape(vanilla).to_vec(),
            });
        }
        if n > self.cfg.max_ways {
            return Err(Error::InvalidArgument(format!(
                "{n} classes exceed the model's max_ways {}",
                self.cfg.max_ways
            )));
        }
        Ok(n)
    }

    /// Lays out `[N state][N conditioning][1 time]`, projects, and adds
    /// position embeddings (slot `i`, `max_ways + i`, and `2·max_ways`).
    pub fn build_tokens(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        state: Var,
        vanilla: Var,
        t: usize,
        cond: &Conditioning,
    ) -> Result<TokenSequence> {
        let l = &self.layout;
        let n = self.check_inputs(tape, state, vanilla)?;
        let d = self.cfg.proto_dim;
        let cond_rows = match cond {
            Conditioning::Vanilla => vanilla,
            Conditioning::Zeros => tape.constant(Tensor::zeros(vec![n, d])),
            Conditioning::Classes(rows) => {
                let table = l
                    .class_emb
                    .ok_or_else(|| Error::Config("model has no class-embedding table".into()))?;
                if rows.len() != n {
                    return Err(Error::InvalidArgument(format!(
                        "{} class rows for {n} classes",
                        rows.len()
                    )));
                }
                let c = self.cfg.n_classes;
                let mut sel = vec![T::zero(); n * c];
                for (i, r) in rows.iter().enumerate() {
                    match r {
                        Some(j) => sel[i * c + j] = T::one(),
                        None => sel[i * c..(i + 1) * c]
                            .iter_mut()
                            .for_each(|v| *v = T::one() / T::from_usize(c)),
                    }
                }
                let s = tape.constant(Tensor::new(vec![n, c], sel)?);
                tape.matmul(s, p[table])?
            }
        };
        let inputs = tape.concat_rows(&[state, cond_rows])?;
        let h = tape.matmul(inputs, p[l.proj_w])?;
        let h = tape.add_bias(h, p[l.proj_b])?;
        let enc: Vec<T> = encode_time(t, self.cfg.steps, self.cfg.n_freq())
            .into_iter()
            .map(T::from_f64)
            .collect();
        let enc = tape.constant(Tensor::new(vec![1, enc.len()], enc)?);
        let ht = tape.matmul(enc, p[l.time_w])?;
        let ht = tape.add_bias(ht, p[l.time_b])?;
        let projected = tape.concat_rows(&[h, ht])?;
        let m = self.cfg.max_ways;
        let slots: Vec<usize> = (0..n).chain(m..m + n).chain(std::iter::once(2 * m)).collect();
        let pos = tape.gather_rows(p[l.pos], &slots)?;
        let tokens = tape.add(projected, pos)?;
        Ok(TokenSequence {
            projected,
            tokens,
            n_way: n,
        })
    }

    fn attention(&self, tape: &mut Tape<T>, p: &[Var], b: &BlockIdx, x: Var) -> Result<Var> {
        let dm = self.cfg.d_model;
        let heads = self.cfg.n_heads;
        let dh = dm / heads;
        let qkv = tape.matmul(x, p[b.wqkv])?;
        let q_all = tape.slice_cols(qkv, 0, dm)?;
        let q_all = tape.add_bias(q_all, p[b.bq])?;
        let k_all = tape.slice_cols(qkv, dm, dm)?;
        let v_all = tape.slice_cols(qkv, 2 * dm, dm)?;
        let v_all = tape.add_bias(v_all, p[b.bv])?;
        let scale = T::one() / T::from_usize(dh).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.slice_cols(q_all, h * dh, dh)?;
            let k = tape.slice_cols(k_all, h * dh, dh)?;
            let v = tape.slice_cols(v_all, h * dh, dh)?;
            let s = tape.matmul_nt(q, k)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s)?;
            outs.push(tape.matmul(a, v)?);
        }
        let o = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let o = tape.matmul(o, p[b.wo])?;
        tape.add_bias(o, p[b.bo])
    }

    fn mlp(&self, tape: &mut Tape<T>, p: &[Var], b: &BlockIdx, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p[b.w1])?;
        let h = tape.add_bias(h, p[b.b1])?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, p[b.w2])?;
        tape.add_bias(o, p[b.b2])
    }

    /// Pre-norm transformer over the full sequence, then the decoder head on
    /// the first `N` output slots.
    pub fn denoise_tokens(&self, tape: &mut Tape<T>, p: &[Var], seq: &TokenSequence) -> Result<Var> {
        let l = &self.layout;
        let mut x = seq.tokens;
        for (i, b) in l.blocks.iter().enumerate() {
            let h = tape.layer_norm(x, p[b.ln1_g], p[b.ln1_b])?;
            let a = self.attention(tape, p, b, h)?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, p[b.ln2_g], p[b.ln2_b])?;
            let m = self.mlp(tape, p, b, h)?;
            x = tape.add(x, m)?;
            if !tape.value(x).is_finite() {
                return Err(Error::NonFinite(format!("denoiser activations after block {i}")));
            }
        }
        let x = tape.layer_norm(x, p[l.lnf_g], p[l.lnf_b])?;
        let x = tape.slice_rows(x, 0, seq.n_way)?;
        let y = tape.matmul(x, p[l.dec_w])?;
        let y = tape.add_bias(y, p[l.dec_b])?;
        if !tape.value(y).is_finite() {
            return Err(Error::NonFinite("denoiser decoder output".into()));
        }
        Ok(y)
    }

    /// Full forward pass on a tape with parameters already bound.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        state: Var,
        vanilla: Var,
        t: usize,
        cond: &Conditioning,
    ) -> Result<Var> {
        let seq = self.build_tokens(tape, p, state, vanilla, t, cond)?;
        self.denoise_tokens(tape, p, &seq)
    }

    /// Forward pass without gradients.
    pub fn predict(&self, state: &Tensor<T>, vanilla: &Tensor<T>, t: usize, cond: &Conditioning) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let s = tape.constant(state.clone());
        let v = tape.constant(vanilla.clone());
        let y = self.forward(&mut tape, &p, s, v, t, cond)?;
        Ok(tape.value(y).clone())
    }

    /// Sampler view of the model for one episode.
    pub fn for_episode(&self, episode_classes: &[u32]) -> EpisodeDenoiser<'_, T> {
        EpisodeDenoiser {
            model: self,
            cond: self.conditioning_for(episode_classes),
        }
    }
}

/// A model bound to one episode's conditioning.
pub struct EpisodeDenoiser<'a, T> {
    model: &'a DenoiserModel<T>,
    cond: Conditioning,
}

impl<T: Real> Denoise<T> for EpisodeDenoiser<'_, T> {
    fn denoise(&self, state: &Tensor<T>, vanilla: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.model.predict(state, vanilla, t, &self.cond)
    }

    fn residual(&self) -> bool {
        self.model.cfg.recombines()
    }
}
