use crate::error::{Error, Result};
use crate::ndcore::{
    binary_gumbel_softmax, Bindings, ParamId, ParamSet, Rng, Scalar, Tape, Tensor, Var,
};

use super::config::AsnnConfig;

pub const PATCH_EMBED: &str = "patch_embed";
pub const CLASS_TOKEN: &str = "class_token";
pub const POS_EMBED: &str = "pos_embed";
pub const ENCODER: &str = "encoder";
pub const RECURRENT: &str = "recurrent";
pub const PREDICTIVE: &str = "predictive";
pub const DECISION_CONTROL: &str = "decision_control";
pub const MLP_HEAD: &str = "mlp_head";

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<T: Scalar>(
        ps: &mut ParamSet<T>,
        group: &str,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        Self {
            w: ps.add_normal(group, &format!("{name}.weight"), &[d_in, d_out], std, rng),
            b: ps.add_const(group, &format!("{name}.bias"), &[d_out], 0.0),
        }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, x: Var) -> Result<Var> {
        tape.linear(x, b[self.w], Some(b[self.b]))
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new<T: Scalar>(ps: &mut ParamSet<T>, group: &str, name: &str, d: usize) -> Self {
        Self {
            gain: ps.add_const(group, &format!("{name}.gain"), &[d], 1.0),
            bias: ps.add_const(group, &format!("{name}.bias"), &[d], 0.0),
        }
    }

    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bindings, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS);
        let g = tape.mul_suffix(n, b[self.gain])?;
        tape.add_suffix(g, b[self.bias])
    }
}

#[derive(Debug, Clone, Copy)]
struct Encoder {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
    ln_out: Norm,
}

#[derive(Debug, Clone, Copy)]
struct Gru {
    input: Linear,
    hidden: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Schema {
    gru: Gru,
    predict1: Linear,
    predict2: Linear,
    control1: Linear,
    activator: Linear,
    suppressor: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    patch: Linear,
    class_token: ParamId,
    pos: ParamId,
    encoder: Encoder,
    schema: Option<Schema>,
    head1: Linear,
    head2: Linear,
}

/// Vision transformer with an optional attention schema.
///
/// The schema variant feeds the block's applied attention through a GRU
/// (`r_out`), predicts its own final attention from `r_out`, and edits the
/// attention scores with a binary activator/suppressor mask before the scores
/// are applied to the values a second time.
#[derive(Debug, Clone)]
pub struct AsnnModel<T: Scalar = f32> {
    config: AsnnConfig,
    params: ParamSet<T>,
    layout: Layout,
}

/// Per-forward switches.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Replace the decision-control mask by all ones.
    pub force_full_mask: bool,
}

/// Tape handles for every quantity of a forward pass (batched on axis 0).
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub attention_scores: Var,
    pub applied_attention: Var,
    pub r_out: Option<Var>,
    pub predicted_attention: Option<Var>,
    pub mask: Option<Var>,
    pub final_attention: Var,
    /// Final-normalised token representations `[B × T × D]`.
    pub tokens: Var,
    /// Class-token output `[B × D]`.
    pub features: Var,
    pub logits: Var,
}

/// Materialised values of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T: Scalar = f32> {
    pub attention_scores: Tensor<T>,
    pub applied_attention: Tensor<T>,
    pub r_out: Option<Tensor<T>>,
    pub predicted_attention: Option<Tensor<T>>,
    pub mask: Option<Tensor<T>>,
    pub final_attention: Tensor<T>,
    pub logits: Tensor<T>,
}

impl ForwardVars {
    pub fn trace<T: Scalar>(&self, tape: &Tape<T>) -> ForwardTrace<T> {
        ForwardTrace {
            attention_scores: tape.tensor(self.attention_scores),
            applied_attention: tape.tensor(self.applied_attention),
            r_out: self.r_out.map(|v| tape.tensor(v)),
            predicted_attention: self.predicted_attention.map(|v| tape.tensor(v)),
            mask: self.mask.map(|v| tape.tensor(v)),
            final_attention: tape.tensor(self.final_attention),
            logits: tape.tensor(self.logits),
        }
    }
}

impl<T: Scalar> AsnnModel<T> {
    pub fn new(config: AsnnConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let d = config.embed_dim;
        let t = config.token_count();
        let h = config.n_heads;
        let inner = h * config.head_dim;
        let std = config.init_std;

        let patch = Linear::new(
            &mut ps,
            PATCH_EMBED,
            "proj",
            config.patch_features(),
            d,
            rng,
        );
        let class_token = ps.add_normal(CLASS_TOKEN, "token", &[d], std, rng);
        let pos = ps.add_normal(POS_EMBED, "table", &[t, d], std, rng);
        let encoder = Encoder {
            ln1: Norm::new(&mut ps, ENCODER, "ln1", d),
            qkv: Linear::new(&mut ps, ENCODER, "qkv", d, 3 * inner, rng),
            proj: Linear::new(&mut ps, ENCODER, "proj", inner, d, rng),
            ln2: Norm::new(&mut ps, ENCODER, "ln2", d),
            fc1: Linear::new(&mut ps, ENCODER, "fc1", d, config.mlp_ratio * d, rng),
            fc2: Linear::new(&mut ps, ENCODER, "fc2", config.mlp_ratio * d, d, rng),
            ln_out: Norm::new(&mut ps, ENCODER, "ln_out", d),
        };
        let schema = if config.has_schema {
            let gru = Gru {
                input: Linear::new(&mut ps, RECURRENT, "input", d, 3 * d, rng),
                hidden: Linear::new(&mut ps, RECURRENT, "hidden", d, 3 * d, rng),
            };
            let predict1 = Linear::new(&mut ps, PREDICTIVE, "fc1", d, d, rng);
            let predict2 = Linear::new(&mut ps, PREDICTIVE, "fc2", d, h * t, rng);
            let control1 = Linear::new(&mut ps, DECISION_CONTROL, "fc1", d, d, rng);
            let activator = Linear::new(&mut ps, DECISION_CONTROL, "activator", d, h * t * 2, rng);
            let suppressor =
                Linear::new(&mut ps, DECISION_CONTROL, "suppressor", d, h * t * 2, rng);
            // Logit pairs are (keep, drop); start biased towards keeping.
            let pair_bias: Vec<T> = (0..h * t * 2)
                .map(|i| T::of(if i % 2 == 0 { 0.5 } else { -0.5 } * config.keep_bias))
                .collect();
            for lin in [activator, suppressor] {
                *ps.get_mut(lin.b) = Tensor::new(&[h * t * 2], pair_bias.clone())?;
                let w = ps.get_mut(lin.w);
                let shrink = T::of(0.1);
                w.data_mut().iter_mut().for_each(|x| *x = *x * shrink);
            }
            Some(Schema {
                gru,
                predict1,
                predict2,
                control1,
                activator,
                suppressor,
            })
        } else {
            None
        };
        let head1 = Linear::new(&mut ps, MLP_HEAD, "fc1", d, d, rng);
        let head2 = Linear::new(&mut ps, MLP_HEAD, "fc2", d, config.n_classes, rng);
        Ok(Self {
            config,
            params: ps,
            layout: Layout {
                patch,
                class_token,
                pos,
                encoder,
                schema,
                head1,
                head2,
            },
        })
    }

    pub fn config(&self) -> &AsnnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn has_schema(&self) -> bool {
        self.layout.schema.is_some()
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Scalar>(&self) -> AsnnModel<U> {
        AsnnModel {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout,
        }
    }

    /// Replaces parameter values from `source`, matching by name and shape.
    pub fn load_params(&mut self, source: &ParamSet<T>) -> Result<()> {
        for p in self.params.iter_mut() {
            let src = source
                .by_name(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if src.tensor.shape() != p.tensor.shape() {
                return Err(Error::shape(
                    "load_params",
                    p.tensor.shape(),
                    src.tensor.shape(),
                ));
            }
            p.tensor = src.tensor.clone();
        }
        Ok(())
    }

    /// Flattens `[C × H × W]` images into `[B × P × C·p·p]` patch rows.
    pub fn patchify(&self, images: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let c = &self.config;
        let (ch, s, p) = (c.channels, c.image_size, c.patch_size);
        let side = s / p;
        let feat = c.patch_features();
        let mut out = Vec::with_capacity(images.len() * c.n_patches() * feat);
        for img in images {
            if img.shape() != [ch, s, s] {
                return Err(Error::shape("forward", img.shape(), &[ch, s, s]));
            }
            let d = img.data();
            for py in 0..side {
                for px in 0..side {
                    for k in 0..ch {
                        for dy in 0..p {
                            let row = (k * s + py * p + dy) * s + px * p;
                            out.extend_from_slice(&d[row..row + p]);
                        }
                    }
                }
            }
        }
        Tensor::new(&[images.len(), c.n_patches(), feat], out)
    }

    /// Single-image forward pass.
    pub fn forward(&self, image: &Tensor<T>, rng: &mut Rng) -> Result<ForwardTrace<T>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let vars = self.forward_vars(&mut tape, &b, &[image], rng, ForwardOptions::default())?;
        Ok(vars.trace(&tape))
    }

    /// Batched forward pass recorded on `tape`.
    pub fn forward_vars(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        images: &[&Tensor<T>],
        rng: &mut Rng,
        opts: ForwardOptions,
    ) -> Result<ForwardVars> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let patches = self.patchify(images)?;
        let x = tape.constant(&patches);
        self.forward_patches(tape, b, x, rng, opts)
    }

    fn forward_patches(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        patches: Var,
        rng: &mut Rng,
        opts: ForwardOptions,
    ) -> Result<ForwardVars> {
        let c = &self.config;
        let l = &self.layout;
        let batch = tape.shape(patches)[0];
        let (d, t, h, hd) = (c.embed_dim, c.token_count(), c.n_heads, c.head_dim);

        // Token embedding: class token, patch projections, positions.
        let emb = l.patch.apply(tape, b, patches)?;
        let cls = tape.reshape(b[l.class_token], &[1, 1, d])?;
        let cls_rows = vec![cls; batch];
        let cls = tape.concat(&cls_rows, 0)?;
        let tokens = tape.concat(&[cls, emb], 1)?;
        let x = tape.add_suffix(tokens, b[l.pos])?;

        // Multi-head self-attention scores.
        let enc = &l.encoder;
        let normed = enc.ln1.apply(tape, b, x)?;
        let qkv = enc.qkv.apply(tape, b, normed)?;
        let qkv = tape.reshape(qkv, &[batch, t, 3, h, hd])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut heads = [None; 3];
        for (i, slot) in heads.iter_mut().enumerate() {
            let part = tape.narrow(qkv, 0, i, 1)?;
            *slot = Some(tape.reshape(part, &[batch, h, t, hd])?);
        }
        let [q, k, v] = heads.map(|x| x.expect("filled above"));
        let logits = tape.bmm(q, k, true)?;
        let logits = tape.scale(logits, T::of(1.0 / (hd as f64).sqrt()));
        let scores = tape.softmax(logits, 3)?;

        let applied = self.apply_attention(tape, b, scores, v)?;

        let (r_out, predicted, mask, final_attention, attended) = match &l.schema {
            None => (None, None, None, scores, applied),
            Some(s) => {
                let r_out = self.gru(tape, b, &s.gru, applied)?;
                let p = s.predict1.apply(tape, b, r_out)?;
                let p = tape.gelu(p);
                let p = s.predict2.apply(tape, b, p)?;
                let p = tape.reshape(p, &[batch, t, h, t])?;
                let predicted = tape.permute(p, &[0, 2, 1, 3])?;

                let mask = if opts.force_full_mask {
                    tape.constant(&Tensor::full(&[batch, h, t, t], T::one()))
                } else {
                    self.mask_vars(tape, b, s, r_out, rng)?
                };
                let final_attention = tape.mul(mask, scores)?;
                let attended = self.apply_attention(tape, b, final_attention, v)?;
                (
                    Some(r_out),
                    Some(predicted),
                    Some(mask),
                    final_attention,
                    attended,
                )
            }
        };

        let x1 = tape.add(x, attended)?;
        let n2 = enc.ln2.apply(tape, b, x1)?;
        let f = enc.fc1.apply(tape, b, n2)?;
        let f = tape.gelu(f);
        let f = enc.fc2.apply(tape, b, f)?;
        let x2 = tape.add(x1, f)?;
        let out = enc.ln_out.apply(tape, b, x2)?;

        let cls_out = tape.narrow(out, 1, 0, 1)?;
        let cls_out = tape.reshape(cls_out, &[batch, d])?;
        let logits = self.head_vars(tape, b, cls_out)?;

        Ok(ForwardVars {
            attention_scores: scores,
            applied_attention: applied,
            r_out,
            predicted_attention: predicted,
            mask,
            final_attention,
            tokens: out,
            features: cls_out,
            logits,
        })
    }

    /// MLP head applied to class-token features `[B × D]`.
    pub fn head_vars(&self, tape: &mut Tape<T>, b: &Bindings, features: Var) -> Result<Var> {
        let l = &self.layout;
        let hdn = l.head1.apply(tape, b, features)?;
        let hdn = tape.gelu(hdn);
        l.head2.apply(tape, b, hdn)
    }

    /// Class-token features `[N × D]` (the MLP head's input), computed in
    /// chunks of 32 without recording gradients.
    pub fn features(&self, images: &[&Tensor<T>], rng: &mut Rng) -> Result<Tensor<T>> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let d = self.config.embed_dim;
        let mut out = Vec::with_capacity(images.len() * d);
        for chunk in images.chunks(32) {
            let mut tape = Tape::new();
            let b = self.params.bind_frozen(&mut tape);
            let vars = self.forward_vars(&mut tape, &b, chunk, rng, ForwardOptions::default())?;
            out.extend_from_slice(tape.value(vars.features));
        }
        Tensor::new(&[images.len(), d], out)
    }

    /// Weights values by `attention` `[B×H×T×T]`, concatenates heads and
    /// projects back to the embedding width.
    fn apply_attention(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        attention: Var,
        v: Var,
    ) -> Result<Var> {
        let c = &self.config;
        let batch = tape.shape(attention)[0];
        let t = c.token_count();
        let ctx = tape.bmm(attention, v, false)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[batch, t, c.n_heads * c.head_dim])?;
        self.layout.encoder.proj.apply(tape, b, ctx)
    }

    /// GRU over the token axis, returning every hidden state `[B × T × D]`.
    fn gru(&self, tape: &mut Tape<T>, b: &Bindings, g: &Gru, seq: Var) -> Result<Var> {
        let shape = tape.shape(seq).to_vec();
        let (batch, t, d) = (shape[0], shape[1], shape[2]);
        let xw = g.input.apply(tape, b, seq)?;
        let mut h = tape.constant(&Tensor::zeros(&[batch, d]));
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            let xt = tape.narrow(xw, 1, step, 1)?;
            let xt = tape.reshape(xt, &[batch, 3 * d])?;
            let hw = g.hidden.apply(tape, b, h)?;
            let xr = tape.narrow(xt, 1, 0, d)?;
            let xz = tape.narrow(xt, 1, d, d)?;
            let xn = tape.narrow(xt, 1, 2 * d, d)?;
            let hr = tape.narrow(hw, 1, 0, d)?;
            let hz = tape.narrow(hw, 1, d, d)?;
            let hn = tape.narrow(hw, 1, 2 * d, d)?;
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r);
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z);
            let rh = tape.mul(r, hn)?;
            let n = tape.add(xn, rh)?;
            let n = tape.tanh(n);
            // h' = (1 - z) n + z h = n + z (h - n)
            let diff = tape.sub(h, n)?;
            let zd = tape.mul(z, diff)?;
            h = tape.add(n, zd)?;
            outs.push(tape.reshape(h, &[batch, 1, d])?);
        }
        tape.concat(&outs, 1)
    }

    /// Binary Gumbel-Softmax over (keep, drop) logit pairs; returns the keep
    /// bit per attention entry in token-major layout `[B × T × H × T]`.
    fn keep_bits(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        layer: &Linear,
        hidden: Var,
        rng: &mut Rng,
    ) -> Result<Var> {
        let c = &self.config;
        let batch = tape.shape(hidden)[0];
        let (t, h) = (c.token_count(), c.n_heads);
        let pairs = layer.apply(tape, b, hidden)?;
        let pairs = tape.reshape(pairs, &[batch, t, h, t, 2])?;
        binary_gumbel_softmax(tape, pairs, c.gumbel(), rng)
    }

    /// Activator ⊙ suppressor keep bits, permuted to `[B × H × T × T]`.
    fn mask_vars(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        s: &Schema,
        r_out: Var,
        rng: &mut Rng,
    ) -> Result<Var> {
        let hidden = s.control1.apply(tape, b, r_out)?;
        let hidden = tape.gelu(hidden);
        let keep_a = self.keep_bits(tape, b, &s.activator, hidden, rng)?;
        let keep_s = self.keep_bits(tape, b, &s.suppressor, hidden, rng)?;
        let mask = tape.mul(keep_a, keep_s)?;
        tape.permute(mask, &[0, 2, 1, 3])
    }

    /// Binary decision-control mask from a recurrent output `[B × T × D]`.
    pub fn decision_control_mask(&self, r_out: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
        let s = self
            .layout
            .schema
            .ok_or(Error::Unsupported("decision_control_mask"))?;
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape);
        let r = tape.constant(r_out);
        let m = self.mask_vars(&mut tape, &b, &s, r, rng)?;
        Ok(tape.tensor(m))
    }
}
