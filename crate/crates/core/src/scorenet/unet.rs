//! U-Net with fixed per-level resolutions.
//!
//! Level 0 runs at whatever size the input has. Every deeper level first
//! resamples its input bilinearly to that level's configured resolution, and
//! the decoder resamples back up to the skip connection's size, so a single set
//! of weights evaluates any matrix size.

use dps_nn::{init, Graph, ParamSet, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::ScoreModelConfig;
use crate::error::{Error, Result};
use crate::phantoms::ClassLabel;
use crate::rng::rng_from;

#[derive(Clone, Debug)]
struct Block {
    c_in: usize,
    c_out: usize,
    groups_in: usize,
    groups_out: usize,
    gn1: (usize, usize),
    conv1: (usize, usize),
    emb: (usize, usize),
    gn2: (usize, usize),
    conv2: (usize, usize),
    skip: Option<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub(crate) struct UNet {
    pub(crate) config: ScoreModelConfig,
    pub(crate) params: ParamSet,
    noise_mlp: [(usize, usize); 2],
    class_mlp: Option<[(usize, usize); 2]>,
    conv_in: (usize, usize),
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    out_norm: (usize, usize),
    conv_out: (usize, usize),
}

fn groups_for(c: usize, wanted: usize) -> usize {
    (1..=wanted.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

struct Builder<'a> {
    params: ParamSet,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, c_out: usize, c_in: usize, k: usize, gain: f64) -> (usize, usize) {
        let w = init::kaiming_uniform(self.rng, &[c_out, c_in, k, k], c_in * k * k, gain);
        let wi = self.params.push(format!("{name}.weight"), w);
        let bi = self.params.push(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        (wi, bi)
    }

    fn linear(&mut self, name: &str, f_out: usize, f_in: usize, gain: f64) -> (usize, usize) {
        let w = init::kaiming_uniform(self.rng, &[f_out, f_in], f_in, gain);
        let wi = self.params.push(format!("{name}.weight"), w);
        let bi = self.params.push(format!("{name}.bias"), Tensor::zeros(&[f_out]));
        (wi, bi)
    }

    fn norm(&mut self, name: &str, c: usize) -> (usize, usize) {
        let gi = self.params.push(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        let bi = self.params.push(format!("{name}.beta"), Tensor::zeros(&[c]));
        (gi, bi)
    }

    fn block(&mut self, name: &str, c_in: usize, c_out: usize, embed_dim: usize, groups: usize) -> Block {
        let gn1 = self.norm(&format!("{name}.norm1"), c_in);
        let conv1 = self.conv(&format!("{name}.conv1"), c_out, c_in, 3, 2f64.sqrt());
        let emb = self.linear(&format!("{name}.emb"), c_out, embed_dim, 1.0);
        let gn2 = self.norm(&format!("{name}.norm2"), c_out);
        let conv2 = self.conv(&format!("{name}.conv2"), c_out, c_out, 3, 0.5);
        let skip = (c_in != c_out).then(|| self.conv(&format!("{name}.skip"), c_out, c_in, 1, 1.0));
        Block {
            c_in,
            c_out,
            groups_in: groups_for(c_in, groups),
            groups_out: groups_for(c_out, groups),
            gn1,
            conv1,
            emb,
            gn2,
            conv2,
            skip,
        }
    }
}

impl UNet {
    pub(crate) fn new(config: &ScoreModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from(seed, &[0x756e6574]);
        let mut b = Builder {
            params: ParamSet::new(),
            rng: &mut rng,
        };
        let e = config.embed_dim;
        let noise_mlp = [b.linear("map_noise.0", e, e, 1.0), b.linear("map_noise.1", e, e, 1.0)];
        let class_mlp = config
            .use_class_embedding
            .then(|| [b.linear("map_label.0", e, 4, 1.0), b.linear("map_label.1", e, e, 1.0)]);
        let chans: Vec<usize> = config.channel_mult.iter().map(|m| m * config.base_channels).collect();
        let conv_in = b.conv("conv_in", chans[0], 1, 3, 1.0);
        let mut encoder = Vec::new();
        let mut prev = chans[0];
        for (l, &c) in chans.iter().enumerate() {
            encoder.push(b.block(&format!("enc{l}"), prev, c, e, config.norm_groups));
            prev = c;
        }
        let mut decoder = Vec::new();
        for l in (0..chans.len() - 1).rev() {
            decoder.push(b.block(&format!("dec{l}"), prev + chans[l], chans[l], e, config.norm_groups));
            prev = chans[l];
        }
        let out_norm = b.norm("out.norm", chans[0]);
        let conv_out = b.conv("out.conv", 1, chans[0], 3, 0.2);
        Ok(Self {
            config: config.clone(),
            params: b.params,
            noise_mlp,
            class_mlp,
            conv_in,
            encoder,
            decoder,
            out_norm,
            conv_out,
        })
    }

    /// Registers every parameter as a leaf on `g`, in parameter order.
    pub(crate) fn param_leaves(&self, g: &mut Graph, train: bool) -> Vec<Var> {
        self.params.tensors().iter().map(|t| g.leaf(t.clone(), train)).collect()
    }

    /// Fourier features of the noise conditioning value, frequencies 1..16.
    fn noise_features(&self, c_noise: &[f64]) -> Tensor {
        let half = self.config.embed_dim / 2;
        let mut data = Vec::with_capacity(c_noise.len() * self.config.embed_dim);
        for &c in c_noise {
            let freqs = (0..half).map(|k| 16f64.powf(k as f64 / (half.max(2) - 1) as f64));
            let f: Vec<f64> = freqs.collect();
            data.extend(f.iter().map(|fk| (fk * c).cos()));
            data.extend(f.iter().map(|fk| (fk * c).sin()));
            data.extend(std::iter::repeat_n(0.0, self.config.embed_dim - 2 * half));
        }
        Tensor::from_vec(&[c_noise.len(), self.config.embed_dim], data).expect("feature shape")
    }

    /// The small fully-connected network that maps a one-hot label to an embedding.
    pub(crate) fn class_embedding(&self, g: &mut Graph, p: &[Var], one_hot: Tensor) -> Result<Var> {
        let [l0, l1] = self
            .class_mlp
            .ok_or_else(|| Error::invalid("model was built without class embeddings"))?;
        let x = g.leaf(one_hot, false);
        let h = g.linear(x, p[l0.0], Some(p[l0.1]))?;
        let h = g.silu(h);
        Ok(g.linear(h, p[l1.0], Some(p[l1.1]))?)
    }

    fn block(&self, g: &mut Graph, p: &[Var], blk: &Block, x: Var, emb: Var) -> Result<Var> {
        debug_assert_eq!(g.value(x).shape()[1], blk.c_in);
        let h = g.group_norm(x, p[blk.gn1.0], p[blk.gn1.1], blk.groups_in)?;
        let h = g.silu(h);
        let h = g.conv2d(h, p[blk.conv1.0], Some(p[blk.conv1.1]))?;
        let e = g.linear(emb, p[blk.emb.0], Some(p[blk.emb.1]))?;
        let h = g.add_channel(h, e)?;
        let h = g.group_norm(h, p[blk.gn2.0], p[blk.gn2.1], blk.groups_out)?;
        let h = g.silu(h);
        let h = g.conv2d(h, p[blk.conv2.0], Some(p[blk.conv2.1]))?;
        let skip = match blk.skip {
            Some((w, b)) => g.conv2d(x, p[w], Some(p[b]))?,
            None => x,
        };
        let sum = g.add(skip, h)?;
        let n = g.value(sum).shape()[0];
        Ok(g.scale(sum, &vec![std::f64::consts::FRAC_1_SQRT_2; n])?)
    }

    /// Raw network `F(x, c_noise, class)` on a `[n, 1, h, w]` input.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        p: &[Var],
        x: Var,
        c_noise: &[f64],
        classes: Option<&[ClassLabel]>,
    ) -> Result<Var> {
        let (n, c, h, w) = g.value(x).dims4()?;
        if c != 1 || c_noise.len() != n {
            return Err(Error::invalid(format!(
                "expected [n, 1, h, w] input with {n} noise levels, got {:?} and {}",
                g.value(x).shape(),
                c_noise.len()
            )));
        }
        let feats = g.leaf(self.noise_features(c_noise), false);
        let [m0, m1] = self.noise_mlp;
        let e = g.linear(feats, p[m0.0], Some(p[m0.1]))?;
        let e = g.silu(e);
        let mut emb = g.linear(e, p[m1.0], Some(p[m1.1]))?;
        match (self.config.use_class_embedding, classes) {
            (true, Some(cls)) => {
                if cls.len() != n {
                    return Err(Error::invalid("one class label per batch item is required"));
                }
                let oh: Vec<f64> = cls.iter().flat_map(|c| c.one_hot()).collect();
                let ce = self.class_embedding(g, p, Tensor::from_vec(&[n, 4], oh)?)?;
                emb = g.add(emb, ce)?;
            }
            (true, None) => {
                return Err(Error::invalid("class-conditioned model requires a class label"));
            }
            (false, _) => {}
        }
        let emb = g.silu(emb);

        let res = &self.config.per_level_resolutions;
        let mut hcur = g.conv2d(x, p[self.conv_in.0], Some(p[self.conv_in.1]))?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (l, blk) in self.encoder.iter().enumerate() {
            if l > 0 {
                hcur = g.resize(hcur, res[l][0], res[l][1])?;
            }
            hcur = self.block(g, p, blk, hcur, emb)?;
            skips.push(hcur);
        }
        skips.pop();
        for blk in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let (_, _, sh, sw) = g.value(skip).dims4()?;
            let up = g.resize(hcur, sh, sw)?;
            let cat = g.concat(up, skip)?;
            hcur = self.block(g, p, blk, cat, emb)?;
        }
        debug_assert_eq!(g.value(hcur).dims4()?.2, h);
        let groups = groups_for(self.encoder[0].c_out, self.config.norm_groups);
        let o = g.group_norm(hcur, p[self.out_norm.0], p[self.out_norm.1], groups)?;
        let o = g.silu(o);
        let out = g.conv2d(o, p[self.conv_out.0], Some(p[self.conv_out.1]))?;
        debug_assert_eq!(g.value(out).dims4()?, (n, 1, h, w));
        Ok(out)
    }
}
