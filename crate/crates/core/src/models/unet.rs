//! Tiny U-Net epsilon network for images.
//!
//! Encoder halves the resolution per level with pool-interleaved residual
//! blocks; the decoder mirrors it with nearest upsampling and skip
//! concatenation. The timestep embedding is projected into every block, the
//! conditioning embedding is projected and added to the timestep embedding,
//! and self-attention (flattened spatial, residual rescaled by 1/sqrt(2))
//! runs only at the configured resolutions. Two 1x1-conv heads share the
//! trunk: the noise head and the sigmoid-bounded variance-interpolation head.

use rand_chacha::ChaCha20Rng;

use super::embedding::sinusoidal_embedding_batch;
use super::{conv1x1, init_conv, init_dense, linear, maybe_dropout, DropoutMode, EpsilonModel, NodeMap, Params};
use crate::tensor::{Graph, Node, Tensor};
use crate::{Error, Real, Result};

const GN_EPS: Real = 1e-5;

#[derive(Clone, Debug)]
pub struct TinyUNetConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub resblocks_per_level: usize,
    /// Spatial resolutions at which self-attention runs.
    pub attn_resolutions: Vec<usize>,
    pub attn_head_width: usize,
    pub dropout: Real,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub norm_groups: usize,
}

impl TinyUNetConfig {
    /// Desk-scale defaults: 16x16 inputs, 32 base channels, multipliers
    /// (1,2,2), 2 resblocks per level, attention at 4x4 with head width 16,
    /// dropout 0.1.
    pub fn desk(in_channels: usize, cond_dim: usize) -> Self {
        TinyUNetConfig {
            in_channels,
            image_size: 16,
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            resblocks_per_level: 2,
            attn_resolutions: vec![4],
            attn_head_width: 16,
            dropout: 0.1,
            time_dim: 64,
            cond_dim,
            norm_groups: 8,
        }
    }

    /// The full-scale configuration: 64x64 RGB, channels 256/512/768/1024,
    /// 3 resblocks per level, attention at 32/16/8 with 64-wide heads.
    /// Encoded for reference; desk tests never instantiate it.
    pub fn paper_scale(cond_dim: usize) -> Self {
        TinyUNetConfig {
            in_channels: 3,
            image_size: 64,
            base_channels: 256,
            channel_mults: vec![1, 2, 3, 4],
            resblocks_per_level: 3,
            attn_resolutions: vec![32, 16, 8],
            attn_head_width: 64,
            dropout: 0.1,
            time_dim: 1024,
            cond_dim,
            norm_groups: 32,
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn level_channels(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_channels).collect()
    }

    fn level_resolutions(&self) -> Vec<usize> {
        (0..self.levels()).map(|i| self.image_size >> i).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l == 0 {
            return Err(Error::Config("channel_mults must not be empty".into()));
        }
        if self.image_size % (1 << (l - 1)) != 0 || self.image_size >> (l - 1) == 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible across {} levels",
                self.image_size, l
            )));
        }
        for (&c, &r) in self.level_channels().iter().zip(self.level_resolutions().iter()) {
            if c % self.norm_groups != 0 {
                return Err(Error::Config(format!(
                    "channels {c} not divisible by {} norm groups",
                    self.norm_groups
                )));
            }
            if self.attn_resolutions.contains(&r) && c % self.attn_head_width != 0 {
                return Err(Error::Config(format!(
                    "attention head width {} does not divide {c} channels at {r}x{r}",
                    self.attn_head_width
                )));
            }
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Config("time_dim must be even".into()));
        }
        Ok(())
    }
}

enum Resample {
    None,
    Down,
    Up,
}

pub struct TinyUNet {
    pub cfg: TinyUNetConfig,
    pub params: Params,
}

impl TinyUNet {
    pub fn init(cfg: TinyUNetConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let mut p = Params::new();
        let td = cfg.time_dim;
        p.insert("time.w1", init_dense(rng, td, td, 1.0));
        p.insert("time.b1", Tensor::zeros(vec![td]));
        p.insert("time.w2", init_dense(rng, td, td, 1.0));
        p.insert("time.b2", Tensor::zeros(vec![td]));
        p.insert("cond.w", init_dense(rng, cfg.cond_dim.max(1), td, 1.0));
        p.insert("cond.b", Tensor::zeros(vec![td]));
        p.insert("in.w", init_conv(rng, cfg.base_channels, cfg.in_channels, 1.0));
        p.insert("in.b", Tensor::zeros(vec![cfg.base_channels]));

        let chans = cfg.level_channels();
        let res = cfg.level_resolutions();
        let mut cur = cfg.base_channels;
        for (i, &c) in chans.iter().enumerate() {
            for j in 0..cfg.resblocks_per_level {
                init_resblock(&mut p, rng, &format!("enc{i}.rb{j}"), cur, c, td);
                cur = c;
                if cfg.attn_resolutions.contains(&res[i]) {
                    init_attention(&mut p, rng, &format!("enc{i}.attn{j}"), c, cfg.attn_head_width);
                }
            }
            if i + 1 < chans.len() {
                init_resblock(&mut p, rng, &format!("down{i}"), c, c, td);
            }
        }
        let c_last = *chans.last().unwrap();
        init_resblock(&mut p, rng, "mid.rb1", c_last, c_last, td);
        if cfg.attn_resolutions.contains(res.last().unwrap()) {
            init_attention(&mut p, rng, "mid.attn", c_last, cfg.attn_head_width);
        }
        init_resblock(&mut p, rng, "mid.rb2", c_last, c_last, td);

        for i in (0..chans.len()).rev() {
            let c = chans[i];
            let c_above = if i + 1 < chans.len() { chans[i + 1] } else { c_last };
            if i + 1 < chans.len() {
                init_resblock(&mut p, rng, &format!("up{i}"), c_above, c_above, td);
            }
            let mut cin = c_above + c; // skip concatenation
            for j in 0..cfg.resblocks_per_level {
                init_resblock(&mut p, rng, &format!("dec{i}.rb{j}"), cin, c, td);
                cin = c;
                if cfg.attn_resolutions.contains(&res[i]) {
                    init_attention(&mut p, rng, &format!("dec{i}.attn{j}"), c, cfg.attn_head_width);
                }
            }
        }

        p.insert("out.gn.scale", Tensor::full(vec![cfg.base_channels], 1.0));
        p.insert("out.gn.shift", Tensor::zeros(vec![cfg.base_channels]));
        p.insert("out.eps.w", init_dense(rng, cfg.base_channels, cfg.in_channels, 0.1));
        p.insert("out.eps.b", Tensor::zeros(vec![cfg.in_channels]));
        p.insert("out.v.w", init_dense(rng, cfg.base_channels, cfg.in_channels, 0.1));
        p.insert("out.v.b", Tensor::zeros(vec![cfg.in_channels]));
        Ok(TinyUNet { cfg, params: p })
    }

    /// Graph-mode forward. `x_t: [B, C, H, W]`, optional `cond: [B, cond_dim]`
    /// (`None` substitutes the zero vector).
    pub fn forward(
        &self,
        g: &Graph,
        nodes: &NodeMap,
        x_t: &Tensor,
        t: usize,
        cond: Option<&Tensor>,
        mode: &mut DropoutMode<'_>,
    ) -> Result<(Node, Node)> {
        let cfg = &self.cfg;
        let expect = [cfg.in_channels, cfg.image_size, cfg.image_size];
        if x_t.ndim() != 4 || x_t.shape()[1..] != expect {
            return Err(Error::shape(
                "unet",
                format!("expected [B, {}, {}, {}]", expect[0], expect[1], expect[2]),
            ));
        }
        let batch = x_t.shape()[0];

        // timestep + conditioning embedding
        let temb0 = g.constant(sinusoidal_embedding_batch(t, cfg.time_dim, batch)?);
        let h1 = linear(g, temb0, nodes.node("time.w1"), nodes.node("time.b1"))?;
        let h1 = g.silu(h1)?;
        let mut temb = linear(g, h1, nodes.node("time.w2"), nodes.node("time.b2"))?;
        let cond_t = match cond {
            Some(c) => {
                if c.shape() != [batch, cfg.cond_dim] {
                    return Err(Error::shape(
                        "unet",
                        format!("conditioning must be [B, {}]", cfg.cond_dim),
                    ));
                }
                c.clone()
            }
            None => Tensor::zeros(vec![batch, cfg.cond_dim.max(1)]),
        };
        let cn = g.constant(cond_t);
        let cp = linear(g, cn, nodes.node("cond.w"), nodes.node("cond.b"))?;
        temb = g.add(temb, cp)?;

        let chans = cfg.level_channels();
        let res = cfg.level_resolutions();
        let x = g.constant(x_t.clone());
        let mut h = g.conv2d(x, nodes.node("in.w"))?;
        h = g.add_channel_bias(h, nodes.node("in.b"))?;

        // encoder
        let mut skips: Vec<Node> = Vec::with_capacity(chans.len());
        let mut cur = cfg.base_channels;
        for (i, &c) in chans.iter().enumerate() {
            for j in 0..cfg.resblocks_per_level {
                h = self.resblock(g, nodes, &format!("enc{i}.rb{j}"), h, temb, cur, c, Resample::None, mode)?;
                cur = c;
                if cfg.attn_resolutions.contains(&res[i]) {
                    h = self.attention(g, nodes, &format!("enc{i}.attn{j}"), h, c)?;
                }
            }
            skips.push(h);
            if i + 1 < chans.len() {
                h = self.resblock(g, nodes, &format!("down{i}"), h, temb, c, c, Resample::Down, mode)?;
            }
        }

        // middle
        let c_last = *chans.last().unwrap();
        h = self.resblock(g, nodes, "mid.rb1", h, temb, c_last, c_last, Resample::None, mode)?;
        if cfg.attn_resolutions.contains(res.last().unwrap()) {
            h = self.attention(g, nodes, "mid.attn", h, c_last)?;
        }
        h = self.resblock(g, nodes, "mid.rb2", h, temb, c_last, c_last, Resample::None, mode)?;

        // decoder
        for i in (0..chans.len()).rev() {
            let c = chans[i];
            let c_above = if i + 1 < chans.len() { chans[i + 1] } else { c_last };
            if i + 1 < chans.len() {
                h = self.resblock(g, nodes, &format!("up{i}"), h, temb, c_above, c_above, Resample::Up, mode)?;
            }
            h = g.concat(h, skips[i], 1)?;
            let mut cin = c_above + c;
            for j in 0..cfg.resblocks_per_level {
                h = self.resblock(g, nodes, &format!("dec{i}.rb{j}"), h, temb, cin, c, Resample::None, mode)?;
                cin = c;
                if cfg.attn_resolutions.contains(&res[i]) {
                    h = self.attention(g, nodes, &format!("dec{i}.attn{j}"), h, c)?;
                }
            }
        }

        // heads
        h = g.group_norm(h, cfg.norm_groups, GN_EPS)?;
        h = g.mul_channel_bias(h, nodes.node("out.gn.scale"))?;
        h = g.add_channel_bias(h, nodes.node("out.gn.shift"))?;
        h = g.silu(h)?;
        let eps = conv1x1(g, h, nodes.node("out.eps.w"))?;
        let eps = g.add_channel_bias(eps, nodes.node("out.eps.b"))?;
        let v_logit = conv1x1(g, h, nodes.node("out.v.w"))?;
        let v_logit = g.add_channel_bias(v_logit, nodes.node("out.v.b"))?;
        let v = g.sigmoid(v_logit)?;
        Ok((eps, v))
    }

    #[allow(clippy::too_many_arguments)]
    fn resblock(
        &self,
        g: &Graph,
        nodes: &NodeMap,
        prefix: &str,
        x: Node,
        temb: Node,
        cin: usize,
        cout: usize,
        resample: Resample,
        mode: &mut DropoutMode<'_>,
    ) -> Result<Node> {
        let groups = self.cfg.norm_groups;
        let n = |suffix: &str| nodes.node(&format!("{prefix}.{suffix}"));

        let mut h = g.group_norm(x, groups, GN_EPS)?;
        h = g.mul_channel_bias(h, n("gn1.scale"))?;
        h = g.add_channel_bias(h, n("gn1.shift"))?;
        h = g.silu(h)?;
        // BigGAN-style blocks resample between the first normalization and
        // the first convolution; the skip path is resampled to match.
        let mut skip = x;
        match resample {
            Resample::None => {}
            Resample::Down => {
                h = g.avg_pool2(h)?;
                skip = g.avg_pool2(skip)?;
            }
            Resample::Up => {
                h = g.upsample_nearest2(h)?;
                skip = g.upsample_nearest2(skip)?;
            }
        }
        h = g.conv2d(h, n("conv1.w"))?;
        h = g.add_channel_bias(h, n("conv1.b"))?;

        let ts = g.silu(temb)?;
        let tp = linear(g, ts, n("temb.w"), n("temb.b"))?;
        h = g.add_channel_map(h, tp)?;

        h = g.group_norm(h, groups, GN_EPS)?;
        h = g.mul_channel_bias(h, n("gn2.scale"))?;
        h = g.add_channel_bias(h, n("gn2.shift"))?;
        h = g.silu(h)?;
        h = maybe_dropout(g, h, self.cfg.dropout, mode)?;
        h = g.conv2d(h, n("conv2.w"))?;
        h = g.add_channel_bias(h, n("conv2.b"))?;

        if cin != cout {
            skip = conv1x1(g, skip, n("skip.w"))?;
        }
        g.add(skip, h)
    }

    fn attention(&self, g: &Graph, nodes: &NodeMap, prefix: &str, x: Node, c: usize) -> Result<Node> {
        let hw_dim = self.cfg.attn_head_width;
        let heads = c / hw_dim;
        let n = |suffix: &str| nodes.node(&format!("{prefix}.{suffix}"));
        let xs = g.shape_of(x);
        let (b, h, w) = (xs[0], xs[2], xs[3]);
        let hw = h * w;

        let mut nm = g.group_norm(x, self.cfg.norm_groups, GN_EPS)?;
        nm = g.mul_channel_bias(nm, n("gn.scale"))?;
        nm = g.add_channel_bias(nm, n("gn.shift"))?;
        let flat = g.reshape(nm, vec![b, c, hw])?;
        let seq = g.transpose_12(flat)?; // [B, HW, C]

        let mut head_outs: Option<Node> = None;
        for hd in 0..heads {
            let q = g.matmul(seq, n(&format!("q{hd}.w")))?;
            let k = g.matmul(seq, n(&format!("k{hd}.w")))?;
            let v = g.matmul(seq, n(&format!("v{hd}.w")))?;
            let kt = g.transpose_12(k)?;
            let scores = g.matmul(q, kt)?;
            let scaled = g.scale(scores, 1.0 / (hw_dim as Real).sqrt())?;
            let att = g.softmax(scaled)?;
            let out = g.matmul(att, v)?; // [B, HW, head_width]
            head_outs = Some(match head_outs {
                None => out,
                Some(acc) => g.concat(acc, out, 2)?,
            });
        }
        let merged = head_outs.expect("at least one attention head");
        let proj = g.matmul(merged, n("proj.w"))?;
        let proj2 = g.reshape(proj, vec![b * hw, c])?;
        let proj3 = g.add_row_bias(proj2, n("proj.b"))?;
        let proj4 = g.reshape(proj3, vec![b, hw, c])?;
        let back = g.transpose_12(proj4)?;
        let spatial = g.reshape(back, vec![b, c, h, w])?;
        // residual rescaled by 1/sqrt(2)
        let summed = g.add(x, spatial)?;
        g.scale(summed, 1.0 / (2.0 as Real).sqrt())
    }
}

fn init_resblock(p: &mut Params, rng: &mut ChaCha20Rng, prefix: &str, cin: usize, cout: usize, td: usize) {
    p.insert(format!("{prefix}.gn1.scale"), Tensor::full(vec![cin], 1.0));
    p.insert(format!("{prefix}.gn1.shift"), Tensor::zeros(vec![cin]));
    p.insert(format!("{prefix}.conv1.w"), init_conv(rng, cout, cin, 1.0));
    p.insert(format!("{prefix}.conv1.b"), Tensor::zeros(vec![cout]));
    p.insert(format!("{prefix}.temb.w"), init_dense(rng, td, cout, 1.0));
    p.insert(format!("{prefix}.temb.b"), Tensor::zeros(vec![cout]));
    p.insert(format!("{prefix}.gn2.scale"), Tensor::full(vec![cout], 1.0));
    p.insert(format!("{prefix}.gn2.shift"), Tensor::zeros(vec![cout]));
    p.insert(format!("{prefix}.conv2.w"), init_conv(rng, cout, cout, 1.0));
    p.insert(format!("{prefix}.conv2.b"), Tensor::zeros(vec![cout]));
    if cin != cout {
        p.insert(format!("{prefix}.skip.w"), init_dense(rng, cin, cout, 1.0));
    }
}

fn init_attention(p: &mut Params, rng: &mut ChaCha20Rng, prefix: &str, c: usize, head_width: usize) {
    p.insert(format!("{prefix}.gn.scale"), Tensor::full(vec![c], 1.0));
    p.insert(format!("{prefix}.gn.shift"), Tensor::zeros(vec![c]));
    for h in 0..c / head_width {
        p.insert(format!("{prefix}.q{h}.w"), init_dense(rng, c, head_width, 1.0));
        p.insert(format!("{prefix}.k{h}.w"), init_dense(rng, c, head_width, 1.0));
        p.insert(format!("{prefix}.v{h}.w"), init_dense(rng, c, head_width, 1.0));
    }
    p.insert(format!("{prefix}.proj.w"), init_dense(rng, c, c, 0.1));
    p.insert(format!("{prefix}.proj.b"), Tensor::zeros(vec![c]));
}

impl EpsilonModel for TinyUNet {
    fn sample_shape(&self) -> Vec<usize> {
        vec![self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size]
    }

    fn cond_width(&self) -> usize {
        self.cfg.cond_dim
    }

    fn predict(&self, x_t: &Tensor, t: usize, cond: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let g = Graph::new();
        let nodes = self.params.bind(&g, false);
        let mut mode: DropoutMode = None;
        let (eps, v) = self.forward(&g, &nodes, x_t, t, cond, &mut mode)?;
        Ok((g.value(eps), g.value(v)))
    }
}
