//! Encoders, decoders and discriminators over a shared latent space.
//!
//! Every domain `d` owns an encoder `E_d`, a decoder `G_d` and a
//! discriminator `D_d`. The last residual stages of all encoders and the
//! first residual stages of all decoders are one [`SharedBlock`], stored once
//! in the parameter store and referenced by id from every network, so the
//! translator `G_j ∘ E_i` reads the same latent machinery for any `(i, j)`.
//!
//! Domain ids are zero-based here; user-facing text (chains, reports) is
//! one-based.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_domains: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Width of the first downsampling stage; doubles per stage up to `latent_channels`.
    pub base_channels: usize,
    pub latent_channels: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    /// Domain-specific residual blocks in each encoder and decoder.
    pub residual_blocks: usize,
    /// Residual blocks in the shared encoder tail and in the shared decoder head.
    pub shared_block_depth: usize,
    pub discriminator_scales: usize,
    /// Stride-2 convolutions per discriminator scale before the 1×1 head.
    pub discriminator_depth: usize,
    pub discriminator_channels: usize,
    pub noise_std: f64,
    /// Weight std is `init_gain / sqrt(fan_in)`.
    pub init_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_domains: 4,
            image_size: 32,
            channels: 3,
            base_channels: 16,
            latent_channels: 32,
            encoder_depth: 2,
            decoder_depth: 2,
            residual_blocks: 1,
            shared_block_depth: 1,
            discriminator_scales: 2,
            discriminator_depth: 2,
            discriminator_channels: 16,
            noise_std: 1.0,
            init_gain: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 || !self.num_domains.is_multiple_of(2) {
            return Err(config(format!(
                "num_domains must be even and at least 2, got {}",
                self.num_domains
            )));
        }
        for (name, v) in [
            ("encoder_depth", self.encoder_depth),
            ("decoder_depth", self.decoder_depth),
            ("residual_blocks", self.residual_blocks),
            ("shared_block_depth", self.shared_block_depth),
            ("discriminator_scales", self.discriminator_scales),
            ("channels", self.channels),
            ("base_channels", self.base_channels),
            ("latent_channels", self.latent_channels),
            ("discriminator_channels", self.discriminator_channels),
        ] {
            if v == 0 {
                return Err(config(format!("{name} must be at least 1")));
            }
        }
        if self.encoder_depth != self.decoder_depth {
            return Err(config(
                "encoder_depth and decoder_depth must match so decoded images keep the input shape",
            ));
        }
        let down = 1usize << self.encoder_depth;
        if self.image_size == 0 || !self.image_size.is_multiple_of(down) {
            return Err(config(format!(
                "image_size {} must be divisible by 2^encoder_depth = {down}",
                self.image_size
            )));
        }
        let disc_down = 1usize << (self.discriminator_scales - 1 + self.discriminator_depth);
        if !self.image_size.is_multiple_of(disc_down) {
            return Err(config(format!(
                "image_size {} too small for {} discriminator scales of depth {}",
                self.image_size, self.discriminator_scales, self.discriminator_depth
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(config("noise_std must be finite and nonnegative"));
        }
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return Err(config("init_gain must be finite and positive"));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.image_size >> self.encoder_depth;
        [self.latent_channels, s, s]
    }

    fn stage_channels(&self, k: usize) -> usize {
        if k + 1 == self.encoder_depth {
            self.latent_channels
        } else {
            (self.base_channels << k).min(self.latent_channels)
        }
    }
}

/// Encoder output: the deterministic mean and the (possibly noisy) code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mu: Tensor,
    pub z: Tensor,
    pub noise_enabled: bool,
}

/// The atomic map `G_target ∘ E_source`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Translator {
    pub source: usize,
    pub target: usize,
}

impl Translator {
    pub fn new(source: usize, target: usize) -> Self {
        Self { source, target }
    }
}

impl fmt::Display for Translator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}>{}", self.source + 1, self.target + 1)
    }
}

/// Which network a caller reads the shared block through.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Encoder(usize),
    Decoder(usize),
}

/// The primitive maps every translation model exposes.
///
/// Implementors build graph nodes; the provided methods evaluate them on
/// concrete tensors. `encode_graph` returns the mean code `mu`.
pub trait TranslationModel {
    fn num_domains(&self) -> usize;
    fn image_shape(&self) -> [usize; 3];
    fn noise_std(&self) -> f64;

    fn encode_graph(&self, g: &mut Graph, domain: usize, x: Var) -> Result<Var>;
    fn decode_graph(&self, g: &mut Graph, domain: usize, z: Var) -> Result<Var>;
    fn discriminate_graph(&self, g: &mut Graph, domain: usize, x: Var) -> Result<Vec<Var>>;

    /// Whether `G_target ∘ E_source` is a meaningful map for this model.
    fn supports(&self, t: Translator) -> bool {
        t.source < self.num_domains() && t.target < self.num_domains()
    }

    fn check_domain(&self, d: usize) -> Result<()> {
        if d >= self.num_domains() {
            return Err(contract(format!(
                "domain {} out of range 1..={}",
                d + 1,
                self.num_domains()
            )));
        }
        Ok(())
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let (n, c, h, w) = x.dims4()?;
        if n == 0 || [c, h, w] != self.image_shape() {
            return Err(contract(format!(
                "image batch {:?} does not match model input {:?}",
                x.shape(),
                self.image_shape()
            )));
        }
        Ok(())
    }

    fn encode(
        &self,
        domain: usize,
        x: &Tensor,
        noise_enabled: bool,
        seed: Option<u64>,
    ) -> Result<LatentCode> {
        self.check_domain(domain)?;
        self.check_images(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mu_v = self.encode_graph(&mut g, domain, xv)?;
        let mu = g.value(mu_v).clone();
        let z = if noise_enabled {
            let mut rng = match seed {
                Some(s) => ChaCha8Rng::seed_from_u64(s),
                None => ChaCha8Rng::from_entropy(),
            };
            let mut z = Tensor::randn(mu.shape(), self.noise_std(), &mut rng);
            z.add_assign(&mu);
            z
        } else {
            mu.clone()
        };
        Ok(LatentCode {
            mu,
            z,
            noise_enabled,
        })
    }

    fn decode(&self, domain: usize, z: &Tensor) -> Result<Tensor> {
        self.check_domain(domain)?;
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let out = self.decode_graph(&mut g, domain, zv)?;
        Ok(g.value(out).clone())
    }

    /// Exactly `decode(target, encode(source, x).z)`.
    fn translate(&self, t: Translator, x: &Tensor, noise_enabled: bool) -> Result<Tensor> {
        self.translate_seeded(t, x, noise_enabled, None)
    }

    fn translate_seeded(
        &self,
        t: Translator,
        x: &Tensor,
        noise_enabled: bool,
        seed: Option<u64>,
    ) -> Result<Tensor> {
        if !self.supports(t) {
            return Err(contract(format!(
                "translator {t} is not available in this model"
            )));
        }
        let code = self.encode(t.source, x, noise_enabled, seed)?;
        self.decode(t.target, &code.z)
    }

    /// Per-scale realness logit maps.
    fn discriminate(&self, domain: usize, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_domain(domain)?;
        self.check_images(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let outs = self.discriminate_graph(&mut g, domain, xv)?;
        Ok(outs.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// All `|N|²` translators this model can construct.
    fn registry(&self) -> Vec<Translator> {
        let n = self.num_domains();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| Translator::new(i, j)))
            .filter(|&t| self.supports(t))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub transpose: bool,
}

impl ConvLayer {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.w), g.param(store, self.b));
        if self.transpose {
            g.conv_transpose2d(x, w, b, self.stride, self.pad)
        } else {
            g.conv2d(x, w, b, self.stride, self.pad)
        }
    }
}

/// `x + conv(lrelu(conv(x)))`, 3×3 kernels.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ResBlock {
    pub first: ConvLayer,
    pub second: ConvLayer,
}

impl ResBlock {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(g, store, x)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE);
        let h = self.second.forward(g, store, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Encoder {
    pub down: Vec<ConvLayer>,
    pub res: Vec<ResBlock>,
    pub shared: SharedBlock,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Decoder {
    pub shared: SharedBlock,
    pub res: Vec<ResBlock>,
    pub up: Vec<ConvLayer>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct DiscriminatorScale {
    pub down: Vec<ConvLayer>,
    pub head: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct SharedBlock {
    pub encoder_tail: Vec<ResBlock>,
    pub decoder_head: Vec<ResBlock>,
}

impl SharedBlock {
    fn param_ids(&self) -> Vec<ParamId> {
        self.encoder_tail
            .iter()
            .chain(&self.decoder_head)
            .flat_map(|r| [r.first.w, r.first.b, r.second.w, r.second.b])
            .collect()
    }
}

/// Parameter initializer with a deterministic stream.
struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    gain: f64,
}

impl Init<'_> {
    fn conv(
        &mut self,
        group: ParamGroup,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvLayer {
        let std = self.gain / ((cin * k * k) as f64).sqrt();
        let w = Tensor::randn(&[cout, cin, k, k], std, &mut self.rng);
        let w = self.store.add(format!("{name}.w"), group, w);
        let b = self
            .store
            .add(format!("{name}.b"), group, Tensor::zeros(&[cout]));
        ConvLayer {
            w,
            b,
            stride,
            pad,
            transpose: false,
        }
    }

    fn deconv(
        &mut self,
        group: ParamGroup,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvLayer {
        // Each output pixel of a stride-s deconv sees about cin·(k/s)² inputs.
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        let std = self.gain / (fan_in as f64).sqrt();
        let w = Tensor::randn(&[cin, cout, k, k], std, &mut self.rng);
        let w = self.store.add(format!("{name}.w"), group, w);
        let b = self
            .store
            .add(format!("{name}.b"), group, Tensor::zeros(&[cout]));
        ConvLayer {
            w,
            b,
            stride,
            pad,
            transpose: true,
        }
    }

    fn res(&mut self, group: ParamGroup, name: &str, ch: usize) -> ResBlock {
        ResBlock {
            first: self.conv(group, &format!("{name}.conv1"), ch, ch, 3, 1, 1),
            second: self.conv(group, &format!("{name}.conv2"), ch, ch, 3, 1, 1),
        }
    }
}

/// The full set of `N` encoders, decoders and discriminators.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSet {
    config: ModelConfig,
    params: ParamStore,
    encoders: Vec<Encoder>,
    decoders: Vec<Decoder>,
    discriminators: Vec<Vec<DiscriminatorScale>>,
    shared: SharedBlock,
}

impl NetworkSet {
    /// Builds and initializes every network from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            gain: config.init_gain,
        };
        let latent = config.latent_channels;
        let depth = config.encoder_depth;

        let shared = SharedBlock {
            encoder_tail: (0..config.shared_block_depth)
                .map(|k| init.res(ParamGroup::Shared, &format!("enc_tail{k}"), latent))
                .collect(),
            decoder_head: (0..config.shared_block_depth)
                .map(|k| init.res(ParamGroup::Shared, &format!("dec_head{k}"), latent))
                .collect(),
        };

        let mut encoders = Vec::new();
        let mut decoders = Vec::new();
        let mut discriminators = Vec::new();
        for d in 0..config.num_domains {
            let group = ParamGroup::Encoder(d);
            let mut down = Vec::new();
            let mut cin = config.channels;
            for k in 0..depth {
                let cout = config.stage_channels(k);
                down.push(init.conv(group, &format!("down{k}"), cin, cout, 4, 2, 1));
                cin = cout;
            }
            let res = (0..config.residual_blocks)
                .map(|k| init.res(group, &format!("res{k}"), latent))
                .collect();
            encoders.push(Encoder {
                down,
                res,
                shared: shared.clone(),
            });

            let group = ParamGroup::Decoder(d);
            let res = (0..config.residual_blocks)
                .map(|k| init.res(group, &format!("res{k}"), latent))
                .collect();
            let mut up = Vec::new();
            for k in (0..depth).rev() {
                let cin = config.stage_channels(k);
                let cout = if k == 0 {
                    config.channels
                } else {
                    config.stage_channels(k - 1)
                };
                up.push(init.deconv(group, &format!("up{k}"), cin, cout, 4, 2, 1));
            }
            decoders.push(Decoder {
                shared: shared.clone(),
                res,
                up,
            });

            let group = ParamGroup::Discriminator(d);
            let scales = (0..config.discriminator_scales)
                .map(|s| {
                    let mut down = Vec::new();
                    let mut cin = config.channels;
                    for k in 0..config.discriminator_depth {
                        let cout = config.discriminator_channels << k;
                        down.push(init.conv(
                            group,
                            &format!("scale{s}.down{k}"),
                            cin,
                            cout,
                            4,
                            2,
                            1,
                        ));
                        cin = cout;
                    }
                    let head = init.conv(group, &format!("scale{s}.head"), cin, 1, 1, 1, 0);
                    DiscriminatorScale { down, head }
                })
                .collect();
            discriminators.push(scales);
        }

        Ok(Self {
            config,
            params,
            encoders,
            decoders,
            discriminators,
            shared,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.config.latent_shape()
    }

    pub fn shared_param_ids(&self) -> Vec<ParamId> {
        self.shared.param_ids()
    }

    /// Content hash of the shared block.
    pub fn shared_block_digest(&self) -> String {
        self.params.digest(&self.shared.param_ids())
    }

    /// Content hash of the shared block as reached from one network's own
    /// handle to it.
    pub fn shared_block_digest_via(&self, via: Component) -> Result<String> {
        let block = match via {
            Component::Encoder(d) => {
                self.check_domain(d)?;
                &self.encoders[d].shared
            }
            Component::Decoder(d) => {
                self.check_domain(d)?;
                &self.decoders[d].shared
            }
        };
        Ok(self.params.digest(&block.param_ids()))
    }

    /// Sets every discriminator head to zero so all logits are exactly 0.
    pub fn zero_discriminator_heads(&mut self) {
        for scales in &self.discriminators {
            for s in scales {
                for id in [s.head.w, s.head.b] {
                    self.params.get_mut(id).data_mut().fill(0.0);
                }
            }
        }
    }

    /// Looks up a parameter by `(group, name)`.
    pub fn find_param(&self, group: ParamGroup, name: &str) -> Option<ParamId> {
        self.params
            .ids()
            .find(|&id| self.params.entry(id).group == group && self.params.entry(id).name == name)
    }
}

impl TranslationModel for NetworkSet {
    fn num_domains(&self) -> usize {
        self.config.num_domains
    }

    fn image_shape(&self) -> [usize; 3] {
        self.config.image_shape()
    }

    fn noise_std(&self) -> f64 {
        self.config.noise_std
    }

    fn encode_graph(&self, g: &mut Graph, domain: usize, x: Var) -> Result<Var> {
        self.check_domain(domain)?;
        let enc = &self.encoders[domain];
        let mut h = x;
        for layer in &enc.down {
            h = layer.forward(g, &self.params, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
        }
        for block in enc.res.iter().chain(&enc.shared.encoder_tail) {
            h = block.forward(g, &self.params, h)?;
        }
        Ok(h)
    }

    fn decode_graph(&self, g: &mut Graph, domain: usize, z: Var) -> Result<Var> {
        self.check_domain(domain)?;
        let [c, h, w] = self.latent_shape();
        let zs = g.value(z).shape();
        if zs.len() != 4 || zs[1..] != [c, h, w] || zs[0] == 0 {
            return Err(contract(format!(
                "latent {:?} does not match configured latent shape {:?}",
                zs,
                [c, h, w]
            )));
        }
        let dec = &self.decoders[domain];
        let mut x = z;
        for block in dec.shared.decoder_head.iter().chain(&dec.res) {
            x = block.forward(g, &self.params, x)?;
        }
        let last = dec.up.len() - 1;
        for (k, layer) in dec.up.iter().enumerate() {
            x = layer.forward(g, &self.params, x)?;
            x = if k == last {
                g.tanh(x)
            } else {
                g.leaky_relu(x, LEAKY_SLOPE)
            };
        }
        Ok(x)
    }

    fn discriminate_graph(&self, g: &mut Graph, domain: usize, x: Var) -> Result<Vec<Var>> {
        self.check_domain(domain)?;
        let mut input = x;
        let mut outs = Vec::new();
        for (s, scale) in self.discriminators[domain].iter().enumerate() {
            if s > 0 {
                input = g.avg_pool2(input)?;
            }
            let mut h = input;
            for layer in &scale.down {
                h = layer.forward(g, &self.params, h)?;
                h = g.leaky_relu(h, LEAKY_SLOPE);
            }
            outs.push(scale.head.forward(g, &self.params, h)?);
        }
        Ok(outs)
    }
}

/// Encoders and decoders that are exact identities; the latent space is the
/// image space and every discriminator logit is 0. Used for debug
/// checkpoints and for loss identities that need exact round trips.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityModel {
    pub num_domains: usize,
    pub image_shape: [usize; 3],
    pub discriminator_scales: usize,
}

impl IdentityModel {
    pub fn new(num_domains: usize, image_shape: [usize; 3], discriminator_scales: usize) -> Self {
        Self {
            num_domains,
            image_shape,
            discriminator_scales,
        }
    }
}

impl TranslationModel for IdentityModel {
    fn num_domains(&self) -> usize {
        self.num_domains
    }

    fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    fn noise_std(&self) -> f64 {
        1.0
    }

    fn encode_graph(&self, _g: &mut Graph, domain: usize, x: Var) -> Result<Var> {
        self.check_domain(domain)?;
        Ok(x)
    }

    fn decode_graph(&self, _g: &mut Graph, domain: usize, z: Var) -> Result<Var> {
        self.check_domain(domain)?;
        Ok(z)
    }

    fn discriminate_graph(&self, g: &mut Graph, domain: usize, x: Var) -> Result<Vec<Var>> {
        self.check_domain(domain)?;
        let n = g.value(x).batch_len();
        Ok((0..self.discriminator_scales)
            .map(|_| g.constant(Tensor::zeros(&[n, 1, 1, 1])))
            .collect())
    }
}

/// Separately trained pair models addressed with global domain ids.
///
/// Domain `d` lives in pair `d / 2` at local index `d % 2`. Only
/// translators within one pair are available; the pair models do not
/// share a latent space.
#[derive(Clone, Debug)]
pub struct PairEnsemble {
    pairs: Vec<NetworkSet>,
}

impl PairEnsemble {
    pub fn new(pairs: Vec<NetworkSet>) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| config("pair ensemble needs at least one model"))?;
        for p in &pairs {
            if p.num_domains() != 2 {
                return Err(config(
                    "every ensemble member must be a two-domain pair model",
                ));
            }
            if p.image_shape() != first.image_shape() {
                return Err(config("ensemble members disagree on image shape"));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[NetworkSet] {
        &self.pairs
    }

    fn locate(&self, d: usize) -> Result<(&NetworkSet, usize)> {
        self.check_domain(d)?;
        Ok((&self.pairs[d / 2], d % 2))
    }
}

impl TranslationModel for PairEnsemble {
    fn num_domains(&self) -> usize {
        self.pairs.len() * 2
    }

    fn image_shape(&self) -> [usize; 3] {
        self.pairs[0].image_shape()
    }

    fn noise_std(&self) -> f64 {
        self.pairs[0].noise_std()
    }

    fn supports(&self, t: Translator) -> bool {
        t.source < self.num_domains()
            && t.target < self.num_domains()
            && t.source / 2 == t.target / 2
    }

    fn encode_graph(&self, g: &mut Graph, domain: usize, x: Var) -> Result<Var> {
        let (net, local) = self.locate(domain)?;
        // Members have disjoint stores, so each needs a private graph.
        let mut sub = Graph::new();
        let xv = sub.constant(g.value(x).clone());
        let out = net.encode_graph(&mut sub, local, xv)?;
        Ok(g.constant(sub.value(out).clone()))
    }

    fn decode_graph(&self, g: &mut Graph, domain: usize, z: Var) -> Result<Var> {
        let (net, local) = self.locate(domain)?;
        let mut sub = Graph::new();
        let zv = sub.constant(g.value(z).clone());
        let out = net.decode_graph(&mut sub, local, zv)?;
        Ok(g.constant(sub.value(out).clone()))
    }

    fn discriminate_graph(&self, g: &mut Graph, domain: usize, x: Var) -> Result<Vec<Var>> {
        let (net, local) = self.locate(domain)?;
        let mut sub = Graph::new();
        let xv = sub.constant(g.value(x).clone());
        let outs = net.discriminate_graph(&mut sub, local, xv)?;
        Ok(outs
            .into_iter()
            .map(|o| g.constant(sub.value(o).clone()))
            .collect())
    }
}

/// Uniform random images in `[-1, 1]`, handy for probes and tests.
pub fn random_images<R: Rng + ?Sized>(n: usize, shape: [usize; 3], rng: &mut R) -> Tensor {
    let len = n * shape.iter().product::<usize>();
    let data = (0..len).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    Tensor::new(vec![n, shape[0], shape[1], shape[2]], data).expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> NetworkSet {
        let cfg = ModelConfig {
            num_domains: 2,
            image_size: 2,
            channels: 1,
            base_channels: 1,
            latent_channels: 1,
            encoder_depth: 1,
            decoder_depth: 1,
            discriminator_scales: 1,
            discriminator_depth: 1,
            discriminator_channels: 1,
            ..ModelConfig::default()
        };
        let mut net = NetworkSet::new(cfg, 0).unwrap();
        let ids: Vec<ParamId> = net.params().ids().collect();
        for id in ids {
            net.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        net
    }

    /// Writes a 4×4 single-channel kernel entry by `(ky, kx)`.
    fn set(net: &mut NetworkSet, group: ParamGroup, name: &str, entries: &[((usize, usize), f64)]) {
        let id = net.find_param(group, name).unwrap();
        let t = net.params_mut().get_mut(id);
        for &((ky, kx), v) in entries {
            if t.len() == 1 {
                t.data_mut()[0] = v;
            } else {
                t.data_mut()[ky * 4 + kx] = v;
            }
        }
    }

    fn toy_input() -> Tensor {
        Tensor::new(vec![1, 1, 2, 2], vec![0.5, -0.25, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn toy_decode_and_translate_match_hand_computation() {
        let mut net = toy();
        let enc = ParamGroup::Encoder(0);
        set(
            &mut net,
            enc,
            "down0.w",
            &[((1, 1), 0.2), ((1, 2), -0.4), ((2, 1), 0.6), ((2, 2), 1.0)],
        );
        set(&mut net, enc, "down0.b", &[((0, 0), 0.1)]);
        let dec = ParamGroup::Decoder(1);
        set(
            &mut net,
            dec,
            "up0.w",
            &[((1, 1), 1.0), ((1, 2), -2.0), ((2, 1), 0.5), ((2, 2), 0.0)],
        );
        set(&mut net, dec, "up0.b", &[((0, 0), 0.25)]);

        // 0.2·0.5 + 0.4·0.25 + 0.6·1.0 + 0.1
        let mu = 0.9;
        let code = net.encode(0, &toy_input(), false, None).unwrap();
        assert!((code.mu.data()[0] - mu).abs() < 1e-12);
        assert_eq!(code.mu, code.z);

        let want = [
            (mu + 0.25f64).tanh(),
            (-2.0 * mu + 0.25f64).tanh(),
            (0.5 * mu + 0.25f64).tanh(),
            0.25f64.tanh(),
        ];
        let out = net.decode(1, &code.mu).unwrap();
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let t = net
            .translate(Translator::new(0, 1), &toy_input(), false)
            .unwrap();
        assert_eq!(t, out);
    }

    #[test]
    fn toy_discriminator_matches_hand_computation() {
        let mut net = toy();
        let d = ParamGroup::Discriminator(0);
        set(
            &mut net,
            d,
            "scale0.down0.w",
            &[((1, 1), -1.0), ((2, 1), 0.5)],
        );
        set(&mut net, d, "scale0.head.w", &[((0, 0), 3.0)]);
        set(&mut net, d, "scale0.head.b", &[((0, 0), 0.5)]);
        // pre = -0.5 + 0.5 = 0 for the toy input; use a second input for the negative branch.
        let scores = net.discriminate(0, &toy_input()).unwrap();
        assert_eq!(scores.len(), 1);
        assert!((scores[0].data()[0] - 0.5).abs() < 1e-12);
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        // lrelu(-1) = -0.2, 3·(-0.2) + 0.5
        let s = net.discriminate(0, &x).unwrap();
        assert!((s[0].data()[0] - (-0.1)).abs() < 1e-12);
    }

    fn small(n: usize) -> ModelConfig {
        ModelConfig {
            num_domains: n,
            image_size: 8,
            base_channels: 2,
            latent_channels: 4,
            discriminator_channels: 2,
            discriminator_depth: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn latent_noise_is_unit_gaussian() {
        let cfg = ModelConfig {
            latent_channels: 2,
            ..small(2)
        };
        let net = NetworkSet::new(cfg, 3).unwrap();
        let x = random_images(1, net.image_shape(), &mut ChaCha8Rng::seed_from_u64(1));
        let draws = 10_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut count = 0usize;
        let mut dim = 0;
        for s in 0..draws {
            let code = net.encode(0, &x, true, Some(s)).unwrap();
            dim = code.mu.len();
            for (z, m) in code.z.data().iter().zip(code.mu.data()) {
                let e = z - m;
                sum += e;
                sq += e * e;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = sq / count as f64 - mean * mean;
        assert!(mean.abs() < 4e-2 * (dim as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
        let a = net.encode(0, &x, true, Some(5)).unwrap();
        let b = net.encode(0, &x, true, Some(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shapes_bounds_and_contracts() {
        let net = NetworkSet::new(small(2), 1).unwrap();
        assert_eq!(net.latent_shape(), [4, 2, 2]);
        let x = random_images(3, net.image_shape(), &mut ChaCha8Rng::seed_from_u64(2));
        let code = net.encode(1, &x, false, None).unwrap();
        assert_eq!(code.mu.shape(), &[3, 4, 2, 2]);
        let big = Tensor::full(&[2, 4, 2, 2], 50.0);
        assert!(net
            .decode(0, &big)
            .unwrap()
            .data()
            .iter()
            .all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(net.discriminate(0, &x).unwrap().len(), 2);
        assert!(net.encode(2, &x, false, None).is_err());
        assert!(net
            .encode(0, &Tensor::zeros(&[1, 3, 4, 4]), false, None)
            .is_err());
        assert!(net.decode(0, &Tensor::zeros(&[1, 3, 2, 2])).is_err());
        let same = net.translate(Translator::new(1, 1), &x, false).unwrap();
        assert_eq!(same, net.decode(1, &code.mu).unwrap());
    }

    #[test]
    fn zeroed_heads_give_even_odds() {
        let mut net = NetworkSet::new(small(2), 1).unwrap();
        net.zero_discriminator_heads();
        let x = random_images(2, net.image_shape(), &mut ChaCha8Rng::seed_from_u64(2));
        for s in net.discriminate(1, &x).unwrap() {
            assert!(s.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn four_domains_give_sixteen_translators() {
        let net = NetworkSet::new(small(4), 1).unwrap();
        let reg = net.registry();
        assert_eq!(reg.len(), 16);
        let distinct: std::collections::HashSet<_> =
            reg.iter().map(|t| (t.source, t.target)).collect();
        assert_eq!(distinct.len(), 16);
        let pairs = PairEnsemble::new(vec![
            NetworkSet::new(small(2), 1).unwrap(),
            NetworkSet::new(small(2), 2).unwrap(),
        ])
        .unwrap();
        assert_eq!(pairs.registry().len(), 8);
    }

    #[test]
    fn shared_digest_is_single_storage() {
        let net = NetworkSet::new(small(4), 1).unwrap();
        let d = net.shared_block_digest();
        assert_eq!(d, net.shared_block_digest());
        for k in 0..4 {
            assert_eq!(
                net.shared_block_digest_via(Component::Encoder(k)).unwrap(),
                d
            );
            assert_eq!(
                net.shared_block_digest_via(Component::Decoder(k)).unwrap(),
                d
            );
        }
        assert!(net.shared_block_digest_via(Component::Decoder(4)).is_err());
        assert_ne!(
            NetworkSet::new(small(4), 2).unwrap().shared_block_digest(),
            d
        );
    }
}
