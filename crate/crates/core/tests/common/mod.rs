//! Plain-loop reference implementation of the networks and losses, plus
//! the finite-difference gradient check.
//!
//! The reference never calls the graph, the kernels or the objective module; the
//! only thing taken from the library is parameter values and, when noise is
//! on, the noise samples themselves.

#![allow(dead_code)]

use latent_chain::model::{random_images, ModelConfig, NetworkSet, TranslationModel};
use latent_chain::objective::{objective_graph, LossWeights, NoiseContext, NoiseRole, Pairing};
use latent_chain::params::ParamGroup;
use latent_chain::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SLOPE: f64 = 0.2;
const EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct Img {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Img {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            v: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Self {
            n: s[0],
            c: s[1],
            h: s[2],
            w: s[3],
            v: t.data().to_vec(),
        }
    }

    fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.v[((n * self.c + c) * self.h + y) * self.w + x]
    }

    fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        let (cc, h, w) = (self.c, self.h, self.w);
        &mut self.v[((n * cc + c) * h + y) * w + x]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            v: self.v.iter().map(|&a| f(a)).collect(),
            ..self.clone()
        }
    }

    fn plus(&self, o: &Img) -> Self {
        Self {
            v: self.v.iter().zip(&o.v).map(|(a, b)| a + b).collect(),
            ..self.clone()
        }
    }
}

struct Conv {
    /// `[cout][cin][k][k]` for plain, `[cin][cout][k][k]` for transposed.
    w: Vec<f64>,
    b: Vec<f64>,
    cin: usize,
    cout: usize,
    k: usize,
}

pub struct Reference<'a> {
    pub net: &'a NetworkSet,
    pub cfg: ModelConfig,
}

impl<'a> Reference<'a> {
    pub fn new(net: &'a NetworkSet) -> Self {
        Self {
            net,
            cfg: net.config().clone(),
        }
    }

    fn conv(&self, group: ParamGroup, name: &str, transpose: bool) -> Conv {
        let w = self.net.params().get(
            self.net
                .find_param(group, &format!("{name}.w"))
                .expect(name),
        );
        let b = self.net.params().get(
            self.net
                .find_param(group, &format!("{name}.b"))
                .expect(name),
        );
        let s = w.shape();
        let (cin, cout) = if transpose {
            (s[0], s[1])
        } else {
            (s[1], s[0])
        };
        Conv {
            w: w.data().to_vec(),
            b: b.data().to_vec(),
            cin,
            cout,
            k: s[2],
        }
    }

    fn conv2d(x: &Img, c: &Conv, stride: usize, pad: usize) -> Img {
        let oh = (x.h + 2 * pad - c.k) / stride + 1;
        let ow = (x.w + 2 * pad - c.k) / stride + 1;
        let mut out = Img::zeros(x.n, c.cout, oh, ow);
        for n in 0..x.n {
            for o in 0..c.cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = c.b[o];
                        for i in 0..c.cin {
                            for ky in 0..c.k {
                                for kx in 0..c.k {
                                    let y = (oy * stride + ky) as isize - pad as isize;
                                    let xx = (ox * stride + kx) as isize - pad as isize;
                                    if y < 0 || xx < 0 || y >= x.h as isize || xx >= x.w as isize {
                                        continue;
                                    }
                                    s += c.w[((o * c.cin + i) * c.k + ky) * c.k + kx]
                                        * x.at(n, i, y as usize, xx as usize);
                                }
                            }
                        }
                        *out.at_mut(n, o, oy, ox) = s;
                    }
                }
            }
        }
        out
    }

    fn deconv2d(x: &Img, c: &Conv, stride: usize, pad: usize) -> Img {
        let oh = (x.h - 1) * stride + c.k - 2 * pad;
        let ow = (x.w - 1) * stride + c.k - 2 * pad;
        let mut out = Img::zeros(x.n, c.cout, oh, ow);
        for n in 0..x.n {
            for o in 0..c.cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        *out.at_mut(n, o, oy, ox) = c.b[o];
                    }
                }
            }
            for i in 0..c.cin {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let v = x.at(n, i, y, xx);
                        for o in 0..c.cout {
                            for ky in 0..c.k {
                                for kx in 0..c.k {
                                    let oy = (y * stride + ky) as isize - pad as isize;
                                    let ox = (xx * stride + kx) as isize - pad as isize;
                                    if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                        continue;
                                    }
                                    *out.at_mut(n, o, oy as usize, ox as usize) +=
                                        v * c.w[((i * c.cout + o) * c.k + ky) * c.k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn lrelu(x: &Img) -> Img {
        x.map(|a| if a > 0.0 { a } else { SLOPE * a })
    }

    fn res(&self, group: ParamGroup, name: &str, x: &Img) -> Img {
        let h = Self::conv2d(x, &self.conv(group, &format!("{name}.conv1"), false), 1, 1);
        let h = Self::lrelu(&h);
        let h = Self::conv2d(&h, &self.conv(group, &format!("{name}.conv2"), false), 1, 1);
        x.plus(&h)
    }

    pub fn encode(&self, d: usize, x: &Img) -> Img {
        let g = ParamGroup::Encoder(d);
        let mut h = x.clone();
        for k in 0..self.cfg.encoder_depth {
            h = Self::lrelu(&Self::conv2d(
                &h,
                &self.conv(g, &format!("down{k}"), false),
                2,
                1,
            ));
        }
        for k in 0..self.cfg.residual_blocks {
            h = self.res(g, &format!("res{k}"), &h);
        }
        for k in 0..self.cfg.shared_block_depth {
            h = self.res(ParamGroup::Shared, &format!("enc_tail{k}"), &h);
        }
        h
    }

    pub fn decode(&self, d: usize, z: &Img) -> Img {
        let g = ParamGroup::Decoder(d);
        let mut h = z.clone();
        for k in 0..self.cfg.shared_block_depth {
            h = self.res(ParamGroup::Shared, &format!("dec_head{k}"), &h);
        }
        for k in 0..self.cfg.residual_blocks {
            h = self.res(g, &format!("res{k}"), &h);
        }
        for k in (0..self.cfg.decoder_depth).rev() {
            h = Self::deconv2d(&h, &self.conv(g, &format!("up{k}"), true), 2, 1);
            h = if k == 0 {
                h.map(f64::tanh)
            } else {
                Self::lrelu(&h)
            };
        }
        h
    }

    fn pool(x: &Img) -> Img {
        let mut out = Img::zeros(x.n, x.c, x.h / 2, x.w / 2);
        for n in 0..x.n {
            for c in 0..x.c {
                for y in 0..x.h / 2 {
                    for xx in 0..x.w / 2 {
                        let s = x.at(n, c, 2 * y, 2 * xx)
                            + x.at(n, c, 2 * y + 1, 2 * xx)
                            + x.at(n, c, 2 * y, 2 * xx + 1)
                            + x.at(n, c, 2 * y + 1, 2 * xx + 1);
                        *out.at_mut(n, c, y, xx) = s / 4.0;
                    }
                }
            }
        }
        out
    }

    pub fn discriminate(&self, d: usize, x: &Img) -> Vec<Img> {
        let g = ParamGroup::Discriminator(d);
        let mut input = x.clone();
        let mut outs = Vec::new();
        for s in 0..self.cfg.discriminator_scales {
            if s > 0 {
                input = Self::pool(&input);
            }
            let mut h = input.clone();
            for k in 0..self.cfg.discriminator_depth {
                h = Self::lrelu(&Self::conv2d(
                    &h,
                    &self.conv(g, &format!("scale{s}.down{k}"), false),
                    2,
                    1,
                ));
            }
            outs.push(Self::conv2d(
                &h,
                &self.conv(g, &format!("scale{s}.head"), false),
                1,
                0,
            ));
        }
        outs
    }

    /// `mu + ε` with the library's noise draw for `role`.
    fn sample(&self, mu: &Img, noise: NoiseContext, role: NoiseRole) -> Img {
        if !noise.enabled {
            return mu.clone();
        }
        let eps = noise.sample(role, &[mu.n, mu.c, mu.h, mu.w], self.net.noise_std());
        mu.plus(&Img::from_tensor(&eps))
    }
}

pub fn half_sq_norm_mean(mu: &Img) -> f64 {
    mu.v.iter().map(|a| a * a / 2.0).sum::<f64>() / mu.n as f64
}

pub fn mean_l1(a: &Img, b: &Img) -> f64 {
    a.v.iter()
        .zip(&b.v)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.v.len() as f64
}

pub fn bce(logits: &Img, real: bool) -> f64 {
    let s: f64 = logits
        .v
        .iter()
        .map(|&l| {
            let p = (1.0 / (1.0 + (-l).exp())).clamp(EPS, 1.0 - EPS);
            if real {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    s / logits.v.len() as f64
}

#[derive(Clone, Debug, Default)]
pub struct RefDomain {
    pub vae_kl: f64,
    pub vae_recon: f64,
    pub vae: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub cc: f64,
}

/// Every element of the objective for `pairs`, from the plain loops above.
pub fn reference_objective(
    net: &NetworkSet,
    batches: &[Tensor],
    pairs: &[(usize, usize)],
    w: &LossWeights,
    noise: NoiseContext,
) -> (Vec<RefDomain>, f64, f64) {
    let r = Reference::new(net);
    let xs: Vec<Img> = batches.iter().map(Img::from_tensor).collect();
    let mut out = vec![RefDomain::default(); batches.len()];
    let mut gen_total = 0.0;
    let mut disc_total = 0.0;
    for &(a, b) in pairs {
        for (d, p) in [(a, b), (b, a)] {
            let x = &xs[d];
            let mu = r.encode(d, x);
            let z = r.sample(&mu, noise, NoiseRole::Vae { domain: d });
            let vae_kl = half_sq_norm_mean(&mu);
            let vae_recon = mean_l1(x, &r.decode(d, &z));
            let vae = w.w_kl * vae_kl + w.w_recon * vae_recon;

            let mu_p = r.encode(p, &xs[p]);
            let zf = r.sample(
                &mu_p,
                noise,
                NoiseRole::Fake {
                    source: p,
                    target: d,
                },
            );
            let fake = r.decode(d, &zf);
            let real_l = r.discriminate(d, x);
            let fake_l = r.discriminate(d, &fake);
            let scales = real_l.len() as f64;
            let gan_d = real_l
                .iter()
                .zip(&fake_l)
                .map(|(rl, fl)| bce(rl, true) + bce(fl, false))
                .sum::<f64>()
                / scales;
            let gan_g = fake_l.iter().map(|fl| bce(fl, true)).sum::<f64>() / scales;

            let mu1 = mu.clone();
            let z1 = r.sample(&mu1, noise, NoiseRole::CycleOut { source: d, via: p });
            let mid = r.decode(p, &z1);
            let mu2 = r.encode(p, &mid);
            let z2 = r.sample(&mu2, noise, NoiseRole::CycleBack { source: d, via: p });
            let back = r.decode(d, &z2);
            let cc = w.w_cc_recon * mean_l1(x, &back)
                + w.w_cc_kl * (half_sq_norm_mean(&mu1) + half_sq_norm_mean(&mu2));

            gen_total += vae + w.w_gan * gan_g + cc;
            disc_total += gan_d;
            out[d] = RefDomain {
                vae_kl,
                vae_recon,
                vae,
                gan_g,
                gan_d,
                cc,
            };
        }
    }
    (out, gen_total, disc_total)
}

/// Tiny four-domain model used by the loss and gradient oracles.
pub fn oracle_model_config() -> ModelConfig {
    ModelConfig {
        num_domains: 4,
        image_size: 8,
        channels: 3,
        base_channels: 2,
        latent_channels: 3,
        encoder_depth: 2,
        decoder_depth: 2,
        residual_blocks: 1,
        shared_block_depth: 1,
        discriminator_scales: 2,
        discriminator_depth: 1,
        discriminator_channels: 2,
        noise_std: 1.0,
        init_gain: 1.0,
    }
}

/// At most 500 scalars: one channel, 4×4 images, width-1 layers.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        num_domains: 4,
        image_size: 4,
        channels: 1,
        base_channels: 1,
        latent_channels: 1,
        encoder_depth: 1,
        decoder_depth: 1,
        residual_blocks: 1,
        shared_block_depth: 1,
        discriminator_scales: 1,
        discriminator_depth: 1,
        discriminator_channels: 1,
        noise_std: 1.0,
        init_gain: 1.0,
    }
}

pub fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Central-difference check of both totals over every parameter.
pub fn max_gradient_error(seed: u64) -> (f64, usize) {
    let net = NetworkSet::new(gradcheck_model_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let batches: Vec<Option<Tensor>> = (0..4)
        .map(|_| Some(random_images(2, net.image_shape(), &mut rng)))
        .collect();
    let w = LossWeights {
        w_kl: 0.1,
        w_recon: 1.0,
        w_gan: 1.0,
        w_cc_kl: 0.1,
        w_cc_recon: 1.0,
    };
    let noise = NoiseContext::seeded(seed);
    let pairing = Pairing::consecutive(4);
    let og = objective_graph(&net, &batches, &pairing, &w, noise).unwrap();
    let g_grads = og.graph.backward(og.generator_total).unwrap();
    let d_grads = og.graph.backward(og.discriminator_total).unwrap();

    let totals = |n: &NetworkSet| {
        let r = objective_graph(n, &batches, &pairing, &w, noise)
            .unwrap()
            .report;
        (r.generator_total, r.discriminator_total)
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = net.params().ids().collect();
    for id in ids {
        // The discriminator loss sees a detached fake, so it only has
        // gradients with respect to discriminator parameters.
        let disc = net.params().entry(id).group.is_discriminator();
        for k in 0..net.params().get(id).len() {
            let mut plus = net.clone();
            plus.params_mut().get_mut(id).data_mut()[k] += h;
            let mut minus = net.clone();
            minus.params_mut().get_mut(id).data_mut()[k] -= h;
            let (gp, dp) = totals(&plus);
            let (gm, dm) = totals(&minus);
            let num_g = (gp - gm) / (2.0 * h);
            let num_d = (dp - dm) / (2.0 * h);
            let ana_g = g_grads.get(id).map_or(0.0, |t| t.data()[k]);
            let ana_d = d_grads.get(id).map_or(0.0, |t| t.data()[k]);
            let checks: &[(f64, f64)] = if disc {
                &[(ana_g, num_g), (ana_d, num_d)]
            } else {
                &[(ana_g, num_g)]
            };
            for &(a, n) in checks {
                let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
                worst = worst.max(err);
            }
        }
    }
    (worst, net.params().scalar_count())
}
