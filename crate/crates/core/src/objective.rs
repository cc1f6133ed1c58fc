//! The per-domain VAE, adversarial and cycle-consistency losses.
//!
//! For `N` domains split into pairs the generator side has `3·N` named
//! elements (twelve for four domains) and the discriminator side `N`.
//! Every element can be computed on its own; [`total_objective`] assembles
//! all of them on one graph, and a training step differentiates the
//! generator total and the discriminator total separately.

use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::TranslationModel;
use crate::tensor::Tensor;

/// Probabilities are clamped to `[GAN_EPS, 1 - GAN_EPS]` inside logs.
pub const GAN_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_kl: f64,
    pub w_recon: f64,
    pub w_gan: f64,
    pub w_cc_kl: f64,
    pub w_cc_recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_kl: 0.1,
            w_recon: 100.0,
            w_gan: 1.0,
            w_cc_kl: 0.1,
            w_cc_recon: 100.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            w_kl: 0.0,
            w_recon: 0.0,
            w_gan: 0.0,
            w_cc_kl: 0.0,
            w_cc_recon: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_kl", self.w_kl),
            ("w_recon", self.w_recon),
            ("w_gan", self.w_gan),
            ("w_cc_kl", self.w_cc_kl),
            ("w_cc_recon", self.w_cc_recon),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Where an encoding happens inside the objective. Each role draws its
/// latent noise from its own seeded stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseRole {
    Vae { domain: usize },
    Fake { source: usize, target: usize },
    CycleOut { source: usize, via: usize },
    CycleBack { source: usize, via: usize },
}

impl NoiseRole {
    fn tag(self) -> [u64; 3] {
        match self {
            Self::Vae { domain } => [1, domain as u64, 0],
            Self::Fake { source, target } => [2, source as u64, target as u64],
            Self::CycleOut { source, via } => [3, source as u64, via as u64],
            Self::CycleBack { source, via } => [4, source as u64, via as u64],
        }
    }
}

/// Latent-noise settings for one evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseContext {
    pub enabled: bool,
    pub seed: u64,
}

impl NoiseContext {
    pub fn off() -> Self {
        Self {
            enabled: false,
            seed: 0,
        }
    }

    pub fn seeded(seed: u64) -> Self {
        Self {
            enabled: true,
            seed,
        }
    }

    /// Deterministic RNG for one encoding role.
    pub fn rng(&self, role: NoiseRole) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for t in role.tag() {
            h.update(t.to_le_bytes());
        }
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// The `ε ~ Normal(0, std²)` sample added to a code of `shape` in `role`.
    pub fn sample(&self, role: NoiseRole, shape: &[usize], std: f64) -> Tensor {
        Tensor::randn(shape, std, &mut self.rng(role))
    }
}

/// Encodes `x` and returns `(mu, z)` nodes.
pub fn encode_node<M: TranslationModel + ?Sized>(
    g: &mut Graph,
    net: &M,
    domain: usize,
    x: Var,
    noise: NoiseContext,
    role: NoiseRole,
) -> Result<(Var, Var)> {
    let mu = net.encode_graph(g, domain, x)?;
    if !noise.enabled {
        return Ok((mu, mu));
    }
    let eps = noise.sample(role, g.value(mu).shape(), net.noise_std());
    let eps = g.constant(eps);
    let z = g.add(mu, eps)?;
    Ok((mu, z))
}

fn finite(g: &Graph, v: Var, component: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            component: component.to_string(),
            detail: "non-finite value".to_string(),
        })
    }
}

/// Graph nodes of one domain's VAE term: `(kl, recon)`.
pub fn vae_nodes<M: TranslationModel + ?Sized>(
    g: &mut Graph,
    net: &M,
    domain: usize,
    x: Var,
    noise: NoiseContext,
) -> Result<(Var, Var)> {
    let (mu, z) = encode_node(g, net, domain, x, noise, NoiseRole::Vae { domain })?;
    let recon_img = net.decode_graph(g, domain, z)?;
    finite(g, recon_img, &format!("vae_{} reconstruction", domain + 1))?;
    let kl = g.half_sq_norm_batch_mean(mu);
    let recon = g.mean_abs_diff(x, recon_img)?;
    finite(g, kl, &format!("vae_kl_{}", domain + 1))?;
    Ok((kl, recon))
}

/// Translates `x` from `source` into `target` on the graph.
pub fn fake_node<M: TranslationModel + ?Sized>(
    g: &mut Graph,
    net: &M,
    source: usize,
    target: usize,
    x: Var,
    noise: NoiseContext,
) -> Result<Var> {
    let (_, z) = encode_node(g, net, source, x, noise, NoiseRole::Fake { source, target })?;
    let out = net.decode_graph(g, target, z)?;
    finite(
        g,
        out,
        &format!("translation {}>{}", source + 1, target + 1),
    )?;
    Ok(out)
}

/// Graph nodes of one domain's adversarial term: `(d_loss, g_loss)`.
///
/// The discriminator loss sees a detached copy of `fake`, so its gradient
/// reaches only discriminator parameters. The generator loss sees `fake`
/// itself.
pub fn gan_nodes<M: TranslationModel + ?Sized>(
    g: &mut Graph,
    net: &M,
    domain: usize,
    real: Var,
    fake: Var,
) -> Result<(Var, Var)> {
    let fake_detached = g.detach(fake);
    let real_logits = net.discriminate_graph(g, domain, real)?;
    let fake_logits = net.discriminate_graph(g, domain, fake_detached)?;
    let scales = real_logits.len();
    if scales == 0 {
        return Err(contract("discriminator produced no scales"));
    }
    let w = 1.0 / scales as f64;
    let mut d_terms = Vec::with_capacity(2 * scales);
    for (r, f) in real_logits.into_iter().zip(fake_logits) {
        d_terms.push((g.bce_with_logits(r, true, GAN_EPS), w));
        d_terms.push((g.bce_with_logits(f, false, GAN_EPS), w));
    }
    let d_loss = g.weighted_sum(&d_terms);

    let gen_logits = net.discriminate_graph(g, domain, fake)?;
    let g_terms: Vec<(Var, f64)> = gen_logits
        .into_iter()
        .map(|l| (g.bce_with_logits(l, true, GAN_EPS), w))
        .collect();
    let g_loss = g.weighted_sum(&g_terms);
    finite(g, d_loss, &format!("gan_d_{}", domain + 1))?;
    finite(g, g_loss, &format!("gan_g_{}", domain + 1))?;
    Ok((d_loss, g_loss))
}

/// Graph nodes of the cycle `x -> G_via(E_source(x)) -> G_source(E_via(.))`:
/// `(recon, kl_out, kl_back)`.
pub fn cycle_nodes<M: TranslationModel + ?Sized>(
    g: &mut Graph,
    net: &M,
    source: usize,
    via: usize,
    x: Var,
    noise: NoiseContext,
) -> Result<(Var, Var, Var)> {
    let (mu1, z1) = encode_node(
        g,
        net,
        source,
        x,
        noise,
        NoiseRole::CycleOut { source, via },
    )?;
    let mid = net.decode_graph(g, via, z1)?;
    let (mu2, z2) = encode_node(
        g,
        net,
        via,
        mid,
        noise,
        NoiseRole::CycleBack { source, via },
    )?;
    let back = net.decode_graph(g, source, z2)?;
    finite(g, back, &format!("cc_{} reconstruction", source + 1))?;
    let recon = g.mean_abs_diff(x, back)?;
    let kl1 = g.half_sq_norm_batch_mean(mu1);
    let kl2 = g.half_sq_norm_batch_mean(mu2);
    Ok((recon, kl1, kl2))
}

/// `(kl, recon)` of one domain's VAE term, unweighted.
pub fn vae_loss<M: TranslationModel + ?Sized>(
    net: &M,
    domain: usize,
    batch: &Tensor,
    noise: NoiseContext,
) -> Result<(f64, f64)> {
    net.check_images(batch)?;
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let (kl, recon) = vae_nodes(&mut g, net, domain, x, noise)?;
    Ok((g.value(kl).item(), g.value(recon).item()))
}

/// `(d_loss, g_loss)` for discriminator `domain` on real and translated batches.
pub fn gan_loss<M: TranslationModel + ?Sized>(
    net: &M,
    domain: usize,
    real_batch: &Tensor,
    fake_batch: &Tensor,
) -> Result<(f64, f64)> {
    net.check_images(real_batch)?;
    net.check_images(fake_batch)?;
    let mut g = Graph::new();
    let real = g.constant(real_batch.clone());
    let fake = g.constant(fake_batch.clone());
    let (d, gl) = gan_nodes(&mut g, net, domain, real, fake)?;
    Ok((g.value(d).item(), g.value(gl).item()))
}

/// Weighted cycle-consistency term for a batch from `source` cycled through `via`.
pub fn cycle_loss<M: TranslationModel + ?Sized>(
    net: &M,
    source: usize,
    via: usize,
    batch: &Tensor,
    weights: &LossWeights,
    noise: NoiseContext,
) -> Result<f64> {
    net.check_images(batch)?;
    let mut g = Graph::new();
    let x = g.constant(batch.clone());
    let (recon, kl1, kl2) = cycle_nodes(&mut g, net, source, via, x, noise)?;
    let v = g.weighted_sum(&[
        (recon, weights.w_cc_recon),
        (kl1, weights.w_cc_kl),
        (kl2, weights.w_cc_kl),
    ]);
    Ok(g.value(v).item())
}

/// Losses attributed to one domain.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainLosses {
    pub vae_kl: f64,
    pub vae_recon: f64,
    /// `w_kl·vae_kl + w_recon·vae_recon`.
    pub vae: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    /// Weighted cycle term.
    pub cc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// Indexed by domain; only domains in the pairing are populated.
    pub domains: Vec<Option<DomainLosses>>,
    pub weights: Option<LossWeights>,
    pub generator_total: f64,
    pub discriminator_total: f64,
}

impl LossReport {
    /// The generator-side named elements `vae_d`, `gan_d`, `cc_d` in domain order.
    pub fn generator_elements(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (d, l) in self.domains.iter().enumerate() {
            if let Some(l) = l {
                out.push((format!("vae_{}", d + 1), l.vae));
                out.push((format!("gan_{}", d + 1), l.gan_g));
                out.push((format!("cc_{}", d + 1), l.cc));
            }
        }
        out
    }

    pub fn discriminator_elements(&self) -> Vec<(String, f64)> {
        self.domains
            .iter()
            .enumerate()
            .filter_map(|(d, l)| l.as_ref().map(|l| (format!("d_{}", d + 1), l.gan_d)))
            .collect()
    }

    /// Weight each generator element carries in `generator_total`.
    pub fn element_weight(&self, name: &str) -> f64 {
        match (name.starts_with("gan_"), self.weights) {
            (true, Some(w)) => w.w_gan,
            _ => 1.0,
        }
    }

    /// Every element plus the raw VAE components, for divergence checks.
    pub fn all_values(&self) -> Vec<(String, f64)> {
        let mut out = self.generator_elements();
        out.extend(self.discriminator_elements());
        for (d, l) in self.domains.iter().enumerate() {
            if let Some(l) = l {
                out.push((format!("vae_kl_{}", d + 1), l.vae_kl));
                out.push((format!("vae_recon_{}", d + 1), l.vae_recon));
            }
        }
        out.push(("generator_total".into(), self.generator_total));
        out.push(("discriminator_total".into(), self.discriminator_total));
        out
    }

    /// One JSON-lines record for the metrics stream.
    pub fn to_record(&self, step: usize) -> serde_json::Value {
        let wall = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        let mut elements = serde_json::Map::new();
        for (k, v) in self
            .generator_elements()
            .into_iter()
            .chain(self.discriminator_elements())
        {
            elements.insert(k, serde_json::json!(v));
        }
        let mut raw = serde_json::Map::new();
        for (d, l) in self.domains.iter().enumerate() {
            if let Some(l) = l {
                raw.insert(format!("vae_kl_{}", d + 1), serde_json::json!(l.vae_kl));
                raw.insert(
                    format!("vae_recon_{}", d + 1),
                    serde_json::json!(l.vae_recon),
                );
            }
        }
        serde_json::json!({
            "step": step,
            "elements": elements,
            "components": raw,
            "generator_total": self.generator_total,
            "discriminator_total": self.discriminator_total,
            "wall_clock": wall,
        })
    }
}

/// Pairs `(a, b)` partitioning the active domains.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pairing(pub Vec<(usize, usize)>);

impl Pairing {
    /// `(0,1), (2,3), …` for `n` domains.
    pub fn consecutive(n: usize) -> Self {
        Self((0..n / 2).map(|k| (2 * k, 2 * k + 1)).collect())
    }

    pub fn partner(&self, d: usize) -> Option<usize> {
        self.0.iter().find_map(|&(a, b)| {
            if a == d {
                Some(b)
            } else if b == d {
                Some(a)
            } else {
                None
            }
        })
    }

    /// Active domains in ascending order.
    pub fn domains(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.0.iter().flat_map(|&(a, b)| [a, b]).collect();
        v.sort_unstable();
        v
    }

    pub fn validate(&self, num_domains: usize) -> Result<()> {
        let mut seen = vec![false; num_domains];
        for &(a, b) in &self.0 {
            for d in [a, b] {
                if d >= num_domains {
                    return Err(config(format!(
                        "pairing references domain {} of {num_domains}",
                        d + 1
                    )));
                }
                if seen[d] {
                    return Err(config(format!(
                        "domain {} appears in more than one pair",
                        d + 1
                    )));
                }
                seen[d] = true;
            }
            if a == b {
                return Err(config("a domain cannot be paired with itself"));
            }
        }
        Ok(())
    }
}

/// All loss nodes of one objective evaluation, kept for differentiation.
pub struct ObjectiveGraph {
    pub graph: Graph,
    pub generator_total: Var,
    pub discriminator_total: Var,
    pub report: LossReport,
}

/// Builds every element of the objective for the paired domains on one graph.
///
/// `batches[d]` must be present for every domain in `pairing`.
pub fn objective_graph<M: TranslationModel + ?Sized>(
    net: &M,
    batches: &[Option<Tensor>],
    pairing: &Pairing,
    weights: &LossWeights,
    noise: NoiseContext,
) -> Result<ObjectiveGraph> {
    weights.validate()?;
    pairing.validate(net.num_domains())?;
    let mut g = Graph::new();
    let domains = pairing.domains();
    let mut inputs = vec![None; net.num_domains()];
    for &d in &domains {
        let batch = batches
            .get(d)
            .and_then(Option::as_ref)
            .ok_or_else(|| contract(format!("missing batch for domain {}", d + 1)))?;
        net.check_images(batch)?;
        inputs[d] = Some(g.constant(batch.clone()));
    }

    struct Nodes {
        kl: Var,
        recon: Var,
        vae: Var,
        gan_g: Var,
        gan_d: Var,
        cc: Var,
    }
    let mut nodes: Vec<Option<Nodes>> = (0..net.num_domains()).map(|_| None).collect();
    for &d in &domains {
        let partner = pairing.partner(d).expect("validated pairing");
        let x = inputs[d].expect("input present");
        let (kl, recon) = vae_nodes(&mut g, net, d, x, noise)?;
        let vae = g.weighted_sum(&[(kl, weights.w_kl), (recon, weights.w_recon)]);
        let fake = fake_node(
            &mut g,
            net,
            partner,
            d,
            inputs[partner].expect("input present"),
            noise,
        )?;
        let (gan_d, gan_g) = gan_nodes(&mut g, net, d, x, fake)?;
        let (cr, k1, k2) = cycle_nodes(&mut g, net, d, partner, x, noise)?;
        let cc = g.weighted_sum(&[
            (cr, weights.w_cc_recon),
            (k1, weights.w_cc_kl),
            (k2, weights.w_cc_kl),
        ]);
        nodes[d] = Some(Nodes {
            kl,
            recon,
            vae,
            gan_g,
            gan_d,
            cc,
        });
    }

    let mut gen_terms = Vec::new();
    let mut disc_terms = Vec::new();
    for n in nodes.iter().flatten() {
        gen_terms.push((n.vae, 1.0));
        gen_terms.push((n.gan_g, weights.w_gan));
        gen_terms.push((n.cc, 1.0));
        disc_terms.push((n.gan_d, 1.0));
    }
    let generator_total = g.weighted_sum(&gen_terms);
    let discriminator_total = g.weighted_sum(&disc_terms);

    let report = LossReport {
        domains: nodes
            .iter()
            .map(|n| {
                n.as_ref().map(|n| DomainLosses {
                    vae_kl: g.value(n.kl).item(),
                    vae_recon: g.value(n.recon).item(),
                    vae: g.value(n.vae).item(),
                    gan_g: g.value(n.gan_g).item(),
                    gan_d: g.value(n.gan_d).item(),
                    cc: g.value(n.cc).item(),
                })
            })
            .collect(),
        weights: Some(*weights),
        generator_total: g.value(generator_total).item(),
        discriminator_total: g.value(discriminator_total).item(),
    };
    Ok(ObjectiveGraph {
        graph: g,
        generator_total,
        discriminator_total,
        report,
    })
}

/// Evaluates every loss element without keeping the graph.
pub fn total_objective<M: TranslationModel + ?Sized>(
    net: &M,
    batches: &[Option<Tensor>],
    pairing: &Pairing,
    weights: &LossWeights,
    noise: NoiseContext,
) -> Result<LossReport> {
    Ok(objective_graph(net, batches, pairing, weights, noise)?.report)
}
