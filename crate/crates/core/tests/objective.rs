mod common;

use common::*;
use latent_chain::model::{random_images, IdentityModel, NetworkSet, TranslationModel, Translator};
use latent_chain::objective::{
    cycle_loss, gan_loss, objective_graph, total_objective, vae_loss, LossWeights, NoiseContext,
    Pairing,
};
use latent_chain::params::ParamGroup;
use latent_chain::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fixture() -> (NetworkSet, Vec<Tensor>) {
    let net = NetworkSet::new(oracle_model_config(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let batches = (0..4)
        .map(|_| random_images(3, net.image_shape(), &mut rng))
        .collect();
    (net, batches)
}

fn weights() -> LossWeights {
    LossWeights {
        w_kl: 0.1,
        w_recon: 100.0,
        w_gan: 1.0,
        w_cc_kl: 0.1,
        w_cc_recon: 100.0,
    }
}

#[test]
fn every_element_matches_the_scalar_reference() {
    let (net, batches) = fixture();
    let opt: Vec<Option<Tensor>> = batches.iter().cloned().map(Some).collect();
    for noise in [NoiseContext::off(), NoiseContext::seeded(99)] {
        let report =
            total_objective(&net, &opt, &Pairing::consecutive(4), &weights(), noise).unwrap();
        let (want, gen, disc) =
            reference_objective(&net, &batches, &[(0, 1), (2, 3)], &weights(), noise);
        assert_eq!(report.generator_elements().len(), 12);
        assert_eq!(report.discriminator_elements().len(), 4);
        for (d, w) in want.iter().enumerate() {
            let got = report.domains[d].as_ref().unwrap();
            for (name, a, b) in [
                ("vae_kl", got.vae_kl, w.vae_kl),
                ("vae_recon", got.vae_recon, w.vae_recon),
                ("vae", got.vae, w.vae),
                ("gan_g", got.gan_g, w.gan_g),
                ("gan_d", got.gan_d, w.gan_d),
                ("cc", got.cc, w.cc),
            ] {
                assert!(relative(a, b) < 1e-5, "{name}_{} {a} vs {b}", d + 1);
            }
        }
        assert!(relative(report.generator_total, gen) < 1e-5);
        assert!(relative(report.discriminator_total, disc) < 1e-5);
    }
}

#[test]
fn report_equals_component_operations() {
    let (net, batches) = fixture();
    let opt: Vec<Option<Tensor>> = batches.iter().cloned().map(Some).collect();
    let w = weights();
    let report = total_objective(
        &net,
        &opt,
        &Pairing::consecutive(4),
        &w,
        NoiseContext::off(),
    )
    .unwrap();
    for (d, p) in [(0, 1), (1, 0), (2, 3), (3, 2)] {
        let got = report.domains[d].as_ref().unwrap();
        let (kl, recon) = vae_loss(&net, d, &batches[d], NoiseContext::off()).unwrap();
        assert_eq!((got.vae_kl, got.vae_recon), (kl, recon));
        let fake = net
            .translate(Translator::new(p, d), &batches[p], false)
            .unwrap();
        let (dl, gl) = gan_loss(&net, d, &batches[d], &fake).unwrap();
        assert_eq!((got.gan_d, got.gan_g), (dl, gl));
        let cc = cycle_loss(&net, d, p, &batches[d], &w, NoiseContext::off()).unwrap();
        assert_eq!(got.cc, cc);
    }
}

#[test]
fn generator_total_is_the_weighted_element_sum() {
    let (net, batches) = fixture();
    let opt: Vec<Option<Tensor>> = batches.into_iter().map(Some).collect();
    let r = total_objective(
        &net,
        &opt,
        &Pairing::consecutive(4),
        &weights(),
        NoiseContext::seeded(3),
    )
    .unwrap();
    let sum: f64 = r
        .generator_elements()
        .iter()
        .map(|(n, v)| r.element_weight(n) * v)
        .sum();
    assert!(relative(sum, r.generator_total) < 1e-12);
}

#[test]
fn kl_closed_forms() {
    let net = IdentityModel::new(2, [2, 1, 1], 1);
    let zero = Tensor::zeros(&[4, 2, 1, 1]);
    assert_eq!(
        vae_loss(&net, 0, &zero, NoiseContext::off()).unwrap().0,
        0.0
    );
    let ones = Tensor::full(&[4, 2, 1, 1], 1.0);
    assert_eq!(
        vae_loss(&net, 0, &ones, NoiseContext::off()).unwrap().0,
        1.0
    );
}

#[test]
fn confident_discriminator_drives_generator_loss_to_zero() {
    let mut net = NetworkSet::new(oracle_model_config(), 2).unwrap();
    net.zero_discriminator_heads();
    for s in 0..2 {
        let id = net
            .find_param(ParamGroup::Discriminator(0), &format!("scale{s}.head.b"))
            .unwrap();
        net.params_mut().get_mut(id).data_mut()[0] = 40.0;
    }
    let x = Tensor::full(&[2, 3, 8, 8], 0.1);
    let (_, g) = gan_loss(&net, 0, &x, &x).unwrap();
    assert!(g < 1e-6, "{g}");
    assert!(g > 0.0);
}

#[test]
fn gradient_isolation_between_sides() {
    let (net, batches) = fixture();
    let opt: Vec<Option<Tensor>> = batches.iter().cloned().map(Some).collect();
    let og = objective_graph(
        &net,
        &opt,
        &Pairing::consecutive(4),
        &weights(),
        NoiseContext::off(),
    )
    .unwrap();
    let g = og.graph.backward(og.generator_total).unwrap();
    let d = og.graph.backward(og.discriminator_total).unwrap();
    for (id, t) in d.iter() {
        if net.params().entry(id).group.is_generator() {
            assert!(
                t.data().iter().all(|&v| v == 0.0),
                "{}",
                net.params().entry(id).name
            );
        }
    }
    assert!(g
        .iter()
        .any(|(id, t)| net.params().entry(id).group.is_generator()
            && t.data().iter().any(|&v| v != 0.0)));
}
