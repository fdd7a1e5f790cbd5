use pategen::neural::{
    adversarial_perturbation, disc_loss, generator_loss_input_gradient, Activation, LossTarget, MlpParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain scalar forward pass written against the public layer fields.
fn scalar_forward(net: &MlpParams, x: &[f64], label: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for layer in net.layers() {
        let mut input = h.clone();
        input.extend_from_slice(label);
        let mut out = Vec::new();
        for o in 0..layer.outputs {
            let mut s = layer.biases[o];
            for i in 0..layer.inputs {
                s += layer.weights[o * layer.inputs + i] * input[i];
            }
            out.push(match layer.activation {
                Activation::LeakyRelu => {
                    if s > 0.0 {
                        s
                    } else {
                        0.2 * s
                    }
                }
                Activation::Sigmoid => 1.0 / (1.0 + (-s).exp()),
                Activation::Tanh => s.tanh(),
                Activation::Identity => s,
            });
        }
        h = out;
    }
    h
}

fn scalar_loss(p: f64, target: LossTarget) -> f64 {
    let q = p.max(1e-7).min(1.0 - 1e-7);
    match target {
        LossTarget::GeneratorFacing | LossTarget::Real => -q.ln(),
        LossTarget::Fake => -(1.0 - q).ln(),
    }
}

fn random_disc(rng: &mut ChaCha8Rng) -> (MlpParams, Vec<f64>, Vec<f64>) {
    let d = rng.random_range(1..5);
    let hidden = rng.random_range(1..6);
    let classes = rng.random_range(0..3);
    let net = MlpParams::discriminator(d, &[hidden], classes, rng).unwrap();
    let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut label = vec![0.0; classes];
    if classes > 0 {
        label[rng.random_range(0..classes)] = 1.0;
    }
    (net, x, label)
}

#[test]
fn loss_matches_scalar_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let (net, x, label) = random_disc(&mut rng);
        let p = scalar_forward(&net, &x, &label)[0];
        for target in [LossTarget::GeneratorFacing, LossTarget::Real, LossTarget::Fake] {
            let got = disc_loss(&net, &x, &label, target).unwrap();
            let want = scalar_loss(p, target);
            assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
        }
    }
}

#[test]
fn forward_matches_scalar_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let g = MlpParams::generator(3, &[5, 4], 2, 2, &mut rng).unwrap();
        let z: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let label = vec![0.0, 1.0];
        let a = g.forward(&z, &label).unwrap();
        let b = scalar_forward(&g, &z, &label);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn perturbation_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-5;
    for _ in 0..100 {
        let d = rng.random_range(1..5);
        let net = MlpParams::new(&[d, 4, 1], 0, &[Activation::Tanh, Activation::Sigmoid], &mut rng).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad = generator_loss_input_gradient(&net, &x, &[]).unwrap();
        for i in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fp = scalar_loss(scalar_forward(&net, &xp, &[])[0], LossTarget::GeneratorFacing);
            let fm = scalar_loss(scalar_forward(&net, &xm, &[])[0], LossTarget::GeneratorFacing);
            let numeric = (fp - fm) / (2.0 * h);
            let scale = grad[i].abs().max(numeric.abs()).max(1e-8);
            assert!((grad[i] - numeric).abs() / scale < 1e-5, "{} vs {numeric}", grad[i]);
        }
    }
}

#[test]
fn large_gradients_clamp_to_the_bound_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clip = 1e-4;
    for _ in 0..200 {
        let (net, x, label) = random_disc(&mut rng);
        let raw = generator_loss_input_gradient(&net, &x, &label).unwrap();
        let dx = adversarial_perturbation(&net, &x, &label, clip).unwrap();
        for (r, p) in raw.iter().zip(&dx) {
            assert!(p.abs() <= clip);
            if r.abs() > clip {
                assert_eq!(p.abs(), clip);
                assert_eq!(p.signum(), -r.signum());
            } else {
                assert_eq!(*p, -r);
            }
        }
    }
}
