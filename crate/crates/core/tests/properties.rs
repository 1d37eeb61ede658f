use proptest::prelude::*;

use mlstab::cpn1::{random_model, random_point, seeded, RandomSpec};
use mlstab::linearize::{finite_difference_jacobian, jacobian_slice};
use mlstab::{compose, Cpn1Model};

fn model_and_point(seed: u64) -> (Cpn1Model, Vec<f64>) {
    let mut rng = seeded(seed);
    let spec = RandomSpec::sample(&mut rng, 10, 12);
    let model = random_model(&spec, &mut rng).unwrap();
    let v = random_point(model.nv(), &mut rng);
    (model, v)
}

fn close(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residual_is_affine_in_each_signal(seed in any::<u64>(), t in -3.0f64..3.0) {
        let (model, v) = model_and_point(seed);
        let h0 = model.residual_slice(&v).unwrap();
        for i in 0..model.nv() {
            let mut a = v.clone();
            a[i] += 1.0;
            let h1 = model.residual_slice(&a).unwrap();
            let mut b = v.clone();
            b[i] += t;
            let ht = model.residual_slice(&b).unwrap();
            for k in 0..model.n_eq() {
                let want = h0[k] + t * (h1[k] - h0[k]);
                prop_assert!(close(ht[k], want, h0[k].abs() + h1[k].abs()), "signal {i} eq {k}: {} vs {want}", ht[k]);
            }
        }
    }

    #[test]
    fn residual_scales_with_phi(seed in any::<u64>(), c in -5.0f64..5.0) {
        let (model, v) = model_and_point(seed);
        let scaled = model.with_phi(model.phi() * c).unwrap();
        let h = model.residual_slice(&v).unwrap();
        let hc = scaled.residual_slice(&v).unwrap();
        for k in 0..model.n_eq() {
            prop_assert!(close(hc[k], c * h[k], h[k].abs() * c.abs()));
        }
    }

    #[test]
    fn jacobian_matches_finite_differences(seed in any::<u64>()) {
        let (model, v) = model_and_point(seed);
        let j = jacobian_slice(&model, &v);
        let fd = finite_difference_jacobian(&model, &v, 1e-7);
        let scale = 1.0 + j.amax();
        prop_assert!((&j - &fd).amax() <= 1e-5 * scale, "{}", (&j - &fd).amax());
    }

    #[test]
    fn composition_stacks_residuals(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, va) = model_and_point(s1);
        let (b, vb) = model_and_point(s2);
        let b = b.renamed(|n| format!("b_{n}")).unwrap();
        let c = compose(&[&a, &b], &[]).unwrap();
        prop_assert_eq!(c.n_eq(), a.n_eq() + b.n_eq());
        prop_assert_eq!(c.r(), a.r() + b.r());
        let mut v = vec![0.0; c.nv()];
        for (model, vals) in [(&a, &va), (&b, &vb)] {
            for (i, name) in model.partition().names().iter().enumerate() {
                v[c.partition().index_of(name).unwrap()] = vals[i];
            }
        }
        let h = c.residual_slice(&v).unwrap();
        let ha = a.residual_slice(&va).unwrap();
        let hb = b.residual_slice(&vb).unwrap();
        let stacked: Vec<f64> = ha.iter().chain(hb.iter()).copied().collect();
        for (x, y) in h.iter().zip(&stacked) {
            prop_assert!(close(*x, *y, y.abs()));
        }
    }

    #[test]
    fn link_equation_vanishes_when_signals_agree(seed in any::<u64>(), x in -2.0f64..2.0) {
        let (a, _) = model_and_point(seed);
        prop_assume!(a.partition().m() > 0 && a.partition().p() > 0);
        let from = a.partition().output_names()[0].clone();
        let to = a.partition().input_names()[0].clone();
        let c = compose(&[&a], &[(&from, &to)]).unwrap();
        let mut v = vec![0.5; c.nv()];
        v[c.partition().index_of(&from).unwrap()] = x;
        v[c.partition().index_of(&to).unwrap()] = x;
        let h = c.residual_slice(&v).unwrap();
        prop_assert!(h[c.n_eq() - 1].abs() <= 1e-12);
    }

    #[test]
    fn json_round_trip(seed in any::<u64>()) {
        let (model, v) = model_and_point(seed);
        let text = serde_json::to_string(&model).unwrap();
        let back: Cpn1Model = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(model.residual_slice(&v).unwrap(), back.residual_slice(&v).unwrap());
        prop_assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }

    #[test]
    fn full_tensor_agrees(seed in any::<u64>()) {
        let (model, v) = model_and_point(seed);
        let full = model.to_full_tensor().unwrap();
        let h = model.residual_slice(&v).unwrap();
        let ht = mlstab::contract_full(&full, &v).unwrap();
        prop_assert!((&h - &ht).amax() <= 1e-9 * (1.0 + h.amax()));
    }
}
