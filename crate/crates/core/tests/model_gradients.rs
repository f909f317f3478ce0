//! Whole-model backward pass against central finite differences in f64, for
//! every architecture and variant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use condseg::conditioning::ConditioningVector;
use condseg::networks::{Architecture, BackboneConfig, SegmentationModel, Variant};
use condseg::nn::ParamKind;
use condseg::tensor::Tensor;

fn objective(model: &SegmentationModel<f64>, x: &Tensor<f64>, z: &[ConditioningVector], r: &Tensor<f64>) -> f64 {
    let (y, _) = model.forward_train(x, z).unwrap();
    y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
}

fn check(arch: Architecture, variant: Variant) {
    let mut rng = ChaCha8Rng::seed_from_u64(variant as u64 * 7 + arch as u64);
    let bb = BackboneConfig {
        base_channels: 2,
        depth: 2,
        ..Default::default()
    };
    let mut model = SegmentationModel::<f64>::new(bb, variant.fusion(arch), 3).unwrap();
    // move FiLM and embedding weights off their zero initialization so that
    // every path carries gradient
    for e in model.store_mut().entries_mut() {
        if e.kind == ParamKind::Learnable && e.value.iter().all(|v| *v == 0.0) {
            e.value.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
    let (n, h, w) = (3, 8, 8);
    let x = Tensor::from_vec(n, 1, h, w, (0..n * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .unwrap();
    let z: Vec<ConditioningVector> = (0..n)
        .map(|_| ConditioningVector([rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.3)]))
        .collect();
    let r = Tensor::from_vec(n, 4, h, w, (0..n * 4 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap();

    let (_, tape) = model.forward_train(&x, &z).unwrap();
    let grads = model.backward(&tape, &r);

    let eps = 1e-6;
    let mut checked = 0;
    let mut cond_nonzero = false;
    let entries: Vec<(usize, String, usize)> = model
        .store()
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind == ParamKind::Learnable)
        .map(|(i, e)| (i, e.name.clone(), e.value.len()))
        .collect();
    for (i, name, len) in entries {
        let conditioning = name.starts_with("film.") || name.starts_with("embedding.");
        let picks: Vec<usize> = if conditioning || len <= 4 {
            (0..len).step_by((len / 12).max(1)).collect()
        } else {
            (0..4).map(|_| rng.gen_range(0..len)).collect()
        };
        for j in picks {
            let orig = model.store().entries()[i].value[j];
            model.store_mut().entries_mut()[i].value[j] = orig + eps;
            let up = objective(&model, &x, &z, &r);
            model.store_mut().entries_mut()[i].value[j] = orig - eps;
            let dn = objective(&model, &x, &z, &r);
            model.store_mut().entries_mut()[i].value[j] = orig;
            let fd = (up - dn) / (2.0 * eps);
            let g = grads.values[i][j];
            let tol = 1e-6 + 1e-4 * fd.abs().max(g.abs());
            assert!(
                (fd - g).abs() <= tol,
                "{arch}+{variant} {name}[{j}]: analytic {g}, numeric {fd}"
            );
            cond_nonzero |= conditioning && g != 0.0;
            checked += 1;
        }
    }
    assert!(checked > 0);
    if variant != Variant::Baseline && variant != Variant::ConcatRawEarly
        && variant != Variant::ConcatRawMiddle && variant != Variant::ConcatRawLate
    {
        assert!(cond_nonzero, "{arch}+{variant}: conditioning parameters received no gradient");
    }
}

#[test]
fn unet_gradients_match_finite_differences() {
    for v in Variant::ALL {
        check(Architecture::Unet, v);
    }
}

#[test]
fn encoder_decoder_gradients_match_finite_differences() {
    for v in Variant::ALL {
        check(Architecture::EncoderDecoder, v);
    }
}

#[test]
fn larger_inputs_and_single_precision_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let bb = BackboneConfig {
        base_channels: 4,
        depth: 3,
        ..Default::default()
    };
    let model = SegmentationModel::<f64>::new(bb, Variant::Baseline.fusion(Architecture::Unet), 5).unwrap();
    let (n, h, w) = (2, 64, 64);
    let x = Tensor::from_vec(n, 1, h, w, (0..n * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .unwrap();
    let z = vec![ConditioningVector([1.0, 2.0, 3.0]); n];
    let r = Tensor::from_vec(n, 4, h, w, (0..n * 4 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .unwrap();
    let (_, tape) = model.forward_train(&x, &z).unwrap();
    let g64 = model.backward(&tape, &r);

    let m32 = model.cast::<f32>();
    let (_, tape32) = m32.forward_train(&x.cast(), &z).unwrap();
    let g32 = m32.backward(&tape32, &r.cast());
    for (i, e) in model.store().entries().iter().enumerate() {
        if e.kind != ParamKind::Learnable {
            continue;
        }
        let norm: f64 = g64.values[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: f64 = g64.values[i]
            .iter()
            .zip(&g32.values[i])
            .map(|(a, &b)| (a - b as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-2 * norm + 1e-6, "{}: f32 deviates by {diff} (norm {norm})", e.name);
    }

    let mut model = model;
    let eps = 1e-6;
    for e in 0..model.store().len() {
        if model.store().entries()[e].kind != ParamKind::Learnable {
            continue;
        }
        let len = model.store().entries()[e].value.len();
        let j = rng.gen_range(0..len);
        let orig = model.store().entries()[e].value[j];
        model.store_mut().entries_mut()[e].value[j] = orig + eps;
        let up = objective(&model, &x, &z, &r);
        model.store_mut().entries_mut()[e].value[j] = orig - eps;
        let dn = objective(&model, &x, &z, &r);
        model.store_mut().entries_mut()[e].value[j] = orig;
        let fd = (up - dn) / (2.0 * eps);
        let g = g64.values[e][j];
        let name = &model.store().entries()[e].name;
        assert!((fd - g).abs() <= 1e-5 + 1e-4 * fd.abs().max(g.abs()), "{name}[{j}]: {g} vs {fd}");
    }
}
