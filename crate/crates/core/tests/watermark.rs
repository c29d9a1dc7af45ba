//! Weight-regularizer watermark: extraction, embedding, keys, and the audit.

mod common;

use common::*;
use forge_autodiff::Tape;
use forge_core::data::subset;
use forge_core::harness::forged_bits;
use forge_core::model::{conv_name, Arch, Model, ModelSpec, SiteSelect};
use forge_core::train::LoopConfig;
use forge_core::watermark::*;
use rand::Rng;

fn spec() -> ModelSpec {
    ModelSpec::new(Arch::ToyAlexNet, [3, 16, 16], 10, 4, &SiteSelect::None).unwrap()
}

#[test]
fn extraction_matches_direct_projection() {
    for case in 0..100u64 {
        let mut r = rng(case);
        let (cout, cin, bits) = (r.gen_range(1..6), r.gen_range(1..4), r.gen_range(1..20));
        let w = uniform(&[cout, cin, 3, 3], &mut r);
        let key = WatermarkKey { x: uniform(&[bits, cin * 9], &mut r), bits: vec![0; bits], layer: 0 };
        let d = cin * 9;
        let want: Vec<u8> = (0..bits)
            .map(|b| {
                let mut dot = 0.0f64;
                for j in 0..d {
                    let mean: f64 = (0..cout).map(|o| w.data()[o * d + j] as f64).sum::<f64>() / cout as f64;
                    dot += key.x.data()[b * d + j] as f64 * mean;
                }
                u8::from(dot > 0.0)
            })
            .collect();
        assert_eq!(extract_bits(&w, &key).unwrap(), want, "case {case}");
    }
}

#[test]
fn watermark_loss_gradient_matches_finite_differences() {
    for case in 0..20u64 {
        let mut r = rng(50 + case);
        let (cout, cin) = (r.gen_range(1..5), r.gen_range(1..3));
        let key = WatermarkKey {
            x: uniform(&[6, cin * 9], &mut r),
            bits: (0..6).map(|_| r.gen_range(0..2)).collect(),
            layer: 0,
        };
        let w = uniform(&[cout, cin, 3, 3], &mut r);
        let err = check_grads(&[w], &|t: &mut Tape, v| watermark_loss(t, v[0], &key, &key.bits).unwrap());
        assert!(err <= 1e-3, "case {case}: {err:.2e}");
    }
}

#[test]
fn key_round_trip_and_rejection() {
    let key = WatermarkKey::generate(&spec(), 2, 64, 3).unwrap();
    let bytes = key.to_bytes();
    let back = WatermarkKey::from_bytes(&bytes).unwrap();
    assert_eq!(back, key);
    assert_eq!(back.to_bytes(), bytes);
    assert!(WatermarkKey::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut wrong_bits = key.clone();
    wrong_bits.bits.pop();
    assert!(WatermarkKey::from_bytes(&wrong_bits.to_bytes()).is_err());
    let mut two = key.clone();
    two.bits[0] = 2;
    assert!(WatermarkKey::from_bytes(&two.to_bytes()).is_err());
    assert!(WatermarkKey::generate(&spec(), 9, 64, 3).is_err());
    assert!(WatermarkKey::generate(&spec(), 0, 0, 3).is_err());
}

#[test]
fn audit_detects_any_change_outside_the_target() {
    let m = Model::build(&spec(), 0).unwrap();
    let target = conv_name(2);
    assert!(frozen_layer_audit(&m, &m.clone(), &[&target]).is_ok());

    let mut t = m.clone();
    let mut w = t.param(&target).unwrap().clone();
    w.data_mut()[0] += 1.0;
    t.set_param(&target, w).unwrap();
    assert!(frozen_layer_audit(&m, &t, &[&target]).is_ok());

    for name in ["conv1.weight", "fc.bias", "norm3.gamma"] {
        let mut other = m.clone();
        let mut v = other.param(name).unwrap().clone();
        let bits = v.data()[0].to_bits() ^ 1;
        v.data_mut()[0] = f32::from_bits(bits);
        other.set_param(name, v).unwrap();
        assert!(frozen_layer_audit(&m, &other, &[&target]).is_err(), "{name}");
    }
    let mut stats = m.clone();
    stats.stats.get_mut("norm0").unwrap().var[0] += 1e-3;
    assert!(frozen_layer_audit(&m, &stats, &[&target]).is_err());
}

#[test]
fn small_embed_and_forge_run_end_to_end() {
    let (train, test) = tiny_data();
    let s = ModelSpec::new(Arch::ToyAlexNet, train.dims, 10, 4, &SiteSelect::None).unwrap();
    let key = WatermarkKey::generate(&s, 2, 16, 0).unwrap();
    let cfg = LoopConfig { epochs: 6, ..LoopConfig::default() };
    let (model, history) = uchida_embed(&s, &train, &test, &key, 10.0, &cfg, 0).unwrap();
    assert_eq!(history.len(), 6);
    assert_eq!(uchida_extract(&model, &key).unwrap(), key.bits);

    let new_bits = forged_bits(&key.bits, 0);
    assert_ne!(new_bits, key.bits);
    let attack = subset(&train, 0.5, 0, true).unwrap();
    let wm_cfg = WmAttackConfig { optim: LoopConfig { epochs: 3, ..WmAttackConfig::default().optim }, ..WmAttackConfig::default() };
    let ck = model.save_checkpoint(0, 3);
    let (forged, report) = cerb_attack_watermark(&ck, &s, &attack, &test, &key, &new_bits, &wm_cfg).unwrap();
    assert!(report.audit_passed);
    assert_eq!(uchida_extract(&forged, &key).unwrap().len(), 16);
    assert!(frozen_layer_audit(&model, &forged, &[&conv_name(2)]).is_ok());
    assert!(cerb_attack_watermark(&ck, &s, &attack, &test, &key, &key.bits, &wm_cfg).is_err());
    assert!(cerb_attack_watermark(&ck, &s, &test, &test, &key, &new_bits, &wm_cfg).is_err());
}
