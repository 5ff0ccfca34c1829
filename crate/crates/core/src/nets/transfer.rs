//! Moving encoder weights between pipeline stages.

use log::warn;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::arch::{check_name_set, EncoderConfig};
use super::weights::NetworkWeights;

/// Converts a three-channel first convolution into a single-channel one by
/// summing its kernel over the input-channel axis. Every other parameter is
/// left untouched.
pub fn adapt_input_layer(w: &NetworkWeights) -> Result<NetworkWeights> {
    if w.meta.input_channels == 1 {
        warn!("adapt_input_layer: weights are already single-channel, nothing to do");
        return Ok(w.clone());
    }
    let cfg = EncoderConfig::from_meta(&w.meta);
    let name = cfg.first_conv_name();
    let kernel = w
        .get(name)
        .ok_or_else(|| Error::Transfer(format!("first convolution `{name}` not found")))?;
    let s = kernel.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::Transfer(format!("`{name}` has shape {s:?}, expected (out, 3, k, k)")));
    }
    let mut out = w.clone();
    out.params.insert(name.to_string(), sum_input_channels(kernel));
    out.meta.input_channels = 1;
    Ok(out)
}

fn sum_input_channels(kernel: &Tensor<f32>) -> Tensor<f32> {
    let s = kernel.shape();
    let (o, c, kk) = (s[0], s[1], s[2] * s[3]);
    let src = kernel.data();
    let mut data = vec![0.0f32; o * kk];
    for oc in 0..o {
        for tap in 0..kk {
            let mut acc = 0.0f32;
            for ic in 0..c {
                acc += src[(oc * c + ic) * kk + tap];
            }
            data[oc * kk + tap] = acc;
        }
    }
    Tensor::from_vec(&[o, 1, s[2], s[3]], data)
}

/// Copies the encoder part of `src` into a network described by `dst`,
/// adapting the input layer when `src` is three-channel and `dst` is
/// single-channel. Heads and decoders never cross a stage boundary.
pub fn transfer_encoder_weights(src: &NetworkWeights, dst: &EncoderConfig) -> Result<NetworkWeights> {
    dst.validate()?;
    let src_cfg = EncoderConfig::from_meta(&src.meta);
    let compatible_arch = src_cfg.variant == dst.variant
        && (dst.variant != super::arch::EncoderVariant::Tiny || src_cfg.stage_widths == dst.stage_widths);
    if !compatible_arch {
        let diff = check_name_set(&src.subset("encoder"), &dst.param_specs(), "encoder");
        return Err(Error::Transfer(format!(
            "source encoder {} {:?} does not match destination {} {:?}: {}",
            src_cfg.variant,
            src_cfg.stage_widths,
            dst.variant,
            dst.stage_widths,
            diff.summary(10)
        )));
    }
    let mut out = NetworkWeights { params: src.subset("encoder"), meta: src.meta.clone() };
    match (src.meta.input_channels, dst.in_channels) {
        (a, b) if a == b => {}
        (3, 1) => out = adapt_input_layer(&out)?,
        (a, b) => {
            return Err(Error::Transfer(format!("cannot transfer a {a}-channel encoder into a {b}-channel network")))
        }
    }
    let diff = check_name_set(&out.params, &dst.param_specs(), "encoder");
    if !diff.is_empty() {
        return Err(Error::Transfer(format!("encoder parameters incompatible: {}", diff.summary(10))));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::conv2d_forward;
    use crate::nets::arch::{build_encoder, build_unet, DecoderConfig};
    use crate::nets::weights::params_bit_equal;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(in_channels: usize) -> EncoderConfig {
        EncoderConfig::tiny(vec![4, 8, 16], in_channels)
    }

    #[test]
    fn depthwise_sum_per_tap() {
        let k = Tensor::from_vec(&[1, 3, 1, 2], vec![1.0, 2.0, 10.0, 20.0, 100.0, 200.0]);
        assert_eq!(sum_input_channels(&k).data(), &[111.0, 222.0]);
    }

    #[test]
    fn adapted_layer_matches_replicated_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let src = build_encoder(&tiny(3), 0, &mut rng).unwrap();
        let adapted = adapt_input_layer(&src).unwrap();
        let name = tiny(3).first_conv_name();
        assert_eq!(adapted.get(name).unwrap().shape(), &[4, 1, 3, 3]);
        assert_eq!(adapted.meta.input_channels, 1);
        for _ in 0..5 {
            let x: Vec<f32> = (0..64).map(|_| rng.random()).collect();
            let gray = Tensor::from_vec(&[1, 1, 8, 8], x.clone());
            let rgb = Tensor::from_vec(&[1, 3, 8, 8], [x.clone(), x.clone(), x].concat());
            let a = conv2d_forward(&gray, adapted.get(name).unwrap(), 2, 1);
            let b = conv2d_forward(&rgb, src.get(name).unwrap(), 2, 1);
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() <= 1e-5 * q.abs().max(1.0));
            }
        }
        let mut rest_a = adapted.params.clone();
        let mut rest_b = src.params.clone();
        rest_a.remove(name);
        rest_b.remove(name);
        assert!(params_bit_equal(&rest_a, &rest_b, ""));
    }

    #[test]
    fn adapt_on_single_channel_is_noop() {
        let src = build_encoder(&tiny(1), 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(adapt_input_layer(&src).unwrap(), src);
    }

    #[test]
    fn transfer_copies_encoder_and_drops_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = build_encoder(&tiny(1), 0, &mut rng).unwrap();
        let unet = build_unet(&enc, &DecoderConfig::default_for(&tiny(1), 4), &mut rng).unwrap();
        let t = transfer_encoder_weights(&unet, &tiny(1)).unwrap();
        assert!(params_bit_equal(&t.params, &enc.params, "encoder."));
        assert!(t.names().all(|n| n.starts_with("encoder.")));
        // idempotent on single-channel sources
        assert_eq!(transfer_encoder_weights(&t, &tiny(1)).unwrap(), t);
    }

    #[test]
    fn transfer_three_to_one_adapts_first_layer() {
        let src = build_encoder(&tiny(3), 0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let t = transfer_encoder_weights(&src, &tiny(1)).unwrap();
        assert_eq!(t, adapt_input_layer(&src).unwrap());
    }

    #[test]
    fn variant_mismatch_is_a_transfer_error() {
        let src = build_encoder(&tiny(1), 0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let err = transfer_encoder_weights(&src, &EncoderConfig::resnet50(1)).unwrap_err();
        match err {
            Error::Transfer(msg) => assert!(msg.contains("missing") && msg.contains("encoder.layer1")),
            e => panic!("unexpected {e:?}"),
        }
        let src_r = build_encoder(&EncoderConfig::resnet50(3), 0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(matches!(transfer_encoder_weights(&src_r, &tiny(1)), Err(Error::Transfer(_))));
    }
}
