mod common;

use std::path::Path;

use common::golden::{
    dilation_parameter_mismatch, first_mismatch, rows_from_inventory, Golden, GOLDEN,
};
use ctseg::autodiff::{ConvOptions, Graph};
use ctseg::heads::{
    build_fc_head, build_mask_head, dilate_layers, LayerKind, MaskHeadNetwork, MaskHeadSpec,
};
use ctseg::nn::{Mode, Session};
use ctseg::Tensor;

#[test]
fn inventory_matches_golden_tables() {
    assert_eq!(first_mismatch(), None);
    assert_eq!(GOLDEN.len() + 2, MaskHeadSpec::preset_names().len());
}

#[test]
fn shipped_spec_files_equal_presets() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("specs");
    for name in MaskHeadSpec::preset_names() {
        let path = dir.join(format!("{name}.spec"));
        let loaded = MaskHeadSpec::load(&path).unwrap();
        let preset = MaskHeadSpec::preset(name).unwrap();
        assert_eq!(loaded, preset, "{name}");
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            preset.to_text(),
            "{name}"
        );
    }
}

#[test]
fn parameter_count_is_sum_of_layer_extents() {
    for name in ["resnet-12", "resnet-bottleneck-9", "hourglass-20", "fc-2"] {
        let spec = MaskHeadSpec::preset(name).unwrap().with_width_divisor(4);
        let net = build_mask_head::<f32>(&spec, 8, 16, 1).unwrap();
        let stored: usize = net
            .params
            .entries()
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum();
        assert_eq!(net.count_parameters(), stored, "{name}");
    }
}

#[test]
fn dilation_keeps_parameter_count() {
    assert_eq!(dilation_parameter_mismatch(), None);
}

#[test]
fn dilated_conv_impulse_taps() {
    let mut g = Graph::<f64>::new();
    let mut x = Tensor::zeros(&[1, 9, 9, 1]);
    x.data_mut()[4 * 9 + 4] = 1.0;
    let x = g.constant(x).unwrap();
    let w = g
        .constant(Tensor::new(&[3, 3, 1, 1], (1..=9).map(f64::from).collect()).unwrap())
        .unwrap();
    let opts = ConvOptions {
        dilation: 2,
        ..ConvOptions::default()
    };
    let y = g.conv2d(x, w, opts).unwrap();
    let out = g.value(y);
    for i in 0..9i64 {
        for j in 0..9i64 {
            let (dy, dx) = (i - 4, j - 4);
            let tap = [-2, 0, 2].contains(&dy) && [-2, 0, 2].contains(&dx);
            assert_eq!(
                out.data()[(i * 9 + j) as usize] != 0.0,
                tap,
                "offset ({dy}, {dx})"
            );
        }
    }
}

/// Marks the running statistics as populated so eval mode accepts them.
fn with_stats(mut net: MaskHeadNetwork<f64>) -> MaskHeadNetwork<f64> {
    let ids: Vec<_> = net
        .params
        .ids()
        .filter(|&id| net.params.entry(id).name.ends_with("/updates"))
        .collect();
    for id in ids {
        net.params.get_mut(id).data_mut()[0] = 1.0;
    }
    net
}

/// Bounding-box area of the output pixels that change when a single input
/// pixel is set. Fully dilated stacks only reach an even-offset lattice, so
/// the extent rather than the pixel count is what grows.
fn impulse_footprint(net: &MaskHeadNetwork<f64>, size: usize, channels: usize) -> usize {
    let run = |x: Tensor<f64>| {
        let mut s = Session::new(&net.params, Mode::Eval);
        let v = s.graph.constant(x).unwrap();
        let y = net.head.forward(&mut s, v).unwrap();
        s.graph.value(y).clone()
    };
    let zero = Tensor::zeros(&[1, size, size, channels]);
    let mut imp = zero.clone();
    let c = size / 2;
    for k in 0..channels {
        imp.data_mut()[(c * size + c) * channels + k] = 1.0;
    }
    let a = run(zero);
    let b = run(imp);
    let hit: Vec<(usize, usize)> = (0..size * size)
        .filter(|&i| (a.data()[i] - b.data()[i]).abs() > 1e-12)
        .map(|i| (i / size, i % size))
        .collect();
    let span = |f: fn(&(usize, usize)) -> usize| {
        hit.iter().map(f).max().unwrap() - hit.iter().map(f).min().unwrap() + 1
    };
    span(|p| p.0) * span(|p| p.1)
}

#[test]
fn dilation_enlarges_impulse_footprint() {
    for name in ["resnet-4", "resnet-bottleneck-6"] {
        let spec = MaskHeadSpec::preset(name).unwrap().with_width_divisor(8);
        let plain = with_stats(build_mask_head::<f64>(&spec, 2, 32, 3).unwrap());
        let all = spec.spatial_conv_count();
        let dil = with_stats(
            build_mask_head::<f64>(&dilate_layers(&spec, all).unwrap(), 2, 32, 3).unwrap(),
        );
        let (a, b) = (
            impulse_footprint(&plain, 32, 2),
            impulse_footprint(&dil, 32, 2),
        );
        let span = |d: usize| (2 * d * all + 1).pow(2);
        assert!(a <= span(1), "{name}: undilated footprint {a}");
        assert!(b > a, "{name}: dilated {b} vs plain {a}");
    }
}

/// Kernel weights only, biases and normalization excluded.
fn conv_weights<T: ctseg::Real>(net: &MaskHeadNetwork<T>) -> usize {
    net.layer_inventory()
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Conv | LayerKind::Projection))
        .map(|l| l.kernel * l.kernel * l.in_channels * l.out_channels)
        .sum()
}

/// Weights implied by a golden table for a residual head with 1×1 stem and
/// output conv plus the projections at channel changes.
fn golden_conv_weights(rows: Golden, cin: usize) -> usize {
    let mut total = cin * rows[0].2[0];
    let mut c = rows[0].2[0];
    for &(repeat, _, ch) in &rows[1..] {
        for _ in 0..repeat {
            let block_in = c;
            for (i, &o) in ch.iter().enumerate() {
                let k = if ch.len() == 3 && i != 1 { 1 } else { 3 };
                total += k * k * c * o;
                c = o;
            }
            if block_in != c {
                total += block_in * c;
            }
        }
    }
    total + c
}

#[test]
fn quarter_bottleneck_has_about_a_sixteenth_of_the_weights() {
    let cin = 64;
    for (full, quarter) in [
        ("resnet-bottleneck-6", "resnet-bottleneck-quarter-6"),
        ("resnet-bottleneck-12", "resnet-bottleneck-quarter-12"),
        ("resnet-bottleneck-21", "resnet-bottleneck-quarter-21"),
    ] {
        let golden = |n: &str| GOLDEN.iter().find(|(g, _)| *g == n).unwrap().1;
        let a = build_mask_head::<f32>(&MaskHeadSpec::preset(full).unwrap(), cin, 32, 0).unwrap();
        let b =
            build_mask_head::<f32>(&MaskHeadSpec::preset(quarter).unwrap(), cin, 32, 0).unwrap();
        assert_eq!(
            conv_weights(&a),
            golden_conv_weights(golden(full), cin),
            "{full}"
        );
        assert_eq!(
            conv_weights(&b),
            golden_conv_weights(golden(quarter), cin),
            "{quarter}"
        );
        let ratio = conv_weights(&b) as f64 / conv_weights(&a) as f64;
        assert!(
            (ratio * 16.0 - 1.0).abs() < 0.2,
            "{quarter}/{full}: {ratio}"
        );
    }
}

#[test]
fn fc_head_with_zero_last_layer_outputs_zero_logits() {
    let mut net = build_fc_head::<f64>(3, 32, 8, 4, 7).unwrap();
    let last: Vec<_> = net
        .params
        .ids()
        .filter(|&id| net.params.entry(id).name.starts_with("head/fc2"))
        .collect();
    assert_eq!(last.len(), 2);
    for id in last {
        net.params
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    let net = with_stats(net);
    let mut s = Session::new(&net.params, Mode::Eval);
    let x = s.graph.constant(Tensor::full(&[2, 8, 8, 4], 0.3)).unwrap();
    let y = net.head.forward(&mut s, x).unwrap();
    assert_eq!(s.graph.shape(y), &[2, 8, 8, 1]);
    assert!(s.graph.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn head_sizes_scale_with_crop() {
    let spec = MaskHeadSpec::preset("hourglass-20").unwrap();
    let net = build_mask_head::<f32>(&spec, 8, 16, 0).unwrap();
    let sizes: Vec<usize> = rows_from_inventory(&net).iter().map(|r| r.1).collect();
    assert_eq!(sizes, vec![16, 16, 8, 4, 16]);
    assert!(
        build_mask_head::<f32>(&MaskHeadSpec::preset("hourglass-52").unwrap(), 8, 16, 0).is_err()
    );
}
