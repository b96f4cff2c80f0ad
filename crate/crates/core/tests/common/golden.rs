use std::collections::BTreeMap;

use ctseg::heads::{LayerKind, MaskHeadNetwork};

/// `(repeat, size, channels)` per table row, transcribed from the published
/// architecture tables without going through the preset code.
pub type Golden = &'static [(usize, usize, &'static [usize])];

const BASIC: &[usize] = &[128, 128];
const BOT: &[usize] = &[128, 512, 128];
const BOT2: &[usize] = &[192, 384, 192];
const Q1: &[usize] = &[32, 128, 32];
const Q2: &[usize] = &[48, 192, 48];
const Q3: &[usize] = &[64, 256, 64];

pub const GOLDEN: &[(&str, Golden)] = &[
    ("resnet-4", &[(1, 32, &[64]), (2, 32, BASIC)]),
    ("resnet-8", &[(1, 32, &[64]), (4, 32, BASIC)]),
    ("resnet-12", &[(1, 32, &[64]), (6, 32, BASIC)]),
    ("resnet-16", &[(1, 32, &[64]), (8, 32, BASIC)]),
    (
        "resnet-20",
        &[(1, 32, &[64]), (8, 32, BASIC), (2, 32, BASIC)],
    ),
    ("resnet-bottleneck-6", &[(1, 32, &[64]), (2, 32, BOT)]),
    ("resnet-bottleneck-9", &[(1, 32, &[64]), (3, 32, BOT)]),
    ("resnet-bottleneck-12", &[(1, 32, &[64]), (4, 32, BOT)]),
    ("resnet-bottleneck-15", &[(1, 32, &[64]), (5, 32, BOT)]),
    (
        "resnet-bottleneck-21",
        &[(1, 32, &[64]), (6, 32, BOT), (1, 32, BOT2)],
    ),
    (
        "resnet-bottleneck-quarter-6",
        &[(1, 32, &[16]), (2, 32, Q1)],
    ),
    (
        "resnet-bottleneck-quarter-12",
        &[(1, 32, &[16]), (4, 32, Q1)],
    ),
    (
        "resnet-bottleneck-quarter-21",
        &[(1, 32, &[16]), (6, 32, Q1), (1, 32, Q2)],
    ),
    (
        "resnet-bottleneck-quarter-30",
        &[(1, 32, &[16]), (5, 32, Q1), (5, 32, Q2)],
    ),
    (
        "resnet-bottleneck-quarter-51",
        &[(1, 32, &[16]), (6, 32, Q1), (8, 32, Q2), (3, 32, Q3)],
    ),
    (
        "hourglass-10",
        &[
            (1, 32, &[64]),
            (3, 32, BASIC),
            (1, 16, BASIC),
            (1, 32, &[128]),
        ],
    ),
    (
        "hourglass-20",
        &[
            (1, 32, &[64]),
            (3, 32, BASIC),
            (4, 16, BASIC),
            (2, 8, &[192, 192]),
            (1, 32, &[128]),
        ],
    ),
    (
        "hourglass-32",
        &[
            (1, 32, &[64]),
            (5, 32, BASIC),
            (4, 16, BASIC),
            (4, 8, &[192, 192]),
            (2, 4, &[192, 192]),
            (1, 32, &[128]),
        ],
    ),
    (
        "hourglass-52",
        &[
            (1, 32, &[64]),
            (5, 32, BASIC),
            (4, 16, BASIC),
            (4, 8, &[192, 192]),
            (4, 4, &[192, 192]),
            (4, 2, &[192, 192]),
            (4, 1, &[256, 256]),
            (1, 32, &[128]),
        ],
    ),
    (
        "hourglass-100",
        &[
            (1, 32, &[64]),
            (9, 32, BASIC),
            (8, 16, BASIC),
            (8, 8, &[192, 192]),
            (8, 4, &[192, 192]),
            (8, 2, &[192, 192]),
            (8, 1, &[256, 256]),
            (1, 32, &[128]),
        ],
    ),
];

/// Table rows recovered from the built network's conv layers.
pub fn rows_from_inventory<T: ctseg::Real>(
    net: &MaskHeadNetwork<T>,
) -> Vec<(usize, usize, Vec<usize>)> {
    let mut blocks: BTreeMap<usize, BTreeMap<usize, (usize, Vec<usize>)>> = BTreeMap::new();
    for l in net
        .layer_inventory()
        .iter()
        .filter(|l| l.kind == LayerKind::Conv)
    {
        let (Some(row), Some(block)) = (l.row, l.block) else {
            continue;
        };
        let e = blocks
            .entry(row)
            .or_default()
            .entry(block)
            .or_insert((l.size, Vec::new()));
        assert_eq!(e.0, l.size, "row {row} block {block} mixes sizes");
        e.1.push(l.out_channels);
    }
    blocks
        .into_iter()
        .map(|(row, bs)| {
            let first = bs.values().next().unwrap().clone();
            for (b, v) in &bs {
                assert_eq!(*v, first, "row {row} block {b} differs from block 0");
            }
            (bs.len(), first.0, first.1)
        })
        .collect()
}

/// `None` when every golden table matches its built preset, else the first
/// mismatch.
pub fn first_mismatch() -> Option<String> {
    for (name, golden) in GOLDEN {
        let spec = ctseg::heads::MaskHeadSpec::preset(name).ok()?;
        let net = ctseg::heads::build_mask_head::<f32>(&spec, 8, 32, 0).ok()?;
        let want: Vec<(usize, usize, Vec<usize>)> = golden
            .iter()
            .map(|(r, s, c)| (*r, *s, c.to_vec()))
            .collect();
        let got = rows_from_inventory(&net);
        if got != want {
            return Some(format!("{name}: {got:?}"));
        }
    }
    None
}

/// `None` when dilating any number of 3×3 convolutions of every conv preset
/// leaves the parameter count unchanged.
pub fn dilation_parameter_mismatch() -> Option<String> {
    use ctseg::heads::{build_mask_head, dilate_layers, MaskHeadSpec};
    for name in MaskHeadSpec::preset_names()
        .iter()
        .filter(|n| !n.starts_with("fc"))
    {
        let spec = MaskHeadSpec::preset(name).ok()?.with_width_divisor(8);
        let base = build_mask_head::<f32>(&spec, 4, 32, 2)
            .ok()?
            .count_parameters();
        let n = spec.spatial_conv_count();
        for k in [1, n / 2, n] {
            let d = build_mask_head::<f32>(&dilate_layers(&spec, k).ok()?, 4, 32, 2).ok()?;
            let dilated = d
                .layer_inventory()
                .iter()
                .filter(|l| l.dilation == 2)
                .count();
            if d.count_parameters() != base || dilated != k {
                return Some(format!(
                    "{name} with {k} dilated: {} params, {dilated} dilated",
                    d.count_parameters()
                ));
            }
        }
    }
    None
}
