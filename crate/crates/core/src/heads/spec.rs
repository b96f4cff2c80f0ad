use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Reference crop size the block tables are written against.
pub const TABLE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    ResnetBasic,
    ResnetBottleneck,
    ResnetBottleneckQuarter,
    Hourglass,
    FullyConnected,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::ResnetBasic => "resnet_basic",
            Family::ResnetBottleneck => "resnet_bottleneck",
            Family::ResnetBottleneckQuarter => "resnet_bottleneck_quarter",
            Family::Hourglass => "hourglass",
            Family::FullyConnected => "fully_connected",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        [
            Family::ResnetBasic,
            Family::ResnetBottleneck,
            Family::ResnetBottleneckQuarter,
            Family::Hourglass,
            Family::FullyConnected,
        ]
        .into_iter()
        .find(|f| f.name() == s)
    }

    pub fn is_resnet(self) -> bool {
        matches!(
            self,
            Family::ResnetBasic | Family::ResnetBottleneck | Family::ResnetBottleneckQuarter
        )
    }

    /// Convolutions per residual block.
    pub fn block_len(self) -> usize {
        match self {
            Family::ResnetBottleneck | Family::ResnetBottleneckQuarter => 3,
            _ => 2,
        }
    }
}

/// One table row: `repeat` identical blocks at `size` (relative to a
/// 32×32 crop) whose convolutions emit `channels` in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockRow {
    pub repeat: usize,
    pub size: usize,
    pub channels: Vec<usize>,
}

impl BlockRow {
    pub fn new(repeat: usize, size: usize, channels: &[usize]) -> Self {
        BlockRow {
            repeat,
            size,
            channels: channels.to_vec(),
        }
    }
}

/// Declarative mask-head descriptor.
///
/// For convolutional families `rows[0]` is the initial conv. For hourglass
/// heads the last row is the final full-resolution conv; every row between
/// holds residual blocks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskHeadSpec {
    pub family: Family,
    pub named_depth: usize,
    pub rows: Vec<BlockRow>,
    pub no_long_range_skips: bool,
    pub no_encoder_decoder: bool,
    pub dilated_layer_count: usize,
    /// Every channel count is divided by this (rounded up) at build time.
    pub width_divisor: usize,
    /// Hidden width of fully connected heads; unused otherwise.
    pub hidden_width: usize,
}

const PRESET_NAMES: &[&str] = &[
    "resnet-4",
    "resnet-8",
    "resnet-12",
    "resnet-16",
    "resnet-20",
    "resnet-bottleneck-6",
    "resnet-bottleneck-9",
    "resnet-bottleneck-12",
    "resnet-bottleneck-15",
    "resnet-bottleneck-21",
    "resnet-bottleneck-quarter-6",
    "resnet-bottleneck-quarter-12",
    "resnet-bottleneck-quarter-21",
    "resnet-bottleneck-quarter-30",
    "resnet-bottleneck-quarter-51",
    "hourglass-10",
    "hourglass-20",
    "hourglass-32",
    "hourglass-52",
    "hourglass-100",
    "fc-2",
    "fc-4",
];

fn conv_spec(family: Family, depth: usize, rows: Vec<BlockRow>) -> MaskHeadSpec {
    MaskHeadSpec {
        family,
        named_depth: depth,
        rows,
        no_long_range_skips: false,
        no_encoder_decoder: false,
        dilated_layer_count: 0,
        width_divisor: 1,
        hidden_width: 0,
    }
}

fn resnet(depth: usize, blocks: &[usize]) -> MaskHeadSpec {
    let mut rows = vec![BlockRow::new(1, 32, &[64])];
    rows.extend(blocks.iter().map(|&r| BlockRow::new(r, 32, &[128, 128])));
    conv_spec(Family::ResnetBasic, depth, rows)
}

fn bottleneck(
    family: Family,
    depth: usize,
    stem: usize,
    blocks: &[(usize, [usize; 3])],
) -> MaskHeadSpec {
    let mut rows = vec![BlockRow::new(1, 32, &[stem])];
    rows.extend(blocks.iter().map(|(r, ch)| BlockRow::new(*r, 32, ch)));
    conv_spec(family, depth, rows)
}

fn hourglass(depth: usize, blocks: &[(usize, usize, usize)]) -> MaskHeadSpec {
    let mut rows = vec![BlockRow::new(1, 32, &[64])];
    rows.extend(blocks.iter().map(|&(r, s, c)| BlockRow::new(r, s, &[c, c])));
    rows.push(BlockRow::new(1, 32, &[128]));
    conv_spec(Family::Hourglass, depth, rows)
}

impl MaskHeadSpec {
    pub fn preset_names() -> &'static [&'static str] {
        PRESET_NAMES
    }

    /// Architectures of the published block tables, by name.
    pub fn preset(name: &str) -> Result<MaskHeadSpec> {
        use Family::*;
        const B: [usize; 3] = [128, 512, 128];
        const B2: [usize; 3] = [192, 384, 192];
        const Q: [usize; 3] = [32, 128, 32];
        const Q2: [usize; 3] = [48, 192, 48];
        const Q3: [usize; 3] = [64, 256, 64];
        let spec = match name {
            "resnet-4" => resnet(4, &[2]),
            "resnet-8" => resnet(8, &[4]),
            "resnet-12" => resnet(12, &[6]),
            "resnet-16" => resnet(16, &[8]),
            "resnet-20" => resnet(20, &[8, 2]),
            "resnet-bottleneck-6" => bottleneck(ResnetBottleneck, 6, 64, &[(2, B)]),
            "resnet-bottleneck-9" => bottleneck(ResnetBottleneck, 9, 64, &[(3, B)]),
            "resnet-bottleneck-12" => bottleneck(ResnetBottleneck, 12, 64, &[(4, B)]),
            "resnet-bottleneck-15" => bottleneck(ResnetBottleneck, 15, 64, &[(5, B)]),
            "resnet-bottleneck-21" => bottleneck(ResnetBottleneck, 21, 64, &[(6, B), (1, B2)]),
            "resnet-bottleneck-quarter-6" => bottleneck(ResnetBottleneckQuarter, 6, 16, &[(2, Q)]),
            "resnet-bottleneck-quarter-12" => {
                bottleneck(ResnetBottleneckQuarter, 12, 16, &[(4, Q)])
            }
            "resnet-bottleneck-quarter-21" => {
                bottleneck(ResnetBottleneckQuarter, 21, 16, &[(6, Q), (1, Q2)])
            }
            "resnet-bottleneck-quarter-30" => {
                bottleneck(ResnetBottleneckQuarter, 30, 16, &[(5, Q), (5, Q2)])
            }
            "resnet-bottleneck-quarter-51" => {
                bottleneck(ResnetBottleneckQuarter, 51, 16, &[(6, Q), (8, Q2), (3, Q3)])
            }
            "hourglass-10" => hourglass(10, &[(3, 32, 128), (1, 16, 128)]),
            "hourglass-20" => hourglass(20, &[(3, 32, 128), (4, 16, 128), (2, 8, 192)]),
            "hourglass-32" => {
                hourglass(32, &[(5, 32, 128), (4, 16, 128), (4, 8, 192), (2, 4, 192)])
            }
            "hourglass-52" => hourglass(
                52,
                &[
                    (5, 32, 128),
                    (4, 16, 128),
                    (4, 8, 192),
                    (4, 4, 192),
                    (4, 2, 192),
                    (4, 1, 256),
                ],
            ),
            "hourglass-100" => hourglass(
                100,
                &[
                    (9, 32, 128),
                    (8, 16, 128),
                    (8, 8, 192),
                    (8, 4, 192),
                    (8, 2, 192),
                    (8, 1, 256),
                ],
            ),
            "fc-2" => MaskHeadSpec::fully_connected(2, 256),
            "fc-4" => MaskHeadSpec::fully_connected(4, 256),
            other => {
                return Err(Error::InvalidSpec(format!(
                    "unknown mask head '{other}'; known: {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Ok(spec)
    }

    pub fn fully_connected(layers: usize, hidden_width: usize) -> MaskHeadSpec {
        MaskHeadSpec {
            family: Family::FullyConnected,
            named_depth: layers,
            rows: Vec::new(),
            no_long_range_skips: false,
            no_encoder_decoder: false,
            dilated_layer_count: 0,
            width_divisor: 1,
            hidden_width,
        }
    }

    /// Indices of the rows holding residual blocks.
    pub fn block_rows(&self) -> std::ops::Range<usize> {
        match self.family {
            Family::Hourglass => 1..self.rows.len().saturating_sub(1),
            Family::FullyConnected => 0..0,
            _ => 1..self.rows.len(),
        }
    }

    /// Number of 3×3 convolutions, the layers eligible for dilation.
    pub fn spatial_conv_count(&self) -> usize {
        let blocks: usize = self.rows[self.block_rows()].iter().map(|r| r.repeat).sum();
        match self.family {
            Family::ResnetBasic => 2 * blocks,
            Family::ResnetBottleneck | Family::ResnetBottleneckQuarter => blocks,
            Family::Hourglass => 2 * blocks + 2,
            Family::FullyConnected => 0,
        }
    }

    /// Convolutions listed by the table rows (the output conv excluded).
    pub fn table_conv_count(&self) -> usize {
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if self.block_rows().contains(&i) {
                    r.repeat * r.channels.len()
                } else {
                    r.repeat
                }
            })
            .sum()
    }

    /// Deepest downsampling factor relative to the table size.
    pub fn downsampling_factor(&self) -> usize {
        if self.family != Family::Hourglass {
            return 1;
        }
        self.rows
            .iter()
            .map(|r| TABLE_SIZE / r.size)
            .max()
            .unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.width_divisor == 0 {
            return bad("width_divisor must be positive".into());
        }
        if self.family == Family::FullyConnected {
            if self.named_depth < 1 || self.hidden_width == 0 {
                return bad(format!(
                    "fully connected head needs >=1 layer and a hidden width, got {} and {}",
                    self.named_depth, self.hidden_width
                ));
            }
            if !self.rows.is_empty() || self.dilated_layer_count != 0 {
                return bad("fully connected heads take no block rows or dilation".into());
            }
            return Ok(());
        }
        let min_rows = if self.family == Family::Hourglass {
            3
        } else {
            2
        };
        if self.rows.len() < min_rows {
            return bad(format!(
                "{} needs at least {min_rows} rows",
                self.family.name()
            ));
        }
        for (i, r) in self.rows.iter().enumerate() {
            let want = if self.block_rows().contains(&i) {
                self.family.block_len()
            } else {
                1
            };
            if r.repeat == 0 || r.channels.len() != want || r.channels.contains(&0) {
                return bad(format!("row {i}: {r:?} (expected {want} channel entries)"));
            }
            if !self.block_rows().contains(&i) && r.repeat != 1 {
                return bad(format!("row {i}: single-conv rows repeat once"));
            }
            if r.size == 0
                || r.size > TABLE_SIZE
                || TABLE_SIZE % r.size != 0
                || !r.size.is_power_of_two()
            {
                return bad(format!(
                    "row {i}: size {} is not a power-of-two divisor of {TABLE_SIZE}",
                    r.size
                ));
            }
        }
        let sizes: Vec<usize> = self.rows.iter().map(|r| r.size).collect();
        if self.family.is_resnet() || self.no_encoder_decoder {
            if sizes.iter().any(|&s| s != TABLE_SIZE) {
                return bad(format!("every row must sit at {TABLE_SIZE}, got {sizes:?}"));
            }
        } else {
            let blocks = &sizes[1..sizes.len() - 1];
            let descending = blocks.windows(2).all(|w| w[1] * 2 == w[0]);
            if sizes[0] != TABLE_SIZE
                || *sizes.last().unwrap() != TABLE_SIZE
                || blocks[0] != TABLE_SIZE
                || !descending
            {
                return bad(format!(
                    "hourglass sizes must halve row by row from {TABLE_SIZE}: {sizes:?}"
                ));
            }
        }
        if self.family.is_resnet() && (self.no_encoder_decoder || self.no_long_range_skips) {
            return bad("encoder-decoder ablations only apply to hourglass heads".into());
        }
        if self.dilated_layer_count > self.spatial_conv_count() {
            return bad(format!(
                "{} dilated layers requested, only {} 3x3 convolutions",
                self.dilated_layer_count,
                self.spatial_conv_count()
            ));
        }
        Ok(())
    }

    /// Channel count after applying the width divisor.
    pub fn scaled_channels(&self, c: usize) -> usize {
        c.div_ceil(self.width_divisor)
    }

    pub fn with_width_divisor(mut self, d: usize) -> Self {
        self.width_divisor = d;
        self
    }

    /// Long-range skip ablation.
    pub fn without_long_range_skips(mut self) -> Self {
        self.no_long_range_skips = true;
        self
    }

    /// Encoder-decoder ablation: every row moves to full resolution.
    pub fn without_encoder_decoder(mut self) -> Self {
        self.no_encoder_decoder = true;
        for r in &mut self.rows {
            r.size = TABLE_SIZE;
        }
        self
    }

    pub fn label(&self) -> String {
        let mut s = format!("{}-{}", self.family.name(), self.named_depth);
        if self.no_long_range_skips {
            s.push_str("-nolrs");
        }
        if self.no_encoder_decoder {
            s.push_str("-noed");
        }
        if self.dilated_layer_count > 0 {
            let _ = write!(s, "-dil{}", self.dilated_layer_count);
        }
        if self.width_divisor > 1 {
            let _ = write!(s, "-w{}", self.width_divisor);
        }
        s
    }

    /// Plain-text form, one `row` line per block-table entry.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "family {}", self.family.name());
        let _ = writeln!(s, "depth {}", self.named_depth);
        let _ = writeln!(
            s,
            "no_long_range_skips {}",
            u8::from(self.no_long_range_skips)
        );
        let _ = writeln!(
            s,
            "no_encoder_decoder {}",
            u8::from(self.no_encoder_decoder)
        );
        let _ = writeln!(s, "dilated_layers {}", self.dilated_layer_count);
        let _ = writeln!(s, "width_divisor {}", self.width_divisor);
        if self.family == Family::FullyConnected {
            let _ = writeln!(s, "hidden_width {}", self.hidden_width);
        }
        for r in &self.rows {
            let ch: Vec<String> = r.channels.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(s, "row {} {} {}", r.repeat, r.size, ch.join(","));
        }
        s
    }

    pub fn from_text(text: &str, origin: &str) -> Result<MaskHeadSpec> {
        let mut family = None;
        let mut spec = MaskHeadSpec::fully_connected(0, 0);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let (key, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            let rest = rest.trim();
            let num = |v: &str| -> Result<usize> {
                v.parse().map_err(|_| {
                    Error::parse(
                        origin,
                        lineno,
                        format!("{key}: '{v}' is not a non-negative integer"),
                    )
                })
            };
            let flag = |v: &str| -> Result<bool> {
                match v {
                    "0" | "false" => Ok(false),
                    "1" | "true" => Ok(true),
                    _ => Err(Error::parse(
                        origin,
                        lineno,
                        format!("{key}: expected 0 or 1, got '{v}'"),
                    )),
                }
            };
            match key {
                "family" => {
                    family = Some(Family::parse(rest).ok_or_else(|| {
                        Error::parse(origin, lineno, format!("unknown family '{rest}'"))
                    })?)
                }
                "depth" => spec.named_depth = num(rest)?,
                "no_long_range_skips" => spec.no_long_range_skips = flag(rest)?,
                "no_encoder_decoder" => spec.no_encoder_decoder = flag(rest)?,
                "dilated_layers" => spec.dilated_layer_count = num(rest)?,
                "width_divisor" => spec.width_divisor = num(rest)?,
                "hidden_width" => spec.hidden_width = num(rest)?,
                "row" => {
                    let parts: Vec<&str> = rest.split_whitespace().collect();
                    let [repeat, size, channels] = parts[..] else {
                        return Err(Error::parse(
                            origin,
                            lineno,
                            "row: expected '<repeat> <size> <c1,c2,...>'",
                        ));
                    };
                    let channels = channels.split(',').map(num).collect::<Result<Vec<_>>>()?;
                    spec.rows.push(BlockRow {
                        repeat: num(repeat)?,
                        size: num(size)?,
                        channels,
                    });
                }
                other => {
                    return Err(Error::parse(
                        origin,
                        lineno,
                        format!("unknown key '{other}'"),
                    ))
                }
            }
        }
        spec.family = family.ok_or_else(|| Error::parse(origin, 0, "missing 'family' line"))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<MaskHeadSpec> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        MaskHeadSpec::from_text(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Marks the first `count` 3×3 convolutions (traversal order) as dilated.
pub fn dilate_layers(spec: &MaskHeadSpec, count: usize) -> Result<MaskHeadSpec> {
    let mut out = spec.clone();
    out.dilated_layer_count = count;
    out.validate()?;
    Ok(out)
}
