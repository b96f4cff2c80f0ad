use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{Family, MaskHeadSpec, TABLE_SIZE};
use crate::autodiff::{ConvOptions, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Dense, Init, ParamStore, Session};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    /// 1×1 conv aligning channels on a skip path; not part of the tables.
    Projection,
    BatchNorm,
    Down2,
    Up2,
    /// Residual-block identity or projected skip.
    ResidualAdd,
    /// Encoder-to-decoder skip at equal resolution.
    LongRangeAdd,
    Dense,
}

/// One entry of a head's layer inventory, in forward order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerInfo {
    pub kind: LayerKind,
    pub size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub params: usize,
    /// Block-table row the layer belongs to; `None` for the output conv.
    pub row: Option<usize>,
    /// Block index within the row.
    pub block: Option<usize>,
}

#[derive(Clone, Debug)]
struct ConvUnit {
    conv: Conv2d,
    bn: BatchNorm,
    relu: bool,
}

impl ConvUnit {
    fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        let y = self.bn.forward(s, y)?;
        if self.relu {
            s.graph.relu(y)
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
struct Residual {
    units: Vec<ConvUnit>,
    proj: Option<Conv2d>,
}

impl Residual {
    fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for u in &self.units {
            h = u.forward(s, h)?;
        }
        let skip = match &self.proj {
            Some(p) => p.forward(s, x)?,
            None => x,
        };
        let y = s.graph.add(h, skip)?;
        s.graph.relu(y)
    }
}

#[derive(Clone, Debug)]
struct HgLevel {
    enc: Vec<Residual>,
    inner: Option<Box<HgLevel>>,
    dec: Vec<Residual>,
    junction: Option<Conv2d>,
    long_range: bool,
    resample: bool,
}

impl HgLevel {
    fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let mut e = x;
        for b in &self.enc {
            e = b.forward(s, e)?;
        }
        let Some(inner) = &self.inner else {
            return Ok(e);
        };
        let mut d = if self.resample { s.graph.down2(e)? } else { e };
        d = inner.forward(s, d)?;
        if self.resample {
            d = s.graph.up2(d)?;
        }
        for b in &self.dec {
            d = b.forward(s, d)?;
        }
        if let Some(p) = &self.junction {
            d = p.forward(s, d)?;
        }
        if self.long_range {
            s.graph.add(d, e)
        } else {
            Ok(d)
        }
    }
}

#[derive(Clone, Debug)]
enum Body {
    Resnet {
        stem: ConvUnit,
        blocks: Vec<Residual>,
    },
    Hourglass {
        stem: ConvUnit,
        root: HgLevel,
        last: ConvUnit,
    },
    Fc {
        layers: Vec<Dense>,
    },
}

/// A built mask head: `(K, S, S, Cin)` crops to `(K, S, S, 1)` logits.
#[derive(Clone, Debug)]
pub struct MaskHead {
    spec: MaskHeadSpec,
    input_channels: usize,
    input_size: usize,
    body: Body,
    output: Option<Conv2d>,
    inventory: Vec<LayerInfo>,
}

struct Builder<'a, T: Real, R: Rng + ?Sized> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
    prefix: String,
    spec: &'a MaskHeadSpec,
    dilations_left: usize,
    inventory: Vec<LayerInfo>,
}

impl<T: Real, R: Rng + ?Sized> Builder<'_, T, R> {
    fn conv(
        &mut self,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        size: usize,
        tag: (Option<usize>, Option<usize>),
        kind: LayerKind,
    ) -> Result<Conv2d> {
        let dilation = if kernel == 3 && self.dilations_left > 0 {
            self.dilations_left -= 1;
            2
        } else {
            1
        };
        let opts = ConvOptions {
            dilation,
            ..ConvOptions::default()
        };
        let conv = Conv2d::new(
            self.store,
            &format!("{}/{name}", self.prefix),
            kernel,
            cin,
            cout,
            opts,
            true,
            Init::HeNormal,
            self.rng,
        )?;
        self.inventory.push(LayerInfo {
            kind,
            size,
            in_channels: cin,
            out_channels: cout,
            kernel,
            dilation,
            params: conv.param_count(),
            row: tag.0,
            block: tag.1,
        });
        Ok(conv)
    }

    fn unit(
        &mut self,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        size: usize,
        relu: bool,
        tag: (Option<usize>, Option<usize>),
    ) -> Result<ConvUnit> {
        let conv = self.conv(name, kernel, cin, cout, size, tag, LayerKind::Conv)?;
        let bn = BatchNorm::new(self.store, &format!("{}/{name}/bn", self.prefix), cout)?;
        self.inventory.push(LayerInfo {
            kind: LayerKind::BatchNorm,
            size,
            in_channels: cout,
            out_channels: cout,
            kernel: 0,
            dilation: 1,
            params: bn.param_count(),
            row: tag.0,
            block: tag.1,
        });
        Ok(ConvUnit { conv, bn, relu })
    }

    fn marker(&mut self, kind: LayerKind, size: usize, channels: usize, row: Option<usize>) {
        self.inventory.push(LayerInfo {
            kind,
            size,
            in_channels: channels,
            out_channels: channels,
            kernel: 0,
            dilation: 1,
            params: 0,
            row,
            block: None,
        });
    }

    /// Residual block of row `row`; the kernel of each conv follows the family.
    fn residual(
        &mut self,
        row: usize,
        block: usize,
        cin: usize,
        size: usize,
    ) -> Result<(Residual, usize)> {
        let channels: Vec<usize> = self.spec.rows[row]
            .channels
            .iter()
            .map(|&c| self.spec.scaled_channels(c))
            .collect();
        let bottleneck = self.spec.family.block_len() == 3;
        let tag = (Some(row), Some(block));
        let mut units = Vec::new();
        let mut c = cin;
        for (i, &cout) in channels.iter().enumerate() {
            let kernel = if bottleneck && i != 1 { 1 } else { 3 };
            let last = i + 1 == channels.len();
            units.push(self.unit(
                &format!("row{row}/block{block}/conv{i}"),
                kernel,
                c,
                cout,
                size,
                !last,
                tag,
            )?);
            c = cout;
        }
        let proj = if cin != c {
            Some(self.conv(
                &format!("row{row}/block{block}/proj"),
                1,
                cin,
                c,
                size,
                tag,
                LayerKind::Projection,
            )?)
        } else {
            None
        };
        self.marker(LayerKind::ResidualAdd, size, c, Some(row));
        Ok((Residual { units, proj }, c))
    }

    fn hourglass_level(&mut self, row: usize, cin: usize, size: usize) -> Result<(HgLevel, usize)> {
        let rows = self.spec.block_rows();
        let repeat = self.spec.rows[row].repeat;
        let innermost = row + 1 == rows.end;
        let n_enc = if innermost {
            repeat
        } else {
            repeat.div_ceil(2)
        };
        let mut c = cin;
        let mut enc = Vec::new();
        for b in 0..n_enc {
            let (blk, cout) = self.residual(row, b, c, size)?;
            enc.push(blk);
            c = cout;
        }
        if innermost {
            return Ok((
                HgLevel {
                    enc,
                    inner: None,
                    dec: Vec::new(),
                    junction: None,
                    long_range: false,
                    resample: false,
                },
                c,
            ));
        }
        let enc_channels = c;
        let resample = !self.spec.no_encoder_decoder;
        let inner_size = if resample {
            self.marker(LayerKind::Down2, size, c, Some(row));
            size / 2
        } else {
            size
        };
        let (inner, inner_c) = self.hourglass_level(row + 1, c, inner_size)?;
        if resample {
            self.marker(LayerKind::Up2, inner_size, inner_c, Some(row));
        }
        c = inner_c;
        let mut dec = Vec::new();
        for b in n_enc..repeat {
            let (blk, cout) = self.residual(row, b, c, size)?;
            dec.push(blk);
            c = cout;
        }
        let long_range = !self.spec.no_long_range_skips;
        let junction = if long_range && c != enc_channels {
            let p = self.conv(
                &format!("row{row}/junction"),
                1,
                c,
                enc_channels,
                size,
                (Some(row), None),
                LayerKind::Projection,
            )?;
            c = enc_channels;
            Some(p)
        } else {
            None
        };
        if long_range {
            self.marker(LayerKind::LongRangeAdd, size, c, Some(row));
        }
        Ok((
            HgLevel {
                enc,
                inner: Some(Box::new(inner)),
                dec,
                junction,
                long_range,
                resample,
            },
            c,
        ))
    }
}

impl MaskHead {
    /// Builds the head into `store`, naming parameters under `prefix`.
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &MaskHeadSpec,
        input_channels: usize,
        input_size: usize,
        rng: &mut R,
    ) -> Result<MaskHead> {
        spec.validate()?;
        if input_channels == 0 {
            return Err(Error::InvalidSpec("input_channels must be positive".into()));
        }
        if input_size == 0 || input_size % spec.downsampling_factor() != 0 {
            return Err(Error::InvalidSpec(format!(
                "input size {input_size} is not divisible by the downsampling factor {} of {}",
                spec.downsampling_factor(),
                spec.label()
            )));
        }
        let mut b = Builder {
            store,
            rng,
            prefix: prefix.to_string(),
            spec,
            dilations_left: spec.dilated_layer_count,
            inventory: Vec::new(),
        };
        let s = input_size;
        let (body, output) = match spec.family {
            Family::FullyConnected => {
                let din = s * s * input_channels;
                let mut layers = Vec::new();
                let mut d = din;
                for i in 0..spec.named_depth {
                    let last = i + 1 == spec.named_depth;
                    let dout = if last {
                        s * s
                    } else {
                        spec.scaled_channels(spec.hidden_width)
                    };
                    let dense = Dense::new(
                        b.store,
                        &format!("{prefix}/fc{i}"),
                        d,
                        dout,
                        Init::GlorotNormal,
                        b.rng,
                    )?;
                    b.inventory.push(LayerInfo {
                        kind: LayerKind::Dense,
                        size: s,
                        in_channels: d,
                        out_channels: dout,
                        kernel: 0,
                        dilation: 1,
                        params: dense.param_count(),
                        row: Some(i),
                        block: None,
                    });
                    layers.push(dense);
                    d = dout;
                }
                (Body::Fc { layers }, None)
            }
            Family::Hourglass => {
                let c0 = spec.scaled_channels(spec.rows[0].channels[0]);
                let stem = b.unit("stem", 3, input_channels, c0, s, true, (Some(0), Some(0)))?;
                let (root, c) = b.hourglass_level(1, c0, s)?;
                let last_row = spec.rows.len() - 1;
                let cl = spec.scaled_channels(spec.rows[last_row].channels[0]);
                let last = b.unit("final", 3, c, cl, s, true, (Some(last_row), Some(0)))?;
                let out = b.conv("output", 1, cl, 1, s, (None, None), LayerKind::Conv)?;
                (Body::Hourglass { stem, root, last }, Some(out))
            }
            _ => {
                let c0 = spec.scaled_channels(spec.rows[0].channels[0]);
                let stem = b.unit("stem", 1, input_channels, c0, s, true, (Some(0), Some(0)))?;
                let mut c = c0;
                let mut blocks = Vec::new();
                let mut k = 0;
                for row in spec.block_rows() {
                    for _ in 0..spec.rows[row].repeat {
                        let (blk, cout) = b.residual(row, k, c, s)?;
                        blocks.push(blk);
                        c = cout;
                        k += 1;
                    }
                }
                let out = b.conv("output", 1, c, 1, s, (None, None), LayerKind::Conv)?;
                (Body::Resnet { stem, blocks }, Some(out))
            }
        };
        Ok(MaskHead {
            spec: spec.clone(),
            input_channels,
            input_size,
            body,
            output,
            inventory: b.inventory,
        })
    }

    pub fn spec(&self) -> &MaskHeadSpec {
        &self.spec
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn inventory(&self) -> &[LayerInfo] {
        &self.inventory
    }

    /// Trainable scalars: kernels, biases and normalization scale/shift.
    pub fn count_parameters(&self) -> usize {
        self.inventory.iter().map(|l| l.params).sum()
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).to_vec();
        let (n, size) = (shape[0], self.input_size);
        if shape.len() != 4
            || shape[1] != size
            || shape[2] != size
            || shape[3] != self.input_channels
        {
            return Err(Error::shape(
                "mask_head",
                format!(
                    "input {shape:?}, head expects (K, {size}, {size}, {})",
                    self.input_channels
                ),
            ));
        }
        let y = match &self.body {
            Body::Fc { layers } => {
                let mut h = s
                    .graph
                    .reshape(x, &[n, size * size * self.input_channels])?;
                for (i, l) in layers.iter().enumerate() {
                    h = l.forward(s, h)?;
                    if i + 1 < layers.len() {
                        h = s.graph.relu(h)?;
                    }
                }
                return s.graph.reshape(h, &[n, size, size, 1]);
            }
            Body::Resnet { stem, blocks } => {
                let mut h = stem.forward(s, x)?;
                for b in blocks {
                    h = b.forward(s, h)?;
                }
                h
            }
            Body::Hourglass { stem, root, last } => {
                let h = stem.forward(s, x)?;
                let h = root.forward(s, h)?;
                last.forward(s, h)?
            }
        };
        self.output
            .as_ref()
            .expect("conv heads end in an output conv")
            .forward(s, y)
    }
}

/// A mask head together with its own parameters.
#[derive(Clone, Debug)]
pub struct MaskHeadNetwork<T: Real> {
    pub head: MaskHead,
    pub params: ParamStore<T>,
}

impl<T: Real> MaskHeadNetwork<T> {
    pub fn layer_inventory(&self) -> &[LayerInfo] {
        self.head.inventory()
    }

    pub fn count_parameters(&self) -> usize {
        self.head.count_parameters()
    }
}

/// Builds a standalone head for `(S, S, input_channels)` crops.
pub fn build_mask_head<T: Real>(
    spec: &MaskHeadSpec,
    input_channels: usize,
    input_size: usize,
    seed: u64,
) -> Result<MaskHeadNetwork<T>> {
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = MaskHead::new(
        &mut params,
        "head",
        spec,
        input_channels,
        input_size,
        &mut rng,
    )?;
    Ok(MaskHeadNetwork { head, params })
}

/// Multilayer perceptron head with `layers` affine stages.
pub fn build_fc_head<T: Real>(
    layers: usize,
    hidden_width: usize,
    out_size: usize,
    input_channels: usize,
    seed: u64,
) -> Result<MaskHeadNetwork<T>> {
    build_mask_head(
        &MaskHeadSpec::fully_connected(layers, hidden_width),
        input_channels,
        out_size,
        seed,
    )
}

/// Table size of a row scaled to an actual crop size.
pub fn scaled_size(table_size: usize, input_size: usize) -> usize {
    input_size / (TABLE_SIZE / table_size)
}
