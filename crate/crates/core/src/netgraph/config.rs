//! Declarative block lists and their plain-text form.
//!
//! One directive per line, `#` starts a comment:
//!
//! ```text
//! input 32 128
//! classes 27
//! adapter 3x3 64
//! encoder 3x3 512 pool
//! decoder 3x3 512 unpool=4
//! classifier 1x1 512
//! classifier_softmax 1x1 27
//! ```
//!
//! Block ids are positions among the block lines, starting at 0 for the
//! adapter. `unpool=<id>` names the encoder whose pool indices the decoder
//! consumes.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::NUM_CLASSES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    Adapter,
    Encoder,
    Decoder,
    Classifier,
    ClassifierSoftmax,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Adapter => "adapter",
            BlockKind::Encoder => "encoder",
            BlockKind::Decoder => "decoder",
            BlockKind::Classifier => "classifier",
            BlockKind::ClassifierSoftmax => "classifier_softmax",
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            BlockKind::Adapter => 0,
            BlockKind::Encoder => 1,
            BlockKind::Decoder => 2,
            BlockKind::Classifier => 3,
            BlockKind::ClassifierSoftmax => 4,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => BlockKind::Adapter,
            1 => BlockKind::Encoder,
            2 => BlockKind::Decoder,
            3 => BlockKind::Classifier,
            4 => BlockKind::ClassifierSoftmax,
            _ => return None,
        })
    }

    fn rank(self) -> u8 {
        self.tag()
    }
}

impl FromStr for BlockKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "adapter" => BlockKind::Adapter,
            "encoder" => BlockKind::Encoder,
            "decoder" => BlockKind::Decoder,
            "classifier" => BlockKind::Classifier,
            "classifier_softmax" => BlockKind::ClassifierSoftmax,
            other => return Err(format!("unknown block kind {other:?}")),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_channels: usize,
    /// Encoder only: 2×2 max-pool after batch norm.
    pub pool: bool,
    /// Decoder only: id of the encoder block whose indices drive the unpool.
    pub unpool_source: Option<usize>,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, kernel: usize, out_channels: usize) -> Self {
        Self {
            kind,
            kernel_h: kernel,
            kernel_w: kernel,
            out_channels,
            pool: false,
            unpool_source: None,
        }
    }

    pub fn pooled(mut self) -> Self {
        self.pool = true;
        self
    }

    pub fn unpooling(mut self, source: usize) -> Self {
        self.unpool_source = Some(source);
        self
    }
}

/// Spatial and channel dims around one block's convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    /// Dims the convolution runs at (after any unpool).
    pub conv_h: usize,
    pub conv_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub num_classes: usize,
    pub blocks: Vec<BlockSpec>,
}

impl NetConfig {
    /// Adapter, `depth` pooling encoders, `depth` unpooling decoders, a 1×1
    /// binary classifier and the 1×1 softmax classifier.
    pub fn symmetric(
        input_h: usize,
        input_w: usize,
        num_classes: usize,
        adapter_channels: usize,
        width: usize,
        depth: usize,
    ) -> Self {
        let mut blocks = vec![BlockSpec::new(BlockKind::Adapter, 3, adapter_channels)];
        for _ in 0..depth {
            blocks.push(BlockSpec::new(BlockKind::Encoder, 3, width).pooled());
        }
        for i in 0..depth {
            blocks.push(BlockSpec::new(BlockKind::Decoder, 3, width).unpooling(depth - i));
        }
        blocks.push(BlockSpec::new(BlockKind::Classifier, 1, width));
        blocks.push(BlockSpec::new(BlockKind::ClassifierSoftmax, 1, num_classes));
        Self {
            input_h,
            input_w,
            num_classes,
            blocks,
        }
    }

    /// Full-size network: 32×128 input, 64-channel adapter, 512-channel
    /// binary blocks, four pool/unpool levels, 27 classes.
    pub fn default_config() -> Self {
        Self::symmetric(32, 128, NUM_CLASSES, 64, 512, 4)
    }

    pub fn validate(&self) -> Result<()> {
        self.shapes().map(|_| ())
    }

    /// Per-block shapes; fails on any structural violation.
    pub fn shapes(&self) -> Result<Vec<BlockShape>> {
        let err = |m: String| Err(Error::Config(m));
        if self.input_h == 0 || self.input_w == 0 {
            return err("input dims must be positive".into());
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return err(format!("num_classes {} outside 2..=256", self.num_classes));
        }
        let Some(first) = self.blocks.first() else {
            return err("no blocks".into());
        };
        if first.kind != BlockKind::Adapter {
            return err("block 0 must be the adapter".into());
        }
        let last = self.blocks.last().unwrap();
        if last.kind != BlockKind::ClassifierSoftmax {
            return err("the last block must be classifier_softmax".into());
        }
        if last.out_channels != self.num_classes {
            return err(format!(
                "classifier_softmax emits {} channels but num_classes is {}",
                last.out_channels, self.num_classes
            ));
        }
        let mut pooled = Vec::new();
        let mut unpooling = Vec::new();
        for (id, b) in self.blocks.iter().enumerate() {
            if id > 0 && b.kind.rank() < self.blocks[id - 1].kind.rank() {
                return err(format!(
                    "block {id} ({}) out of order: adapter, encoders, decoders, classifiers",
                    b.kind.name()
                ));
            }
            if id > 0 && b.kind == BlockKind::Adapter {
                return err("only block 0 may be an adapter".into());
            }
            if b.kind == BlockKind::ClassifierSoftmax && id != self.blocks.len() - 1 {
                return err("classifier_softmax must appear once, last".into());
            }
            if b.kernel_h == 0 || b.kernel_w == 0 || b.kernel_h % 2 == 0 || b.kernel_w % 2 == 0 {
                return err(format!("block {id}: kernel {}x{} must be odd", b.kernel_h, b.kernel_w));
            }
            if matches!(b.kind, BlockKind::Classifier | BlockKind::ClassifierSoftmax)
                && (b.kernel_h, b.kernel_w) != (1, 1)
            {
                return err(format!("block {id}: classifier blocks use 1x1 kernels"));
            }
            if b.out_channels == 0 {
                return err(format!("block {id}: zero output channels"));
            }
            if b.pool && b.kind != BlockKind::Encoder {
                return err(format!("block {id}: only encoders pool"));
            }
            if b.unpool_source.is_some() && b.kind != BlockKind::Decoder {
                return err(format!("block {id}: only decoders unpool"));
            }
            if b.pool {
                pooled.push(id);
            }
            if let Some(src) = b.unpool_source {
                unpooling.push((id, src));
            }
        }
        if pooled.len() != unpooling.len() {
            return err(format!(
                "{} pooling encoders but {} unpooling decoders",
                pooled.len(),
                unpooling.len()
            ));
        }
        for (i, &(dec, src)) in unpooling.iter().enumerate() {
            let want = pooled[pooled.len() - 1 - i];
            if src != want {
                return err(format!(
                    "decoder block {dec} unpools from block {src}; symmetry requires block {want}"
                ));
            }
        }
        let scale = 1usize << pooled.len();
        if !self.input_h.is_multiple_of(scale) || !self.input_w.is_multiple_of(scale) {
            return err(format!(
                "input {}x{} not divisible by 2^{} for pooling",
                self.input_h,
                self.input_w,
                pooled.len()
            ));
        }

        let mut shapes: Vec<BlockShape> = Vec::with_capacity(self.blocks.len());
        let (mut h, mut w, mut c) = (self.input_h, self.input_w, 1usize);
        for (id, b) in self.blocks.iter().enumerate() {
            let (mut ch, mut cw) = (h, w);
            if let Some(src) = b.unpool_source {
                let s = shapes[src];
                if (s.out_h, s.out_w, s.out_c) != (h, w, c) {
                    return err(format!(
                        "decoder block {id} input {h}x{w}x{c} does not match pooled output of block {src} ({}x{}x{})",
                        s.out_h, s.out_w, s.out_c
                    ));
                }
                ch = 2 * h;
                cw = 2 * w;
            }
            let (oh, ow) = if b.pool { (ch / 2, cw / 2) } else { (ch, cw) };
            shapes.push(BlockShape {
                in_h: h,
                in_w: w,
                in_c: c,
                conv_h: ch,
                conv_w: cw,
                out_h: oh,
                out_w: ow,
                out_c: b.out_channels,
            });
            (h, w, c) = (oh, ow, b.out_channels);
        }
        if (h, w) != (self.input_h, self.input_w) {
            return err(format!(
                "output {h}x{w} does not match input {}x{}",
                self.input_h, self.input_w
            ));
        }
        Ok(shapes)
    }

    /// Parses the line-oriented text form.
    pub fn parse(text: &str) -> Result<Self> {
        let mut input = None;
        let mut classes = None;
        let mut blocks = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line_no = no + 1;
            let perr = |msg: String| Error::Parse { line: line_no, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let head = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| perr(format!("expected a number, found {s:?}")))
            };
            match head {
                "input" => {
                    if rest.len() != 2 {
                        return Err(perr("usage: input <height> <width>".into()));
                    }
                    input = Some((num(rest[0])?, num(rest[1])?));
                }
                "classes" => {
                    if rest.len() != 1 {
                        return Err(perr("usage: classes <count>".into()));
                    }
                    classes = Some(num(rest[0])?);
                }
                kind => {
                    let kind: BlockKind = kind.parse().map_err(perr)?;
                    if rest.len() < 2 {
                        return Err(perr(format!(
                            "usage: {} <kh>x<kw> <channels> [flags]",
                            kind.name()
                        )));
                    }
                    let (kh, kw) = rest[0]
                        .split_once('x')
                        .ok_or_else(|| perr(format!("kernel {:?} is not <kh>x<kw>", rest[0])))?;
                    let mut spec = BlockSpec {
                        kind,
                        kernel_h: num(kh)?,
                        kernel_w: num(kw)?,
                        out_channels: num(rest[1])?,
                        pool: false,
                        unpool_source: None,
                    };
                    for flag in &rest[2..] {
                        if *flag == "pool" {
                            spec.pool = true;
                        } else if let Some(src) = flag.strip_prefix("unpool=") {
                            spec.unpool_source = Some(num(src)?);
                        } else {
                            return Err(perr(format!("unknown flag {flag:?}")));
                        }
                    }
                    blocks.push(spec);
                }
            }
        }
        let (input_h, input_w) = input.ok_or(Error::Parse {
            line: 0,
            msg: "missing `input` line".into(),
        })?;
        let cfg = Self {
            input_h,
            input_w,
            num_classes: classes.unwrap_or(NUM_CLASSES),
            blocks,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for NetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input {} {}", self.input_h, self.input_w)?;
        writeln!(f, "classes {}", self.num_classes)?;
        for b in &self.blocks {
            write!(f, "{} {}x{} {}", b.kind.name(), b.kernel_h, b.kernel_w, b.out_channels)?;
            if b.pool {
                write!(f, " pool")?;
            }
            if let Some(src) = b.unpool_source {
                write!(f, " unpool={src}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}
