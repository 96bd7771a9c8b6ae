//! Pixel-accuracy evaluation and the per-block timing harness.

use std::fmt::Write as _;
use std::time::Duration;

use rayon::prelude::*;

use crate::bintensor::RealTensor;
use crate::error::{Error, Result};
use crate::netgraph::{predict_labels, ForwardMode, LabelMap, NetConfig, Network};
use crate::NUM_CLASSES;

/// Confusion counts indexed `[truth][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccuracyResult {
    pub confusion: Vec<[u64; NUM_CLASSES]>,
}

impl Default for AccuracyResult {
    fn default() -> Self {
        Self {
            confusion: vec![[0; NUM_CLASSES]; NUM_CLASSES],
        }
    }
}

impl AccuracyResult {
    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|c| self.confusion[c][c]).sum()
    }

    /// Fraction of all pixels, background included, classified correctly.
    pub fn pixel_accuracy(&self) -> f64 {
        ratio(self.correct(), self.total())
    }

    /// Accuracy over pixels whose true class is a letter.
    pub fn ink_accuracy(&self) -> f64 {
        let total: u64 = self.confusion[1..].iter().flatten().sum();
        let correct: u64 = (1..NUM_CLASSES).map(|c| self.confusion[c][c]).sum();
        ratio(correct, total)
    }

    /// Fraction of pixels whose true class is background: the accuracy of
    /// predicting background everywhere.
    pub fn background_fraction(&self) -> f64 {
        ratio(self.confusion[0].iter().sum(), self.total())
    }

    /// Recall per true class; `None` for classes absent from the truth.
    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect()
    }

    pub fn merge(&mut self, other: &AccuracyResult) {
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "pixels {}\npixel accuracy {:.4}\nink accuracy {:.4}\nall-background baseline {:.4}\n",
            self.total(),
            self.pixel_accuracy(),
            self.ink_accuracy(),
            self.background_fraction()
        );
        out.push_str("class  pixels  recall\n");
        for (c, r) in self.per_class().iter().enumerate() {
            let name = if c == 0 { "bg".to_string() } else { ((b'A' + c as u8 - 1) as char).to_string() };
            let n: u64 = self.confusion[c].iter().sum();
            match r {
                Some(r) => writeln!(out, "{name:>5}  {n:>6}  {r:.4}"),
                None => writeln!(out, "{name:>5}  {n:>6}  -"),
            }
            .expect("writing to a String");
        }
        out
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn pixel_accuracy(pred: &LabelMap, truth: &LabelMap) -> Result<AccuracyResult> {
    if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
        return Err(Error::shape("prediction and truth differ in size"));
    }
    let mut r = AccuracyResult::default();
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        if p as usize >= NUM_CLASSES || t as usize >= NUM_CLASSES {
            return Err(Error::InvalidValue(format!("class pair ({t}, {p}) out of range")));
        }
        r.confusion[t as usize][p as usize] += 1;
    }
    Ok(r)
}

/// Runs the network over every image and pools the confusion counts.
pub fn evaluate(net: &Network, images: &[RealTensor], truth: &[LabelMap], mode: ForwardMode) -> Result<AccuracyResult> {
    if images.len() != truth.len() {
        return Err(Error::shape("image and label counts differ"));
    }
    let parts = images
        .par_iter()
        .zip(truth)
        .map(|(img, t)| pixel_accuracy(&predict_labels(&net.forward(img, mode)?), t))
        .collect::<Result<Vec<_>>>()?;
    let mut total = AccuracyResult::default();
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Accumulate operations per block: `conv_h · conv_w · kernel_h · kernel_w · in_c · out_c`.
pub fn op_counts(config: &NetConfig) -> Result<Vec<u64>> {
    let shapes = config.shapes()?;
    Ok(config
        .blocks
        .iter()
        .zip(&shapes)
        .map(|(b, s)| (s.conv_h * s.conv_w * b.kernel_h * b.kernel_w * s.in_c * s.out_c) as u64)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockTiming {
    pub block: usize,
    pub kind: &'static str,
    pub ops: u64,
    pub real_ns_per_image: f64,
    pub packed_ns_per_image: f64,
}

impl BlockTiming {
    pub fn speedup(&self) -> f64 {
        self.real_ns_per_image / self.packed_ns_per_image
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub batch: usize,
    pub repetitions: usize,
    pub threads: usize,
    pub blocks: Vec<BlockTiming>,
    pub real_ns_per_image: f64,
    pub packed_ns_per_image: f64,
}

impl BenchResult {
    pub fn speedup(&self) -> f64 {
        self.real_ns_per_image / self.packed_ns_per_image
    }

    pub fn total_ops(&self) -> u64 {
        self.blocks.iter().map(|b| b.ops).sum()
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "batch {}  repetitions {}  threads {}\n{:>5} {:<18} {:>14} {:>14} {:>14} {:>8}\n",
            self.batch, self.repetitions, self.threads, "block", "kind", "ops", "real ns/img", "packed ns/img", "speedup"
        );
        for b in &self.blocks {
            writeln!(
                out,
                "{:>5} {:<18} {:>14} {:>14.0} {:>14.0} {:>7.2}x",
                b.block,
                b.kind,
                b.ops,
                b.real_ns_per_image,
                b.packed_ns_per_image,
                b.speedup()
            )
            .expect("writing to a String");
        }
        writeln!(
            out,
            "{:>5} {:<18} {:>14} {:>14.0} {:>14.0} {:>7.2}x",
            "all",
            "",
            self.total_ops(),
            self.real_ns_per_image,
            self.packed_ns_per_image,
            self.speedup()
        )
        .expect("writing to a String");
        out.push_str("reference GPU figures: 4.59 ms/image, 8x overall, 17.7x on block 8\n");
        out
    }

    /// `block,path,ops,ns_per_image,speedup`, two rows per block plus totals.
    pub fn csv(&self) -> String {
        let mut out = String::from("block,path,ops,ns_per_image,speedup\n");
        let mut row = |block: &str, ops: u64, real: f64, packed: f64| {
            writeln!(out, "{block},real,{ops},{real:.0},1.000").expect("writing to a String");
            writeln!(out, "{block},packed,{ops},{packed:.0},{:.3}", real / packed).expect("writing to a String");
        };
        for b in &self.blocks {
            row(&b.block.to_string(), b.ops, b.real_ns_per_image, b.packed_ns_per_image);
        }
        row("all", self.total_ops(), self.real_ns_per_image, self.packed_ns_per_image);
        out
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times the real-valued path against the packed folded path on `images`,
/// one image after another, and reports per-block medians over `repetitions`.
/// Fails without timing anything if the two paths disagree on a label map.
pub fn bench_forward(net: &Network, images: &[RealTensor], repetitions: usize, warmup: usize) -> Result<BenchResult> {
    if images.is_empty() {
        return Err(Error::Empty("benchmark batch".into()));
    }
    if repetitions < 3 || warmup < 1 {
        return Err(Error::InvalidValue(format!(
            "need at least 3 repetitions and 1 warmup, got {repetitions} and {warmup}"
        )));
    }
    for (i, img) in images.iter().enumerate() {
        let real = predict_labels(&net.forward(img, ForwardMode::Real)?);
        let packed = predict_labels(&net.forward(img, ForwardMode::PackedFolded)?);
        if real != packed {
            return Err(Error::InvalidValue(format!(
                "real and packed label maps disagree on image {i}"
            )));
        }
    }
    let blocks = net.config().blocks.len();
    let per_image = images.len() as f64;
    let run = |mode: ForwardMode| -> Result<Vec<f64>> {
        let mut slots = vec![Duration::ZERO; blocks];
        for img in images {
            net.forward_profiled(img, mode, &mut slots)?;
        }
        Ok(slots.iter().map(|d| d.as_nanos() as f64 / per_image).collect())
    };
    for _ in 0..warmup {
        run(ForwardMode::Real)?;
        run(ForwardMode::PackedFolded)?;
    }
    let mut real = Vec::with_capacity(repetitions);
    let mut packed = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        real.push(run(ForwardMode::Real)?);
        packed.push(run(ForwardMode::PackedFolded)?);
    }
    let column = |runs: &[Vec<f64>], b: usize| median(runs.iter().map(|r| r[b]).collect());
    let total = |runs: &[Vec<f64>]| median(runs.iter().map(|r| r.iter().sum()).collect());
    let ops = op_counts(net.config())?;
    let timings = (0..blocks)
        .map(|b| BlockTiming {
            block: b,
            kind: net.config().blocks[b].kind.name(),
            ops: ops[b],
            real_ns_per_image: column(&real, b),
            packed_ns_per_image: column(&packed, b),
        })
        .collect();
    Ok(BenchResult {
        batch: images.len(),
        repetitions,
        threads: rayon::current_num_threads(),
        blocks: timings,
        real_ns_per_image: total(&real),
        packed_ns_per_image: total(&packed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_maps_score_one() {
        let t = LabelMap::new(2, 3, vec![0, 1, 2, 26, 0, 5]).unwrap();
        let r = pixel_accuracy(&t, &t).unwrap();
        assert_eq!(r.pixel_accuracy(), 1.0);
        assert_eq!(r.ink_accuracy(), 1.0);
    }

    #[test]
    fn all_background_against_thirty_percent_ink() {
        let mut labels = vec![0u8; 100];
        labels[..30].iter_mut().for_each(|l| *l = 7);
        let truth = LabelMap::new(10, 10, labels).unwrap();
        let pred = LabelMap::filled(10, 10, 0);
        let r = pixel_accuracy(&pred, &truth).unwrap();
        assert!((r.pixel_accuracy() - 0.7).abs() < 1e-12);
        assert!((r.background_fraction() - 0.7).abs() < 1e-12);
        assert_eq!(r.ink_accuracy(), 0.0);
    }

    #[test]
    fn default_op_counts() {
        let ops = op_counts(&NetConfig::default_config()).unwrap();
        assert_eq!(ops[8], 32 * 128 * 3 * 3 * 512 * 512);
        assert_eq!(ops[9], 32 * 128 * 512 * 512);
        assert_eq!(ops.iter().copied().max(), Some(ops[8]));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
