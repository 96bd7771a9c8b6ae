use std::fmt::Write as _;
use std::path::Path;

use bcednet::evalbench::{bench_forward, evaluate};
use bcednet::fsutil::StagedDir;
use bcednet::modelio::{self, size_report};
use bcednet::netgraph::predict_labels;
use bcednet::pgm::{unit_to_byte, GrayImage};
use bcednet::textgen::{load_dataset, render_dataset, render_sample, Face, RenderParams};
use bcednet::trainer::{Samples, TrainOptions, Trainer};
use bcednet::{Error, ForwardMode, NetConfig, Network, NUM_CLASSES};

use crate::{BenchArgs, EvalArgs, InferArgs, InitArgs, InspectArgs, RenderArgs, TrainArgs};

pub struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn code(&self) -> u8 {
        self.code
    }

    pub fn message(&self) -> &str {
        &self.message
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) => 3,
            _ => 2,
        };
        Self { code, message: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

/// Reduced 16x64 configuration, the one the overfit and held-out checks train.
pub fn tiny_config() -> NetConfig {
    NetConfig::symmetric(16, 64, NUM_CLASSES, 128, 128, 3)
}

fn load_config(spec: &str) -> Result<NetConfig, Failure> {
    match spec {
        "default" => Ok(NetConfig::default_config()),
        "tiny" => Ok(tiny_config()),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::io(Path::new(path), e)))?;
            Ok(NetConfig::parse(&text)?)
        }
    }
}

fn parse_mode(s: &str) -> Result<ForwardMode, Failure> {
    s.parse().map_err(Failure::usage)
}

fn pair(v: &Option<Vec<f64>>, default: (f64, f64)) -> (f64, f64) {
    match v.as_deref() {
        Some([a, b]) => (*a, *b),
        _ => default,
    }
}

pub fn render_params(a: &RenderArgs) -> Result<RenderParams, Failure> {
    let mut p = if a.clean { RenderParams::clean() } else { RenderParams::default() };
    if let Some([h, w]) = a.size.as_deref() {
        (p.height, p.width) = (*h, *w);
    }
    p.min_len = a.min_len.unwrap_or(p.min_len);
    p.max_len = a.max_len.unwrap_or(p.max_len);
    p.scale = pair(&a.scale, p.scale);
    p.aspect = pair(&a.aspect, p.aspect);
    p.max_rotation_deg = a.rotation.unwrap_or(p.max_rotation_deg);
    p.max_shear = a.shear.unwrap_or(p.max_shear);
    p.max_corner_shift = a.corner_shift.unwrap_or(p.max_corner_shift);
    p.jitter = a.jitter.unwrap_or(p.jitter);
    p.noise_sigma = a.noise.unwrap_or(p.noise_sigma);
    p.min_contrast = a.min_contrast.unwrap_or(p.min_contrast);
    p.blur |= a.blur;
    if let Some(names) = &a.faces {
        p.faces = names
            .iter()
            .map(|n| {
                Face::ALL
                    .into_iter()
                    .find(|f| f.name() == n.as_str())
                    .ok_or_else(|| Failure::usage(format!("unknown face {n:?} (regular, bold)")))
            })
            .collect::<Result<_, _>>()?;
    }
    p.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(p)
}

pub fn render(a: RenderArgs) -> CmdResult {
    if a.count == 0 {
        return Err(Failure::usage("--count must be at least 1"));
    }
    let params = render_params(&a)?;
    let m = render_dataset(a.count, a.seed, &params, &a.out)?;
    let ink: u64 = m.histogram[1..].iter().sum();
    let total: u64 = m.histogram.iter().sum();
    println!(
        "wrote {} samples ({}x{}) to {}, seed {}, ink fraction {:.4}",
        m.count,
        m.height,
        m.width,
        a.out.display(),
        m.seed,
        ink as f64 / total.max(1) as f64
    );
    Ok(())
}

pub fn init(a: InitArgs) -> CmdResult {
    let net = Network::build(load_config(&a.config)?, a.seed)?;
    let bytes = modelio::save(&net, &a.out)?;
    println!("wrote {} ({bytes} bytes)", a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> CmdResult {
    let options = TrainOptions {
        batch_size: a.batch_size,
        learning_rate: a.lr,
        lr_decay: a.lr_decay,
        ..TrainOptions::default()
    };
    if a.batch_size == 0 {
        return Err(Failure::usage("--batch-size must be at least 1"));
    }
    if !(a.lr.is_finite() && a.lr > 0.0 && a.lr_decay.is_finite() && a.lr_decay > 0.0) {
        return Err(Failure::usage("--lr and --lr-decay must be positive"));
    }
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(modelio::load_checkpoint(path)?, options)?,
        None => Trainer::new(load_config(&a.config)?, a.seed, options)?,
    };
    let mut data = load_dataset(&a.data)?;
    if let Some(n) = a.limit {
        data = data.take(n);
    }
    let (h, w) = (trainer.state.config.input_h, trainer.state.config.input_w);
    let check = |d: &bcednet::textgen::Dataset, name: &Path| -> CmdResult {
        match d.images.first() {
            Some(img) if img.height != h || img.width != w => Err(Failure::from(Error::shape(format!(
                "{}: images are {}x{}, model expects {h}x{w}",
                name.display(),
                img.height,
                img.width
            )))),
            _ => Ok(()),
        }
    };
    check(&data, &a.data)?;
    let images = data.tensors();
    let val = match &a.val {
        Some(p) => {
            let v = load_dataset(p)?;
            check(&v, p)?;
            Some((v.tensors(), v.labels))
        }
        None => None,
    };
    let train = Samples::new(&images, &data.labels)?;
    let val_samples = match &val {
        Some((i, l)) => Some(Samples::new(i, l)?),
        None => None,
    };
    println!(
        "training on {} samples, batch {}, starting at epoch {}",
        train.len(),
        a.batch_size,
        trainer.state.epoch + 1
    );
    for _ in 0..a.epochs {
        trainer.fit(train, val_samples, 1, a.seed, |r| {
            let mut line = format!(
                "epoch {:>4}  loss {:.5}  train {:.4}",
                r.epoch, r.loss, r.train_accuracy
            );
            if let Some(v) = r.val_accuracy {
                write!(line, "  val {v:.4}").expect("writing to a String");
            }
            write!(line, "  lr {:.6}  {:.1}s", r.learning_rate, r.wall_time.as_secs_f64()).expect("writing to a String");
            println!("{line}");
        })?;
        if let Some(path) = &a.checkpoint {
            modelio::save_checkpoint(&trainer.state, path)?;
        }
    }
    let net = trainer.state.export()?;
    let bytes = modelio::save(&net, &a.out_model)?;
    println!("wrote {} ({bytes} bytes)", a.out_model.display());
    Ok(())
}

pub fn infer(a: InferArgs) -> CmdResult {
    let mode = parse_mode(&a.mode)?;
    let net = modelio::load(&a.model)?;
    let image = GrayImage::read(&a.image)?;
    let probs = net.forward(&image.to_tensor(), mode)?;
    let labels = predict_labels(&probs);
    let p = probs.probs();
    let (h, w, c) = p.dims();
    let staged = StagedDir::new(&a.out_dir)?;
    for class in 0..c {
        let pixels = (0..h * w).map(|i| unit_to_byte(p.values()[i * c + class])).collect();
        let img = GrayImage::new(w, h, pixels)?;
        staged.write(&format!("class_{class:02}.pgm"), &img.encode())?;
    }
    let vis = GrayImage::new(w, h, labels.labels().iter().map(|&l| l * 9).collect())?;
    staged.write("labels.pgm", &vis.encode())?;
    staged.publish()?;
    println!("wrote {c} salience maps and labels.pgm to {} ({} mode)", a.out_dir.display(), mode.name());
    Ok(())
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let mode = parse_mode(&a.mode)?;
    let net = modelio::load(&a.model)?;
    let data = load_dataset(&a.data)?;
    let acc = evaluate(&net, &data.tensors(), &data.labels, mode)?;
    if a.csv {
        println!("class,pixels,correct,recall");
        println!("all,{},{},{:.6}", acc.total(), acc.correct(), acc.pixel_accuracy());
        for (c, row) in acc.confusion.iter().enumerate() {
            let n: u64 = row.iter().sum();
            let recall = if n == 0 { String::new() } else { format!("{:.6}", row[c] as f64 / n as f64) };
            println!("{c},{n},{},{recall}", row[c]);
        }
    } else {
        println!("samples {}  mode {}", data.len(), mode.name());
        print!("{}", acc.table());
    }
    Ok(())
}

pub fn bench(a: BenchArgs) -> CmdResult {
    if a.batch == 0 || a.reps < 3 {
        return Err(Failure::usage("bench needs --batch >= 1 and --reps >= 3"));
    }
    let net = modelio::load(&a.model)?;
    let cfg = net.config();
    let params = RenderParams {
        height: cfg.input_h,
        width: cfg.input_w,
        ..RenderParams::default()
    };
    let images = (0..a.batch as u64)
        .map(|i| Ok(render_sample(a.seed.wrapping_add(i), &params)?.image.to_tensor()))
        .collect::<Result<Vec<_>, Error>>()?;
    let result = bench_forward(&net, &images, a.reps, 1)?;
    if a.csv {
        print!("{}", result.csv());
    } else {
        print!("{}", result.table());
    }
    Ok(())
}

pub fn inspect(a: InspectArgs) -> CmdResult {
    let net = modelio::load(&a.model)?;
    let r = size_report(&net);
    if a.csv {
        println!("field,value");
        for (k, v) in [
            ("binary_param_count", r.binary_param_count.to_string()),
            ("binary_packed_bytes", r.binary_packed_bytes.to_string()),
            ("real_param_count", r.real_param_count.to_string()),
            ("real_bytes", r.real_bytes.to_string()),
            ("bn_param_bytes", r.bn_param_bytes.to_string()),
            ("total_bytes", r.total_bytes.to_string()),
            ("hypothetical_fp32_bytes", r.hypothetical_fp32_bytes.to_string()),
            ("reduction_ratio", format!("{:.6}", r.reduction_ratio)),
        ] {
            println!("{k},{v}");
        }
    } else {
        print!("{}", net.config());
        println!();
        print!("{r}");
    }
    Ok(())
}
