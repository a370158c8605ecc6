use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ccnn::bench::bench_forward;
use ccnn::data::{
    generate_synthetic, image_tensor, load_scene, load_split, read_netpbm, save_manifest,
    write_pgm,
};
use ccnn::density::{
    downsample_preserving_count, render_density, write_cdm, DensityMap, KernelMode, KernelSpec,
};
use ccnn::error::Result;
use ccnn::model::{ablation_variant, load_checkpoint, save_checkpoint, Variant};
use ccnn::train::{evaluate, train, MetricsRecord, TrainConfig};

#[derive(Parser)]
#[command(name = "ccnn", about = "Compact crowd-counting CNN toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic crowd scenes plus a dataset manifest
    Synth {
        /// JSON file with the synthetic scene spec (defaults when omitted)
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Render ground-truth density maps (CDM1) for every manifest scene
    GenGt {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "fixed")]
        mode: String,
        #[arg(long, default_value_t = 15.0)]
        sigma: f32,
        #[arg(long, default_value_t = 0.3)]
        beta: f32,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Downsampling factor of the written maps (1 = full resolution)
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON file with the training config (defaults when omitted)
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSON file with a model config overriding the training config's
        /// (e.g. the output of `ccnn variant`)
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one manifest split, printing metrics JSON
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Benchmark forward-pass latency, printing a report JSON
    Bench {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 768)]
        height: usize,
        #[arg(long, default_value_t = 1024)]
        width: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Print the model config JSON of an ablation variant
    Variant {
        #[arg(long)]
        which: String,
    },
    /// Run a checkpoint on one image and write the predicted density raster
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ccnn::Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text).map_err(|e| ccnn::Error::Json {
        path: path.display().to_string(),
        source: e,
    })
}

fn kernel_spec(mode: &str, sigma: f32, beta: f32, k: usize) -> Result<KernelSpec> {
    let mode = match mode {
        "fixed" => KernelMode::Fixed,
        "adaptive" => KernelMode::Adaptive,
        other => {
            return Err(ccnn::Error::invalid_argument(format!(
                "unknown kernel mode '{}' (expected fixed|adaptive)",
                other
            )))
        }
    };
    let spec = KernelSpec {
        mode,
        sigma_fixed: sigma,
        beta,
        k_neighbors: k,
        truncation_radius_sigmas: 4.0,
    };
    spec.validate()?;
    Ok(spec)
}

fn cmd_synth(spec: Option<PathBuf>, out: &Path, count: usize) -> Result<()> {
    let base: ccnn::data::SyntheticSceneSpec = match spec {
        Some(p) => read_json(&p)?,
        None => Default::default(),
    };
    std::fs::create_dir_all(out).map_err(|e| ccnn::Error::io(out.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let scene_spec = ccnn::data::SyntheticSceneSpec {
            seed: base.seed.wrapping_add(i as u64),
            ..base.clone()
        };
        let scene = generate_synthetic(&scene_spec)?;
        let (h, w) = scene_spec.image_size;
        let name = format!("scene_{:04}", i);
        let img = ccnn::data::Image {
            channels: 1,
            height: h,
            width: w,
            data: scene.image.data().to_vec(),
        };
        write_pgm(&img, &out.join(format!("{}.pgm", name)))?;
        let ann = ccnn::density::AnnotationFile {
            image: format!("{}.pgm", name),
            width: w,
            height: h,
            points: scene.annotations.points.iter().map(|&(x, y)| [x, y]).collect(),
        };
        ann.save(&out.join(format!("{}.json", name)))?;
        // 80/10/10 split, at least one val and test scene when count allows
        let n_test = (count / 10).max(1);
        let n_val = (count / 10).max(1);
        let split = if count < 3 {
            "train"
        } else if i >= count - n_test {
            "test"
        } else if i >= count - n_test - n_val {
            "val"
        } else {
            "train"
        };
        entries.push(ccnn::data::ManifestEntry {
            annotation: format!("{}.json", name),
            split: split.into(),
        });
    }
    save_manifest(&entries, &out.join("manifest.json"))?;
    println!(
        "{}",
        serde_json::json!({"scenes": count, "manifest": out.join("manifest.json")})
    );
    Ok(())
}

fn cmd_gen_gt(
    manifest: &Path,
    mode: &str,
    sigma: f32,
    beta: f32,
    k: usize,
    scale: usize,
    out: &Path,
) -> Result<()> {
    let spec = kernel_spec(mode, sigma, beta, k)?;
    std::fs::create_dir_all(out).map_err(|e| ccnn::Error::io(out.display().to_string(), e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let entries = ccnn::data::load_manifest(manifest)?;
    let mut written = 0usize;
    for entry in &entries {
        let ann_path = base.join(&entry.annotation);
        let scene = load_scene(&ann_path, 1)?;
        let mut dm = render_density(&scene.annotations, &spec)?;
        if scale > 1 {
            dm = downsample_preserving_count(&dm, scale)?;
        }
        write_cdm(&dm, &out.join(format!("{}.cdm", scene.id)))?;
        written += 1;
    }
    println!("{}", serde_json::json!({"density_maps": written, "out": out}));
    Ok(())
}

fn cmd_train(
    manifest: &Path,
    config: Option<PathBuf>,
    model_config: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(&p)?,
        None => TrainConfig::default(),
    };
    if let Some(p) = model_config {
        cfg.model = read_json(&p)?;
    }
    cfg.validate()?;
    let train_scenes = load_split(manifest, "train", cfg.model.input_channels)?;
    let val_scenes = load_split(manifest, "val", cfg.model.input_channels)?;
    let output = train(&train_scenes, &val_scenes, &cfg)?;
    save_checkpoint(&output.model, out)?;
    if let Some(log_path) = &cfg.log_path {
        let mut f = std::fs::File::create(log_path)
            .map_err(|e| ccnn::Error::io(log_path.clone(), e))?;
        for rec in &output.loss_history {
            writeln!(f, "{}", serde_json::to_string(rec).unwrap())
                .map_err(|e| ccnn::Error::io(log_path.clone(), e))?;
        }
        for (epoch, m) in &output.val_metrics {
            let mut v = serde_json::to_value(MetricsRecord::new("val", m)).unwrap();
            v["epoch"] = (*epoch).into();
            writeln!(f, "{}", v).map_err(|e| ccnn::Error::io(log_path.clone(), e))?;
        }
    }
    let final_loss = output.loss_history.last().map(|r| r.loss);
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": out,
            "epochs": cfg.epochs,
            "steps": output.loss_history.len(),
            "final_loss": final_loss,
        })
    );
    Ok(())
}

fn cmd_eval(ckpt: &Path, manifest: &Path, split: &str) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    let scenes = load_split(manifest, split, model.config.input_channels)?;
    let metrics = evaluate(&model, &scenes)?;
    let mut v = serde_json::to_value(MetricsRecord::new(split, &metrics)).unwrap();
    v["per_scene"] = serde_json::to_value(&metrics.per_scene).unwrap();
    println!("{}", v);
    Ok(())
}

fn cmd_bench(
    ckpt: Option<PathBuf>,
    height: usize,
    width: usize,
    warmup: usize,
    runs: usize,
    threads: usize,
) -> Result<()> {
    // must be set before the first sgemm call initializes the pool
    std::env::set_var("MATMUL_NUM_THREADS", threads.to_string());
    let model = match ckpt {
        Some(p) => load_checkpoint(&p)?,
        None => ccnn::model::build(&Default::default(), 0)?,
    };
    let report = bench_forward(&model, (height, width), warmup, runs, threads)?;
    println!("{}", serde_json::to_string(&report).unwrap());
    Ok(())
}

fn cmd_variant(which: &str) -> Result<()> {
    let variant: Variant = which.parse()?;
    let cfg = ablation_variant(variant);
    println!(
        "{}",
        serde_json::to_string(&serde_json::to_value(&cfg).unwrap()).unwrap()
    );
    Ok(())
}

fn cmd_render(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    let img = read_netpbm(image)?;
    let tensor = image_tensor(&img, model.config.input_channels)?;
    let factor = model.config.downsampling_factor();
    let (_, _, h, w) = tensor.shape();
    let scene = ccnn::data::Scene {
        id: "render".into(),
        image: tensor,
        annotations: ccnn::density::HeadAnnotations::new((h, w), vec![])?,
    };
    let cropped = ccnn::data::crop_to_multiple(&scene, factor)?;
    let pred = model.forward(&cropped.image)?;
    let (_, _, oh, ow) = pred.shape();
    let dm = DensityMap {
        height: oh,
        width: ow,
        scale: factor as u32,
        raster: pred.data().to_vec(),
    };
    write_cdm(&dm, out)?;
    let count: f64 = dm.sum();
    println!("{}", serde_json::json!({"out": out, "predicted_count": count}));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out, count } => cmd_synth(spec, &out, count),
        Command::GenGt {
            manifest,
            mode,
            sigma,
            beta,
            k,
            scale,
            out,
        } => cmd_gen_gt(&manifest, &mode, sigma, beta, k, scale, &out),
        Command::Train {
            manifest,
            config,
            model_config,
            out,
        } => cmd_train(&manifest, config, model_config, &out),
        Command::Eval {
            ckpt,
            manifest,
            split,
        } => cmd_eval(&ckpt, &manifest, &split),
        Command::Bench {
            ckpt,
            height,
            width,
            warmup,
            runs,
            threads,
        } => cmd_bench(ckpt, height, width, warmup, runs, threads),
        Command::Variant { which } => cmd_variant(&which),
        Command::Render { ckpt, image, out } => cmd_render(&ckpt, &image, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
