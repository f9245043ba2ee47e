//! Command-line entry point: data generation, training, evaluation, cost
//! accounting, and attention-map dumps.
//!
//! Exit codes: 0 success, 1 user error (bad flags, configs, data, missing
//! files), 2 internal/environment error.

use clap::{Args, Parser, Subcommand};
use satrn::analysis;
use satrn::checkpoint;
use satrn::config::ModelConfig;
use satrn::pgm;
use satrn::synth::{self, GenSpec, GlyphFont};
use satrn::tensor::Tensor;
use satrn::train::{self, TrainSpec};
use satrn::Error as SatrnError;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "satrn", version, about = "Scene-text recognition workflows")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory from a key=value spec file.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset (exact sequence match).
    Eval(EvalArgs),
    /// Analytic parameter and FLOP accounting.
    Count(CountArgs),
    /// Dump self-attention rollout maps (and optionally decoder maps).
    DumpAttention(DumpAttentionArgs),
    /// Dump per-image adaptive-PE aspect ratios.
    DumpAspect(DumpAspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Spec file with generation keys (count, height, width, len_min,
    /// len_max, w_horizontal, w_rotated, w_multiline, rotation, noise,
    /// scale, seed).
    #[arg(long)]
    spec: PathBuf,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra key=value overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config file (model + training keys; `preset=` applies first).
    #[arg(long)]
    config: PathBuf,
    /// Training dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path. The metrics TSV lands next to it.
    #[arg(long)]
    out: PathBuf,
    /// Held-out dataset evaluated at the configured cadence and at the end.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Override the configured step budget.
    #[arg(long)]
    steps: Option<u64>,
    /// Override every seed in the run config.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra key=value overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Emit the per-layout breakdown table.
    #[arg(long)]
    by_layout: bool,
    /// Aligned human-readable table instead of TSV.
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct CountArgs {
    /// Preset name: big, middle, small, tiny.
    #[arg(long)]
    preset: String,
    /// Input size HxW (defaults to the preset's input).
    #[arg(long)]
    input: Option<String>,
    /// Feedforward variant override.
    #[arg(long)]
    ff_variant: Option<String>,
    /// Downsampling override "h,w" (e.g. 8,4).
    #[arg(long)]
    downsample: Option<String>,
    /// Emit one row per downsampling schedule instead of a full report.
    #[arg(long)]
    sweep: bool,
    /// Batch size the FLOP column is scaled by.
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Aligned human-readable table instead of TSV.
    #[arg(long)]
    pretty: bool,
}

#[derive(Args)]
struct DumpAttentionArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image (PGM, matching the model's input size).
    #[arg(long)]
    image: PathBuf,
    /// Region of interest in image pixels: x,y,w,h.
    #[arg(long)]
    roi: String,
    /// Number of self-attention layers to propagate through.
    #[arg(long)]
    depth: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also dump one cross-attention map per greedily decoded character.
    #[arg(long)]
    decoder: bool,
    /// Overwrite existing files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DumpAspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

/// Merged flat configuration for the train command.
struct RunConfig {
    model: ModelConfig,
    train: TrainSpec,
}

impl RunConfig {
    fn new() -> Self {
        RunConfig { model: ModelConfig::preset("tiny").unwrap(), train: TrainSpec::default() }
    }

    fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), SatrnError> {
        let bad = |k: &str, v: &str| SatrnError::Config(format!("bad value {v:?} for key {k}"));
        match key {
            "preset" => {
                let seed = self.model.seed;
                self.model = ModelConfig::preset(value)?;
                self.model.seed = seed;
            }
            "seed" => {
                let s: u64 = value.parse().map_err(|_| bad(key, value))?;
                self.model.seed = s;
                self.train.seed = s;
            }
            "batch" => self.train.batch = value.parse().map_err(|_| bad(key, value))?,
            "steps" => self.train.steps = value.parse().map_err(|_| bad(key, value))?,
            "lr_max" => self.train.lr_max = value.parse().map_err(|_| bad(key, value))?,
            "cycle" => self.train.cycle = value.parse().map_err(|_| bad(key, value))?,
            "sigma_rot" => self.train.sigma_rot = value.parse().map_err(|_| bad(key, value))?,
            "eval_every" => self.train.eval_every = value.parse().map_err(|_| bad(key, value))?,
            "clip" => {
                self.train.clip = if value == "none" {
                    None
                } else {
                    Some(value.parse().map_err(|_| bad(key, value))?)
                }
            }
            "lr_mode" => {
                self.train.constant_lr = match value {
                    "cyclic" => false,
                    "constant" => true,
                    _ => return Err(bad(key, value)),
                }
            }
            _ => self.model.apply_kv(key, value)?,
        }
        Ok(())
    }
}

fn apply_sets<F>(sets: &[String], mut apply: F) -> Result<(), SatrnError>
where
    F: FnMut(&str, &str) -> Result<(), SatrnError>,
{
    for s in sets {
        let Some(eq) = s.find('=') else {
            return Err(SatrnError::Usage(format!("--set needs KEY=VALUE, got {s:?}")));
        };
        apply(&s[..eq], &s[eq + 1..])?;
    }
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String, SatrnError> {
    if !path.exists() {
        return Err(SatrnError::Usage(format!("file not found: {}", path.display())));
    }
    Ok(std::fs::read_to_string(path)?)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), SatrnError> {
    let text = read_to_string(&args.spec)?;
    let mut spec = GenSpec::from_kv(&text)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    apply_sets(&args.sets, |k, v| spec.apply_kv(k, v))?;
    let font = GlyphFont::digits();
    let ds = synth::generate(&spec, &font)?;
    synth::save_dataset(&ds, &spec, &args.out)?;
    println!("wrote {} samples to {}", ds.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<(), SatrnError> {
    let text = read_to_string(&args.config)?;
    let mut rc = RunConfig::new();
    for (k, v) in satrn::config::parse_kv_lines(&text)? {
        rc.apply_kv(&k, &v)?;
    }
    apply_sets(&args.sets, |k, v| rc.apply_kv(k, v))?;
    if let Some(seed) = args.seed {
        rc.apply_kv("seed", &seed.to_string())?;
    }
    if let Some(steps) = args.steps {
        rc.train.steps = steps;
    }
    rc.model.validate()?;
    rc.train.validate()?;
    if !args.data.exists() {
        return Err(SatrnError::Usage(format!("data directory not found: {}", args.data.display())));
    }
    let data = synth::load_dataset(&args.data)?;
    let eval_data = match &args.eval_data {
        Some(dir) => Some(synth::load_dataset(dir)?),
        None => None,
    };
    // training runs in f32; checkpoints and analyses are precision-agnostic
    let mut model = satrn::model::Model::<f32>::build(rc.model.clone())?;
    let out = train::train(&mut model, &data, eval_data.as_ref(), &rc.train, Some(&args.out))?;
    let metrics_path = args.out.with_extension("metrics.tsv");
    std::fs::write(&metrics_path, train::metrics_to_tsv(&out.metrics))?;
    let last_loss = out.metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} steps, final loss {:.6}, checkpoint {}",
        out.final_step,
        last_loss,
        args.out.display()
    );
    if let Some(m) = out.metrics.last().and_then(|m| m.eval_acc) {
        println!("eval accuracy {m:.4}");
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), SatrnError> {
    let (model, _) = checkpoint::load_model::<f32>(&args.ckpt)?;
    let data = synth::load_dataset(&args.data)?;
    let report = train::evaluate(&model, &data)?;
    if args.pretty {
        println!("overall accuracy: {:.4} ({}/{})", report.accuracy(), report.correct, report.total);
        if args.by_layout {
            for r in &report.rows {
                println!(
                    "  {:<12} {:>5}/{:<5} {:.4}",
                    r.bucket,
                    r.correct,
                    r.total,
                    r.correct as f64 / r.total as f64
                );
            }
        }
    } else if args.by_layout {
        print!("{}", report.to_tsv());
    } else {
        println!("overall\t{}\t{}\t{:.6}", report.total, report.correct, report.accuracy());
    }
    Ok(())
}

fn count_config(args: &CountArgs) -> Result<ModelConfig, SatrnError> {
    let mut cfg = ModelConfig::preset(&args.preset)?;
    if let Some(input) = &args.input {
        let (h, w) = input
            .split_once('x')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| SatrnError::Usage(format!("--input wants HxW, got {input:?}")))?;
        cfg.height = h;
        cfg.width = w;
    }
    if let Some(ff) = &args.ff_variant {
        cfg.ff = satrn::config::FfVariant::parse(ff)?;
    }
    if let Some(ds) = &args.downsample {
        let (h, w) = ds
            .split_once(',')
            .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
            .ok_or_else(|| SatrnError::Usage(format!("--downsample wants h,w, got {ds:?}")))?;
        cfg.down_h = h;
        cfg.down_w = w;
    }
    Ok(cfg)
}

fn cmd_count(args: CountArgs) -> Result<(), SatrnError> {
    let cfg = count_config(&args)?;
    if args.sweep {
        println!("# downsampling sweep at {}x{}, batch {}", cfg.height, cfg.width, args.batch);
        println!("down_h\tdown_w\tparams\tflops");
        for (dh, dw) in [(2, 2), (4, 4), (8, 4), (16, 4), (32, 4)] {
            let mut c = cfg.clone();
            c.down_h = dh;
            c.down_w = dw;
            let report = analysis::cost_report(&c, args.batch)?;
            println!("{dh}\t{dw}\t{}\t{}", report.params_total(), report.flops_total());
        }
        return Ok(());
    }
    let report = analysis::cost_report(&cfg, args.batch)?;
    if args.pretty {
        println!("{:<24} {:>14} {:>16}", "name", "params", "flops");
        for r in &report.rows {
            println!("{:<24} {:>14} {:>16}", r.name, r.params, r.flops);
        }
        println!("{:<24} {:>14} {:>16}", "total", report.params_total(), report.flops_total());
    } else {
        print!("{}", report.to_tsv());
    }
    if args.preset == "big" {
        println!(
            "# reference: published SATRN totals are 55M params / 35.9B FLOPs at 32x100; \
             this count gives {} params / {} FLOPs. Counting conventions differ \
             (bias/norm/softmax terms and the CNN channel plan are included here), \
             so absolute figures are reported side by side rather than asserted.",
            report.params_total(),
            report.flops_total()
        );
    }
    Ok(())
}

fn parse_roi(s: &str) -> Result<(usize, usize, usize, usize), SatrnError> {
    let parts: Vec<usize> = s.split(',').filter_map(|p| p.parse().ok()).collect();
    if parts.len() != 4 {
        return Err(SatrnError::Usage(format!("--roi wants x,y,w,h, got {s:?}")));
    }
    Ok((parts[0], parts[1], parts[2], parts[3]))
}

fn load_image_for(model_cfg: &ModelConfig, path: &Path) -> Result<Tensor<f32>, SatrnError> {
    let (w, h, pixels) = pgm::read_pgm(path)?;
    if h != model_cfg.height || w != model_cfg.width {
        return Err(SatrnError::Data(format!(
            "image is {h}x{w}, model expects {}x{}",
            model_cfg.height, model_cfg.width
        )));
    }
    let mut t = Tensor::<f32>::zeros(&[1, model_cfg.cin, h, w]);
    for c in 0..model_cfg.cin {
        for (i, &p) in pixels.iter().enumerate() {
            t.data_mut()[c * h * w + i] = p as f32 / 255.0;
        }
    }
    Ok(t)
}

fn write_guarded(path: &Path, force: bool, bytes: &[u8]) -> Result<(), SatrnError> {
    if path.exists() && !force {
        return Err(SatrnError::Usage(format!(
            "{} exists; pass --force to overwrite",
            path.display()
        )));
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn write_map(dir: &Path, stem: &str, map: &Tensor<f64>, force: bool) -> Result<(), SatrnError> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let pix = analysis::heatmap_pixels(map);
    let pgm_path = dir.join(format!("{stem}.pgm"));
    if pgm_path.exists() && !force {
        return Err(SatrnError::Usage(format!(
            "{} exists; pass --force to overwrite",
            pgm_path.display()
        )));
    }
    pgm::write_pgm(&pgm_path, w, h, &pix)?;
    write_guarded(&dir.join(format!("{stem}.tsv")), force, analysis::heatmap_tsv(map).as_bytes())?;
    Ok(())
}

fn cmd_dump_attention(args: DumpAttentionArgs) -> Result<(), SatrnError> {
    let (model, _) = checkpoint::load_model::<f32>(&args.ckpt)?;
    let image = load_image_for(&model.cfg, &args.image)?;
    let (x, y, rw, rh) = parse_roi(&args.roi)?;
    let (fh, fw) = model.cfg.feature_hw();
    // pixel rect -> feature cells whose footprint intersects it
    let mut roi = vec![false; fh * fw];
    for fy in 0..fh {
        for fx in 0..fw {
            let py = fy * model.cfg.down_h;
            let px = fx * model.cfg.down_w;
            let hit = px < x + rw
                && px + model.cfg.down_w > x
                && py < y + rh
                && py + model.cfg.down_h > y;
            roi[fy * fw + fx] = hit;
        }
    }
    std::fs::create_dir_all(&args.out)?;
    let maps = analysis::attention_rollout(&model, &image, &roi, args.depth)?;
    for (d, map) in maps.iter().enumerate() {
        write_map(&args.out, &format!("depth{d}"), map, args.force)?;
    }
    println!("wrote {} rollout maps to {}", maps.len(), args.out.display());
    if args.decoder {
        let decode = model.greedy_decode(&image)?;
        let text = model.vocab.decode(&decode.ids[0]);
        for (i, map) in decode.attn_maps[0].iter().enumerate() {
            let label = match decode.ids[0].get(i).and_then(|&id| model.vocab.id_char(id)) {
                Some(c) => format!("char{i}_{c}"),
                None => format!("char{i}_end"),
            };
            let map64 = Tensor::new(map.shape().to_vec(), map.data().iter().map(|&v| v as f64).collect())
                .expect("same element count");
            write_map(&args.out, &label, &map64, args.force)?;
        }
        println!("decoded {text:?} ({} decoder maps)", decode.attn_maps[0].len());
    }
    Ok(())
}

fn cmd_dump_aspect(args: DumpAspectArgs) -> Result<(), SatrnError> {
    let (model, _) = checkpoint::load_model::<f32>(&args.ckpt)?;
    let data = synth::load_dataset(&args.data)?;
    let mut rows: Vec<(usize, f64)> = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(64) {
        let mut images = Tensor::<f32>::zeros(&[chunk.len(), model.cfg.cin, data.height, data.width]);
        let hw = data.height * data.width;
        for (i, rec) in chunk.iter().enumerate() {
            for c in 0..model.cfg.cin {
                for (j, &p) in rec.pixels.iter().enumerate() {
                    images.data_mut()[(i * model.cfg.cin + c) * hw + j] = p as f32 / 255.0;
                }
            }
        }
        let rs = analysis::aspect_ratios(&model, &images)?;
        rows.extend(chunk.iter().map(|rec| rec.index).zip(rs));
    }
    // ascending by ratio: horizontal-looking samples first
    rows.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    println!("index\tr\tbucket");
    for (index, r) in rows {
        println!("{index}\t{r:.6}\t{}", analysis::aspect_bucket(r));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), SatrnError> {
    match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Count(a) => cmd_count(a),
        Cmd::DumpAttention(a) => cmd_dump_attention(a),
        Cmd::DumpAspect(a) => cmd_dump_aspect(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
