use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use rayon::prelude::*;
use serde_json::json;

use stegduel_core::data::{load_pgm, sample_message, save_pgm, synth_dataset, BitMessage, GrayImage};
use stegduel_core::game::{self, DetectorConfig, EvalLog, StepLog, TrainConfig};
use stegduel_core::metrics::{detection_accuracy, payload_bits, payload_bits_for};
use stegduel_core::nets::{init_params, load_checkpoint, save_checkpoint, Checkpoint, NetConfig, Nets};
use stegduel_core::rng::indexed_rng;
use stegduel_core::stego::{
    adaptive_embed_simulate, cost_texture, lsb_extract, lsb_matching_embed, StegoError, StegoKey,
};
use stegduel_core::tensor::gradcheck::check_all_primitives;
use stegduel_core::tensor::Primitive;

use crate::error::{data_at, CliError};
use crate::manifest::{show, RunManifest};
use crate::{
    ClassicalMethod, DetectArgs, EmbedArgs, EvaluateArgs, ExtractArgs, GradcheckArgs, InitArgs, Method, SynthArgs,
    TrainArgs, TrainDetectorArgs,
};

const THREADS_VAR: &str = "STEGDUEL_THREADS";
const LEAKY_SLOPE: f64 = 0.2;
/// Images per forward pass; fixed so results do not depend on thread count.
const CHUNK: usize = 16;
const KEY_HEADER: &str = "stegduel-lsb-key 1";

pub fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_VAR}={raw:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| data_at(dir, e))
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, CliError> {
    let f = std::fs::File::create(path).map_err(|e| data_at(path, e))?;
    Ok(std::io::BufWriter::new(f))
}

fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match out {
        Some(p) => Box::new(create_file(p)?),
        None => Box::new(std::io::stdout().lock()),
    })
}

/// `*.pgm` files of `dir` in name order, with their file names.
fn load_named(dir: &Path) -> Result<Vec<(String, GrayImage)>, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| data_at(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Data(format!("{}: no .pgm images", dir.display())));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let image = load_pgm(&p).map_err(|e| data_at(&p, e))?;
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some((first, im)) = out.first().map(|(n, im): &(String, GrayImage)| (n.clone(), im)) {
            if !image.same_dimensions(im) {
                return Err(CliError::Data(format!(
                    "{name} is {}x{} but {first} is {}x{}",
                    image.width(),
                    image.height(),
                    im.width(),
                    im.height()
                )));
            }
        }
        out.push((name, image));
    }
    Ok(out)
}

fn load_images(dir: &Path) -> Result<Vec<GrayImage>, CliError> {
    Ok(load_named(dir)?.into_iter().map(|(_, im)| im).collect())
}

fn square_side(images: &[GrayImage], dir: &Path) -> Result<usize, CliError> {
    let im = &images[0];
    if im.width() != im.height() {
        return Err(CliError::Data(format!(
            "{}: images are {}x{}; the networks need square images",
            dir.display(),
            im.width(),
            im.height()
        )));
    }
    Ok(im.width())
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, CliError> {
    load_checkpoint(path).map_err(|e| data_at(path, format!("cannot load checkpoint: {e}")))
}

fn check_side(nets: &Nets, side: usize, what: &Path) -> Result<(), CliError> {
    if nets.config.image_side != side {
        return Err(CliError::Data(format!(
            "{} holds {side}x{side} images but the checkpoint expects {}x{}",
            what.display(),
            nets.config.image_side,
            nets.config.image_side
        )));
    }
    Ok(())
}

fn net_config(side: usize, bpp: f64, base_channels: usize) -> Result<NetConfig, CliError> {
    let cfg = NetConfig {
        image_side: side,
        message_len: payload_bits(side, bpp)?,
        base_channels,
        leaky_slope: LEAKY_SLOPE,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    if a.n == 0 {
        return Err(CliError::Usage("synth needs -n/--n of at least 1".into()));
    }
    let ds = synth_dataset(a.n, a.side, a.seed)?;
    create_dir(&a.out)?;
    let mut manifest = RunManifest::new("synth", json!({ "n": a.n, "side": a.side }), json!({ "seed": a.seed }));
    for (i, im) in ds.images().iter().enumerate() {
        let path = a.out.join(format!("img_{i:04}.pgm"));
        save_pgm(im, &path).map_err(|e| data_at(&path, e))?;
        manifest.outputs.push(show(&path));
    }
    let m = manifest.write(&a.out)?;
    println!("wrote {} images and {}", a.n, m.display());
    Ok(())
}

pub fn init(a: &InitArgs) -> Result<(), CliError> {
    let cfg = net_config(a.side, a.bpp, a.base_channels)?;
    let ckpt = Checkpoint::fresh(init_params(&cfg, a.seed)?);
    save_checkpoint(&ckpt, &a.out).map_err(|e| data_at(&a.out, e))?;
    println!(
        "wrote {} ({} parameters, {}-bit messages)",
        a.out.display(),
        ckpt.nets.param_count(),
        cfg.message_len
    );
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let cfg = TrainConfig {
        lambda_g: a.lambda_g,
        lambda_d: a.lambda_d,
        lambda_s: a.lambda_s,
        learning_rate: a.lr,
        batch_size: a.batch,
        total_steps: a.steps,
        embedding_rate_bpp: a.bpp,
        seed: a.seed,
        eval_every: a.eval_every,
    };
    cfg.validate()?;
    let images = load_images(&a.data)?;
    let side = square_side(&images, &a.data)?;
    let eval_images = match &a.eval_data {
        Some(dir) => {
            let e = load_images(dir)?;
            if !e[0].same_dimensions(&images[0]) {
                return Err(CliError::Data(format!("{} and {} differ in image size", a.data.display(), dir.display())));
            }
            e
        }
        None => images.clone(),
    };
    let mut ckpt = match &a.checkpoint {
        Some(p) => load_ckpt(p)?,
        None => Checkpoint::fresh(init_params(&net_config(side, a.bpp, a.base_channels)?, a.seed)?),
    };
    check_side(&ckpt.nets, side, &a.data)?;
    let needed = payload_bits(side, a.bpp)?;
    if needed > ckpt.nets.config.message_len {
        return Err(CliError::Usage(format!(
            "{} bpp needs {needed} bits but the checkpoint carries {}",
            a.bpp, ckpt.nets.config.message_len
        )));
    }

    create_dir(&a.out)?;
    let (steps_path, eval_path, ckpt_path) =
        (a.out.join("steps.csv"), a.out.join("eval.csv"), a.out.join("checkpoint.bin"));
    let mut steps = StepLog::new(create_file(&steps_path)?)?;
    let mut evals = EvalLog::new(create_file(&eval_path)?)?;
    let start_step = ckpt.step;
    let result = game::train(
        &mut ckpt,
        &images,
        &eval_images,
        &cfg,
        |r| steps.write(r),
        |s, m| evals.write(s, m),
    );
    // On a failed step the checkpoint still holds the last good state.
    save_checkpoint(&ckpt, &ckpt_path).map_err(|e| data_at(&ckpt_path, e))?;

    let mut manifest = RunManifest::new(
        "train",
        json!({
            "steps": a.steps,
            "learning_rate": a.lr,
            "bpp": a.bpp,
            "lambda_g": a.lambda_g,
            "lambda_d": a.lambda_d,
            "lambda_s": a.lambda_s,
            "batch": a.batch,
            "eval_every": a.eval_every,
            "image_side": ckpt.nets.config.image_side,
            "message_len": ckpt.nets.config.message_len,
            "base_channels": ckpt.nets.config.base_channels,
            "leaky_slope": ckpt.nets.config.leaky_slope,
            "start_step": start_step,
            "end_step": ckpt.step,
        }),
        json!({ "seed": a.seed }),
    );
    manifest.inputs.push(show(&a.data));
    if let Some(d) = &a.eval_data {
        manifest.inputs.push(show(d));
    }
    if let Some(p) = &a.checkpoint {
        manifest.inputs.push(show(p));
    }
    manifest.checkpoints.push(show(&ckpt_path));
    manifest.outputs.extend([show(&steps_path), show(&eval_path)]);
    manifest.write(&a.out)?;

    match result {
        Ok(Some(m)) => {
            println!(
                "step {}: psnr {} dB, bit acc {:.4}, exact {:.4}, det acc {:.4}",
                ckpt.step,
                stegduel_core::metrics::format_psnr(m.psnr_db),
                m.bit_accuracy,
                m.message_exact_rate,
                m.detection_accuracy
            );
            Ok(())
        }
        Ok(None) => Ok(()),
        Err(e) => {
            let e = CliError::from(e);
            eprintln!("training stopped at step {}; last good checkpoint saved to {}", ckpt.step, ckpt_path.display());
            Err(e)
        }
    }
}

/// Key and message seed for the stego made from cover `index`.
fn pair_seeds(seed: u64, index: usize) -> (u64, u64) {
    let mut rng = indexed_rng(seed, "detector-stego", index as u64);
    (rng.gen(), rng.gen())
}

pub fn train_detector(a: &TrainDetectorArgs) -> Result<(), CliError> {
    let covers = load_images(&a.data)?;
    let side = square_side(&covers, &a.data)?;
    let mut stegos = Vec::with_capacity(covers.len());
    for (i, c) in covers.iter().enumerate() {
        let (key, msg_seed) = pair_seeds(a.seed, i);
        let s = match a.method {
            ClassicalMethod::Lsb => {
                let len = payload_bits_for(c.pixel_count(), a.bpp)?;
                lsb_matching_embed(c, &sample_message(len, msg_seed), StegoKey(key))?
            }
            ClassicalMethod::Adaptive => adaptive_embed_simulate(c, a.bpp, &cost_texture(c)?, StegoKey(key))?,
        };
        stegos.push(s);
    }
    let mut ckpt = match &a.checkpoint {
        Some(p) => load_ckpt(p)?,
        None => Checkpoint::fresh(init_params(&net_config(side, 0.1, 16)?, a.seed)?),
    };
    check_side(&ckpt.nets, side, &a.data)?;
    let dc = DetectorConfig {
        steps: a.steps,
        learning_rate: a.lr,
        batch_pairs: a.batch,
        seed: a.seed,
    };
    if !(a.lr >= 0.0 && a.lr.is_finite()) {
        return Err(CliError::Usage(format!("learning rate {} is invalid", a.lr)));
    }
    let config = ckpt.nets.config.clone();
    let losses = {
        let Checkpoint { nets, optim, .. } = &mut ckpt;
        game::train_steganalyzer(&mut nets.steganalyzer, &mut optim[2], &config, &covers, &stegos, &dc)?
    };

    create_dir(&a.out)?;
    let (loss_path, ckpt_path) = (a.out.join("detector.csv"), a.out.join("checkpoint.bin"));
    let mut w = csv::Writer::from_writer(create_file(&loss_path)?);
    let csv_err = |e: csv::Error| CliError::Data(format!("{}: {e}", loss_path.display()));
    w.write_record(["step", "loss"]).map_err(csv_err)?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    save_checkpoint(&ckpt, &ckpt_path).map_err(|e| data_at(&ckpt_path, e))?;
    let method = match a.method {
        ClassicalMethod::Lsb => "lsb",
        ClassicalMethod::Adaptive => "adaptive",
    };
    let mut manifest = RunManifest::new(
        "train-detector",
        json!({
            "method": method,
            "bpp": a.bpp,
            "steps": a.steps,
            "learning_rate": a.lr,
            "batch_pairs": a.batch,
            "image_side": side,
        }),
        json!({ "seed": a.seed }),
    );
    manifest.inputs.push(show(&a.data));
    if let Some(p) = &a.checkpoint {
        manifest.inputs.push(show(p));
    }
    manifest.checkpoints.push(show(&ckpt_path));
    manifest.outputs.push(show(&loss_path));
    manifest.write(&a.out)?;
    if let Some(last) = losses.last() {
        println!("trained {} steps on {} pairs, final loss {last:.4}", a.steps, covers.len());
    }
    Ok(())
}

fn parse_message(text: &str) -> Result<BitMessage, CliError> {
    BitMessage::parse(text.trim()).map_err(|e| CliError::Usage(format!("--message: {e}")))
}

fn check_capacity(message: &BitMessage, max_bits: usize) -> Result<(), CliError> {
    if message.len() > max_bits {
        return Err(StegoError::Capacity {
            requested: message.len(),
            max_bits,
        }
        .into());
    }
    Ok(())
}

fn write_key(path: &Path, key: StegoKey, length: usize) -> Result<(), CliError> {
    std::fs::write(path, format!("{KEY_HEADER}\nkey={}\nlength={length}\n", key.0)).map_err(|e| data_at(path, e))
}

fn read_key(path: &Path) -> Result<(StegoKey, usize), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| data_at(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(KEY_HEADER) {
        return Err(data_at(path, "not a stegduel key file"));
    }
    let (mut key, mut length) = (None, None);
    for line in lines {
        match line.split_once('=') {
            Some(("key", v)) => key = v.parse().ok(),
            Some(("length", v)) => length = v.parse().ok(),
            _ => return Err(data_at(path, format!("bad key file line {line:?}"))),
        }
    }
    match (key, length) {
        (Some(k), Some(l)) => Ok((StegoKey(k), l)),
        _ => Err(data_at(path, "key file needs key= and length=")),
    }
}

pub fn embed(a: &EmbedArgs) -> Result<(), CliError> {
    let cover = load_pgm(&a.input).map_err(|e| data_at(&a.input, e))?;
    let max_bits = payload_bits_for(cover.pixel_count(), a.bpp)?;
    let given = a.message.as_deref().map(parse_message).transpose()?;
    match a.method {
        Method::Lsb => {
            let message = given.unwrap_or_else(|| sample_message(max_bits, a.seed));
            check_capacity(&message, max_bits)?;
            let key = StegoKey(a.seed);
            let stego = lsb_matching_embed(&cover, &message, key)?;
            save_pgm(&stego, &a.out).map_err(|e| data_at(&a.out, e))?;
            let key_path = a.key.clone().unwrap_or_else(|| {
                let mut p = a.out.clone().into_os_string();
                p.push(".key");
                PathBuf::from(p)
            });
            write_key(&key_path, key, message.len())?;
            println!("{message}");
        }
        Method::Adaptive => {
            if given.is_some() {
                return Err(CliError::Usage(
                    "adaptive embedding is a simulator: it hides random bits and takes no --message".into(),
                ));
            }
            let stego = adaptive_embed_simulate(&cover, a.bpp, &cost_texture(&cover)?, StegoKey(a.seed))?;
            save_pgm(&stego, &a.out).map_err(|e| data_at(&a.out, e))?;
        }
        Method::Gan => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage("--method gan needs --checkpoint".into()))?;
            let nets = load_ckpt(path)?.nets;
            check_side(&nets, cover.width(), &a.input)?;
            if cover.width() != cover.height() {
                return Err(data_at(&a.input, "the networks need square images"));
            }
            let max_bits = max_bits.min(nets.config.message_len);
            let message = given.unwrap_or_else(|| sample_message(max_bits, a.seed));
            check_capacity(&message, max_bits)?;
            let stego = nets.embed(&[&cover], &[&message])?.remove(0);
            save_pgm(&stego, &a.out).map_err(|e| data_at(&a.out, e))?;
            println!("{message}");
        }
    }
    Ok(())
}

pub fn extract(a: &ExtractArgs) -> Result<(), CliError> {
    if a.method == Method::Adaptive {
        return Err(CliError::Usage(
            "unsupported operation: adaptive embedding is a simulator and cannot be extracted".into(),
        ));
    }
    let stego = load_pgm(&a.input).map_err(|e| data_at(&a.input, e))?;
    let bits = match a.method {
        Method::Lsb => {
            let key_path = a.key.as_ref().ok_or_else(|| CliError::Usage("--method lsb needs --key".into()))?;
            let (key, length) = read_key(key_path)?;
            lsb_extract(&stego, key, length)?
        }
        _ => {
            let path = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage("--method gan needs --checkpoint".into()))?;
            let nets = load_ckpt(path)?.nets;
            check_side(&nets, stego.width(), &a.input)?;
            let length = a.length.unwrap_or(nets.config.message_len);
            nets.extract(&[&stego], length)?.remove(0)
        }
    };
    let mut out = sink(&a.out)?;
    writeln!(out, "{bits}")?;
    out.flush()?;
    Ok(())
}

fn label_of(name: &str) -> Option<bool> {
    if name.starts_with("cover_") {
        Some(true)
    } else if name.starts_with("stego_") {
        Some(false)
    } else {
        None
    }
}

pub fn detect(a: &DetectArgs) -> Result<(), CliError> {
    let named = load_named(&a.data)?;
    let nets = load_ckpt(&a.checkpoint)?.nets;
    check_side(&nets, named[0].1.width(), &a.data)?;
    let images: Vec<&GrayImage> = named.iter().map(|(_, im)| im).collect();
    let chunks: Vec<Vec<f64>> = images
        .par_chunks(CHUNK)
        .map(|c| nets.cover_probability(c))
        .collect::<Result<_, _>>()?;
    let p_cover: Vec<f64> = chunks.into_iter().flatten().collect();

    let mut w = csv::Writer::from_writer(sink(&a.out)?);
    let csv_err = |e: csv::Error| CliError::Data(format!("writing detection report: {e}"));
    w.write_record(["file", "label", "p_stego", "predicted", "correct"]).map_err(csv_err)?;
    let (mut labels, mut probs) = (Vec::new(), Vec::new());
    for ((name, _), &p) in named.iter().zip(&p_cover) {
        let predicted_cover = p >= game::DETECTION_THRESHOLD;
        let label = label_of(name);
        let correct = match label {
            Some(is_cover) => {
                labels.push(is_cover);
                probs.push(p);
                if is_cover == predicted_cover { "1" } else { "0" }
            }
            None => "",
        };
        let kind = |c: bool| if c { "cover" } else { "stego" };
        w.write_record([
            name.as_str(),
            label.map(kind).unwrap_or("unknown"),
            &(1.0 - p).to_string(),
            kind(predicted_cover),
            correct,
        ])
        .map_err(csv_err)?;
    }
    if !labels.is_empty() {
        let acc = detection_accuracy(&labels, &probs, game::DETECTION_THRESHOLD)?;
        w.write_record(["ACCURACY", &labels.len().to_string(), "", "", &acc.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let images = load_images(&a.data)?;
    let ckpt = load_ckpt(&a.checkpoint)?;
    check_side(&ckpt.nets, square_side(&images, &a.data)?, &a.data)?;
    let m = game::evaluate(&ckpt.nets, &images, a.bpp, a.seed)?;
    let mut log = EvalLog::new(sink(&a.out)?)?;
    log.write(ckpt.step, &m)?;
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    if a.instances == 0 {
        return Err(CliError::Usage("--instances must be at least 1".into()));
    }
    let faulty = match &a.faulty {
        Some(name) => Some(
            Primitive::ALL
                .iter()
                .copied()
                .find(|p| p.name() == name)
                .ok_or_else(|| CliError::Usage(format!("unknown primitive {name:?}")))?,
        ),
        None => None,
    };
    let mut rng = Xoshiro256StarStar::seed_from_u64(a.seed);
    let rows = check_all_primitives(&mut rng, a.instances, faulty)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "primitive,max_relative_error,status")?;
    for r in &rows {
        writeln!(
            out,
            "{},{:e},{}",
            r.primitive.name(),
            r.max_relative_error,
            if r.passed { "pass" } else { "FAIL" }
        )?;
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.primitive.name()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}
