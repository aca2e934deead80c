//! The three-player objective and the round-robin training loop.
//!
//! Step `t` updates exactly one player, chosen by `t mod 3`: the
//! discriminator (decoding distance plus real/fake cross-entropy), the
//! steganalyzer (cover-versus-stego cross-entropy), then the generator
//! (weighted fidelity, decoding and adversarial terms). Every step evaluates
//! all three losses so the logs stay comparable.

use std::io::Write;
use std::time::{Duration, Instant};

use rand::Rng;

use crate::data::{BitMessage, GrayImage};
use crate::metrics::{bit_error_rate, detection_accuracy, format_psnr, payload_bits, psnr, MetricsRecord};
use crate::nets::{
    discriminator_forward, generator_forward, images_to_tensor, messages_to_tensor, steganalyzer_forward, Checkpoint,
    NetConfig, Nets, Network, SteganalyzerParams,
};
use crate::rng::{indexed_rng, permutation, StreamRng};
use crate::tensor::{rmsprop_step, Graph, OptimState, Tensor, TensorError, Var};
use crate::Error;

/// Probabilities are clamped to `[PROB_FLOOR, 1 − PROB_FLOOR]` before logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Detection threshold on the steganalyzer's cover probability.
pub const DETECTION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_g: f64,
    pub lambda_d: f64,
    pub lambda_s: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub embedding_rate_bpp: f64,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_g: 0.7,
            lambda_d: 1.0,
            lambda_s: 0.1,
            learning_rate: 2e-4,
            batch_size: 8,
            total_steps: 600,
            embedding_rate_bpp: 0.1,
            seed: 17,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        for (name, v) in [("lambda_g", self.lambda_g), ("lambda_d", self.lambda_d), ("lambda_s", self.lambda_s)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Contract(format!("{name} = {v} outside [0, 1]")));
            }
        }
        // Zero is allowed: it turns every update into a no-op.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size must be positive".into()));
        }
        payload_bits(1, self.embedding_rate_bpp)?;
        Ok(())
    }

    pub fn lambdas(&self) -> Lambdas {
        Lambdas {
            g: self.lambda_g,
            d: self.lambda_d,
            s: self.lambda_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lambdas {
    pub g: f64,
    pub d: f64,
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Player {
    Discriminator,
    Steganalyzer,
    Generator,
}

impl Player {
    pub fn for_step(step: u64) -> Self {
        match step % 3 {
            0 => Player::Discriminator,
            1 => Player::Steganalyzer,
            _ => Player::Generator,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Player::Discriminator => "discriminator",
            Player::Steganalyzer => "steganalyzer",
            Player::Generator => "generator",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub updated: Player,
    pub l_g: f64,
    pub l_d: f64,
    pub l_s: f64,
    pub wall_time: Duration,
}

fn check_len(op: &'static str, expected: usize, found: usize) -> Result<(), Error> {
    if expected != found {
        return Err(TensorError::Dimension {
            op,
            axis: 0,
            expected,
            found,
        }
        .into());
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// `‖m − decoded‖₂` with `m` the message as a {0,1} vector.
pub fn loss_decoder(message: &BitMessage, decoded: &[f64]) -> Result<f64, Error> {
    check_len("loss_decoder", message.len(), decoded.len())?;
    Ok(message
        .to_unit()
        .iter()
        .zip(decoded)
        .map(|(m, d)| (m - d) * (m - d))
        .sum::<f64>()
        .sqrt())
}

/// Sum of log-likelihoods of `probs` under a single target label.
fn bce_terms(probs: &[f64], target_one: bool) -> f64 {
    probs
        .iter()
        .map(|&p| {
            let p = clamp_prob(p);
            if target_one {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum()
}

fn bce_pair(op: &str, positives: &[f64], negatives: &[f64]) -> Result<f64, Error> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Contract(format!("{op} needs both batches nonempty")));
    }
    let n = (positives.len() + negatives.len()) as f64;
    Ok(-(bce_terms(positives, true) + bce_terms(negatives, false)) / n)
}

/// `−(1/n)[Σ_covers ln p + Σ_stegos ln(1 − p)]` over the combined batch,
/// with `p` the probability of "cover".
pub fn loss_steganalyzer(cover_probs: &[f64], stego_probs: &[f64]) -> Result<f64, Error> {
    bce_pair("loss_steganalyzer", cover_probs, stego_probs)
}

/// Cross-entropy of the real/fake head with real = 1, generated = 0.
pub fn loss_realfake(probs_on_real: &[f64], probs_on_generated: &[f64]) -> Result<f64, Error> {
    bce_pair("loss_realfake", probs_on_real, probs_on_generated)
}

/// Mean cross-entropy of `probs` against target 1: the generator's
/// non-saturating adversarial term.
pub fn loss_fool(probs: &[f64]) -> Result<f64, Error> {
    if probs.is_empty() {
        return Err(Error::Contract("loss_fool needs a nonempty batch".into()));
    }
    Ok(-bce_terms(probs, true) / probs.len() as f64)
}

/// `λ_G·‖C − S‖₂ + λ_D·L_D + λ_S·(L_fool(S) + L_fool(D_rf))`.
pub fn loss_generator(
    cover: &[f64],
    stego: &[f64],
    decoder_loss: f64,
    steganalyzer_fool_loss: f64,
    realfake_fool_loss: f64,
    lambdas: Lambdas,
) -> Result<f64, Error> {
    check_len("loss_generator", cover.len(), stego.len())?;
    let dist = cover.iter().zip(stego).map(|(c, s)| (c - s) * (c - s)).sum::<f64>().sqrt();
    Ok(lambdas.g * dist + lambdas.d * decoder_loss + lambdas.s * (steganalyzer_fool_loss + realfake_fool_loss))
}

/// Batch mean of the row-wise Euclidean norms of `a − b` (both `[N, k]`).
fn graph_row_distance(g: &mut Graph, a: Var, b: Var) -> crate::tensor::Result<Var> {
    let k = g.shape(a)[1];
    let diff = g.sub(a, b)?;
    let sq = g.mul(diff, diff)?;
    let ones = g.constant(Tensor::new(vec![k, 1], vec![1.0; k])?);
    let rows = g.matmul(sq, ones)?;
    let norms = g.sqrt(rows)?;
    g.mean(norms)
}

/// Mean cross-entropy of probabilities `p` against fixed targets.
fn graph_bce(g: &mut Graph, p: Var, targets: &[f64]) -> crate::tensor::Result<Var> {
    let shape = g.shape(p).to_vec();
    let t = g.constant(Tensor::new(shape.clone(), targets.to_vec())?);
    let u = g.constant(Tensor::new(shape, targets.iter().map(|t| 1.0 - t).collect())?);
    let pc = g.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let lp = g.ln(pc)?;
    let neg = g.scale(pc, -1.0)?;
    let q = g.add_scalar(neg, 1.0)?;
    let lq = g.ln(q)?;
    let a = g.mul(t, lp)?;
    let b = g.mul(u, lq)?;
    let s = g.add(a, b)?;
    let m = g.mean(s)?;
    g.scale(m, -1.0)
}

fn graph_bce_pair(g: &mut Graph, pos: Var, neg: Var) -> crate::tensor::Result<Var> {
    let (np, nn) = (g.shape(pos)[0], g.shape(neg)[0]);
    let both = g.concat(&[pos, neg], 0)?;
    let targets: Vec<f64> = std::iter::repeat(1.0).take(np).chain(std::iter::repeat(0.0).take(nn)).collect();
    graph_bce(g, both, &targets)
}

/// One training batch: covers and fresh messages.
#[derive(Debug, Clone)]
pub struct Batch {
    pub covers: Vec<GrayImage>,
    pub messages: Vec<BitMessage>,
}

fn random_message<R: Rng>(rng: &mut R, len: usize) -> BitMessage {
    (0..len).map(|_| rng.gen::<bool>()).collect()
}

/// The batch for `step`: images drawn by a keyed shuffle (cycling when the
/// dataset is smaller than the batch), one fresh message per image.
pub fn sample_batch(images: &[GrayImage], cfg: &TrainConfig, side: usize, step: u64) -> Result<Batch, Error> {
    if images.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let len = payload_bits(side, cfg.embedding_rate_bpp)?;
    let mut rng: StreamRng = indexed_rng(cfg.seed, "train-batch", step);
    let order = permutation(images.len(), &mut rng);
    let covers: Vec<GrayImage> = (0..cfg.batch_size).map(|i| images[order[i % order.len()]].clone()).collect();
    let messages = (0..cfg.batch_size).map(|_| random_message(&mut rng, len)).collect();
    Ok(Batch { covers, messages })
}

/// Loss values of one forward pass of the full game.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GameLosses {
    pub l_g: f64,
    pub l_d: f64,
    pub l_s: f64,
    pub l_realfake: f64,
}

struct GameGraph {
    losses: [Var; 4],
    bound: Vec<crate::nets::BoundLayer>,
}

/// Builds the whole game on `g`, with only `player`'s parameters tracked.
fn build_game(
    g: &mut Graph,
    nets: &Nets,
    batch: &Batch,
    lambdas: Lambdas,
    player: Option<Player>,
) -> crate::tensor::Result<GameGraph> {
    let cfg = &nets.config;
    let covers: Vec<&GrayImage> = batch.covers.iter().collect();
    let msgs: Vec<&BitMessage> = batch.messages.iter().collect();
    let n = covers.len();
    let l = cfg.message_len;

    let x = g.constant(images_to_tensor(cfg, &covers)?);
    let m = g.constant(messages_to_tensor(cfg, &msgs)?);
    // Targets and mask over the decode head; unused slots are masked out.
    let mut target = vec![0.0; n * l];
    let mut mask = vec![0.0; n * l];
    for (i, msg) in msgs.iter().enumerate() {
        for (j, &b) in msg.bits().iter().enumerate() {
            target[i * l + j] = if b { 1.0 } else { 0.0 };
            mask[i * l + j] = 1.0;
        }
    }
    let target = g.constant(Tensor::new(vec![n, l], target)?);
    let mask = g.constant(Tensor::new(vec![n, l], mask)?);

    let gp = nets.generator.bind(g, player == Some(Player::Generator));
    let dp = nets.discriminator.bind(g, player == Some(Player::Discriminator));
    let sp = nets.steganalyzer.bind(g, player == Some(Player::Steganalyzer));

    let stego = generator_forward(g, cfg, &gp, x, m)?;
    let d_stego = discriminator_forward(g, cfg, &dp, stego)?;
    let d_cover = discriminator_forward(g, cfg, &dp, x)?;
    let s_cover = steganalyzer_forward(g, cfg, &sp, x)?;
    let s_stego = steganalyzer_forward(g, cfg, &sp, stego)?;

    let decoded = g.mul(d_stego.decoded, mask)?;
    let l_d = graph_row_distance(g, target, decoded)?;
    let l_rf = graph_bce_pair(g, d_cover.realfake, d_stego.realfake)?;
    let l_s = graph_bce_pair(g, s_cover, s_stego)?;

    let side = cfg.image_side;
    let xf = g.reshape(x, &[n, side * side])?;
    let sf = g.reshape(stego, &[n, side * side])?;
    let dist = graph_row_distance(g, xf, sf)?;
    let ones = vec![1.0; n];
    let fool_s = graph_bce(g, s_stego, &ones)?;
    let fool_rf = graph_bce(g, d_stego.realfake, &ones)?;
    let adv = g.add(fool_s, fool_rf)?;
    let t_g = g.scale(dist, lambdas.g)?;
    let t_d = g.scale(l_d, lambdas.d)?;
    let t_s = g.scale(adv, lambdas.s)?;
    let t = g.add(t_g, t_d)?;
    let l_g = g.add(t, t_s)?;

    let bound = match player {
        Some(Player::Generator) => gp,
        Some(Player::Discriminator) => dp,
        Some(Player::Steganalyzer) => sp,
        None => Vec::new(),
    };
    Ok(GameGraph {
        losses: [l_g, l_d, l_s, l_rf],
        bound,
    })
}

fn read_losses(g: &Graph, gg: &GameGraph) -> crate::tensor::Result<GameLosses> {
    let [l_g, l_d, l_s, l_rf] = gg.losses;
    Ok(GameLosses {
        l_g: g.value(l_g).item()?,
        l_d: g.value(l_d).item()?,
        l_s: g.value(l_s).item()?,
        l_realfake: g.value(l_rf).item()?,
    })
}

/// Evaluates every loss on `batch` without touching any parameter.
pub fn game_losses(nets: &Nets, batch: &Batch, lambdas: Lambdas) -> Result<GameLosses, Error> {
    let mut g = Graph::new();
    let gg = build_game(&mut g, nets, batch, lambdas, None)?;
    Ok(read_losses(&g, &gg)?)
}

fn finite_grads<N: Network>(net: &N) -> crate::tensor::Result<()> {
    for t in net.tensors() {
        if t.grad().is_some_and(|gr| gr.iter().any(|v| !v.is_finite())) {
            return Err(TensorError::Overflow { op: "backward" });
        }
    }
    Ok(())
}

fn update<N: Network>(net: &mut N, g: &mut Graph, bound: &[crate::nets::BoundLayer], state: &mut OptimState, lr: f64) -> crate::tensor::Result<()> {
    net.collect_grads(g, bound)?;
    finite_grads(net)?;
    let mut params = net.tensors_mut();
    rmsprop_step(&mut params, state, lr)?;
    for p in params {
        p.zero_grad();
    }
    Ok(())
}

/// Runs step `ckpt.step` of the round-robin and advances the counter. On
/// error nothing in `ckpt` has changed.
pub fn train_step(ckpt: &mut Checkpoint, images: &[GrayImage], cfg: &TrainConfig) -> Result<StepReport, Error> {
    let start = Instant::now();
    let step = ckpt.step;
    let player = Player::for_step(step);
    let batch = sample_batch(images, cfg, ckpt.nets.config.image_side, step)?;
    let mut g = Graph::new();
    let gg = build_game(&mut g, &ckpt.nets, &batch, cfg.lambdas(), Some(player))?;
    let losses = read_losses(&g, &gg)?;
    let [l_g, l_d, l_s, l_rf] = gg.losses;
    let objective = match player {
        Player::Discriminator => g.add(l_d, l_rf)?,
        Player::Steganalyzer => l_s,
        Player::Generator => l_g,
    };
    g.backward(objective)?;

    // Work on copies so a failed update leaves the checkpoint untouched.
    let lr = cfg.learning_rate;
    let nets = &ckpt.nets;
    match player {
        Player::Generator => {
            let (mut net, mut st) = (nets.generator.clone(), ckpt.optim[0].clone());
            update(&mut net, &mut g, &gg.bound, &mut st, lr)?;
            ckpt.nets.generator = net;
            ckpt.optim[0] = st;
        }
        Player::Discriminator => {
            let (mut net, mut st) = (nets.discriminator.clone(), ckpt.optim[1].clone());
            update(&mut net, &mut g, &gg.bound, &mut st, lr)?;
            ckpt.nets.discriminator = net;
            ckpt.optim[1] = st;
        }
        Player::Steganalyzer => {
            let (mut net, mut st) = (nets.steganalyzer.clone(), ckpt.optim[2].clone());
            update(&mut net, &mut g, &gg.bound, &mut st, lr)?;
            ckpt.nets.steganalyzer = net;
            ckpt.optim[2] = st;
        }
    }
    ckpt.step += 1;
    Ok(StepReport {
        step,
        updated: player,
        l_g: losses.l_g,
        l_d: losses.l_d,
        l_s: losses.l_s,
        wall_time: start.elapsed(),
    })
}

/// The evaluation message for image `index`: the first `len` bits of a
/// per-image stream, so a shorter payload is a prefix of a longer one.
pub fn eval_message(seed: u64, index: usize, len: usize) -> BitMessage {
    let mut rng = indexed_rng(seed, "eval-message", index as u64);
    random_message(&mut rng, len)
}

const EVAL_CHUNK: usize = 16;

/// Scores already-computed stegos. `decoded` holds one bit-probability
/// vector per message (at least as long as the message).
pub fn score(
    covers: &[GrayImage],
    stegos: &[GrayImage],
    messages: &[BitMessage],
    decoded: &[Vec<f64>],
    cover_probs: &[f64],
    stego_probs: &[f64],
    bpp: f64,
) -> Result<MetricsRecord, Error> {
    let n = covers.len();
    if n == 0 {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    for (what, len) in [
        ("stegos", stegos.len()),
        ("messages", messages.len()),
        ("decoded", decoded.len()),
        ("cover_probs", cover_probs.len()),
        ("stego_probs", stego_probs.len()),
    ] {
        if len != n {
            return Err(Error::Contract(format!("{n} covers but {len} {what}")));
        }
    }
    let mut psnr_sum = 0.0;
    let (mut hits, mut bits, mut exact) = (0usize, 0usize, 0usize);
    for i in 0..n {
        psnr_sum += psnr(&covers[i], &stegos[i])?;
        let m = &messages[i];
        if decoded[i].len() < m.len() {
            return Err(Error::Contract(format!(
                "{} decoded bits for a {}-bit message",
                decoded[i].len(),
                m.len()
            )));
        }
        let m_hat: BitMessage = decoded[i][..m.len()].iter().map(|&p| p >= 0.5).collect();
        let ber = bit_error_rate(m, &m_hat)?;
        let wrong = (ber * m.len() as f64).round() as usize;
        hits += m.len() - wrong;
        bits += m.len();
        exact += (wrong == 0) as usize;
    }
    let labels: Vec<bool> = std::iter::repeat(true).take(n).chain(std::iter::repeat(false).take(n)).collect();
    let probs: Vec<f64> = cover_probs.iter().chain(stego_probs).copied().collect();
    Ok(MetricsRecord {
        psnr_db: psnr_sum / n as f64,
        bit_accuracy: if bits == 0 { 1.0 } else { hits as f64 / bits as f64 },
        message_exact_rate: exact as f64 / n as f64,
        detection_accuracy: detection_accuracy(&labels, &probs, DETECTION_THRESHOLD)?,
        embedding_rate_bpp: bpp,
    })
}

/// Embeds an evaluation message in every image, quantizes the stego to 8
/// bits, then decodes it and runs the steganalyzer on covers and stegos.
pub fn evaluate(nets: &Nets, images: &[GrayImage], bpp: f64, seed: u64) -> Result<MetricsRecord, Error> {
    if images.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let len = payload_bits(nets.config.image_side, bpp)?;
    if len > nets.config.message_len {
        return Err(Error::Contract(format!(
            "{bpp} bpp needs {len} bits but the model carries {}",
            nets.config.message_len
        )));
    }
    let messages: Vec<BitMessage> = (0..images.len()).map(|i| eval_message(seed, i, len)).collect();
    let (mut stegos, mut decoded, mut pc, mut ps) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (imgs, msgs) in images.chunks(EVAL_CHUNK).zip(messages.chunks(EVAL_CHUNK)) {
        let covers: Vec<&GrayImage> = imgs.iter().collect();
        let s = nets.embed(&covers, &msgs.iter().collect::<Vec<_>>())?;
        let srefs: Vec<&GrayImage> = s.iter().collect();
        decoded.extend(nets.discriminate(&srefs)?.into_iter().map(|(_, d)| d));
        pc.extend(nets.cover_probability(&covers)?);
        ps.extend(nets.cover_probability(&srefs)?);
        stegos.extend(s);
    }
    score(images, &stegos, &messages, &decoded, &pc, &ps, bpp)
}

/// CSV sink for step reports. Wall time is left out so logs are
/// reproducible byte for byte.
pub struct StepLog<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> StepLog<W> {
    pub fn new(w: W) -> Result<Self, Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "updated_net", "l_g", "l_d", "l_s"]).map_err(csv_err)?;
        Ok(StepLog { out })
    }

    pub fn write(&mut self, r: &StepReport) -> Result<(), Error> {
        self.out
            .write_record([
                r.step.to_string(),
                r.updated.name().to_string(),
                r.l_g.to_string(),
                r.l_d.to_string(),
                r.l_s.to_string(),
            ])
            .map_err(csv_err)?;
        self.out.flush()?;
        Ok(())
    }
}

pub struct EvalLog<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> EvalLog<W> {
    pub fn new(w: W) -> Result<Self, Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "psnr_mean", "bit_acc", "msg_exact_rate", "det_acc"])
            .map_err(csv_err)?;
        Ok(EvalLog { out })
    }

    pub fn write(&mut self, step: u64, m: &MetricsRecord) -> Result<(), Error> {
        self.out
            .write_record([
                step.to_string(),
                format_psnr(m.psnr_db),
                m.bit_accuracy.to_string(),
                m.message_exact_rate.to_string(),
                m.detection_accuracy.to_string(),
            ])
            .map_err(csv_err)?;
        self.out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Contract(format!("csv: {other:?}")),
    }
}

/// Runs `cfg.total_steps` steps from `ckpt.step`, evaluating on
/// `eval_images` every `cfg.eval_every` steps and after the last one.
pub fn train(
    ckpt: &mut Checkpoint,
    train_images: &[GrayImage],
    eval_images: &[GrayImage],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepReport) -> Result<(), Error>,
    mut on_eval: impl FnMut(u64, &MetricsRecord) -> Result<(), Error>,
) -> Result<Option<MetricsRecord>, Error> {
    cfg.validate()?;
    let end = ckpt.step + cfg.total_steps;
    let mut last = None;
    while ckpt.step < end {
        let report = train_step(ckpt, train_images, cfg)?;
        on_step(&report)?;
        let done = ckpt.step;
        let due = cfg.eval_every > 0 && done % cfg.eval_every == 0;
        if !eval_images.is_empty() && (due || done == end) {
            let m = evaluate(&ckpt.nets, eval_images, cfg.embedding_rate_bpp, cfg.seed)?;
            on_eval(done, &m)?;
            last = Some(m);
        }
    }
    Ok(last)
}

/// Settings for training the steganalyzer alone on labeled pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorConfig {
    pub steps: u64,
    pub learning_rate: f64,
    /// Pairs per step; each contributes one cover and one stego.
    pub batch_pairs: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            steps: 600,
            learning_rate: 1e-3,
            batch_pairs: 16,
            seed: 17,
        }
    }
}

/// Supervised cross-entropy training of the steganalyzer on
/// `(covers[i], stegos[i])` pairs. Returns the loss at every step.
pub fn train_steganalyzer(
    params: &mut SteganalyzerParams,
    state: &mut OptimState,
    config: &NetConfig,
    covers: &[GrayImage],
    stegos: &[GrayImage],
    cfg: &DetectorConfig,
) -> Result<Vec<f64>, Error> {
    if covers.is_empty() || covers.len() != stegos.len() {
        return Err(Error::Contract(format!(
            "{} covers and {} stegos; need equal nonempty sets",
            covers.len(),
            stegos.len()
        )));
    }
    if cfg.batch_pairs == 0 {
        return Err(Error::Contract("batch_pairs must be positive".into()));
    }
    let mut losses = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let mut rng = indexed_rng(cfg.seed, "detector-batch", step);
        let order = permutation(covers.len(), &mut rng);
        let pick: Vec<usize> = (0..cfg.batch_pairs).map(|i| order[i % order.len()]).collect();
        let cb: Vec<&GrayImage> = pick.iter().map(|&i| &covers[i]).collect();
        let sb: Vec<&GrayImage> = pick.iter().map(|&i| &stegos[i]).collect();
        let mut g = Graph::new();
        let xc = g.constant(images_to_tensor(config, &cb)?);
        let xs = g.constant(images_to_tensor(config, &sb)?);
        let sp = params.bind(&mut g, true);
        let pc = steganalyzer_forward(&mut g, config, &sp, xc)?;
        let ps = steganalyzer_forward(&mut g, config, &sp, xs)?;
        let loss = graph_bce_pair(&mut g, pc, ps)?;
        losses.push(g.value(loss).item()?);
        g.backward(loss)?;
        update(params, &mut g, &sp, state, cfg.learning_rate)?;
    }
    Ok(losses)
}
