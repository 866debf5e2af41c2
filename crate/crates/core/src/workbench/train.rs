//! The two training stages and the plain-autoencoder reference run.

use std::fmt::Write as _;

use crate::degradation::{degrade, DegradationSpec};
use crate::dictionary::{self, distinct_used, ENTRIES};
use crate::error::{Error, Result};
use crate::losses::{
    adaptive_scale, component_losses, output_grad_norm, weighted_total, discriminator_loss, generator_adversarial, image_losses, l1_loss, perceptual_loss, prior_loss,
    total_dict_loss, total_restore_loss, DictParts, Discriminator, DiscriminatorSet, IdentityNet, LossWeights,
    PerceptualNet, Region, RestoreParts,
};
use crate::metrics::stack;
use crate::model::{HqGenerator, Restorer};
use crate::rng::Rng;
use crate::tensor::{Adam, AdamConfig, ParamStore, Params, Tape, Tensor, Var};

use super::checkpoint::load_matching;
use super::config::{Schedule, StageConfig};

/// RNG streams under the run seed.
const BATCH_STREAM: u64 = 10;
const DEGRADE_STREAM: u64 = 1 << 32;
const EVAL_STREAM: u64 = 2 << 32;
const RESTART_STREAM: u64 = 3 << 32;

/// Name of the stage-1 discriminator; stage 2 reuses it as its global one.
pub const GLOBAL_DISC: &str = "disc.global";

/// Samples batches as consecutive slices of per-epoch shuffles.
#[derive(Clone, Debug)]
pub struct Batcher {
    n: usize,
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batcher {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, order: Vec::new(), pos: 0, rng: Rng::derive(seed, BATCH_STREAM) }
    }

    pub fn next(&mut self, batch: usize) -> Vec<usize> {
        (0..batch)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order = (0..self.n).collect();
                    self.rng.shuffle(&mut self.order);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// `(B, H, W, 3)` batch of the selected images.
pub fn gather(images: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = idx.iter().map(|&i| &images[i]).collect();
    stack(&refs)
}

/// Per-iteration loss trace written as CSV: a `# weights:` comment line,
/// a header row and one row per iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLog {
    pub weights: Vec<(&'static str, f64)>,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
}

impl LossLog {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| *c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("# weights:");
        for (k, v) in &self.weights {
            let _ = write!(s, " lambda_{k}={v}");
        }
        s.push('\n');
        s.push_str(&self.columns.join(","));
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// Union of two stores with disjoint names.
pub fn merge(a: &ParamStore, b: &ParamStore) -> Result<ParamStore> {
    let mut out = a.clone();
    for (name, p) in b.iter() {
        if out.contains(name) {
            return Err(Error::invalid("merge", format!("parameter {name} in both stores")));
        }
        out.insert(name, p.value.clone());
        out.param_mut(name)?.trainable = p.trainable;
    }
    Ok(out)
}

/// The parameters of `from` whose names start with one of `prefixes`.
pub fn subset(from: &ParamStore, prefixes: &[&str]) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, p) in from.iter() {
        if prefixes.iter().any(|pre| name.starts_with(pre)) {
            out.insert(name, p.value.clone());
        }
    }
    out
}

fn adam() -> Adam {
    Adam::new(AdamConfig::default())
}

fn step(store: &mut ParamStore, opt: &mut Adam, tape: &mut Tape, loss: Var, lr: f64) -> Result<()> {
    tape.backward(loss)?;
    store.pull_grads(tape);
    opt.step(store, lr)
}

/// Mean L1 reconstruction error over every image, and the codebook
/// indices used (empty when `quantized` is false).
pub fn reconstruction_l1(gen: &HqGenerator, store: &ParamStore, images: &[Tensor], quantized: bool) -> Result<(f64, Vec<usize>)> {
    let mut tape = Tape::new();
    let all: Vec<usize> = (0..images.len()).collect();
    let x = tape.constant(gather(images, &all)?);
    let p = Params::frozen(store);
    let (recon, indices) = if quantized {
        let out = gen.forward(&mut tape, p, x)?;
        (out.recon, out.indices)
    } else {
        (gen.forward_unquantized(&mut tape, p, x)?, Vec::new())
    };
    let l1 = l1_loss(&mut tape, x, recon)?;
    Ok((tape.value(l1).item(), indices))
}

/// Re-seeds entries with zero `usage`, returning how many moved.
///
/// Each dead entry first takes a row of `latents` that shares its entry
/// (`indices`) with an earlier row. Dead entries left over become copies of
/// used entries, so a latent drifting onto one decodes as it would on the
/// original instead of through a stale vector.
pub fn restart_dead_codes(store: &mut ParamStore, usage: &[usize], latents: &Tensor, indices: &[usize], rng: &mut Rng) -> Result<usize> {
    let c = *latents.shape().last().expect("rank >= 1");
    if indices.len() * c != latents.numel() {
        return Err(Error::invalid("restart_dead_codes", format!("{} indices for {} latent rows", indices.len(), latents.numel() / c)));
    }
    let mut owned = vec![false; usage.len()];
    let mut crowded: Vec<usize> = (0..indices.len()).filter(|&r| std::mem::replace(&mut owned[indices[r]], true)).collect();
    let live: Vec<usize> = (0..usage.len()).filter(|&m| usage[m] > 0).collect();
    if live.is_empty() {
        return Ok(0);
    }
    let mut entries = store.get(ENTRIES)?.clone();
    let mut moved = 0;
    for m in (0..usage.len()).filter(|&m| usage[m] == 0) {
        let src = if crowded.is_empty() {
            let k = live[rng.below(live.len())];
            entries.data()[k * c..(k + 1) * c].to_vec()
        } else {
            let r = crowded.swap_remove(rng.below(crowded.len()));
            latents.data()[r * c..(r + 1) * c].to_vec()
        };
        entries.data_mut()[m * c..(m + 1) * c].copy_from_slice(&src);
        moved += 1;
    }
    store.set(ENTRIES, entries)?;
    Ok(moved)
}

/// Outcome of a stage-1 run.
#[derive(Clone, Debug)]
pub struct DictRun {
    /// Generator, codebook and discriminator parameters.
    pub store: ParamStore,
    pub log: LossLog,
    /// Dataset L1 before the first and after the last update.
    pub initial_l1: f64,
    pub final_l1: f64,
    /// Distinct codebook entries selected over the whole dataset at the end.
    pub distinct_codes: usize,
}

pub fn stage1_discriminator(cfg: &StageConfig) -> Discriminator {
    Discriminator::new(GLOBAL_DISC, cfg.disc_width, 3)
}

fn check_images(cfg: &StageConfig, images: &[Tensor]) -> Result<()> {
    let s = cfg.model.image_size;
    if images.is_empty() {
        return Err(Error::invalid("train", "no training images"));
    }
    if let Some(bad) = images.iter().find(|t| t.shape() != [s, s, 3]) {
        return Err(Error::invalid("train", format!("image shape {:?} does not match configured {s}x{s}x3", bad.shape())));
    }
    Ok(())
}

/// Dictionary learning: alternating generator and discriminator steps.
/// `progress` sees every iteration's row.
pub fn train_dict(cfg: &StageConfig, images: &[Tensor], mut progress: impl FnMut(usize, &[f64])) -> Result<DictRun> {
    cfg.validate()?;
    check_images(cfg, images)?;
    let gen = HqGenerator::new(cfg.model.clone())?;
    let disc = stage1_discriminator(cfg);
    let mut g = ParamStore::new();
    gen.init(&mut g, cfg.seed)?;
    let mut d = ParamStore::new();
    disc.init(&mut d, &mut Rng::derive(cfg.seed, 3));
    let pnet = PerceptualNet::new();
    let w = cfg.weights;
    let (initial_l1, _) = reconstruction_l1(&gen, &g, images, true)?;

    let mut columns = vec!["iter", "lr", "total"];
    columns.extend(DictParts::NAMES);
    columns.extend(["adv_weight", "d_loss", "codes"]);
    let mut log = LossLog {
        weights: vec![("per", w.per), ("adv", w.adv), ("d", w.d), ("c", w.c)],
        columns,
        rows: Vec::with_capacity(cfg.dict.iters),
    };
    let (mut g_opt, mut d_opt) = (adam(), adam());
    let mut batcher = Batcher::new(images.len(), cfg.seed);
    let mut usage = vec![0; cfg.model.codebook_size];
    for iter in 0..cfg.dict.iters {
        let lr = cfg.dict.lr_at(iter);
        let batch = gather(images, &batcher.next(cfg.batch_size))?;

        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let out = gen.forward(&mut tape, Params::tracked(&g), x)?;
        let fake = disc.forward(&mut tape, Params::frozen(&d), out.recon)?;
        let (dict, commit) = dictionary::dict_losses(&mut tape, out.z_h, out.z_p)?;
        let parts = DictParts {
            l1: l1_loss(&mut tape, x, out.recon)?,
            per: perceptual_loss(&mut tape, &pnet, x, out.recon)?,
            adv: generator_adversarial(&mut tape, fake.logits)?,
            dict,
            commit,
        };
        let recon = tape.value(out.recon).clone();
        let mut wi = w;
        if !cfg.adversarial_on(iter, cfg.dict.iters) {
            wi.adv = 0.0;
        } else if cfg.adaptive_adv {
            let rec = output_grad_norm(&recon, |t, v| {
                let x = t.constant(batch.clone());
                let l1 = l1_loss(t, x, v)?;
                let per = perceptual_loss(t, &pnet, x, v)?;
                weighted_total(t, &["l1", "per"], &[l1, per], &[1.0, w.per])
            })?;
            let adv = output_grad_norm(&recon, |t, v| {
                let f = disc.forward(t, Params::frozen(&d), v)?;
                generator_adversarial(t, f.logits)
            })?;
            wi.adv *= adaptive_scale(rec, adv);
        }
        let total = total_dict_loss(&mut tape, &parts, &wi)?;
        let mut row = vec![iter as f64, lr, tape.value(total).item()];
        row.extend(parts.vars().iter().map(|v| tape.value(*v).item()));
        row.push(wi.adv);
        let latents = tape.value(out.z_h).clone();
        step(&mut g, &mut g_opt, &mut tape, total, lr)?;
        for &i in &out.indices {
            usage[i] += 1;
        }
        if cfg.code_restart_every > 0 && (iter + 1) % cfg.code_restart_every == 0 {
            let mut rng = Rng::derive(cfg.seed, RESTART_STREAM + iter as u64);
            restart_dead_codes(&mut g, &usage, &latents, &out.indices, &mut rng)?;
            usage.iter_mut().for_each(|u| *u = 0);
        }

        let mut tape = Tape::new();
        let (real, fake) = (tape.constant(batch), tape.constant(recon));
        let dr = disc.forward(&mut tape, Params::tracked(&d), real)?;
        let df = disc.forward(&mut tape, Params::tracked(&d), fake)?;
        let d_loss = discriminator_loss(&mut tape, dr.logits, df.logits)?;
        let d_value = tape.value(d_loss).item();
        if !d_value.is_finite() {
            return Err(Error::Diverged { term: "d_loss".into(), value: d_value });
        }
        step(&mut d, &mut d_opt, &mut tape, d_loss, lr)?;

        row.extend([d_value, distinct_used(&out.indices, cfg.model.codebook_size) as f64]);
        progress(iter, &row);
        log.rows.push(row);
    }
    let (final_l1, indices) = reconstruction_l1(&gen, &g, images, true)?;
    Ok(DictRun {
        store: merge(&g, &d)?,
        log,
        initial_l1,
        final_l1,
        distinct_codes: distinct_used(&indices, cfg.model.codebook_size),
    })
}

/// Outcome of the no-quantization reference run.
#[derive(Clone, Debug)]
pub struct AutoencoderRun {
    pub store: ParamStore,
    pub l1: Vec<f64>,
    pub initial_l1: f64,
    pub final_l1: f64,
}

/// The stage-1 encoder and decoder trained on `L1 + λ_per·L_per` with the
/// quantizer bypassed; same initialisation, batches and schedule.
pub fn train_autoencoder(cfg: &StageConfig, images: &[Tensor]) -> Result<AutoencoderRun> {
    cfg.validate()?;
    check_images(cfg, images)?;
    let gen = HqGenerator::new(cfg.model.clone())?;
    let mut g = ParamStore::new();
    gen.init(&mut g, cfg.seed)?;
    g.set_trainable(ENTRIES, false);
    let pnet = PerceptualNet::new();
    let (initial_l1, _) = reconstruction_l1(&gen, &g, images, false)?;
    let mut opt = adam();
    let mut batcher = Batcher::new(images.len(), cfg.seed);
    let mut trace = Vec::with_capacity(cfg.dict.iters);
    for iter in 0..cfg.dict.iters {
        let mut tape = Tape::new();
        let x = tape.constant(gather(images, &batcher.next(cfg.batch_size))?);
        let recon = gen.forward_unquantized(&mut tape, Params::tracked(&g), x)?;
        let l1 = l1_loss(&mut tape, x, recon)?;
        let per = perceptual_loss(&mut tape, &pnet, x, recon)?;
        let loss = crate::losses::weighted_total(&mut tape, &["l1", "per"], &[l1, per], &[1.0, cfg.weights.per])?;
        trace.push(tape.value(l1).item());
        step(&mut g, &mut opt, &mut tape, loss, cfg.dict.lr_at(iter))?;
    }
    let (final_l1, _) = reconstruction_l1(&gen, &g, images, false)?;
    Ok(AutoencoderRun { store: g, l1: trace, initial_l1, final_l1 })
}

/// Degradation spec for slot `slot` of training iteration `iter`.
pub fn training_spec(cfg: &StageConfig, iter: usize, slot: usize) -> DegradationSpec {
    let stream = DEGRADE_STREAM + (iter * cfg.batch_size + slot) as u64;
    cfg.degradation.sample(&mut Rng::derive(cfg.seed, stream), cfg.model.image_size)
}

/// Fixed per-image spec used when evaluating on the training set.
pub fn evaluation_spec(cfg: &StageConfig, index: usize) -> DegradationSpec {
    cfg.degradation.sample(&mut Rng::derive(cfg.seed, EVAL_STREAM + index as u64), cfg.model.image_size)
}

pub fn degrade_batch(images: &[Tensor], specs: &[DegradationSpec]) -> Result<Tensor> {
    let out: Vec<Tensor> = images.iter().zip(specs).map(|(img, s)| degrade(img, s).map(|d| d.image)).collect::<Result<_>>()?;
    stack(&out.iter().collect::<Vec<_>>())
}

/// Restorer parameters seeded from a stage-1 checkpoint. Encoder, decoder
/// and codebook must all be present; attention starts fresh.
pub fn restorer_from_stage1(cfg: &StageConfig, stage1: &ParamStore) -> Result<(Restorer, ParamStore)> {
    let restorer = Restorer::new(cfg.model.clone())?;
    let mut store = ParamStore::new();
    restorer.init(&mut store, cfg.seed)?;
    let copied = load_matching(&mut store, stage1)?;
    let missing: Vec<&str> = store
        .names()
        .filter(|n| !n.starts_with("mhca") && !copied.iter().any(|c| c == n))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("stage-1 checkpoint lacks {} tensors, first {}", missing.len(), missing[0])));
    }
    let s = cfg.model.image_size;
    let mut tape = Tape::new();
    let probe = tape.constant(Tensor::full([1, s, s, 3], 0.5));
    let z = restorer.encoder.forward(&mut tape, Params::frozen(&store), probe)?;
    let want = [1, cfg.model.latent_size(), cfg.model.latent_size(), cfg.model.arch.latent];
    if tape.shape(z) != want {
        return Err(Error::shape("stage-2 latent", tape.shape(z), &want));
    }
    Ok((restorer, store))
}

pub fn stage2_discriminators(cfg: &StageConfig) -> DiscriminatorSet {
    DiscriminatorSet::new(cfg.disc_width, cfg.roi, cfg.roi_size)
}

/// Outcome of a stage-2 run.
#[derive(Clone, Debug)]
pub struct RestoreRun {
    /// Restorer and discriminator parameters.
    pub store: ParamStore,
    pub log: LossLog,
}

fn prior_term(tape: &mut Tape, cfg: &StageConfig, z_d: Var, z_p: Var) -> Result<Var> {
    if cfg.prior_to_codebook {
        tape.mse(z_d, z_p)
    } else {
        prior_loss(tape, z_d, z_p)
    }
}

/// Restoration training on degradations synthesised every iteration.
pub fn train_restorer(
    cfg: &StageConfig,
    images: &[Tensor],
    stage1: &ParamStore,
    mut progress: impl FnMut(usize, &[f64]),
) -> Result<RestoreRun> {
    cfg.validate()?;
    check_images(cfg, images)?;
    let (restorer, mut g) = restorer_from_stage1(cfg, stage1)?;
    g.set_trainable(ENTRIES, !cfg.freeze_dictionary);
    let discs = stage2_discriminators(cfg);
    let mut d = ParamStore::new();
    discs.init(&mut d, cfg.seed);
    load_matching(&mut d, stage1)?;
    let pnet = PerceptualNet::new();
    let id_net = IdentityNet::new();
    let w: LossWeights = cfg.weights;

    let mut columns = vec!["iter", "lr", "total"];
    columns.extend(RestoreParts::NAMES);
    columns.extend(["adv_scale", "d_loss"]);
    let weight_names = ["per", "p", "disc", "style", "adv", "id"];
    let mut log = LossLog {
        weights: weight_names.iter().copied().zip([w.per, w.p, w.disc, w.style, w.adv, w.id]).collect(),
        columns,
        rows: Vec::with_capacity(cfg.restore.iters),
    };
    let (mut g_opt, mut d_opt) = (adam(), adam());
    let mut batcher = Batcher::new(images.len(), cfg.seed);
    let sched: Schedule = cfg.restore;
    for iter in 0..sched.iters {
        let lr = sched.lr_at(iter);
        let idx = batcher.next(cfg.batch_size);
        let clean: Vec<Tensor> = idx.iter().map(|&i| images[i].clone()).collect();
        let specs: Vec<DegradationSpec> = (0..idx.len()).map(|slot| training_spec(cfg, iter, slot)).collect();
        let degraded = degrade_batch(&clean, &specs)?;
        let target = gather(images, &idx)?;

        let mut tape = Tape::new();
        let x = tape.constant(target.clone());
        let xd = tape.constant(degraded);
        let out = restorer.forward(&mut tape, Params::tracked(&g), xd)?;
        let frozen = Params::frozen(&d);
        let comp = component_losses(&mut tape, &discs, frozen, x, out.restored, [1.0; 3])?;
        let img = image_losses(&mut tape, &discs.global, frozen, &id_net, x, out.restored)?;
        let parts = RestoreParts {
            l1: l1_loss(&mut tape, x, out.restored)?,
            per: perceptual_loss(&mut tape, &pnet, x, out.restored)?,
            prior: prior_term(&mut tape, cfg, out.z_d, out.z_p)?,
            disc: comp.disc,
            style: comp.style,
            adv: img.adv,
            id: img.id,
        };
        let restored = tape.value(out.restored).clone();
        let mut wi = w;
        let mut scale = 1.0;
        if !cfg.adversarial_on(iter, sched.iters) {
            scale = 0.0;
            wi.disc = 0.0;
            wi.adv = 0.0;
        } else if cfg.adaptive_adv {
            let rec = output_grad_norm(&restored, |t, v| {
                let x = t.constant(target.clone());
                let l1 = l1_loss(t, x, v)?;
                let per = perceptual_loss(t, &pnet, x, v)?;
                weighted_total(t, &["l1", "per"], &[l1, per], &[1.0, w.per])
            })?;
            let adv = output_grad_norm(&restored, |t, v| {
                let x = t.constant(target.clone());
                let comp = component_losses(t, &discs, frozen, x, v, [1.0; 3])?;
                let f = discs.global.forward(t, frozen, v)?;
                let adv = generator_adversarial(t, f.logits)?;
                weighted_total(t, &["disc", "adv"], &[comp.disc, adv], &[w.disc, w.adv])
            })?;
            scale = adaptive_scale(rec, adv);
            wi.disc *= scale;
            wi.adv *= scale;
        }
        let total = total_restore_loss(&mut tape, &parts, &wi)?;
        let mut row = vec![iter as f64, lr, tape.value(total).item()];
        row.extend(parts.vars().iter().map(|v| tape.value(*v).item()));
        row.push(scale);
        step(&mut g, &mut g_opt, &mut tape, total, lr)?;

        let mut tape = Tape::new();
        let (real, fake) = (tape.constant(target), tape.constant(restored));
        let p = Params::tracked(&d);
        let dr = discs.global.forward(&mut tape, p, real)?;
        let df = discs.global.forward(&mut tape, p, fake)?;
        let mut d_loss = discriminator_loss(&mut tape, dr.logits, df.logits)?;
        for (r, disc) in Region::ALL.iter().zip(&discs.regions) {
            let (cr, cf) = (discs.crop(&mut tape, real, *r)?, discs.crop(&mut tape, fake, *r)?);
            let (dr, df) = (disc.forward(&mut tape, p, cr)?, disc.forward(&mut tape, p, cf)?);
            let term = discriminator_loss(&mut tape, dr.logits, df.logits)?;
            d_loss = tape.add(d_loss, term)?;
        }
        let d_value = tape.value(d_loss).item();
        if !d_value.is_finite() {
            return Err(Error::Diverged { term: "d_loss".into(), value: d_value });
        }
        step(&mut d, &mut d_opt, &mut tape, d_loss, lr)?;

        row.push(d_value);
        progress(iter, &row);
        log.rows.push(row);
    }
    Ok(RestoreRun { store: merge(&g, &d)?, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use crate::workbench::dataset::FaceSpec;

    fn tiny() -> StageConfig {
        let mut cfg = StageConfig::default();
        cfg.model.arch = Arch::standard([4, 4, 8, 8, 8], 8, 4);
        cfg.model.codebook_size = 8;
        cfg.model.heads = 2;
        cfg.batch_size = 2;
        cfg.disc_width = 4;
        cfg.roi_size = 8;
        cfg.dict.iters = 3;
        cfg.restore.iters = 2;
        cfg
    }

    fn faces(n: usize, size: usize) -> Vec<Tensor> {
        (0..n).map(|i| FaceSpec::sample(i as u64, &Default::default()).render(size)).collect()
    }

    #[test]
    fn batcher_covers_each_epoch() {
        let mut b = Batcher::new(5, 1);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| b.next(1)).collect();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn stage1_is_deterministic_and_logs_every_term() {
        let cfg = tiny();
        let imgs = faces(3, 32);
        let a = train_dict(&cfg, &imgs, |_, _| {}).unwrap();
        let b = train_dict(&cfg, &imgs, |_, _| {}).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(a.log.rows.len(), 3);
        let csv = a.log.to_csv();
        assert!(csv.starts_with("# weights: lambda_per=1 lambda_adv=0.4 lambda_d=1 lambda_c=0.25\n"));
        assert_eq!(csv.lines().nth(1).unwrap(), "iter,lr,total,l1,per,adv,dict,commit,adv_weight,d_loss,codes");
        assert!(a.store.contains(ENTRIES) && a.store.contains("disc.global.head.weight"));
        for (name, p) in a.store.iter() {
            assert!(p.value.bit_eq(b.store.get(name).unwrap()));
        }
    }

    #[test]
    fn stage2_starts_from_stage1_and_keeps_codebook_frozen() {
        let cfg = tiny();
        let imgs = faces(2, 32);
        let s1 = train_dict(&cfg, &imgs, |_, _| {}).unwrap();
        let (_, store) = restorer_from_stage1(&cfg, &s1.store).unwrap();
        assert!(store.get("encoder.stem.weight").unwrap().bit_eq(s1.store.get("encoder.stem.weight").unwrap()));
        let mut fresh = ParamStore::new();
        Restorer::new(cfg.model.clone()).unwrap().init(&mut fresh, cfg.seed).unwrap();
        assert!(store.get("mhca1.w_q").unwrap().bit_eq(fresh.get("mhca1.w_q").unwrap()));
        let s2 = train_restorer(&cfg, &imgs, &s1.store, |_, _| {}).unwrap();
        assert!(s2.store.get(ENTRIES).unwrap().bit_eq(s1.store.get(ENTRIES).unwrap()));
        assert_eq!(s2.log.columns[3..10], RestoreParts::NAMES);
        assert!(s2.log.to_csv().starts_with("# weights: lambda_per=1 lambda_p=0.25 lambda_disc=1 lambda_style=1 lambda_adv=0.4"));
        assert!(s2.store.contains("disc.mouth.head.weight"));
    }

    #[test]
    fn stage2_rejects_incomplete_checkpoint() {
        let cfg = tiny();
        let mut partial = ParamStore::new();
        partial.insert("encoder.stem.bias", Tensor::zeros([4]));
        assert!(matches!(restorer_from_stage1(&cfg, &partial), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn training_specs_are_reproducible_per_slot() {
        let cfg = tiny();
        assert_eq!(training_spec(&cfg, 5, 1), training_spec(&cfg, 5, 1));
        assert_ne!(training_spec(&cfg, 5, 1), training_spec(&cfg, 5, 0));
        assert_ne!(training_spec(&cfg, 5, 1), evaluation_spec(&cfg, 1));
    }

    #[test]
    fn restart_splits_crowded_latents_then_copies_live_entries() {
        let mut store = ParamStore::new();
        store.insert(ENTRIES, Tensor::new([4, 2], vec![0.0, 0.0, 1.0, 1.0, 9.0, 9.0, 8.0, 8.0]).unwrap());
        let latents = Tensor::new([3, 2], vec![0.1, 0.0, 0.2, 0.0, 1.0, 1.0]).unwrap();
        let moved = restart_dead_codes(&mut store, &[2, 1, 0, 0], &latents, &[0, 0, 1], &mut Rng::seed(4)).unwrap();
        assert_eq!(moved, 2);
        let e = store.get(ENTRIES).unwrap().data().to_vec();
        assert_eq!(&e[..4], &[0.0, 0.0, 1.0, 1.0]);
        let dead = [&e[4..6], &e[6..8]];
        assert!(dead.contains(&&[0.2, 0.0][..]), "second latent on entry 0 not used: {e:?}");
        assert!(dead.iter().any(|r| *r == [0.0, 0.0] || *r == [1.0, 1.0]), "leftover not a live copy: {e:?}");

        let short = Tensor::new([2, 2], vec![0.0; 4]).unwrap();
        assert!(restart_dead_codes(&mut store, &[1, 0, 0, 0], &short, &[0], &mut Rng::seed(4)).is_err());
    }
}
