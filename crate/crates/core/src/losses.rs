//! Training objectives, the fixed feature networks they use and the
//! adversarial discriminators.
//!
//! The perceptual and identity networks are small convolutional stacks with
//! parameters drawn from pinned seeds and never trained. They stand in for
//! pretrained VGG and ArcFace weights, so the losses exercise the intended
//! gradient paths without reproducing perceptual quality.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear};
use crate::rng::Rng;
use crate::tensor::{CropBox, ParamStore, Params, Tape, Tensor, Var};

const PERCEPTUAL_SEED: u64 = 0x7065_7263;
const IDENTITY_SEED: u64 = 0x6964_656e;
pub const EMBED_DIM: usize = 16;

/// Loss weights. `Default` is the published setting.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub per: f64,
    pub p: f64,
    pub disc: f64,
    pub style: f64,
    pub adv: f64,
    pub id: f64,
    pub d: f64,
    pub c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            per: 1.0,
            p: 0.25,
            disc: 1.0,
            style: 2000.0,
            adv: 0.8,
            id: 1.5,
            d: 1.0,
            c: 0.25,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            per: 0.0,
            p: 0.0,
            disc: 0.0,
            style: 0.0,
            adv: 0.0,
            id: 0.0,
            d: 0.0,
            c: 0.0,
        }
    }
}

fn he_init(convs: &[Conv2d], store: &mut ParamStore, rng: &mut Rng) {
    for c in convs {
        c.init_scaled(store, rng, 2f64.sqrt());
    }
}

/// Five-stage conv/ReLU pyramid standing in for the perceptual network.
#[derive(Clone, Debug)]
pub struct PerceptualNet {
    store: ParamStore,
    stages: Vec<Conv2d>,
}

impl PerceptualNet {
    pub fn new() -> Self {
        Self::with_seed(PERCEPTUAL_SEED)
    }

    pub fn with_seed(seed: u64) -> Self {
        let widths = [3, 8, 16, 16, 32, 32];
        let stages: Vec<Conv2d> = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(format!("perceptual.stage{i}"), w[0], w[1], 3, 1))
            .collect();
        let mut store = ParamStore::new();
        he_init(&stages, &mut store, &mut Rng::seed(seed));
        Self { store, stages }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Features after every stage; stages after the first start with a 2×2
    /// average pool, so the five maps have halving resolutions.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let p = Params::frozen(&self.store);
        let mut h = tape.add_scalar(x, -0.5)?;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, conv) in self.stages.iter().enumerate() {
            if i > 0 {
                h = tape.avg_pool2(h)?;
            }
            h = conv.forward(tape, p, h)?;
            h = tape.relu(h)?;
            out.push(h);
        }
        Ok(out)
    }
}

impl Default for PerceptualNet {
    fn default() -> Self {
        Self::new()
    }
}

/// Strided conv stack, global average and a linear map to a length-16
/// embedding, standing in for the face-identity network.
#[derive(Clone, Debug)]
pub struct IdentityNet {
    store: ParamStore,
    convs: Vec<Conv2d>,
    proj: Linear,
}

impl IdentityNet {
    pub fn new() -> Self {
        Self::with_seed(IDENTITY_SEED)
    }

    pub fn with_seed(seed: u64) -> Self {
        let widths = [3, 8, 16, 32];
        let convs: Vec<Conv2d> = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(format!("identity.conv{i}"), w[0], w[1], 3, 2))
            .collect();
        let proj = Linear::new("identity.proj", 32, EMBED_DIM);
        let mut store = ParamStore::new();
        let mut rng = Rng::seed(seed);
        he_init(&convs, &mut store, &mut rng);
        proj.init(&mut store, &mut rng);
        Self { store, convs, proj }
    }

    /// Raw `(B, 16)` embedding.
    pub fn embed(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let p = Params::frozen(&self.store);
        let mut h = tape.add_scalar(x, -0.5)?;
        for conv in &self.convs {
            h = conv.forward(tape, p, h)?;
            h = tape.relu(h)?;
        }
        let [b, hh, ww, c] = match *tape.shape(h) {
            [b, hh, ww, c] => [b, hh, ww, c],
            ref s => return Err(Error::invalid("identity", format!("unexpected feature shape {s:?}"))),
        };
        let flat = tape.reshape(h, &[b, hh * ww, c])?;
        let pooled = tape.mean_axis(flat, 1)?;
        self.proj.forward(tape, p, pooled)
    }

    /// Unit-length `(B, 16)` embedding.
    pub fn embed_unit(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let e = self.embed(tape, x)?;
        tape.l2_normalize(e)
    }

    /// Raw embeddings of an image batch, outside any training tape.
    pub fn embed_tensor(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let e = self.embed(&mut tape, x)?;
        Ok(tape.value(e).clone())
    }
}

impl Default for IdentityNet {
    fn default() -> Self {
        Self::new()
    }
}

/// Strided-conv classifier producing a logit map; the activations after
/// every strided stage double as multi-resolution style features.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub name: String,
    convs: Vec<Conv2d>,
    head: Conv2d,
}

/// Discriminator activations and logits for one input batch.
#[derive(Clone, Debug)]
pub struct DiscOutput {
    pub logits: Var,
    pub features: Vec<Var>,
}

impl Discriminator {
    pub fn new(name: impl Into<String>, width: usize, stages: usize) -> Self {
        let name = name.into();
        let mut c = 3;
        let convs = (0..stages)
            .map(|i| {
                let out = width << i.min(2);
                let conv = Conv2d::new(format!("{name}.conv{i}"), c, out, 3, 2);
                c = out;
                conv
            })
            .collect();
        let head = Conv2d::new(format!("{name}.head"), c, 1, 3, 1);
        Self { name, convs, head }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        for c in &self.convs {
            c.init(store, rng);
        }
        self.head.init(store, rng);
    }

    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, x: Var) -> Result<DiscOutput> {
        let mut h = tape.scale(x, 2.0)?;
        h = tape.add_scalar(h, -1.0)?;
        let mut features = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            h = conv.forward(tape, p, h)?;
            h = tape.silu(h)?;
            features.push(h);
        }
        let logits = self.head.forward(tape, p, h)?;
        Ok(DiscOutput { logits, features })
    }
}

/// Facial regions judged by their own discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    LeftEye,
    RightEye,
    Mouth,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::LeftEye, Region::RightEye, Region::Mouth];

    pub fn key(self) -> &'static str {
        match self {
            Region::LeftEye => "left_eye",
            Region::RightEye => "right_eye",
            Region::Mouth => "mouth",
        }
    }
}

/// Fixed crop boxes `(x0, y0, x1, y1)` in normalised image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBoxes {
    pub left_eye: CropBox,
    pub right_eye: CropBox,
    pub mouth: CropBox,
}

impl Default for RoiBoxes {
    fn default() -> Self {
        Self {
            left_eye: [0.22, 0.30, 0.46, 0.50],
            right_eye: [0.54, 0.30, 0.78, 0.50],
            mouth: [0.30, 0.62, 0.70, 0.82],
        }
    }
}

impl RoiBoxes {
    pub fn get(&self, r: Region) -> CropBox {
        match r {
            Region::LeftEye => self.left_eye,
            Region::RightEye => self.right_eye,
            Region::Mouth => self.mouth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for r in Region::ALL {
            let [x0, y0, x1, y1] = self.get(r);
            let inside = [x0, y0, x1, y1].iter().all(|v| (0.0..=1.0).contains(v));
            if !inside || x1 <= x0 || y1 <= y0 {
                return Err(Error::invalid("roi", format!("{} box {:?} is empty or outside [0,1]", r.key(), self.get(r))));
            }
        }
        Ok(())
    }
}

/// The global discriminator and the three regional ones.
#[derive(Clone, Debug)]
pub struct DiscriminatorSet {
    pub global: Discriminator,
    pub regions: [Discriminator; 3],
    pub boxes: RoiBoxes,
    pub roi_size: usize,
}

impl DiscriminatorSet {
    pub fn new(width: usize, boxes: RoiBoxes, roi_size: usize) -> Self {
        let regional = |r: Region| Discriminator::new(format!("disc.{}", r.key()), width, 2);
        Self {
            global: Discriminator::new("disc.global", width, 3),
            regions: Region::ALL.map(regional),
            boxes,
            roi_size,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = Rng::derive(seed, 3);
        self.global.init(store, &mut rng);
        for d in &self.regions {
            d.init(store, &mut rng);
        }
    }

    pub fn crop(&self, tape: &mut Tape, x: Var, r: Region) -> Result<Var> {
        tape.crop_resize(x, self.boxes.get(r), self.roi_size, self.roi_size)
    }
}

/// Mean absolute pixel difference.
pub fn l1_loss(tape: &mut Tape, target: Var, out: Var) -> Result<Var> {
    tape.l1(out, target)
}

/// Mean over stages of the mean squared feature difference. The target
/// branch is a constant.
pub fn perceptual_loss(tape: &mut Tape, net: &PerceptualNet, target: Var, out: Var) -> Result<Var> {
    let target = tape.detach(target);
    let ft = net.features(tape, target)?;
    let fo = net.features(tape, out)?;
    let mut terms = Vec::with_capacity(ft.len());
    for (a, b) in ft.into_iter().zip(fo) {
        let d = tape.mse(b, a)?;
        terms.push(tape.reshape(d, &[1])?);
    }
    let all = tape.concat(&terms, 0)?;
    tape.mean(all)
}

/// Pulls the degraded latent toward its selected prior; the prior side is
/// a constant.
pub fn prior_loss(tape: &mut Tape, z_d: Var, z_p: Var) -> Result<Var> {
    if tape.shape(z_d) != tape.shape(z_p) {
        return Err(Error::shape("prior_loss", tape.shape(z_d), tape.shape(z_p)));
    }
    let z_p = tape.detach(z_p);
    tape.mse(z_d, z_p)
}

#[derive(Clone, Copy, Debug)]
pub struct PixelLosses {
    pub l1: Var,
    pub per: Var,
    pub prior: Var,
}

pub fn pixel_losses(
    tape: &mut Tape,
    net: &PerceptualNet,
    target: Var,
    out: Var,
    z_d: Var,
    z_p: Var,
) -> Result<PixelLosses> {
    if tape.shape(target) != tape.shape(out) {
        return Err(Error::shape("pixel_losses", tape.shape(target), tape.shape(out)));
    }
    Ok(PixelLosses {
        l1: l1_loss(tape, target, out)?,
        per: perceptual_loss(tape, net, target, out)?,
        prior: prior_loss(tape, z_d, z_p)?,
    })
}

/// Channel correlation `Fᵀ F / (h·w·c)` of an `(h, w, c)` or `(B, h, w, c)` map.
pub fn gram(tape: &mut Tape, f: Var) -> Result<Var> {
    let (b, hw, c) = match *tape.shape(f) {
        [h, w, c] => (1, h * w, c),
        [b, h, w, c] => (b, h * w, c),
        ref s => return Err(Error::invalid("gram", format!("expected (h, w, c) or (B, h, w, c), got {s:?}"))),
    };
    let rank = tape.shape(f).len();
    let flat = tape.reshape(f, &[b, hw, c])?;
    let ft = tape.permute(flat, &[0, 2, 1])?;
    let g = tape.matmul(ft, flat)?;
    let g = tape.scale(g, 1.0 / (hw * c) as f64)?;
    if rank == 3 {
        tape.reshape(g, &[c, c])
    } else {
        Ok(g)
    }
}

/// Non-saturating generator term `mean(-log sigmoid(logits))`.
pub fn generator_adversarial(tape: &mut Tape, logits: Var) -> Result<Var> {
    let ls = tape.log_sigmoid(logits)?;
    let m = tape.mean(ls)?;
    tape.scale(m, -1.0)
}

/// Discriminator training loss, the negated objective
/// `mean log D(real) + mean log(1 - D(fake))` written on logits.
pub fn discriminator_loss(tape: &mut Tape, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let real = tape.log_sigmoid(real_logits)?;
    let real = tape.mean(real)?;
    let neg = tape.scale(fake_logits, -1.0)?;
    let fake = tape.log_sigmoid(neg)?;
    let fake = tape.mean(fake)?;
    let obj = tape.add(real, fake)?;
    tape.scale(obj, -1.0)
}

/// The discriminator objective on probabilities. Values must lie strictly
/// inside (0, 1); saturated outputs are reported instead of producing
/// infinite logs.
pub fn discriminator_objective(real: &[f64], fake: &[f64]) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::invalid("discriminator_objective", "empty input"));
    }
    if let Some(v) = real.iter().chain(fake).find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::invalid("discriminator_objective", format!("probability {v} outside (0, 1)")));
    }
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64;
    Ok(mean(real, &|p| p.ln()) + mean(fake, &|p| (1.0 - p).ln()))
}

#[derive(Clone, Copy, Debug)]
pub struct ComponentLosses {
    pub disc: Var,
    pub style: Var,
}

/// Regional adversarial and Gram-style terms, weighted per region in the
/// order left eye, right eye, mouth. Discriminator parameters enter through
/// `p`, normally frozen during a generator step.
pub fn component_losses(
    tape: &mut Tape,
    discs: &DiscriminatorSet,
    p: Params<'_>,
    target: Var,
    out: Var,
    weights: [f64; 3],
) -> Result<ComponentLosses> {
    discs.boxes.validate()?;
    let target = tape.detach(target);
    let mut disc_terms = Vec::new();
    let mut style_terms = Vec::new();
    for ((r, d), w) in Region::ALL.iter().zip(&discs.regions).zip(weights) {
        let real = discs.crop(tape, target, *r)?;
        let fake = discs.crop(tape, out, *r)?;
        let dr = d.forward(tape, p, real)?;
        let df = d.forward(tape, p, fake)?;
        let adv = generator_adversarial(tape, df.logits)?;
        disc_terms.push(tape.scale(adv, w)?);
        for (fr, ff) in dr.features.iter().zip(&df.features) {
            let gr = gram(tape, *fr)?;
            let gr = tape.detach(gr);
            let gf = gram(tape, *ff)?;
            let diff = tape.mse(gf, gr)?;
            style_terms.push(tape.scale(diff, w)?);
        }
    }
    Ok(ComponentLosses {
        disc: sum_scalars(tape, &disc_terms)?,
        style: sum_scalars(tape, &style_terms)?,
    })
}

fn sum_scalars(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let flat: Vec<Var> = terms.iter().map(|t| tape.reshape(*t, &[1])).collect::<Result<_>>()?;
    let all = tape.concat(&flat, 0)?;
    tape.sum(all)
}

#[derive(Clone, Copy, Debug)]
pub struct ImageLosses {
    pub adv: Var,
    pub id: Var,
}

/// Identity distance: per-sample squared distance between unit
/// embeddings, averaged over the batch.
pub fn identity_loss(tape: &mut Tape, net: &IdentityNet, target: Var, out: Var) -> Result<Var> {
    let target = tape.detach(target);
    let et = net.embed_unit(tape, target)?;
    let eo = net.embed_unit(tape, out)?;
    let batch = tape.shape(et)[0];
    let d = tape.mse(eo, et)?;
    tape.scale(d, (tape_numel(tape, et) / batch) as f64)
}

fn tape_numel(tape: &Tape, v: Var) -> usize {
    tape.value(v).numel()
}

pub fn image_losses(
    tape: &mut Tape,
    disc: &Discriminator,
    p: Params<'_>,
    id_net: &IdentityNet,
    target: Var,
    out: Var,
) -> Result<ImageLosses> {
    let fake = disc.forward(tape, p, out)?;
    Ok(ImageLosses {
        adv: generator_adversarial(tape, fake.logits)?,
        id: identity_loss(tape, id_net, target, out)?,
    })
}

/// Upper clamp on [`adaptive_scale`].
pub const MAX_ADAPTIVE_SCALE: f64 = 1e4;

/// L2 norm of `∂loss/∂x` at the value `x`, with `loss` built on a
/// scratch tape.
pub fn output_grad_norm(x: &Tensor, loss: impl FnOnce(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let l = loss(&mut tape, v)?;
    tape.backward(l)?;
    Ok(tape.grad(v).map_or(0.0, |g| g.data().iter().map(|a| a * a).sum::<f64>().sqrt()))
}

/// Balances adversarial against reconstruction gradients:
/// `|∇ rec| / (|∇ adv| + 1e-4)`, clamped to `[0, 1e4]`.
pub fn adaptive_scale(rec_norm: f64, adv_norm: f64) -> f64 {
    (rec_norm / (adv_norm + 1e-4)).clamp(0.0, MAX_ADAPTIVE_SCALE)
}

/// Terms of the restoration objective.
#[derive(Clone, Copy, Debug)]
pub struct RestoreParts {
    pub l1: Var,
    pub per: Var,
    pub prior: Var,
    pub disc: Var,
    pub style: Var,
    pub adv: Var,
    pub id: Var,
}

impl RestoreParts {
    pub const NAMES: [&'static str; 7] = ["l1", "per", "prior", "disc", "style", "adv", "id"];

    pub fn vars(&self) -> [Var; 7] {
        [self.l1, self.per, self.prior, self.disc, self.style, self.adv, self.id]
    }

    pub fn weights(w: &LossWeights) -> [f64; 7] {
        [1.0, w.per, w.p, w.disc, w.style, w.adv, w.id]
    }
}

/// Terms of the dictionary-learning objective.
#[derive(Clone, Copy, Debug)]
pub struct DictParts {
    pub l1: Var,
    pub per: Var,
    pub adv: Var,
    pub dict: Var,
    pub commit: Var,
}

impl DictParts {
    pub const NAMES: [&'static str; 5] = ["l1", "per", "adv", "dict", "commit"];

    pub fn vars(&self) -> [Var; 5] {
        [self.l1, self.per, self.adv, self.dict, self.commit]
    }

    pub fn weights(w: &LossWeights) -> [f64; 5] {
        [1.0, w.per, w.adv, w.d, w.c]
    }
}

/// `Σ λ_i · term_i`, refusing non-finite terms by name.
pub fn weighted_total(tape: &mut Tape, names: &[&'static str], vars: &[Var], weights: &[f64]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for ((name, v), w) in names.iter().zip(vars).zip(weights) {
        let value = tape.value(*v).item();
        if !value.is_finite() {
            return Err(Error::Diverged { term: name.to_string(), value });
        }
        let term = tape.scale(*v, *w)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("weighted_total", "no terms"))
}

pub fn total_restore_loss(tape: &mut Tape, parts: &RestoreParts, w: &LossWeights) -> Result<Var> {
    weighted_total(tape, &RestoreParts::NAMES, &parts.vars(), &RestoreParts::weights(w))
}

pub fn total_dict_loss(tape: &mut Tape, parts: &DictParts, w: &LossWeights) -> Result<Var> {
    weighted_total(tape, &DictParts::NAMES, &parts.vars(), &DictParts::weights(w))
}
