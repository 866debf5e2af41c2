//! Encoder, decoder and the two composed networks: the stage-1
//! high-quality generator (encoder, quantizer, decoder) and the stage-2
//! restorer (encoder, quantizer, two cross-attention blocks, decoder).

use crate::attention::{AttentionBlock, BlockMode, Residual};
use crate::dictionary::{self, Codebook, ENTRIES};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, ResBlock};
use crate::rng::Rng;
use crate::tensor::{ParamStore, Params, Tape, Var};

/// Network shape shared by the encoder and decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Arch {
    /// Output channels of each resolution level, finest first. One pooling
    /// (encoder) or upsampling (decoder) per level.
    pub channels: Vec<usize>,
    pub blocks_per_level: usize,
    pub mid_blocks: usize,
    /// Latent width `C`, equal to the codebook entry length.
    pub latent: usize,
    pub norm_groups: usize,
}

impl Arch {
    /// Five levels of two blocks plus two mid blocks: twelve blocks and a
    /// spatial factor of 32.
    pub fn standard(channels: [usize; 5], latent: usize, norm_groups: usize) -> Self {
        Self {
            channels: channels.to_vec(),
            blocks_per_level: 2,
            mid_blocks: 2,
            latent,
            norm_groups,
        }
    }

    pub fn factor(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().chain([&self.latent, &self.norm_groups]).any(|&c| c == 0) {
            return Err(Error::invalid("arch", format!("channel counts must be positive: {self:?}")));
        }
        Ok(())
    }

    fn deepest(&self) -> usize {
        *self.channels.last().unwrap()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub arch: Arch,
    stem: Conv2d,
    levels: Vec<Vec<ResBlock>>,
    mid: Vec<ResBlock>,
    head_norm: GroupNorm,
    head: Conv2d,
}

impl Encoder {
    pub fn new(prefix: &str, arch: Arch) -> Result<Self> {
        arch.validate()?;
        let g = arch.norm_groups;
        let mut idx = 0;
        let mut next = |c_in: usize, c_out: usize| {
            let b = ResBlock::new(&format!("{prefix}.block{idx}"), c_in, c_out, g);
            idx += 1;
            b
        };
        let mut c = arch.channels[0];
        let mut levels = Vec::new();
        for &c_out in &arch.channels {
            let mut blocks = Vec::new();
            for _ in 0..arch.blocks_per_level {
                blocks.push(next(c, c_out));
                c = c_out;
            }
            levels.push(blocks);
            c = c_out;
        }
        let mid = (0..arch.mid_blocks).map(|_| next(c, c)).collect();
        Ok(Self {
            stem: Conv2d::new(format!("{prefix}.stem"), 3, arch.channels[0], 3, 1),
            levels,
            mid,
            head_norm: GroupNorm::new(format!("{prefix}.head_norm"), c, g),
            head: Conv2d::new(format!("{prefix}.head"), c, arch.latent, 3, 1),
            arch,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.levels.iter().map(Vec::len).sum::<usize>() + self.mid.len()
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.stem.init(store, rng);
        for b in self.levels.iter().flatten().chain(&self.mid) {
            b.init(store, rng);
        }
        self.head_norm.init(store);
        self.head.init(store, rng);
    }

    /// `(B, H, W, 3)` in `[0, 1]` to `(B, H/f, W/f, C)` with `f = 2^levels`.
    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, image: Var) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        let f = self.arch.factor();
        match *shape.as_slice() {
            [_, h, w, 3] if h % f == 0 && w % f == 0 => {}
            _ => {
                return Err(Error::invalid(
                    "encode",
                    format!("expected (B, H, W, 3) with H, W divisible by {f}, got {shape:?}"),
                ))
            }
        }
        let x = tape.scale(image, 2.0)?;
        let x = tape.add_scalar(x, -1.0)?;
        let mut h = self.stem.forward(tape, p, x)?;
        for level in &self.levels {
            for b in level {
                h = b.forward(tape, p, h)?;
            }
            h = tape.avg_pool2(h)?;
        }
        for b in &self.mid {
            h = b.forward(tape, p, h)?;
        }
        h = self.head_norm.forward(tape, p, h)?;
        h = tape.silu(h)?;
        self.head.forward(tape, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub arch: Arch,
    stem: Conv2d,
    mid: Vec<ResBlock>,
    levels: Vec<Vec<ResBlock>>,
    head_norm: GroupNorm,
    head: Conv2d,
}

impl Decoder {
    pub fn new(prefix: &str, arch: Arch) -> Result<Self> {
        arch.validate()?;
        let g = arch.norm_groups;
        let mut idx = 0;
        let mut next = |c_in: usize, c_out: usize| {
            let b = ResBlock::new(&format!("{prefix}.block{idx}"), c_in, c_out, g);
            idx += 1;
            b
        };
        let mut c = arch.deepest();
        let mid = (0..arch.mid_blocks).map(|_| next(c, c)).collect();
        let mut levels = Vec::new();
        for &c_out in arch.channels.iter().rev() {
            let mut blocks = Vec::new();
            for _ in 0..arch.blocks_per_level {
                blocks.push(next(c, c_out));
                c = c_out;
            }
            levels.push(blocks);
            c = c_out;
        }
        Ok(Self {
            stem: Conv2d::new(format!("{prefix}.stem"), arch.latent, arch.deepest(), 3, 1),
            mid,
            levels,
            head_norm: GroupNorm::new(format!("{prefix}.head_norm"), c, g),
            head: Conv2d::new(format!("{prefix}.head"), c, 3, 3, 1),
            arch,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.stem.init(store, rng);
        for b in self.mid.iter().chain(self.levels.iter().flatten()) {
            b.init(store, rng);
        }
        self.head_norm.init(store);
        self.head.init(store, rng);
    }

    /// `(B, h, w, C)` to `(B, h·f, w·f, 3)` in `[0, 1]` via `(tanh + 1) / 2`.
    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, z: Var) -> Result<Var> {
        let shape = tape.shape(z).to_vec();
        if shape.len() != 4 || shape[3] != self.arch.latent {
            return Err(Error::invalid(
                "decode",
                format!("expected (B, h, w, {}), got {shape:?}", self.arch.latent),
            ));
        }
        let mut h = self.stem.forward(tape, p, z)?;
        for b in &self.mid {
            h = b.forward(tape, p, h)?;
        }
        for level in &self.levels {
            h = tape.upsample2(h)?;
            for b in level {
                h = b.forward(tape, p, h)?;
            }
        }
        h = self.head_norm.forward(tape, p, h)?;
        h = tape.silu(h)?;
        h = self.head.forward(tape, p, h)?;
        h = tape.tanh(h)?;
        h = tape.scale(h, 0.5)?;
        tape.add_scalar(h, 0.5)
    }
}

/// Sizes of the full networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub arch: Arch,
    pub codebook_size: usize,
    pub heads: usize,
    pub residual: Residual,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.arch.channels.len() != 5 {
            return Err(Error::invalid("model", "the encoder needs exactly 5 resolution levels"));
        }
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::invalid("model", format!("image size {} not divisible by 32", self.image_size)));
        }
        if self.codebook_size < 2 {
            return Err(Error::invalid("model", "codebook needs at least 2 entries"));
        }
        if self.heads == 0 || self.arch.latent % self.heads != 0 {
            return Err(Error::invalid(
                "model",
                format!("latent width {} not divisible by {} heads", self.arch.latent, self.heads),
            ));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / 32
    }
}

/// Stage-1 outputs.
#[derive(Clone, Debug)]
pub struct HqOutput {
    pub recon: Var,
    pub z_h: Var,
    pub z_p: Var,
    pub indices: Vec<usize>,
}

/// Stage-2 outputs; `attention` holds the weights of both blocks.
#[derive(Clone, Debug)]
pub struct RestoreOutput {
    pub restored: Var,
    pub z_d: Var,
    pub z_p: Var,
    pub z_f: Var,
    pub indices: Vec<usize>,
    pub attention: [Var; 2],
}

fn quantize_latent(tape: &mut Tape, p: Params<'_>, z: Var) -> Result<(Var, Vec<usize>)> {
    let book = Codebook::new(p.store.get(ENTRIES)?.clone())?;
    let q = book.quantize(tape.value(z))?;
    let entries = p.var(tape, ENTRIES)?;
    let shape = tape.shape(z).to_vec();
    let z_p = dictionary::lookup(tape, entries, &q.indices, &shape)?;
    Ok((z_p, q.indices))
}

/// Encoder, dictionary and decoder of the first training stage.
#[derive(Clone, Debug)]
pub struct HqGenerator {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl HqGenerator {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: Encoder::new("encoder", config.arch.clone())?,
            decoder: Decoder::new("decoder", config.arch.clone())?,
            config,
        })
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let mut rng = Rng::derive(seed, 1);
        self.encoder.init(store, &mut rng);
        self.decoder.init(store, &mut rng);
        let book = dictionary::codebook_init(self.config.codebook_size, self.config.arch.latent, seed ^ 0xD1C7)?;
        store.insert(ENTRIES, book);
        Ok(())
    }

    /// Encode, quantize, copy gradients straight through, decode.
    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, images: Var) -> Result<HqOutput> {
        let z_h = self.encoder.forward(tape, p, images)?;
        let (z_p, indices) = quantize_latent(tape, p, z_h)?;
        let z_st = dictionary::straight_through(tape, z_h, z_p)?;
        let recon = self.decoder.forward(tape, p, z_st)?;
        Ok(HqOutput { recon, z_h, z_p, indices })
    }

    /// Plain autoencoder path with the quantizer removed.
    pub fn forward_unquantized(&self, tape: &mut Tape, p: Params<'_>, images: Var) -> Result<Var> {
        let z = self.encoder.forward(tape, p, images)?;
        self.decoder.forward(tape, p, z)
    }
}

/// The second-stage restoration network.
#[derive(Clone, Debug)]
pub struct Restorer {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub mhca1: AttentionBlock,
    pub mhca2: AttentionBlock,
}

impl Restorer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.arch.latent;
        Ok(Self {
            encoder: Encoder::new("encoder", config.arch.clone())?,
            decoder: Decoder::new("decoder", config.arch.clone())?,
            mhca1: AttentionBlock::new("mhca1", c, config.heads)?.with_residual(config.residual),
            mhca2: AttentionBlock::new("mhca2", c, config.heads)?.with_residual(config.residual),
            config,
        })
    }

    pub fn with_block_mode(mut self, mode: BlockMode) -> Self {
        self.mhca1.mode = mode;
        self.mhca2.mode = mode;
        self
    }

    /// Fresh parameters for every tensor, including the codebook.
    pub fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        HqGenerator {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
        .init(store, seed)?;
        self.init_attention(store, seed);
        Ok(())
    }

    pub fn init_attention(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = Rng::derive(seed, 2);
        self.mhca1.init(store, &mut rng);
        self.mhca2.init(store, &mut rng);
    }

    /// `Z'_f = MHCA(Z_d, MHCA(Z_d, Z_p))`, then decode.
    pub fn forward(&self, tape: &mut Tape, p: Params<'_>, degraded: Var) -> Result<RestoreOutput> {
        let z_d = self.encoder.forward(tape, p, degraded)?;
        let (z_p, indices) = quantize_latent(tape, p, z_d)?;
        let (z_f, z_out, attention) = self.fuse(tape, p, z_d, z_p)?;
        let restored = self.decoder.forward(tape, p, z_out)?;
        Ok(RestoreOutput {
            restored,
            z_d,
            z_p,
            z_f,
            indices,
            attention,
        })
    }

    /// Returns the first block's output, the second block's output and
    /// both attention weight tensors.
    pub fn fuse(&self, tape: &mut Tape, p: Params<'_>, z_d: Var, z_p: Var) -> Result<(Var, Var, [Var; 2])> {
        let first = self.mhca1.mhca(tape, p, z_d, z_p)?;
        let second = self.mhca2.mhca(tape, p, z_d, first.out)?;
        Ok((first.out, second.out, [first.weights, second.weights]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};

    fn desk() -> ModelConfig {
        ModelConfig {
            image_size: 32,
            arch: Arch::standard([4, 8, 8, 8, 8], 8, 4),
            codebook_size: 16,
            heads: 2,
            residual: Residual::Prior,
        }
    }

    fn image(n: usize, size: usize, seed: u64) -> Tensor {
        Tensor::rand_uniform([n, size, size, 3], 0.0, 1.0, &mut Rng::seed(seed))
    }

    #[test]
    fn shapes_follow_factor_32() {
        let gen = HqGenerator::new(desk()).unwrap();
        assert_eq!(gen.encoder.num_blocks(), 12);
        let mut store = ParamStore::new();
        gen.init(&mut store, 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(image(2, 32, 1));
        let out = gen.forward(&mut tape, Params::frozen(&store), x).unwrap();
        assert_eq!(tape.shape(out.z_h), [2, 1, 1, 8]);
        assert_eq!(tape.shape(out.recon), [2, 32, 32, 3]);
        assert!(tape.value(out.recon).data().iter().all(|v| (0.0..=1.0).contains(v)));
        let bad = tape.constant(image(1, 48, 1));
        assert!(gen.forward(&mut tape, Params::frozen(&store), bad).is_err());
    }

    #[test]
    fn paper_arch_latent_shape() {
        // Shape arithmetic only; running a 512 px forward would be slow.
        let cfg = ModelConfig {
            image_size: 512,
            arch: Arch::standard([64, 128, 128, 256, 256], 256, 32),
            codebook_size: 1024,
            heads: 8,
            residual: Residual::Prior,
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.latent_size(), 16);
        assert_eq!(cfg.arch.factor(), 32);
    }

    #[test]
    fn parameter_names_are_dotted_paths() {
        let r = Restorer::new(desk()).unwrap();
        let mut store = ParamStore::new();
        r.init(&mut store, 0).unwrap();
        for name in ["encoder.block3.conv1.weight", "decoder.block11.conv2.bias", ENTRIES, "mhca1.w_q", "mhca2.b_o"] {
            assert!(store.contains(name), "{name}");
        }
        assert!(!store.contains("encoder.block12.conv1.weight"));
    }

    #[test]
    fn gradients_reach_encoder_through_straight_through() {
        let gen = HqGenerator::new(desk()).unwrap();
        let mut store = ParamStore::new();
        gen.init(&mut store, 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(image(2, 32, 3));
        let out = gen.forward(&mut tape, Params::tracked(&store), x).unwrap();
        let loss = tape.mean(out.recon).unwrap();
        tape.backward(loss).unwrap();
        store.pull_grads(&tape);
        let g = store.param("encoder.stem.weight").unwrap().grad.as_ref().unwrap();
        assert!(g.data().iter().any(|&v| v != 0.0));
        let g = store.param(ENTRIES).unwrap().grad.as_ref().unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reduced_encoder_gradient_check() {
        let arch = Arch {
            channels: vec![4],
            blocks_per_level: 1,
            mid_blocks: 0,
            latent: 4,
            norm_groups: 2,
        };
        let enc = Encoder::new("encoder", arch).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut Rng::seed(0));
        let err = grad_check(|t, v| enc.forward(t, Params::frozen(&store), v[0]), &[image(1, 8, 4)], 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn blocks_are_independent_and_ordered() {
        let r = Restorer::new(desk()).unwrap();
        let mut store = ParamStore::new();
        r.init(&mut store, 0).unwrap();
        let zd = Tensor::randn([1, 2, 2, 8], 1.0, &mut Rng::seed(5));
        let zp = Tensor::randn([1, 2, 2, 8], 1.0, &mut Rng::seed(6));
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let (d, p) = (tape.constant(zd.clone()), tape.constant(zp.clone()));
            let (_, out, _) = r.fuse(&mut tape, Params::frozen(store), d, p).unwrap();
            tape.value(out).clone()
        };
        let base = run(&store);
        let mut swapped = store.clone();
        for (name, _) in store.iter().filter(|(n, _)| n.starts_with("mhca1.")) {
            let other = name.replacen("mhca1.", "mhca2.", 1);
            swapped.set(name, store.get(&other).unwrap().clone()).unwrap();
            swapped.set(&other, store.get(name).unwrap().clone()).unwrap();
        }
        assert!(base.max_abs_diff(&run(&swapped)) > 1e-6);
    }

    #[test]
    fn zero_value_path_decodes_prior() {
        let r = Restorer::new(desk()).unwrap().with_block_mode(BlockMode::pass_through());
        let mut store = ParamStore::new();
        r.init(&mut store, 0).unwrap();
        for name in ["mhca1.w_v", "mhca1.b_v", "mhca2.w_v", "mhca2.b_v"] {
            let shape = store.get(name).unwrap().shape().to_vec();
            store.set(name, Tensor::zeros(shape)).unwrap();
        }
        let mut tape = Tape::new();
        let x = tape.constant(image(1, 32, 7));
        let p = Params::frozen(&store);
        let out = r.forward(&mut tape, p, x).unwrap();
        let direct = r.decoder.forward(&mut tape, p, out.z_p).unwrap();
        assert!(tape.value(out.restored).bit_eq(tape.value(direct)));
    }
}
