//! The three encoder-decoder architectures, their seeded construction,
//! forward passes, and checkpoint persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::det::DetRng;
use crate::nnblocks::{
    Act, BnLayer, CamBlock, Conv2dLayer, DecBlock, DownBlock, EncBlock, SamBlock, TnetBlock,
    UpBlock,
};
use crate::tensor::{Mode, NodeId, ParamStore, Scalar, Shape, Tape, TensorError};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Arch {
    Unet,
    Tnet,
    AttnUnet,
}

impl Arch {
    pub fn id(self) -> u8 {
        match self {
            Arch::Unet => 0,
            Arch::Tnet => 1,
            Arch::AttnUnet => 2,
        }
    }

    pub fn from_id(id: u8) -> Option<Arch> {
        match id {
            0 => Some(Arch::Unet),
            1 => Some(Arch::Tnet),
            2 => Some(Arch::AttnUnet),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Unet => "unet",
            Arch::Tnet => "tnet",
            Arch::AttnUnet => "attn_unet",
        }
    }

    pub fn parse(s: &str) -> Option<Arch> {
        match s {
            "unet" => Some(Arch::Unet),
            "tnet" => Some(Arch::Tnet),
            "attn_unet" => Some(Arch::AttnUnet),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ModelSpec {
    pub arch: Arch,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub seed: u64,
    /// Spatial size the network is built for. The production pipeline uses
    /// 128x256; gradient checks shrink to 16x32.
    pub input_hw: (usize, usize),
}

impl ModelSpec {
    pub fn new(arch: Arch, out_channels: usize, base_width: usize, seed: u64) -> ModelSpec {
        ModelSpec { arch, in_channels: 1, out_channels, base_width, seed, input_hw: (128, 256) }
    }

    pub fn with_input_hw(mut self, h: usize, w: usize) -> ModelSpec {
        self.input_hw = (h, w);
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.in_channels != 1 {
            return Err(ModelError::InvalidSpec(format!(
                "input is always the 1-channel mask, got {}",
                self.in_channels
            )));
        }
        if self.out_channels != 1 && self.out_channels != 2 {
            return Err(ModelError::InvalidSpec(format!(
                "out_channels must be 1 or 2, got {}",
                self.out_channels
            )));
        }
        if self.base_width < 4 {
            return Err(ModelError::InvalidSpec(format!(
                "base_width must be at least 4, got {}",
                self.base_width
            )));
        }
        let (h, w) = self.input_hw;
        let pow2 = |v: usize| v >= 16 && v <= 1024 && v.is_power_of_two();
        if !pow2(h) || !pow2(w) {
            return Err(ModelError::InvalidSpec(format!(
                "input {}x{} must be powers of two in [16, 1024]",
                h, w
            )));
        }
        Ok(())
    }

    /// Encoder depth: halvings until the short side reaches 1.
    fn depth(&self) -> usize {
        self.input_hw.0.min(self.input_hw.1).trailing_zeros() as usize
    }
}

#[derive(Debug)]
pub enum ModelError {
    InvalidSpec(String),
    CorruptCheckpoint(String),
    Tensor(TensorError),
    Io(std::io::Error),
}

impl std::fmt::Display for ModelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelError::InvalidSpec(s) => write!(f, "invalid model spec: {}", s),
            ModelError::CorruptCheckpoint(s) => write!(f, "corrupt checkpoint: {}", s),
            ModelError::Tensor(e) => write!(f, "{}", e),
            ModelError::Io(e) => write!(f, "{}", e),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e)
    }
}

/// Nominal per-stage output width factors for the attention net encoder.
const ATTN_WIDTHS: [usize; 7] = [1, 2, 4, 8, 8, 8, 8];

/// T-Net encoder listing: (width factor, kernel, activation, batch norm).
const TNET_ENC: [(usize, usize, Act, bool); 7] = [
    (1, 4, Act::None, false),
    (2, 4, Act::Leaky, true),
    (2, 4, Act::Leaky, true),
    (4, 4, Act::Leaky, true),
    (8, 2, Act::Leaky, true),
    (8, 2, Act::Leaky, true),
    (8, 2, Act::Leaky, false),
];

/// T-Net decoder listing: (width factor or final head, kernel, batch norm).
/// Every stage is relu-first and followed by a bilinear 2x upsample; a `None`
/// factor means the stage emits `out_channels` planes.
const TNET_DEC: [(Option<usize>, usize, bool); 7] = [
    (Some(8), 1, true),
    (Some(8), 1, true),
    (Some(8), 3, true),
    (Some(4), 3, true),
    (Some(2), 3, true),
    (Some(2), 3, true),
    (None, 3, false),
];

struct TnetStage {
    block: TnetBlock,
    /// Encoder output concatenated before the block, if any.
    skip: Option<usize>,
}

enum Plan {
    Unet {
        downs: Vec<DownBlock>,
        mid_conv: Conv2dLayer,
        mid_bn: BnLayer,
        ups: Vec<UpBlock>,
        head: Conv2dLayer,
    },
    Tnet {
        encs: Vec<TnetBlock>,
        decs: Vec<TnetStage>,
    },
    Attn {
        encs: Vec<EncBlock>,
        cam: CamBlock,
        sams: Vec<SamBlock>,
        decs: Vec<DecBlock>,
        head: Conv2dLayer,
    },
}

pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore<f32>,
    plan: Plan,
}

impl Model {
    pub fn build(spec: ModelSpec) -> Result<Model, ModelError> {
        spec.validate()?;
        let mut store: ParamStore<f32> = ParamStore::new();
        let mut rng = DetRng::seeded(spec.seed);
        let plan = match spec.arch {
            Arch::Unet => build_unet(&spec, &mut store, &mut rng),
            Arch::Tnet => build_tnet(&spec, &mut store, &mut rng),
            Arch::AttnUnet => build_attn(&spec, &mut store, &mut rng),
        };
        Ok(Model { spec, store, plan })
    }

    /// Runs the network on an already-placed input node. The store argument
    /// lets callers substitute a converted-precision copy of `self.store`.
    pub fn forward_on<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let s = tape.shape(x);
        let (h, w) = self.spec.input_hw;
        if s.c != self.spec.in_channels || s.h != h || s.w != w {
            return Err(TensorError::ShapeMismatch {
                op: "model forward",
                detail: format!("input {} against 1x{}x{}", s, h, w),
            });
        }
        match &self.plan {
            Plan::Unet { downs, mid_conv, mid_bn, ups, head } => {
                let mut skips = Vec::new();
                let mut cur = x;
                for d in downs {
                    let (pooled, pre) = d.forward(tape, store, cur)?;
                    skips.push(pre);
                    cur = pooled;
                }
                let c = mid_conv.forward(tape, store, cur)?;
                let n = mid_bn.forward(tape, store, c)?;
                cur = tape.relu(n);
                for (i, up) in ups.iter().enumerate() {
                    cur = up.forward(tape, store, cur, skips[skips.len() - 1 - i])?;
                }
                head.forward(tape, store, cur)
            }
            Plan::Tnet { encs, decs } => {
                // The mask plane is replicated to the three input channels.
                let xx = tape.concat_channels(x, x)?;
                let mut cur = tape.concat_channels(xx, x)?;
                let mut outs = Vec::new();
                for e in encs {
                    cur = e.forward(tape, store, cur)?;
                    outs.push(cur);
                }
                for stage in decs {
                    let input = match stage.skip {
                        Some(j) => tape.concat_channels(cur, outs[j])?,
                        None => cur,
                    };
                    let c = stage.block.forward(tape, store, input)?;
                    cur = tape.bilinear_up_2x(c);
                }
                Ok(cur)
            }
            Plan::Attn { encs, cam, sams, decs, head } => {
                let mut feats = Vec::new();
                let mut cur = x;
                for e in encs {
                    cur = e.forward(tape, store, cur)?;
                    feats.push(cur);
                }
                let d = encs.len();
                let bottom = cam.forward(tape, store, feats[d - 1])?;
                cur = decs[0].forward(tape, store, bottom)?;
                for i in 1..d {
                    let gated = sams[d - 1 - i].forward(tape, store, feats[d - 1 - i])?;
                    let cat = tape.concat_channels(cur, gated)?;
                    cur = decs[i].forward(tape, store, cat)?;
                }
                head.forward(tape, store, cur)
            }
        }
    }

    /// Convenience inference: places `masks` (n stacked 1-channel planes) on
    /// a fresh tape and returns the flat output values.
    pub fn infer(&self, masks: &[f32], n: usize, mode: Mode) -> Result<Vec<f32>, ModelError> {
        let (h, w) = self.spec.input_hw;
        if masks.len() != n * h * w {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "infer",
                detail: format!("{} values for {} samples of {}x{}", masks.len(), n, h, w),
            }));
        }
        let mut tape: Tape<f32> = Tape::new(mode);
        let x = tape.constant(Shape::nchw(n, 1, h, w), masks.to_vec());
        let out = self.forward_on(&mut tape, &self.store, x)?;
        Ok(tape.value(out).to_vec())
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(b"MFCK")?;
        f.write_all(&1u32.to_le_bytes())?;
        f.write_all(&[self.spec.arch.id()])?;
        f.write_all(&[self.spec.in_channels as u8])?;
        f.write_all(&[self.spec.out_channels as u8])?;
        f.write_all(&(self.spec.base_width as u32).to_le_bytes())?;
        f.write_all(&self.spec.seed.to_le_bytes())?;
        f.write_all(&(self.spec.input_hw.0 as u16).to_le_bytes())?;
        f.write_all(&(self.spec.input_hw.1 as u16).to_le_bytes())?;
        f.write_all(&(self.store.entries.len() as u32).to_le_bytes())?;
        for e in &self.store.entries {
            let name = e.name.as_bytes();
            f.write_all(&(name.len() as u16).to_le_bytes())?;
            f.write_all(name)?;
            f.write_all(&[e.trainable as u8])?;
            for d in [e.shape.n, e.shape.c, e.shape.h, e.shape.w] {
                f.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &e.data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model, ModelError> {
        let mut f = BufReader::new(File::open(path)?);
        let corrupt = |s: &str| ModelError::CorruptCheckpoint(s.to_string());
        let mut magic = [0u8; 4];
        read_exact(&mut f, &mut magic)?;
        if &magic != b"MFCK" {
            return Err(corrupt("bad magic"));
        }
        if read_u32(&mut f)? != 1 {
            return Err(corrupt("unsupported version"));
        }
        let arch = Arch::from_id(read_u8(&mut f)?).ok_or_else(|| corrupt("unknown architecture id"))?;
        let in_channels = read_u8(&mut f)? as usize;
        let out_channels = read_u8(&mut f)? as usize;
        let base_width = read_u32(&mut f)? as usize;
        let seed = read_u64(&mut f)?;
        let h = read_u16(&mut f)? as usize;
        let w = read_u16(&mut f)? as usize;
        let count = read_u32(&mut f)? as usize;
        let spec = ModelSpec { arch, in_channels, out_channels, base_width, seed, input_hw: (h, w) };
        spec.validate().map_err(|e| ModelError::CorruptCheckpoint(e.to_string()))?;
        let mut model = Model::build(spec)?;
        if count != model.store.entries.len() {
            return Err(corrupt("parameter count mismatch"));
        }
        for i in 0..count {
            let name_len = read_u16(&mut f)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut f, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| corrupt("non-utf8 name"))?;
            let trainable = read_u8(&mut f)? != 0;
            let mut dims = [0usize; 4];
            for d in dims.iter_mut() {
                *d = read_u32(&mut f)? as usize;
            }
            let e = &mut model.store.entries[i];
            let shape = Shape::nchw(dims[0], dims[1], dims[2], dims[3]);
            if e.name != name || e.shape != shape || e.trainable != trainable {
                return Err(corrupt(&format!("entry {} does not match the build order", name)));
            }
            let mut buf = vec![0u8; e.data.len() * 4];
            read_exact(&mut f, &mut buf)?;
            for (j, chunk) in buf.chunks_exact(4).enumerate() {
                e.data[j] = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        let mut trailing = [0u8; 1];
        if f.read(&mut trailing)? != 0 {
            return Err(corrupt("trailing bytes"));
        }
        Ok(model)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf).map_err(|_| ModelError::CorruptCheckpoint("unexpected end of file".into()))
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8, ModelError> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, ModelError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn build_unet(spec: &ModelSpec, store: &mut ParamStore<f32>, rng: &mut DetRng) -> Plan {
    let bw = spec.base_width;
    let widths = [spec.in_channels, bw, 2 * bw, 4 * bw, 8 * bw];
    let downs: Vec<DownBlock> = (0..4)
        .map(|i| DownBlock::register(store, rng, &format!("down{}", i + 1), widths[i], widths[i + 1]))
        .collect();
    let mid_conv = Conv2dLayer::register(store, rng, "mid.conv", 8 * bw, 16 * bw, 3, 1, 1);
    let mid_bn = BnLayer::register(store, "mid.bn", 16 * bw);
    // Each stage halves the channel count; the concat with the pre-pool skip
    // doubles it back before the stage conv.
    let ups: Vec<UpBlock> = (0..4)
        .map(|i| {
            let cin = 16 * bw >> i;
            UpBlock::register(store, rng, &format!("up{}", i + 1), cin, cin / 2, cin / 2, 4)
        })
        .collect();
    let head = Conv2dLayer::register(store, rng, "head", bw, spec.out_channels, 1, 1, 0);
    Plan::Unet { downs, mid_conv, mid_bn, ups, head }
}

fn build_tnet(spec: &ModelSpec, store: &mut ParamStore<f32>, rng: &mut DetRng) -> Plan {
    let bw = spec.base_width;
    let d = spec.depth();
    let mut encs = Vec::new();
    let mut enc_out = vec![0usize; d];
    let mut cin = 3;
    for (i, &(c, k, act, bn)) in TNET_ENC.iter().take(d).enumerate() {
        let cout = c * bw;
        encs.push(TnetBlock::register(store, rng, &format!("enc{}", i + 1), cin, cout, k, 2, act, bn));
        enc_out[i] = cout;
        cin = cout;
    }
    let mut decs = Vec::new();
    let mut cur = enc_out[d - 1];
    for (s, &(factor, k, bn)) in TNET_DEC[7 - d..].iter().enumerate() {
        let skip = if s == 0 { None } else { Some(d - 1 - s) };
        let block_in = cur + skip.map_or(0, |j| enc_out[j]);
        let cout = match factor {
            Some(c) => c * bw,
            None => spec.out_channels,
        };
        decs.push(TnetStage {
            block: TnetBlock::register(
                store,
                rng,
                &format!("dec{}", s + 1),
                block_in,
                cout,
                k,
                1,
                Act::Relu,
                bn,
            ),
            skip,
        });
        cur = cout;
    }
    Plan::Tnet { encs, decs }
}

fn build_attn(spec: &ModelSpec, store: &mut ParamStore<f32>, rng: &mut DetRng) -> Plan {
    let bw = spec.base_width;
    let d = spec.depth();
    let (mut h, mut w) = spec.input_hw;
    let mut encs = Vec::new();
    let mut enc_out = vec![0usize; d];
    let mut cin = spec.in_channels;
    for i in 0..d {
        let k = if h.min(w) == 2 { 2 } else { 4 };
        let cout = ATTN_WIDTHS[i] * bw;
        encs.push(EncBlock::register(store, rng, &format!("enc{}", i + 1), cin, cout, k));
        enc_out[i] = cout;
        cin = cout;
        h /= 2;
        w /= 2;
    }
    let cam = CamBlock::register(store, rng, "cam", enc_out[d - 1]);
    let sams: Vec<SamBlock> =
        (0..d - 1).map(|i| SamBlock::register(store, rng, &format!("sam{}", i + 1))).collect();
    let mut decs = Vec::new();
    let mut cur = enc_out[d - 1];
    for i in 0..d {
        let cout = if i + 1 < d { enc_out[d - 2 - i] } else { bw };
        let cin = if i == 0 { cur } else { 2 * cur };
        decs.push(DecBlock::register(store, rng, &format!("dec{}", i + 1), cin, cout));
        cur = cout;
    }
    let head = Conv2dLayer::register(store, rng, "head", bw, spec.out_channels, 1, 1, 0);
    Plan::Attn { encs, cam, sams, decs, head }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, salt: u64) -> Vec<f32> {
        let mut rng = DetRng::seeded(salt);
        (0..h * w).map(|_| if rng.uniform() > 0.4 { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn all_architectures_map_mask_to_field_shape() {
        for arch in [Arch::Unet, Arch::Tnet, Arch::AttnUnet] {
            for out in [1usize, 2] {
                let spec = ModelSpec::new(arch, out, 4, 11);
                let model = Model::build(spec).unwrap();
                let y = model.infer(&mask(128, 256, 1), 1, Mode::Eval).unwrap();
                assert_eq!(y.len(), out * 128 * 256, "{} out={}", arch.as_str(), out);
                assert!(y.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn small_input_variants_stay_consistent() {
        for arch in [Arch::Unet, Arch::Tnet, Arch::AttnUnet] {
            let spec = ModelSpec::new(arch, 2, 4, 3).with_input_hw(16, 32);
            let model = Model::build(spec).unwrap();
            let y = model.infer(&mask(16, 32, 2), 1, Mode::Eval).unwrap();
            assert_eq!(y.len(), 2 * 16 * 32, "{}", arch.as_str());
        }
    }

    #[test]
    fn same_seed_same_weights_different_seed_different() {
        let spec = ModelSpec::new(Arch::AttnUnet, 1, 4, 99);
        let (a, b) = (Model::build(spec).unwrap(), Model::build(spec).unwrap());
        for (ea, eb) in a.store.entries.iter().zip(&b.store.entries) {
            assert_eq!(ea.data, eb.data, "{}", ea.name);
        }
        let c = Model::build(ModelSpec::new(Arch::AttnUnet, 1, 4, 100)).unwrap();
        let first = a.store.entries.iter().find(|e| e.name == "enc1.conv.w").unwrap();
        let other = c.store.entries.iter().find(|e| e.name == "enc1.conv.w").unwrap();
        assert_ne!(first.data, other.data);
    }

    #[test]
    fn eval_forward_is_bit_deterministic() {
        let model = Model::build(ModelSpec::new(Arch::Tnet, 1, 4, 5)).unwrap();
        let m = mask(128, 256, 3);
        let a = model.infer(&m, 1, Mode::Eval).unwrap();
        let b = model.infer(&m, 1, Mode::Eval).unwrap();
        assert_eq!(a, b);
        let t1 = model.infer(&m, 1, Mode::Train { seed: 8 }).unwrap();
        let t2 = model.infer(&m, 1, Mode::Train { seed: 8 }).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn tnet_uses_small_kernels_in_the_deep_encoder() {
        let model = Model::build(ModelSpec::new(Arch::Tnet, 1, 4, 7)).unwrap();
        let shape_of = |name: &str| {
            model.store.entries.iter().find(|e| e.name == name).map(|e| e.shape).unwrap()
        };
        assert_eq!(shape_of("enc5.conv.w").h, 2);
        assert_eq!(shape_of("enc6.conv.w").h, 2);
        assert_eq!(shape_of("enc7.conv.w").h, 2);
        assert_eq!(shape_of("enc1.conv.w").h, 4);
        // Width factors: c8 at base 4 means 32 planes.
        assert_eq!(shape_of("enc5.conv.w").n, 32);
        // Final stage emits the target channels straight from the conv.
        assert_eq!(shape_of("dec7.conv.w").n, 1);
    }

    #[test]
    fn attention_net_deepest_block_sees_two_pixels() {
        let model = Model::build(ModelSpec::new(Arch::AttnUnet, 2, 4, 13)).unwrap();
        let shape_of = |name: &str| {
            model.store.entries.iter().find(|e| e.name == name).map(|e| e.shape).unwrap()
        };
        // Seven encoder stages; the seventh runs on a 2x4 map with a 2x2 kernel.
        assert_eq!(shape_of("enc7.conv.w").h, 2);
        assert_eq!(shape_of("enc6.conv.w").h, 4);
        assert!(model.store.index_of("enc8.conv.w").is_none());
        assert!(model.store.index_of("sam6.conv.w").is_some());
        assert!(model.store.index_of("sam7.conv.w").is_none());
        // Skip concat doubles the decoder input everywhere past the bottom.
        for i in 2..=7 {
            let dec = shape_of(&format!("dec{}.up.w", i));
            let prev = shape_of(&format!("dec{}.up.w", i - 1));
            assert_eq!(dec.n, 2 * prev.c, "dec{}", i);
        }
    }

    #[test]
    fn unet_parameter_count_matches_closed_form() {
        let bw = 64usize;
        let model = Model::build(ModelSpec::new(Arch::Unet, 2, bw, 1)).unwrap();
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let bn = |c: usize| 2 * c;
        let mut expect = 0usize;
        let widths = [1, bw, 2 * bw, 4 * bw, 8 * bw];
        for i in 0..4 {
            expect += conv(widths[i], widths[i + 1], 3) + bn(widths[i + 1]);
        }
        expect += conv(8 * bw, 16 * bw, 3) + bn(16 * bw);
        for i in 0..4 {
            let cin = 16 * bw >> i;
            expect += conv(cin, cin / 2, 4); // transposed upsample
            expect += conv(cin, cin / 2, 3) + bn(cin / 2);
        }
        expect += conv(bw, 2, 1);
        assert_eq!(model.param_count(), expect);
    }

    #[test]
    fn parameter_count_scales_quadratically_with_width() {
        let small = Model::build(ModelSpec::new(Arch::Unet, 1, 8, 1)).unwrap().param_count();
        let large = Model::build(ModelSpec::new(Arch::Unet, 1, 16, 1)).unwrap().param_count();
        let ratio = large as f64 / small as f64;
        assert!((ratio - 4.0).abs() / 4.0 < 0.10, "ratio {}", ratio);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mfck");
        let spec = ModelSpec::new(Arch::AttnUnet, 2, 4, 21).with_input_hw(16, 32);
        let model = Model::build(spec).unwrap();
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded.spec, model.spec);
        let m = mask(16, 32, 9);
        let a = model.infer(&m, 1, Mode::Eval).unwrap();
        let b = loaded.infer(&m, 1, Mode::Eval).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mfck");
        let spec = ModelSpec::new(Arch::Tnet, 1, 4, 2).with_input_hw(16, 32);
        Model::build(spec).unwrap().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = dir.path().join("short.mfck");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Model::load(&truncated), Err(ModelError::CorruptCheckpoint(_))));

        let mut flipped = bytes.clone();
        flipped[8] = Arch::Unet.id(); // architecture byte
        let other = dir.path().join("arch.mfck");
        std::fs::write(&other, &flipped).unwrap();
        assert!(matches!(Model::load(&other), Err(ModelError::CorruptCheckpoint(_))));

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        let third = dir.path().join("magic.mfck");
        std::fs::write(&third, &bad_magic).unwrap();
        assert!(matches!(Model::load(&third), Err(ModelError::CorruptCheckpoint(_))));
    }

    #[test]
    fn spec_validation_rejects_bad_fields() {
        assert!(ModelSpec::new(Arch::Unet, 3, 8, 1).validate().is_err());
        assert!(ModelSpec::new(Arch::Unet, 1, 3, 1).validate().is_err());
        assert!(ModelSpec::new(Arch::Unet, 1, 8, 1).with_input_hw(100, 256).validate().is_err());
        assert!(ModelSpec::new(Arch::Unet, 1, 8, 1).with_input_hw(8, 16).validate().is_err());
        assert!(ModelSpec::new(Arch::Unet, 2, 8, 1).validate().is_ok());
    }
}
