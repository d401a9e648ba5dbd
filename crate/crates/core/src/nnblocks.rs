//! Composite network blocks: plain conv/norm layers with seeded init, the
//! channel and spatial attention gates, and the encoder/decoder stages the
//! three architectures are assembled from.

use crate::det::DetRng;
use crate::tensor::{NodeId, ParamStore, Scalar, Shape, Tape, TensorError};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1.0e-5;
/// Applied inside every T-Net block.
pub const TNET_DROPOUT: f64 = 0.01;

/// Kaiming-uniform draw: bound sqrt(6/fan_in), one value per weight in
/// registration order.
fn kaiming<T: Scalar>(rng: &mut DetRng, fan_in: usize, count: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..count).map(|_| T::from_f64(rng.range_f64(-bound, bound))).collect()
}

fn pad_for(k: usize) -> usize {
    match k {
        4 | 3 => 1,
        _ => 0,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2dLayer {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut DetRng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.register(
            &format!("{}.w", name),
            Shape::nchw(cout, cin, k, k),
            kaiming(rng, cin * k * k, cout * cin * k * k),
            true,
        );
        let b = store.register(
            &format!("{}.b", name),
            Shape::nchw(cout, 1, 1, 1),
            vec![T::ZERO; cout],
            true,
        );
        Conv2dLayer { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvT2dLayer {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT2dLayer {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut DetRng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.register(
            &format!("{}.w", name),
            Shape::nchw(cin, cout, k, k),
            kaiming(rng, cin * k * k, cin * cout * k * k),
            true,
        );
        let b = store.register(
            &format!("{}.b", name),
            Shape::nchw(cout, 1, 1, 1),
            vec![T::ZERO; cout],
            true,
        );
        ConvT2dLayer { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BnLayer {
    pub gain: usize,
    pub shift: usize,
    pub rmean: usize,
    pub rvar: usize,
}

impl BnLayer {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        let sh = Shape::nchw(c, 1, 1, 1);
        BnLayer {
            gain: store.register(&format!("{}.g", name), sh, vec![T::ONE; c], true),
            shift: store.register(&format!("{}.s", name), sh, vec![T::ZERO; c], true),
            rmean: store.register(&format!("{}.rm", name), sh, vec![T::ZERO; c], false),
            rvar: store.register(&format!("{}.rv", name), sh, vec![T::ONE; c], false),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let g = tape.param(store, self.gain);
        let s = tape.param(store, self.shift);
        tape.batch_norm(x, g, s, store, self.rmean, self.rvar, BN_MOMENTUM, BN_EPS)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DenseLayer {
    pub w: usize,
    pub b: usize,
}

impl DenseLayer {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut DetRng,
        name: &str,
        fin: usize,
        fout: usize,
    ) -> Self {
        DenseLayer {
            w: store.register(
                &format!("{}.w", name),
                Shape::nchw(fout, fin, 1, 1),
                kaiming(rng, fin, fout * fin),
                true,
            ),
            b: store.register(
                &format!("{}.b", name),
                Shape::nchw(fout, 1, 1, 1),
                vec![T::ZERO; fout],
                true,
            ),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.dense(x, w, b)
    }
}

/// Channel attention: gate = sigmoid(MLP(GAP(F)) + MLP(GMP(F))), one MLP
/// shared by both pooled paths. Hidden width is C/16 floored at 4.
#[derive(Clone, Copy, Debug)]
pub struct CamBlock {
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
}

impl CamBlock {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut DetRng,
        name: &str,
        channels: usize,
    ) -> Self {
        let hidden = (channels / 16).max(4);
        CamBlock {
            fc1: DenseLayer::register(store, rng, &format!("{}.fc1", name), channels, hidden),
            fc2: DenseLayer::register(store, rng, &format!("{}.fc2", name), hidden, channels),
        }
    }

    pub fn gate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: NodeId,
    ) -> Result<NodeId, TensorError> {
        let path = |tape: &mut Tape<T>, pooled: NodeId| -> Result<NodeId, TensorError> {
            let h = self.fc1.forward(tape, store, pooled)?;
            let h = tape.relu(h);
            self.fc2.forward(tape, store, h)
        };
        let ga = tape.gap_spatial(f);
        let gm = tape.gmp_spatial(f);
        let a = path(tape, ga)?;
        let m = path(tape, gm)?;
        let sum = tape.add(a, m)?;
        Ok(tape.sigmoid(sum))
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: NodeId,
    ) -> Result<NodeId, TensorError> {
        let g = self.gate(tape, store, f)?;
        tape.mul_broadcast(f, g)
    }
}

/// Spatial attention: channel-avg and channel-max stacked to two planes,
/// squeezed by a 7x7 conv, sigmoided into a 1xHxW gate.
#[derive(Clone, Copy, Debug)]
pub struct SamBlock {
    pub conv: Conv2dLayer,
}

impl SamBlock {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, rng: &mut DetRng, name: &str) -> Self {
        SamBlock { conv: Conv2dLayer::register(store, rng, &format!("{}.conv", name), 2, 1, 7, 1, 3) }
    }

    pub fn gate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: NodeId,
    ) -> Result<NodeId, TensorError> {
        let avg = tape.avg_over_channels(f);
        let mx = tape.max_over_channels(f);
        let cat = tape.concat_channels(avg, mx)?;
        let c = self.conv.forward(tape, store, cat)?;
        Ok(tape.sigmoid(c))
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f: NodeId,
    ) -> Result<NodeId, TensorError> {
        let g = self.gate(tape, store, f)?;
        tape.mul_broadcast(f, g)
    }
}

/// Contracting stage: MaxPool(ReLU(BatchNorm(Conv k3 p1))). Returns the
/// pooled features and the pre-pool activation, which is what the skip
/// connection carries.
#[derive(Clone, Copy, Debug)]
pub struct DownBlock {
    pub conv: Conv2dLayer,
    pub bn: BnLayer,
}

impl DownBlock {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut DetRng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        DownBlock {
            conv: Conv2dLayer::register(store, rng, &format!("{}.conv", name), cin, cout, 3, 1, 1),
            bn: BnLayer::register(store, &format!("{}.bn", name), cout),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<(NodeId, NodeId), TensorError> {
        let c = self.conv.forward(tape, store, x)?;
        let n = self.bn.forward(tape, store, c)?;
        let r = tape.relu(n);
        let p = tape.max_pool_2x2(r)?;
        Ok((p, r))
    }
}

/// Expanding stage: transposed-conv upsample, concat with the skip, then
/// conv k3 p1 + BatchNorm + ReLU.
#[derive(Clone, Copy, Debug)]
pub struct UpBlock {
    pub up: ConvT2dLayer,
    pub conv: Conv2dLayer,
    pub bn: BnLayer,
}

impl UpBlock {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut DetRng,
        name: &str,
        cin: usize,
        cskip: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        UpBlock {
            up: ConvT2dLayer::register(store, rng, &format!("{}.up", name), cin, cout, k, 2, pad_for(k)),
            conv: Conv2dLayer::register(
                store,
                rng,
                &format!("{}.conv", name),
                cout + cskip,
                cout,
                3,
                1,
                1,
            ),
            bn: BnLayer::register(store, &format!("{}.bn", name), cout),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
        skip: NodeId,
    ) -> Result<NodeId, TensorError> {
        let u = self.up.forward(tape, store, x)?;
        let cat = tape.concat_channels(u, skip)?;
        let c = self.conv.forward(tape, store, cat)?;
        let n = self.bn.forward(tape, store, c)?;
        Ok(tape.relu(n))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Act {
    None,
    Leaky,
    Relu,
}

/// One T-Net stage: activation first, then conv, optional batch norm, and a
/// light dropout. Padding follows the kernel: k4 and k3 with pad 1, k2 and
/// k1 unpadded.
#[derive(Clone, Copy, Debug)]
pub struct TnetBlock {
    pub conv: Conv2dLayer,
    pub bn: Option<BnLayer>,
    pub act: Act,
}

impl TnetBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut DetRng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        act: Act,
        bn: bool,
    ) -> Self {
        TnetBlock {
            conv: Conv2dLayer::register(store, rng, &format!("{}.conv", name), cin, cout, k, stride, pad_for(k)),
            bn: if bn { Some(BnLayer::register(store, &format!("{}.bn", name), cout)) } else { None },
            act,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let a = match self.act {
            Act::None => x,
            Act::Leaky => tape.leaky_relu(x),
            Act::Relu => tape.relu(x),
        };
        let c = self.conv.forward(tape, store, a)?;
        let n = match &self.bn {
            Some(bn) => bn.forward(tape, store, c)?,
            None => c,
        };
        Ok(tape.dropout(n, TNET_DROPOUT))
    }
}

/// Attention-net encoder stage: stride-2 conv, BatchNorm, leaky ReLU.
#[derive(Clone, Copy, Debug)]
pub struct EncBlock {
    pub conv: Conv2dLayer,
    pub bn: BnLayer,
}

impl EncBlock {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut DetRng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        EncBlock {
            conv: Conv2dLayer::register(store, rng, &format!("{}.conv", name), cin, cout, k, 2, pad_for(k)),
            bn: BnLayer::register(store, &format!("{}.bn", name), cout),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let c = self.conv.forward(tape, store, x)?;
        let n = self.bn.forward(tape, store, c)?;
        Ok(tape.leaky_relu(n))
    }
}

/// Attention-net decoder stage: stride-2 transposed conv, BatchNorm, ReLU.
#[derive(Clone, Copy, Debug)]
pub struct DecBlock {
    pub up: ConvT2dLayer,
    pub bn: BnLayer,
}

impl DecBlock {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut DetRng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        DecBlock {
            up: ConvT2dLayer::register(store, rng, &format!("{}.up", name), cin, cout, 4, 2, 1),
            bn: BnLayer::register(store, &format!("{}.bn", name), cout),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let u = self.up.forward(tape, store, x)?;
        let n = self.bn.forward(tape, store, u)?;
        Ok(tape.relu(n))
    }
}
