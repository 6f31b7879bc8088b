//! Linear autoencoder that compresses teacher features into the agent's
//! latent space, and the two student-side channel adapters.

use crate::error::{Error, Result};
use crate::nn::{orthogonal, prefixed, Linear, Module};
use crate::numerics::{nchw_to_rows, AdamW, AdamWConfig, Bind, Graph, NdArray, Param, Rng, Var};
use crate::vpsde::{FeatureBatch, Origin};

/// Two bias-free 1×1 projections `C_tea → d → C_tea`.
#[derive(Debug, Clone)]
pub struct LinearAutoencoder {
    pub encoder: Linear,
    pub decoder: Linear,
}

impl LinearAutoencoder {
    /// Orthogonal encoder; the decoder starts as its transpose.
    pub fn new(channels: usize, latent: usize, rng: &mut Rng) -> Result<Self> {
        if latent == 0 || latent > channels {
            return Err(Error::invalid(format!(
                "latent dimension must lie in 1..={channels}, got {latent}"
            )));
        }
        let w = orthogonal(channels, latent, rng);
        Ok(LinearAutoencoder {
            decoder: Linear::from_weight(w.transpose2(), None),
            encoder: Linear::from_weight(w, None),
        })
    }

    /// Encoder weight `[C_tea, d]`, decoder weight `[d, C_tea]`.
    pub fn from_weights(encoder: NdArray, decoder: NdArray) -> Result<Self> {
        let (es, ds) = (encoder.shape(), decoder.shape());
        if es.len() != 2 || ds.len() != 2 || es[0] != ds[1] || es[1] != ds[0] || es[1] > es[0] {
            return Err(Error::invalid(format!(
                "incompatible autoencoder weights {es:?} / {ds:?}"
            )));
        }
        Ok(LinearAutoencoder {
            encoder: Linear::from_weight(encoder, None),
            decoder: Linear::from_weight(decoder, None),
        })
    }

    pub fn channels(&self) -> usize {
        self.encoder.inputs()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.outputs()
    }

    pub fn encode_rows(&self, g: &mut Graph, x: Var, bind: Bind) -> Var {
        self.encoder.forward(g, x, bind)
    }

    pub fn decode_rows(&self, g: &mut Graph, z: Var, bind: Bind) -> Var {
        self.decoder.forward(g, z, bind)
    }

    /// Teacher features to latent teacher features.
    pub fn encode(&self, f_tea: &FeatureBatch) -> Result<FeatureBatch> {
        if f_tea.origin() != Origin::Teacher {
            return Err(Error::invalid(format!(
                "encode expects teacher features, got {:?}",
                f_tea.origin()
            )));
        }
        self.apply(f_tea, self.channels(), Origin::LatentTeacher, |s, g, x| {
            s.encode_rows(g, x, Bind::Frozen)
        })
    }

    pub fn decode(&self, latent: &FeatureBatch) -> Result<FeatureBatch> {
        if latent.origin() != Origin::LatentTeacher {
            return Err(Error::invalid(format!(
                "decode expects latent teacher features, got {:?}",
                latent.origin()
            )));
        }
        self.apply(latent, self.latent_dim(), Origin::ReconstructedTeacher, |s, g, x| {
            s.decode_rows(g, x, Bind::Frozen)
        })
    }

    fn apply(
        &self,
        batch: &FeatureBatch,
        expect: usize,
        origin: Origin,
        f: impl Fn(&Self, &mut Graph, Var) -> Var,
    ) -> Result<FeatureBatch> {
        if batch.channels() != expect {
            return Err(Error::invalid(format!(
                "expected {expect} channels, got {}",
                batch.channels()
            )));
        }
        let (h, w) = batch.spatial();
        let mut g = Graph::new();
        let x = g.constant(batch.rows());
        let y = f(self, &mut g, x);
        FeatureBatch::from_rows(g.value(y), batch.batch(), h, w, origin)
    }
}

impl Module for LinearAutoencoder {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = prefixed("encoder", self.encoder.params());
        out.extend(prefixed("decoder", self.decoder.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out
    }
}

/// Sum of squared differences between teacher features and their
/// reconstruction.
pub fn rec_loss(f_tea: &NdArray, f_rec: &NdArray) -> Result<f64> {
    if f_tea.shape() != f_rec.shape() {
        return Err(Error::invalid(format!(
            "reconstruction shape {:?} vs teacher shape {:?}",
            f_rec.shape(),
            f_tea.shape()
        )));
    }
    Ok(f_tea.data().iter().zip(f_rec.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Graph form of [`rec_loss`].
pub fn rec_loss_node(g: &mut Graph, f_tea: Var, f_rec: Var) -> Result<Var> {
    if g.shape(f_tea) != g.shape(f_rec) {
        return Err(Error::invalid("reconstruction and teacher shapes differ"));
    }
    let d = g.sub(f_rec, f_tea);
    Ok(g.sum_sq(d))
}

/// Student-side 1×1 projections: `pre` maps student channels into the
/// latent space, `post` maps denoised latents to the head's channels.
#[derive(Debug, Clone)]
pub struct StudentAdapters {
    pub pre: Linear,
    pub post: Linear,
}

impl StudentAdapters {
    /// When `head_channels == student_channels` the pair starts as an
    /// isometry and its transpose, so `post ∘ pre` is the identity.
    pub fn new(
        student_channels: usize,
        latent: usize,
        head_channels: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if student_channels == 0 || latent == 0 || head_channels == 0 {
            return Err(Error::invalid("adapter widths must be positive"));
        }
        let pre_w = orthogonal(student_channels, latent, rng);
        let post_w = if head_channels == student_channels && latent >= student_channels {
            pre_w.transpose2()
        } else {
            orthogonal(latent, head_channels, rng)
        };
        Ok(StudentAdapters {
            pre: Linear::from_weight(pre_w, Some(NdArray::zeros(&[latent]))),
            post: Linear::from_weight(post_w, Some(NdArray::zeros(&[head_channels]))),
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.pre.outputs()
    }

    pub fn pre_rows(&self, g: &mut Graph, x: Var, bind: Bind) -> Result<Var> {
        if g.shape(x)[1] != self.pre.inputs() {
            return Err(Error::invalid(format!(
                "pre-adapter expects {} channels, got {}",
                self.pre.inputs(),
                g.shape(x)[1]
            )));
        }
        Ok(self.pre.forward(g, x, bind))
    }

    pub fn post_rows(&self, g: &mut Graph, z: Var, bind: Bind) -> Result<Var> {
        if g.shape(z)[1] != self.post.inputs() {
            return Err(Error::invalid(format!(
                "post-adapter expects {} channels, got {}",
                self.post.inputs(),
                g.shape(z)[1]
            )));
        }
        Ok(self.post.forward(g, z, bind))
    }
}

impl Module for StudentAdapters {
    fn params(&self) -> Vec<(String, &Param)> {
        let mut out = prefixed("pre", self.pre.params());
        out.extend(prefixed("post", self.post.params()));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.pre.params_mut();
        out.extend(self.post.params_mut());
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Fits an autoencoder to feature rows `[M, C]` by minimizing the summed
/// reconstruction loss. Returns the model and the final mean squared error
/// per element over all rows.
pub fn train_autoencoder(
    rows: &NdArray,
    latent: usize,
    cfg: &AeTrainConfig,
) -> Result<(LinearAutoencoder, f64)> {
    if rows.shape().len() != 2 || rows.shape()[0] == 0 {
        return Err(Error::invalid("autoencoder training needs a non-empty row matrix"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let (m, c) = (rows.shape()[0], rows.shape()[1]);
    let mut rng = Rng::with_stream(cfg.seed, 0xae);
    let mut ae = LinearAutoencoder::new(c, latent, &mut rng)?;
    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr, 0.0));
    let mut order: Vec<usize> = (0..m).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * c);
            for &i in chunk {
                data.extend_from_slice(rows.row(i));
            }
            let batch = NdArray::from_vec(&[chunk.len(), c], data)?;
            let mut g = Graph::new();
            let x = g.constant(batch);
            let z = ae.encode_rows(&mut g, x, Bind::Trainable);
            let y = ae.decode_rows(&mut g, z, Bind::Trainable);
            let loss = rec_loss_node(&mut g, x, y)?;
            g.backward(loss)?.accumulate_into(ae.params_mut());
            opt.step(&mut ae.params_mut())?;
        }
    }
    let mse = reconstruction_mse(&ae, rows);
    Ok((ae, mse))
}

/// Mean squared reconstruction error per element of feature rows.
pub fn reconstruction_mse(ae: &LinearAutoencoder, rows: &NdArray) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(rows.clone());
    let z = ae.encode_rows(&mut g, x, Bind::Frozen);
    let y = ae.decode_rows(&mut g, z, Bind::Frozen);
    let sse: f64 = rows
        .data()
        .iter()
        .zip(g.value(y).data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    sse / rows.len() as f64
}

/// Rows of a feature batch, for callers holding `B×C×H×W` arrays.
pub fn batch_rows(x: &NdArray) -> NdArray {
    nchw_to_rows(x)
}
