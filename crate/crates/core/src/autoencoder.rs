//! Parameter autoencoder: a strided 1-D conv encoder to an `L`-dim latent code and a
//! mirrored transposed-conv decoder, trained with latent noise on normalized vectors.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{self, AUTOENCODER_MAGIC};
use crate::lora::{ParameterVector, Provenance};
use crate::numerics::{
    cosine_lr, init, Array, ConvSpec, Graph, Optimizer, OptimizerState, ParamSet, Scalar, Var,
};
use crate::paramstore::ParamDataset;
use crate::rng::{rng, EpochSampler};
use crate::tasks::{evaluate, BaseModel, Split, Task};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentSource {
    Encoded,
    Diffused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub values: Vec<f32>,
    pub source: LatentSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AeConfig {
    pub latent_dim: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub xi_scale: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 256,
            channels: vec![16, 32, 64, 128],
            kernel: 9,
            xi_scale: 0.001,
            lr: 2e-4,
            steps: 3000,
            batch: 32,
        }
    }
}

impl AeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("autoencoder: {m}")));
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be a non-empty list of positive widths");
        }
        if self.kernel.is_multiple_of(2) {
            return bad("kernel must be odd");
        }
        if !(self.xi_scale >= 0.0) || !self.xi_scale.is_finite() {
            return bad("xi_scale must be finite and >= 0");
        }
        if !(self.lr > 0.0) || self.steps == 0 || self.batch == 0 {
            return bad("lr, steps and batch must be positive");
        }
        Ok(())
    }
}

/// Network shape. The input is right-padded with zeros from `k` to `k_pad`, a multiple
/// of `2^blocks`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AeArch {
    pub k: usize,
    pub k_pad: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub latent_dim: usize,
}

impl AeArch {
    pub fn new(k: usize, channels: &[usize], kernel: usize, latent_dim: usize) -> Result<Self> {
        if k == 0 || channels.is_empty() || kernel.is_multiple_of(2) || latent_dim == 0 {
            return Err(Error::InvalidArgument(
                "degenerate autoencoder shape".into(),
            ));
        }
        let m = 1usize << channels.len();
        Ok(Self {
            k,
            k_pad: k.div_ceil(m) * m,
            channels: channels.to_vec(),
            kernel,
            latent_dim,
        })
    }

    fn blocks(&self) -> usize {
        self.channels.len()
    }

    fn bottom_len(&self) -> usize {
        self.k_pad >> self.blocks()
    }

    fn bottom_width(&self) -> usize {
        self.channels[self.blocks() - 1] * self.bottom_len()
    }

    fn enc_fc(&self) -> usize {
        2 * self.blocks()
    }

    fn dec_fc(&self) -> usize {
        self.enc_fc() + 2
    }

    fn dec_block(&self, i: usize) -> usize {
        self.dec_fc() + 2 + 2 * i
    }

    fn out_conv(&self) -> usize {
        self.dec_block(self.blocks())
    }

    pub fn init_params<T: Scalar>(&self, rng: &mut ChaCha8Rng) -> ParamSet<T> {
        let kk = self.kernel;
        let mut p = ParamSet::new();
        let mut cin = 1;
        for (i, &c) in self.channels.iter().enumerate() {
            p.add(
                format!("enc{i}.w"),
                init::fan_in_uniform(rng, &[c, cin, kk], cin * kk),
            );
            p.add(format!("enc{i}.b"), Array::zeros(&[c]));
            cin = c;
        }
        let bw = self.bottom_width();
        let l = self.latent_dim;
        p.add("enc_fc.w", init::fan_in_uniform(rng, &[bw, l], bw));
        p.add("enc_fc.b", Array::zeros(&[l]));
        p.add("dec_fc.w", init::fan_in_uniform(rng, &[l, bw], l));
        p.add("dec_fc.b", Array::zeros(&[bw]));
        let ups = self.up_channels();
        for i in 0..self.blocks() {
            let (ci, co) = (ups[i], ups[i + 1]);
            p.add(
                format!("dec{i}.w"),
                init::fan_in_uniform(rng, &[ci, co, kk], ci * kk),
            );
            p.add(format!("dec{i}.b"), Array::zeros(&[co]));
        }
        let c0 = self.channels[0];
        p.add("out.w", init::fan_in_uniform(rng, &[1, c0, kk], c0 * kk));
        p.add("out.b", Array::zeros(&[1]));
        p
    }

    /// Channel widths through the decoder: reversed ladder, ending at the first width.
    fn up_channels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.channels.iter().rev().copied().collect();
        v.push(self.channels[0]);
        v
    }

    /// `(B, k)` → `(B, L)`.
    pub fn encode_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var> {
        let b = g.shape(x)[0];
        let mut h = x;
        if self.k_pad > self.k {
            let z = g.input(Array::zeros(&[b, self.k_pad - self.k]));
            h = g.concat(h, z)?;
        }
        h = g.reshape(h, &[b, 1, self.k_pad])?;
        let spec = ConvSpec::down2(self.kernel);
        for i in 0..self.blocks() {
            h = g.conv1d(h, p[2 * i], spec)?;
            h = g.add_channel_bias(h, p[2 * i + 1])?;
            h = g.gelu(h);
        }
        h = g.reshape(h, &[b, self.bottom_width()])?;
        h = g.matmul(h, p[self.enc_fc()])?;
        g.add_row_bias(h, p[self.enc_fc() + 1])
    }

    /// `(B, L)` → `(B, k)`.
    pub fn decode_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], z: Var) -> Result<Var> {
        let b = g.shape(z)[0];
        let mut h = g.matmul(z, p[self.dec_fc()])?;
        h = g.add_row_bias(h, p[self.dec_fc() + 1])?;
        h = g.gelu(h);
        let top = self.channels[self.blocks() - 1];
        h = g.reshape(h, &[b, top, self.bottom_len()])?;
        let spec = ConvSpec::down2(self.kernel);
        for i in 0..self.blocks() {
            h = g.conv1d_transpose(h, p[self.dec_block(i)], spec)?;
            h = g.add_channel_bias(h, p[self.dec_block(i) + 1])?;
            h = g.gelu(h);
        }
        h = g.conv1d(h, p[self.out_conv()], ConvSpec::same(self.kernel))?;
        h = g.add_channel_bias(h, p[self.out_conv() + 1])?;
        h = g.reshape(h, &[b, self.k_pad])?;
        g.narrow(h, 0, self.k)
    }

    /// Squared reconstruction error summed over coordinates and averaged over the batch.
    /// `noise`, if given, is added to the latent before decoding.
    pub fn loss_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Array<T>,
        noise: Option<Array<T>>,
    ) -> Result<Var> {
        let x = g.input(x);
        let mut z = self.encode_graph(g, p, x)?;
        if let Some(n) = noise {
            let n = g.input(n);
            z = g.add(z, n)?;
        }
        let y = self.decode_graph(g, p, z)?;
        let mse = g.mse(y, x)?;
        Ok(g.scale(mse, self.k as f64))
    }
}

/// Trained autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AeModel {
    pub arch: AeArch,
    pub xi_scale: f64,
    pub params: ParamSet<f32>,
}

fn batch_array(rows: &[&[f32]], width: usize) -> Result<Array<f32>> {
    let mut data = Vec::with_capacity(rows.len() * width);
    for r in rows {
        if r.len() != width {
            return Err(Error::Layout(format!(
                "expected length {width}, got {}",
                r.len()
            )));
        }
        data.extend_from_slice(r);
    }
    Array::from_vec(&[rows.len(), width], data)
}

impl AeModel {
    pub fn new(arch: AeArch, xi_scale: f64, seed: u64) -> Self {
        let params = arch.init_params(&mut rng(seed));
        Self {
            arch,
            xi_scale,
            params,
        }
    }

    pub fn k(&self) -> usize {
        self.arch.k
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn encode_batch(&self, rows: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        if rows.is_empty() {
            return Ok(vec![]);
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.input(batch_array(rows, self.k())?);
        let z = self.arch.encode_graph(&mut g, &p, x)?;
        Ok(g.value(z)
            .data()
            .chunks(self.latent_dim())
            .map(|c| c.to_vec())
            .collect())
    }

    pub fn decode_batch(&self, codes: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        if codes.is_empty() {
            return Ok(vec![]);
        }
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let z = g.input(batch_array(codes, self.latent_dim())?);
        let y = self.arch.decode_graph(&mut g, &p, z)?;
        let out: Vec<Vec<f32>> = g
            .value(y)
            .data()
            .chunks(self.k())
            .map(|c| c.to_vec())
            .collect();
        if out.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder output".into()));
        }
        Ok(out)
    }

    pub fn encode(&self, w: &[f32]) -> Result<LatentCode> {
        let values = self.encode_batch(&[w])?.pop().expect("one row");
        Ok(LatentCode {
            values,
            source: LatentSource::Encoded,
        })
    }

    /// Inference-mode decode: no latent noise.
    pub fn decode(&self, z: &LatentCode) -> Result<Vec<f32>> {
        Ok(self.decode_batch(&[&z.values])?.pop().expect("one row"))
    }

    /// Training-mode decode: adds `xi_scale · N(0, I)` drawn from `rng` to the code first.
    pub fn decode_training(&self, z: &LatentCode, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
        let noisy: Vec<f32> = z
            .values
            .iter()
            .zip(init::standard_normal(rng, z.values.len()))
            .map(|(v, e)| v + (self.xi_scale as f32) * e)
            .collect();
        Ok(self.decode_batch(&[&noisy])?.pop().expect("one row"))
    }

    pub fn reconstruct_batch(&self, rows: &[&[f32]]) -> Result<Vec<Vec<f32>>> {
        let z = self.encode_batch(rows)?;
        let zr: Vec<&[f32]> = z.iter().map(|v| v.as_slice()).collect();
        self.decode_batch(&zr)
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let header = AeHeader {
            arch: self.arch.clone(),
            xi_scale: self.xi_scale,
            names: self.params.names().to_vec(),
            shapes: self.params.shapes(),
            config_hash: config_hash.to_string(),
        };
        container::write(path, AUTOENCODER_MAGIC, &header, &self.params.flat())
    }

    /// Loads a model and the config hash it was trained under.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (h, payload): (AeHeader, Vec<f32>) = container::read(path, AUTOENCODER_MAGIC)?;
        let mut params = h.arch.init_params::<f32>(&mut rng(0));
        if params.names() != h.names.as_slice() || params.shapes() != h.shapes {
            return Err(Error::Header(
                "parameter list does not match the stored architecture".into(),
            ));
        }
        params
            .load_flat(&payload)
            .map_err(|_| Error::Truncated("autoencoder payload length".into()))?;
        Ok((
            Self {
                arch: h.arch,
                xi_scale: h.xi_scale,
                params,
            },
            h.config_hash,
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct AeHeader {
    arch: AeArch,
    xi_scale: f64,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    config_hash: String,
}

/// Trains on every normalized vector of `ds`. The per-epoch mean loss is appended to
/// `curve` as training proceeds, so it survives a divergence error.
pub fn train_ae(
    ds: &ParamDataset,
    cfg: &AeConfig,
    seed: u64,
    curve: &mut Vec<f64>,
) -> Result<AeModel> {
    cfg.validate()?;
    let rows: Vec<&[f32]> = ds.all_normalized().map(|(_, v)| v).collect();
    if rows.is_empty() {
        return Err(Error::InvalidArgument(
            "autoencoder dataset is empty".into(),
        ));
    }
    let arch = AeArch::new(ds.k(), &cfg.channels, cfg.kernel, cfg.latent_dim)?;
    let mut r = rng(seed);
    let mut model = AeModel {
        params: arch.init_params(&mut r),
        arch,
        xi_scale: cfg.xi_scale,
    };
    let mut opt = Optimizer::new(OptimizerState::adam(cfg.lr), &model.params);
    let batch = cfg.batch.min(rows.len());
    let mut sampler = EpochSampler::new(rows.len());
    let (mut epoch_sum, mut epoch_n) = (0.0, 0usize);
    for step in 0..cfg.steps {
        let (idx, wrapped) = sampler.next(batch, &mut r);
        if wrapped && epoch_n > 0 {
            curve.push(epoch_sum / epoch_n as f64);
            (epoch_sum, epoch_n) = (0.0, 0);
        }
        let x = batch_array(&idx.iter().map(|&i| rows[i]).collect::<Vec<_>>(), model.k())?;
        let noise = (cfg.xi_scale > 0.0).then(|| {
            let n = batch * cfg.latent_dim;
            let v = init::standard_normal(&mut r, n)
                .into_iter()
                .map(|e| e * cfg.xi_scale as f32)
                .collect();
            Array::from_vec(&[batch, cfg.latent_dim], v).expect("noise shape")
        });
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let l = model.arch.loss_graph(&mut g, &p, x, noise)?;
        let lv = g.value(l).item() as f64;
        if !lv.is_finite() {
            if epoch_n > 0 {
                curve.push(epoch_sum / epoch_n as f64);
            }
            return Err(Error::Diverged {
                step,
                what: "autoencoder loss".into(),
            });
        }
        epoch_sum += lv;
        epoch_n += 1;
        let grads = g.backward(l)?;
        let gs = model.params.collect_grads(&grads, &p);
        opt.step_with_lr(&mut model.params, &gs, cosine_lr(cfg.lr, step, cfg.steps))?;
    }
    if epoch_n > 0 {
        curve.push(epoch_sum / epoch_n as f64);
    }
    Ok(model)
}

/// Reconstruction quality of one task's checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub task: String,
    /// Mean over checkpoints of |metric(reconstructed) - metric(source)| on the val split.
    pub mean_abs_delta: f64,
    pub max_abs_delta: f64,
    /// Mean squared error per coordinate in normalized space.
    pub normalized_mse: f64,
}

/// Encodes, decodes, denormalizes and evaluates every checkpoint against its source.
/// `tasks[i]` must be the task of `ds.sets[i]`.
pub fn reconstruction_fidelity(
    ae: &AeModel,
    ds: &ParamDataset,
    tasks: &[Task],
    base: &BaseModel,
) -> Result<Vec<FidelityRow>> {
    if tasks.len() != ds.num_tasks() {
        return Err(Error::InvalidArgument(format!(
            "{} tasks for {} checkpoint sets",
            tasks.len(),
            ds.num_tasks()
        )));
    }
    let mut out = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.iter().enumerate() {
        let norm = ds.normalized(t)?;
        let rows: Vec<&[f32]> = norm.iter().map(|v| v.as_slice()).collect();
        let rec = ae.reconstruct_batch(&rows)?;
        let (mut sum, mut max, mut se) = (0.0f64, 0.0f64, 0.0f64);
        for ((src, r), n) in ds.sets[t].vectors.iter().zip(&rec).zip(norm) {
            se += r
                .iter()
                .zip(n)
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / n.len() as f64;
            let raw = ds.denormalize(t, r)?;
            let pv = ParameterVector::new(raw, ds.layout.clone(), Provenance::Reconstructed)?;
            let d = (evaluate(base, &pv, task, Split::Val)?
                - evaluate(base, src, task, Split::Val)?)
            .abs();
            sum += d;
            max = max.max(d);
        }
        let n = rec.len().max(1) as f64;
        out.push(FidelityRow {
            task: task.spec.name.clone(),
            mean_abs_delta: sum / n,
            max_abs_delta: max,
            normalized_mse: se / n,
        });
    }
    Ok(out)
}

/// Mean squared per-coordinate change of the decoder output caused by the training-time
/// latent noise alone, averaged over the encoded dataset.
pub fn latent_noise_floor(ae: &AeModel, ds: &ParamDataset, seed: u64) -> Result<f64> {
    let rows: Vec<&[f32]> = ds.all_normalized().map(|(_, v)| v).collect();
    let z = ae.encode_batch(&rows)?;
    let mut r = rng(seed);
    let noisy: Vec<Vec<f32>> = z
        .iter()
        .map(|c| {
            c.iter()
                .map(|v| v + ae.xi_scale as f32 * r.sample::<f32, _>(rand_distr::StandardNormal))
                .collect()
        })
        .collect();
    let clean = ae.decode_batch(&z.iter().map(|v| v.as_slice()).collect::<Vec<_>>())?;
    let pert = ae.decode_batch(&noisy.iter().map(|v| v.as_slice()).collect::<Vec<_>>())?;
    let k = ae.k() as f64;
    let total: f64 = clean
        .iter()
        .zip(&pert)
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(x, y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                / k
        })
        .sum();
    Ok(total / clean.len().max(1) as f64)
}
