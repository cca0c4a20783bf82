//! Multi-branch variational autoencoder with a classification head.
//!
//! Layer plan (all hidden layers ReLU):
//!
//! ```text
//! encoder:    per-omics branch affine (optionally one affine per block)
//!             -> concat -> trunk affine -> { mu head, logvar head }
//! latent:     z = mu + exp(logvar / 2) * eps      [; subset one-hot]
//! decoder:    trunk affine -> per-omics branch affine -> full-width output
//! downstream: hidden affine -> class logits
//! ```
//!
//! The encoder is shared by every feature subset. Its branch inputs are the
//! padded subset widths from the [`FeaturePartition`]; the decoder always
//! reconstructs every feature of every omics type.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::BlockMap;
use crate::error::{Error, Result};
use crate::losses::ReconKind;
use crate::subsetting::{make_partition, subset_identity, FeaturePartition, SubsetView};
use crate::tensor::{affine_backward_batch, affine_batch, Activation, Matrix, Param, ParamGroup, ParamId, ParamStore};

/// Integer divisors applied to the encoder, decoder and downstream widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reduction {
    pub encoder: usize,
    pub decoder: usize,
    pub downstream: usize,
}

impl Default for Reduction {
    fn default() -> Self {
        Self {
            encoder: 1,
            decoder: 1,
            downstream: 1,
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}_{}_{}", self.encoder, self.decoder, self.downstream)
    }
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    /// Parses `E_D_S`, e.g. `8_4_2`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(['_', ','])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Validation(format!("bad reduction factors `{s}`, expected E_D_S")))?;
        match parts[..] {
            [encoder, decoder, downstream] => Ok(Self {
                encoder,
                decoder,
                downstream,
            }),
            _ => Err(Error::Validation(format!("bad reduction factors `{s}`, expected E_D_S"))),
        }
    }
}

/// What a subset's reconstruction is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    /// Every feature of every omics type.
    #[default]
    Full,
    /// Only the features belonging to the subset that was encoded.
    Subset,
}

/// First-layer block separation for one omics branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSeparation {
    pub omics: usize,
    pub map: BlockMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub omics_dims: Vec<usize>,
    pub subset_count: usize,
    pub shuffle_features: bool,
    pub latent_dim: usize,
    pub branch_hidden: usize,
    pub trunk_hidden: usize,
    pub downstream_hidden: usize,
    pub class_count: usize,
    pub reduction: Reduction,
    pub recon_loss: ReconKind,
    pub recon_target: ReconTarget,
    pub use_subset_identity: bool,
    pub block_separation: Option<BlockSeparation>,
}

impl ModelConfig {
    pub fn new(omics_dims: Vec<usize>, class_count: usize) -> Self {
        Self {
            omics_dims,
            subset_count: 1,
            shuffle_features: false,
            latent_dim: 128,
            branch_hidden: 512,
            trunk_hidden: 256,
            downstream_hidden: 128,
            class_count,
            reduction: Reduction::default(),
            recon_loss: ReconKind::Mse,
            recon_target: ReconTarget::Full,
            use_subset_identity: false,
            block_separation: None,
        }
    }

    pub fn widths(&self) -> Widths {
        let div = |w: usize, f: usize| (w / f.max(1)).max(1);
        Widths {
            enc_branch: div(self.branch_hidden, self.reduction.encoder),
            enc_trunk: div(self.trunk_hidden, self.reduction.encoder),
            dec_trunk: div(self.trunk_hidden, self.reduction.decoder),
            dec_branch: div(self.branch_hidden, self.reduction.decoder),
            downstream: div(self.downstream_hidden, self.reduction.downstream),
        }
    }

    /// Input width of the decoder and downstream heads.
    pub fn head_input_dim(&self) -> usize {
        self.latent_dim + if self.use_subset_identity { self.subset_count } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.omics_dims.is_empty() || self.omics_dims.contains(&0) {
            return bad("omics_dims must be non-empty with positive entries".into());
        }
        if self.subset_count == 0 {
            return bad("subset_count must be at least 1".into());
        }
        if let Some((k, d)) = self.omics_dims.iter().enumerate().find(|(_, &d)| d < self.subset_count) {
            return bad(format!("omics type {k} has {d} features, fewer than subset_count {}", self.subset_count));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        if self.branch_hidden == 0 || self.trunk_hidden == 0 || self.downstream_hidden == 0 {
            return bad("hidden widths must be positive".into());
        }
        let r = self.reduction;
        if r.encoder == 0 || r.decoder == 0 || r.downstream == 0 {
            return bad("reduction factors must be positive".into());
        }
        if self.class_count < 2 {
            return bad(format!("class_count must be at least 2, got {}", self.class_count));
        }
        if self.use_subset_identity && self.subset_count < 2 {
            return bad("subset identity requires subset_count >= 2".into());
        }
        if let Some(bs) = &self.block_separation {
            if bs.omics >= self.omics_dims.len() {
                return bad(format!("block separation targets omics {} of {}", bs.omics, self.omics_dims.len()));
            }
            if bs.map.feature_count() != self.omics_dims[bs.omics] {
                return bad(format!(
                    "block map covers {} features, omics {} has {}",
                    bs.map.feature_count(),
                    bs.omics,
                    self.omics_dims[bs.omics]
                ));
            }
            if self.subset_count != 1 {
                return bad("block separation is only supported with subset_count = 1".into());
            }
            if bs.map.block_count() > self.widths().enc_branch {
                return bad(format!(
                    "{} blocks exceed the encoder branch width {}",
                    bs.map.block_count(),
                    self.widths().enc_branch
                ));
            }
        }
        Ok(())
    }
}

/// Layer widths after reduction factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Widths {
    pub enc_branch: usize,
    pub enc_trunk: usize,
    pub dec_trunk: usize,
    pub dec_branch: usize,
    pub downstream: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Branch {
    Dense(ParamId),
    /// One affine per block: (layer, input columns of that block).
    Blocks(Vec<(ParamId, Vec<usize>)>),
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    enc_branch: Vec<Branch>,
    enc_trunk: ParamId,
    enc_mu: ParamId,
    enc_logvar: ParamId,
    dec_trunk: ParamId,
    dec_branch: Vec<ParamId>,
    dec_out: Vec<ParamId>,
    ds_hidden: ParamId,
    ds_logits: ParamId,
}

/// Per-sample encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    inputs: Vec<Matrix>,
    branch_out: Vec<Matrix>,
    concat: Matrix,
    trunk_out: Matrix,
    pub mu: Matrix,
    pub logvar: Matrix,
    pub sigma: Matrix,
    pub eps: Matrix,
    pub z: Matrix,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    input: Matrix,
    trunk_out: Matrix,
    branch_out: Vec<Matrix>,
    /// Reconstructions at full omics widths (post output activation).
    pub outputs: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct DownstreamCache {
    input: Matrix,
    hidden: Matrix,
    pub logits: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    config: ModelConfig,
    params: ParamStore,
    partition: FeaturePartition,
    layers: Layers,
}

fn glorot(rng: &mut impl Rng, fan_out: usize, fan_in: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect();
    Matrix::new(fan_out, fan_in, data).expect("shape by construction")
}

/// Splits `total` into `parts` near-equal widths, remainder first.
fn split_width(total: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

/// Creates the parameter layout for `config`. With an rng the weights are
/// Glorot-initialized; without one they are zero (to be overwritten).
fn allocate(config: &ModelConfig, partition: &FeaturePartition, mut rng: Option<&mut ChaCha8Rng>) -> Result<(ParamStore, Layers)> {
    let w = config.widths();
    let mut store = ParamStore::new();
    let mut add = |store: &mut ParamStore, name: String, group, fan_out: usize, fan_in: usize| -> Result<ParamId> {
        let weight = match rng.as_deref_mut() {
            Some(r) => glorot(r, fan_out, fan_in),
            None => Matrix::zeros(fan_out, fan_in),
        };
        store.insert(Param::new(name, group, weight, vec![0.0; fan_out]))
    };
    use ParamGroup::*;

    let mut enc_branch = Vec::with_capacity(config.omics_dims.len());
    for (k, &input) in partition.padded_dims().iter().enumerate() {
        match &config.block_separation {
            Some(bs) if bs.omics == k => {
                let members = bs.map.block_members();
                let widths = split_width(w.enc_branch, members.len());
                let mut blocks = Vec::with_capacity(members.len());
                for (b, (cols, width)) in members.into_iter().zip(widths).enumerate() {
                    let id = add(&mut store, format!("enc.branch.{k}.block.{b}"), Encoder, width, cols.len())?;
                    blocks.push((id, cols));
                }
                enc_branch.push(Branch::Blocks(blocks));
            }
            _ => enc_branch.push(Branch::Dense(add(&mut store, format!("enc.branch.{k}"), Encoder, w.enc_branch, input)?)),
        }
    }
    let concat = w.enc_branch * config.omics_dims.len();
    let enc_trunk = add(&mut store, "enc.trunk".into(), Encoder, w.enc_trunk, concat)?;
    let enc_mu = add(&mut store, "enc.mu".into(), Encoder, config.latent_dim, w.enc_trunk)?;
    let enc_logvar = add(&mut store, "enc.logvar".into(), Encoder, config.latent_dim, w.enc_trunk)?;

    let head_in = config.head_input_dim();
    let dec_trunk = add(&mut store, "dec.trunk".into(), Decoder, w.dec_trunk, head_in)?;
    let mut dec_branch = Vec::new();
    let mut dec_out = Vec::new();
    for (k, &d) in config.omics_dims.iter().enumerate() {
        dec_branch.push(add(&mut store, format!("dec.branch.{k}"), Decoder, w.dec_branch, w.dec_trunk)?);
        dec_out.push(add(&mut store, format!("dec.out.{k}"), Decoder, d, w.dec_branch)?);
    }
    let ds_hidden = add(&mut store, "ds.hidden".into(), Downstream, w.downstream, head_in)?;
    let ds_logits = add(&mut store, "ds.logits".into(), Downstream, config.class_count, w.downstream)?;
    Ok((
        store,
        Layers {
            enc_branch,
            enc_trunk,
            enc_mu,
            enc_logvar,
            dec_trunk,
            dec_branch,
            dec_out,
            ds_hidden,
            ds_logits,
        },
    ))
}

/// `[z ; identity]`, rejecting identities that are not one-hot.
pub fn concat_identity(z: &[f64], identity: &[f64]) -> Result<Vec<f64>> {
    let ones = identity.iter().filter(|&&v| v == 1.0).count();
    let zeros = identity.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != identity.len() {
        return Err(Error::Validation(format!("subset identity {identity:?} is not one-hot")));
    }
    Ok(z.iter().chain(identity).copied().collect())
}

impl VaeModel {
    /// Validates the config, partitions features, and initializes weights
    /// deterministically from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let partition = make_partition(&config.omics_dims, config.subset_count, seed, config.shuffle_features)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
        let (params, layers) = allocate(&config, &partition, Some(&mut rng))?;
        Ok(Self {
            config,
            params,
            partition,
            layers,
        })
    }

    /// Reassembles a model from persisted parts, checking every shape.
    pub fn from_parts(config: ModelConfig, partition: FeaturePartition, params: ParamStore) -> Result<Self> {
        config.validate()?;
        if partition.omics_dims() != config.omics_dims.as_slice() || partition.subset_count() != config.subset_count {
            return Err(Error::Validation("partition does not match model config".into()));
        }
        let (layout, layers) = allocate(&config, &partition, None)?;
        if layout.len() != params.len() {
            return Err(Error::dim("model parameters", layout.len(), params.len()));
        }
        for (a, b) in layout.iter().zip(params.iter()) {
            if a.name != b.name || a.group != b.group || a.weight.shape() != b.weight.shape() || a.bias.len() != b.bias.len() {
                return Err(Error::Validation(format!("parameter `{}` does not match layout entry `{}`", b.name, a.name)));
            }
        }
        Ok(Self {
            config,
            params,
            partition,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn partition(&self) -> &FeaturePartition {
        &self.partition
    }

    pub fn subset_count(&self) -> usize {
        self.config.subset_count
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn head_input_dim(&self) -> usize {
        self.config.head_input_dim()
    }

    /// Encoder input width per omics type.
    pub fn encoder_input_dims(&self) -> Vec<usize> {
        self.partition.padded_dims().to_vec()
    }

    fn dense(&self, id: ParamId, x: &Matrix, act: Activation) -> Result<Matrix> {
        let p = self.params.get(id);
        let mut out = affine_batch(x, &p.weight, &p.bias)?;
        act.apply_in_place(&mut out);
        Ok(out)
    }

    /// Batched encoder pass. `inputs` are padded subset views (sample-major),
    /// `eps` is the reparameterization noise (batch x latent_dim).
    pub fn encode_batch(&self, inputs: Vec<Matrix>, eps: &Matrix) -> Result<EncoderCache> {
        let expected = self.partition.padded_dims();
        if inputs.len() != expected.len() {
            return Err(Error::dim("encoder input (omics count)", expected.len(), inputs.len()));
        }
        let rows = inputs[0].rows();
        for (k, x) in inputs.iter().enumerate() {
            if x.cols() != expected[k] || x.rows() != rows {
                return Err(Error::dim(format!("encoder input (omics {k})"), expected[k], x.cols()));
            }
        }
        if eps.shape() != (rows, self.config.latent_dim) {
            return Err(Error::dim("encoder noise", format!("{rows}x{}", self.config.latent_dim), format!("{:?}", eps.shape())));
        }
        let mut branch_out = Vec::with_capacity(inputs.len());
        for (x, branch) in inputs.iter().zip(&self.layers.enc_branch) {
            let h = match branch {
                Branch::Dense(id) => self.dense(*id, x, Activation::Relu)?,
                Branch::Blocks(blocks) => {
                    let outs = blocks
                        .iter()
                        .map(|(id, cols)| self.dense(*id, &x.select_columns_padded(cols, cols.len()), Activation::Relu))
                        .collect::<Result<Vec<_>>>()?;
                    Matrix::hcat(&outs.iter().collect::<Vec<_>>())?
                }
            };
            branch_out.push(h);
        }
        let concat = Matrix::hcat(&branch_out.iter().collect::<Vec<_>>())?;
        let trunk_out = self.dense(self.layers.enc_trunk, &concat, Activation::Relu)?;
        let mu = self.dense(self.layers.enc_mu, &trunk_out, Activation::Identity)?;
        let logvar = self.dense(self.layers.enc_logvar, &trunk_out, Activation::Identity)?;
        let mut sigma = logvar.clone();
        sigma.data_mut().iter_mut().for_each(|v| *v = (0.5 * *v).exp());
        let mut z = mu.clone();
        for ((zv, s), e) in z.data_mut().iter_mut().zip(sigma.data()).zip(eps.data()) {
            *zv += s * e;
        }
        Ok(EncoderCache {
            inputs,
            branch_out,
            concat,
            trunk_out,
            mu,
            logvar,
            sigma,
            eps: eps.clone(),
            z,
        })
    }

    fn dense_backward(&mut self, id: ParamId, grad: &Matrix, x: &Matrix, want_x: bool) -> Result<Option<Matrix>> {
        let p = self.params.get_mut(id);
        affine_backward_batch(grad, x, &p.weight, &mut p.grad_weight, &mut p.grad_bias, want_x)
    }

    /// Accumulates encoder parameter gradients given the gradients of the
    /// loss with respect to the mu and logvar heads.
    pub fn encoder_backward(&mut self, cache: &EncoderCache, grad_mu: &Matrix, grad_logvar: &Matrix) -> Result<()> {
        let (mu_id, lv_id, trunk_id) = (self.layers.enc_mu, self.layers.enc_logvar, self.layers.enc_trunk);
        let mut g_trunk = self.dense_backward(mu_id, grad_mu, &cache.trunk_out, true)?.expect("requested");
        let g2 = self.dense_backward(lv_id, grad_logvar, &cache.trunk_out, true)?.expect("requested");
        g_trunk.add_assign(&g2)?;
        Activation::Relu.backward_in_place(&mut g_trunk, &cache.trunk_out);
        let g_concat = self.dense_backward(trunk_id, &g_trunk, &cache.concat, true)?.expect("requested");
        let widths: Vec<usize> = cache.branch_out.iter().map(Matrix::cols).collect();
        let mut g_branches = g_concat.hsplit(&widths)?;
        let branches = self.layers.enc_branch.clone();
        for (k, branch) in branches.iter().enumerate() {
            let g = &mut g_branches[k];
            Activation::Relu.backward_in_place(g, &cache.branch_out[k]);
            match branch {
                Branch::Dense(id) => {
                    self.dense_backward(*id, g, &cache.inputs[k], false)?;
                }
                Branch::Blocks(blocks) => {
                    let bw: Vec<usize> = blocks.iter().map(|(id, _)| self.params.get(*id).weight.rows()).collect();
                    let parts = g.hsplit(&bw)?;
                    for ((id, cols), gb) in blocks.iter().zip(&parts) {
                        let xb = cache.inputs[k].select_columns_padded(cols, cols.len());
                        self.dense_backward(*id, gb, &xb, false)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn output_activation(&self) -> Activation {
        match self.config.recon_loss {
            ReconKind::Bce => Activation::Sigmoid,
            _ => Activation::Identity,
        }
    }

    fn check_head_input(&self, latent: &Matrix, what: &str) -> Result<()> {
        if latent.cols() != self.head_input_dim() {
            return Err(Error::dim(format!("{what} input"), self.head_input_dim(), latent.cols()));
        }
        Ok(())
    }

    pub fn decode_batch(&self, latent: &Matrix) -> Result<DecoderCache> {
        self.check_head_input(latent, "decoder")?;
        let trunk_out = self.dense(self.layers.dec_trunk, latent, Activation::Relu)?;
        let mut branch_out = Vec::with_capacity(self.layers.dec_branch.len());
        let mut outputs = Vec::with_capacity(self.layers.dec_out.len());
        for (&b, &o) in self.layers.dec_branch.iter().zip(&self.layers.dec_out) {
            let h = self.dense(b, &trunk_out, Activation::Relu)?;
            outputs.push(self.dense(o, &h, self.output_activation())?);
            branch_out.push(h);
        }
        Ok(DecoderCache {
            input: latent.clone(),
            trunk_out,
            branch_out,
            outputs,
        })
    }

    /// Accumulates decoder gradients. `grad_out[k]` is the gradient with
    /// respect to omics `k`'s output pre-activation (the sigmoid input in bce
    /// mode). Returns the gradient with respect to the decoder input.
    pub fn decoder_backward(&mut self, cache: &DecoderCache, grad_out: &[Matrix]) -> Result<Matrix> {
        let mut g_trunk = Matrix::zeros(cache.trunk_out.rows(), cache.trunk_out.cols());
        let pairs: Vec<(ParamId, ParamId)> = self
            .layers
            .dec_branch
            .iter()
            .copied()
            .zip(self.layers.dec_out.iter().copied())
            .collect();
        for (k, (b, o)) in pairs.into_iter().enumerate() {
            let mut g_h = self.dense_backward(o, &grad_out[k], &cache.branch_out[k], true)?.expect("requested");
            Activation::Relu.backward_in_place(&mut g_h, &cache.branch_out[k]);
            let g = self.dense_backward(b, &g_h, &cache.trunk_out, true)?.expect("requested");
            g_trunk.add_assign(&g)?;
        }
        Activation::Relu.backward_in_place(&mut g_trunk, &cache.trunk_out);
        let id = self.layers.dec_trunk;
        Ok(self.dense_backward(id, &g_trunk, &cache.input, true)?.expect("requested"))
    }

    pub fn classify_batch(&self, latent: &Matrix) -> Result<DownstreamCache> {
        self.check_head_input(latent, "downstream")?;
        let hidden = self.dense(self.layers.ds_hidden, latent, Activation::Relu)?;
        let logits = self.dense(self.layers.ds_logits, &hidden, Activation::Identity)?;
        Ok(DownstreamCache {
            input: latent.clone(),
            hidden,
            logits,
        })
    }

    /// Accumulates downstream gradients; returns the gradient with respect
    /// to the downstream input.
    pub fn downstream_backward(&mut self, cache: &DownstreamCache, grad_logits: &Matrix) -> Result<Matrix> {
        let (h_id, l_id) = (self.layers.ds_hidden, self.layers.ds_logits);
        let mut g_h = self.dense_backward(l_id, grad_logits, &cache.hidden, true)?.expect("requested");
        Activation::Relu.backward_in_place(&mut g_h, &cache.hidden);
        Ok(self.dense_backward(h_id, &g_h, &cache.input, true)?.expect("requested"))
    }

    /// Pads a subset view to the encoder's input widths after checking it
    /// against the partition.
    fn view_to_inputs(&self, view: &SubsetView) -> Result<Vec<Matrix>> {
        let j = view.subset_index;
        if j >= self.subset_count() {
            return Err(Error::Index {
                what: "subsets",
                index: j,
                len: self.subset_count(),
            });
        }
        let expected = self.partition.per_subset_dims(j);
        if view.dims() != expected {
            return Err(Error::dim(format!("encoder input for subset {j}"), format!("{expected:?}"), format!("{:?}", view.dims())));
        }
        Ok(view
            .per_omics_values
            .iter()
            .zip(self.partition.padded_dims())
            .map(|(v, &w)| {
                let mut padded = v.clone();
                padded.resize(w, 0.0);
                Matrix::row_vector(&padded)
            })
            .collect())
    }

    /// Encodes one view with the given noise; `eps = 0` gives `z = mu`.
    pub fn encode(&self, view: &SubsetView, eps: &[f64]) -> Result<LatentStats> {
        let inputs = self.view_to_inputs(view)?;
        let cache = self.encode_batch(inputs, &Matrix::row_vector(eps))?;
        Ok(LatentStats {
            mu: cache.mu.into_data(),
            sigma: cache.sigma.into_data(),
            z: cache.z.into_data(),
            eps: eps.to_vec(),
        })
    }

    /// Encodes one view with a fresh standard-normal draw.
    pub fn encode_sampled(&self, view: &SubsetView, rng: &mut dyn RngCore) -> Result<LatentStats> {
        let eps: Vec<f64> = (0..self.latent_dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.encode(view, &eps)
    }

    /// Appends the one-hot identity of subset `j` when the model uses it.
    pub fn head_input(&self, z: &[f64], j: usize) -> Result<Vec<f64>> {
        if self.config.use_subset_identity {
            concat_identity(z, &subset_identity(self.subset_count(), j)?)
        } else {
            Ok(z.to_vec())
        }
    }

    /// Full-width reconstruction of every omics type.
    pub fn decode(&self, latent: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .decode_batch(&Matrix::row_vector(latent))?
            .outputs
            .into_iter()
            .map(Matrix::into_data)
            .collect())
    }

    /// Raw class logits.
    pub fn classify(&self, latent: &[f64]) -> Result<Vec<f64>> {
        Ok(self.classify_batch(&Matrix::row_vector(latent))?.logits.into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subsetting::extract_subset;

    fn toy(m: usize, identity: bool) -> ModelConfig {
        ModelConfig {
            subset_count: m,
            latent_dim: 3,
            branch_hidden: 6,
            trunk_hidden: 5,
            downstream_hidden: 4,
            use_subset_identity: identity,
            ..ModelConfig::new(vec![8, 4], 3)
        }
    }

    fn sample() -> Vec<Vec<f64>> {
        vec![(0..8).map(|i| 0.1 * i as f64).collect(), vec![0.5, -0.25, 0.75, 1.0]]
    }

    #[test]
    fn head_input_dims() {
        let m = VaeModel::build(toy(1, false), 1).unwrap();
        assert_eq!(m.head_input_dim(), 3);
        assert_eq!(m.params().by_name("dec.trunk").unwrap().weight.cols(), 3);
        let cfg = ModelConfig { omics_dims: vec![8, 4], ..toy(4, true) };
        let m = VaeModel::build(cfg, 1).unwrap();
        assert_eq!(m.params().by_name("dec.trunk").unwrap().weight.cols(), 7);
        assert_eq!(m.params().by_name("ds.hidden").unwrap().weight.cols(), 7);
        assert_eq!(m.encoder_input_dims(), vec![2, 1]);
    }

    #[test]
    fn block_separated_branch() {
        let d = 46;
        let map = BlockMap::new((0..d).map(|f| f % 23).collect()).unwrap();
        let cfg = ModelConfig {
            branch_hidden: 64,
            block_separation: Some(BlockSeparation { omics: 1, map }),
            ..ModelConfig::new(vec![10, d], 4)
        };
        let m = VaeModel::build(cfg, 3).unwrap();
        let blocks: Vec<_> = m.params().iter().filter(|p| p.name.starts_with("enc.branch.1.block.")).collect();
        assert_eq!(blocks.len(), 23);
        assert_eq!(blocks.iter().map(|p| p.weight.rows()).sum::<usize>(), 64);
        assert!(blocks.iter().all(|p| p.weight.cols() == 2));
        let x = vec![vec![0.1; 10], vec![0.2; d]];
        let stats = m.encode(&SubsetView::full(&x), &[0.0; 128]).unwrap();
        assert_eq!(stats.mu.len(), 128);
    }

    #[test]
    fn block_separation_rejects_subsets() {
        let map = BlockMap::new(vec![0, 1, 0, 1]).unwrap();
        let cfg = ModelConfig {
            subset_count: 2,
            block_separation: Some(BlockSeparation { omics: 0, map }),
            ..ModelConfig::new(vec![4, 4], 2)
        };
        assert!(VaeModel::build(cfg, 0).is_err());
    }

    #[test]
    fn identity_requires_subsets() {
        assert!(VaeModel::build(toy(1, true), 0).is_err());
    }

    #[test]
    fn encode_reparameterization() {
        let m = VaeModel::build(toy(2, true), 5).unwrap();
        let view = extract_subset(&sample(), m.partition(), 1).unwrap();
        let s = m.encode(&view, &[0.0; 3]).unwrap();
        assert_eq!(s.z, s.mu);
        let eps = [0.3, -1.2, 2.0];
        let s = m.encode(&view, &eps).unwrap();
        for d in 0..3 {
            assert_eq!(s.z[d], s.mu[d] + s.sigma[d] * s.eps[d]);
            assert!(s.sigma[d] > 0.0);
        }
        assert_eq!(s, m.encode(&view, &eps).unwrap());
    }

    #[test]
    fn encode_dimension_error_names_subset() {
        let m = VaeModel::build(toy(2, false), 5).unwrap();
        let err = m.encode(&SubsetView::full(&sample()), &[0.0; 3]).unwrap_err();
        assert!(err.to_string().contains("subset 0"), "{err}");
    }

    #[test]
    fn large_negative_logvar_collapses_sigma() {
        let mut m = VaeModel::build(toy(1, false), 5).unwrap();
        let id = m.params().id_of("enc.logvar").unwrap();
        let p = m.params_mut().get_mut(id);
        p.weight.fill(0.0);
        p.bias.iter_mut().for_each(|b| *b = -80.0);
        let s = m.encode(&SubsetView::full(&sample()), &[1.0, -1.0, 2.0]).unwrap();
        for d in 0..3 {
            assert!(s.sigma[d] < 1e-17);
            assert!((s.z[d] - s.mu[d]).abs() < 1e-16);
        }
    }

    #[test]
    fn decode_full_dims_and_bce_range() {
        for m_count in [1, 2, 4] {
            let m = VaeModel::build(toy(m_count, m_count > 1), 2).unwrap();
            let out = m.decode(&vec![0.7; m.head_input_dim()]).unwrap();
            assert_eq!(out.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 4]);
        }
        let cfg = ModelConfig { recon_loss: ReconKind::Bce, ..toy(1, false) };
        let mut m = VaeModel::build(cfg, 2).unwrap();
        let out = m.decode(&[5.0, -3.0, 9.0]).unwrap();
        assert!(out.iter().flatten().all(|&v| v > 0.0 && v < 1.0));
        for k in 0..2 {
            let id = m.params().id_of(&format!("dec.out.{k}")).unwrap();
            m.params_mut().get_mut(id).weight.fill(0.0);
        }
        let out = m.decode(&[5.0, -3.0, 9.0]).unwrap();
        assert!(out.iter().flatten().all(|&v| v == 0.5));
        assert!(m.decode(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn classify_logits() {
        let cfg = ModelConfig { latent_dim: 8, ..ModelConfig::new(vec![20, 10], 34) };
        let mut m = VaeModel::build(cfg, 9).unwrap();
        let z = vec![0.3; 8];
        let logits = m.classify(&z).unwrap();
        assert_eq!(logits.len(), 34);
        assert_eq!(logits, m.classify(&z).unwrap());
        let id = m.params().id_of("ds.logits").unwrap();
        m.params_mut().get_mut(id).weight.fill(0.0);
        let logits = m.classify(&z).unwrap();
        assert!(logits.iter().all(|&l| l == logits[0]));
    }

    #[test]
    fn concat_identity_contract() {
        assert_eq!(concat_identity(&[0.5], &[0.0, 1.0]).unwrap(), vec![0.5, 0.0, 1.0]);
        assert!(concat_identity(&[0.5], &[0.5, 0.5]).is_err());
        assert!(concat_identity(&[0.5], &[1.0, 1.0]).is_err());
        assert_eq!(concat_identity(&[0.1, 0.2], &[0.0, 0.0, 1.0]).unwrap().len(), 5);
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(VaeModel::build(toy(2, true), 4).unwrap(), VaeModel::build(toy(2, true), 4).unwrap());
        assert_ne!(VaeModel::build(toy(2, true), 4).unwrap(), VaeModel::build(toy(2, true), 5).unwrap());
    }

    #[test]
    fn reduction_parse_and_widths() {
        let r: Reduction = "8_4_2".parse().unwrap();
        assert_eq!(r, Reduction { encoder: 8, decoder: 4, downstream: 2 });
        assert_eq!(r.to_string(), "8_4_2");
        assert!("8_4".parse::<Reduction>().is_err());
        let cfg = ModelConfig { reduction: r, ..ModelConfig::new(vec![4], 2) };
        let w = cfg.widths();
        assert_eq!((w.enc_branch, w.enc_trunk, w.dec_trunk, w.dec_branch, w.downstream), (64, 32, 64, 128, 64));
        let tiny = ModelConfig { branch_hidden: 3, reduction: r, ..ModelConfig::new(vec![4], 2) };
        assert_eq!(tiny.widths().enc_branch, 1);
    }
}
