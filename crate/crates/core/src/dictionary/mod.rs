// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoders and transcoders over the toy model's activations.
//!
//! Inputs are normalised per token to norm `sqrt(d_model)` before encoding.
//! A transcoder's label is multiplied by the same per-token factor as its
//! input, so both live in one coordinate system and the reconstruction is
//! mapped back by dividing by that factor.

pub mod harvest;
pub mod metrics;
pub mod train;

use std::fmt;
use std::path::Path;

use base64::Engine;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::kernels;
use crate::numerics::seeds::substream;
use crate::numerics::{Tensor, TensorArchive};
use crate::toymodel::HookPoint;
use crate::{Error, Result};

pub use metrics::{collect_feature_stats, evaluate_dictionary, prune_features, DictionaryMetrics, FeatureStats, PruneThresholds};
pub use train::{finetune_decoder, train_dictionaries, train_dictionary, DictTrainConfig, TrainHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DictKind {
    Sae,
    Transcoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Site {
    WordEmbed,
    ResidPreAttn,
    AttnOut,
    ResidPreMlp,
    Mlp,
}

impl Site {
    pub fn as_str(self) -> &'static str {
        match self {
            Site::WordEmbed => "word-embed",
            Site::ResidPreAttn => "resid-pre-attn",
            Site::AttnOut => "attn-out",
            Site::ResidPreMlp => "resid-pre-mlp",
            Site::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "word-embed" => Site::WordEmbed,
            "resid-pre-attn" => Site::ResidPreAttn,
            "attn-out" => Site::AttnOut,
            "resid-pre-mlp" => Site::ResidPreMlp,
            "mlp" => Site::Mlp,
            _ => return Err(Error::InvalidInput(format!("unknown site {s:?}"))),
        })
    }
}

/// Where a dictionary reads (and, for transcoders, what it predicts).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HookSpec {
    pub layer: usize,
    pub site: Site,
}

impl HookSpec {
    pub fn new(layer: usize, site: Site) -> Self {
        HookSpec { layer, site }
    }

    pub fn kind(&self) -> DictKind {
        match self.site {
            Site::Mlp => DictKind::Transcoder,
            _ => DictKind::Sae,
        }
    }

    pub fn input_point(&self) -> HookPoint {
        match self.site {
            Site::WordEmbed => HookPoint::Embed,
            Site::ResidPreAttn => HookPoint::ResidPre(self.layer),
            Site::AttnOut => HookPoint::AttnOut(self.layer),
            Site::ResidPreMlp | Site::Mlp => HookPoint::ResidMid(self.layer),
        }
    }

    /// The activation being reconstructed, which is also the one replaced
    /// when measuring reconstruction loss.
    pub fn label_point(&self) -> HookPoint {
        match self.site {
            Site::Mlp => HookPoint::MlpOut(self.layer),
            _ => self.input_point(),
        }
    }

    /// The full inventory for an `n_layers` model: the word embedding, and per
    /// layer the two residual sites, the attention output and the MLP.
    pub fn inventory(n_layers: usize) -> Vec<HookSpec> {
        let mut v = vec![HookSpec::new(0, Site::WordEmbed)];
        for l in 0..n_layers {
            v.push(HookSpec::new(l, Site::ResidPreAttn));
            v.push(HookSpec::new(l, Site::AttnOut));
            v.push(HookSpec::new(l, Site::ResidPreMlp));
            v.push(HookSpec::new(l, Site::Mlp));
        }
        v
    }
}

impl fmt::Display for HookSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}", self.layer, self.site.as_str())
    }
}

/// Scales `x` to norm `sqrt(d)`. Returns the normalised vector and the factor
/// applied.
pub fn normalize_activation(x: &[f32]) -> Result<(Vec<f32>, f32)> {
    let s = norm_scale(x)?;
    Ok((x.iter().map(|v| v * s).collect(), s))
}

/// The factor `sqrt(d) / ||x||`.
pub fn norm_scale(x: &[f32]) -> Result<f32> {
    let norm = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::InvalidInput("cannot normalise a zero-norm activation".into()));
    }
    Ok(((x.len() as f64).sqrt() / norm) as f32)
}

/// Per-row normalisation factors for a `[rows, d]` matrix.
pub fn row_scales(x: &Tensor) -> Result<Vec<f32>> {
    let (r, _) = x.dims2();
    (0..r).map(|i| norm_scale(x.row(i))).collect()
}

fn scale_rows(x: &Tensor, s: &[f32]) -> Tensor {
    let mut out = x.clone();
    let (r, _) = x.dims2();
    for (i, &si) in s.iter().enumerate().take(r) {
        out.row_mut(i).iter_mut().for_each(|v| *v *= si);
    }
    out
}

/// One SAE or transcoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DictionaryModule {
    pub kind: DictKind,
    pub hook: HookSpec,
    /// `[d_sae, d_model]`.
    pub w_e: Tensor,
    /// `[d_sae]`.
    pub b_e: Tensor,
    /// `[d_model, d_sae]`.
    pub w_d: Tensor,
    /// Per-feature activation scaler, stored as its logarithm.
    pub log_scaler: Tensor,
    pub alive: Vec<bool>,
    pub lambda: f32,
    pub training_config: Option<DictTrainConfig>,
    pub stats: Option<FeatureStats>,
}

/// Output of one encode/decode pass in normalised coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct DictOutput {
    /// Feature activations `[rows, d_sae]`; dead features are exactly 0.
    pub f: Tensor,
    /// Reconstruction `[rows, d_model]`, normalised coordinates.
    pub recon: Tensor,
}

impl DictionaryModule {
    /// Random module: unit-norm decoder columns, encoder tied to the decoder
    /// transpose, zero encoder bias, scaler 1.
    pub fn init(hook: HookSpec, d_model: usize, d_sae: usize, lambda: f32, seed: u64) -> Self {
        let mut rng = substream(seed, &format!("dict-init/{hook}"));
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let mut w_d = Tensor::from_fn(&[d_model, d_sae], |_| normal.sample(&mut rng));
        for j in 0..d_sae {
            let n: f32 = (0..d_model).map(|i| w_d.data()[i * d_sae + j].powi(2)).sum::<f32>().sqrt();
            for i in 0..d_model {
                w_d.data_mut()[i * d_sae + j] /= n;
            }
        }
        let w_e = w_d.transpose2();
        DictionaryModule {
            kind: hook.kind(),
            hook,
            w_e,
            b_e: Tensor::zeros(&[d_sae]),
            w_d,
            log_scaler: Tensor::zeros(&[d_sae]),
            alive: vec![true; d_sae],
            lambda,
            training_config: None,
            stats: None,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_e.shape()[1]
    }

    pub fn d_sae(&self) -> usize {
        self.w_e.shape()[0]
    }

    pub fn n_alive(&self) -> usize {
        self.alive.iter().filter(|&&a| a).count()
    }

    pub fn scaler(&self, feature: usize) -> f32 {
        self.log_scaler.data()[feature].exp()
    }

    pub fn scalers(&self) -> Vec<f32> {
        self.log_scaler.data().iter().map(|v| v.exp()).collect()
    }

    pub fn alive_mask_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.d_sae()], |i| if self.alive[i] { 1.0 } else { 0.0 })
    }

    /// Decoder column `j` (length `d_model`).
    pub fn decoder_column(&self, j: usize) -> Vec<f32> {
        let ds = self.d_sae();
        (0..self.d_model()).map(|i| self.w_d.data()[i * ds + j]).collect()
    }

    pub fn decoder_norms(&self) -> Vec<f32> {
        let (d, ds) = (self.d_model(), self.d_sae());
        let mut n = vec![0f64; ds];
        for i in 0..d {
            for (j, v) in self.w_d.row(i).iter().enumerate() {
                n[j] += (*v as f64) * (*v as f64);
            }
        }
        n.into_iter().map(|v| v.sqrt() as f32).collect()
    }

    /// Rescales every decoder column with norm above 1 down to norm 1.
    pub fn clamp_decoder_norms(&mut self) {
        let norms = self.decoder_norms();
        let ds = self.d_sae();
        for i in 0..self.d_model() {
            let row = &mut self.w_d.data_mut()[i * ds..(i + 1) * ds];
            for (v, &n) in row.iter_mut().zip(&norms) {
                if n > 1.0 {
                    *v /= n;
                }
            }
        }
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.shape()[1] != self.d_model() {
            return Err(Error::shape(
                "dictionary forward",
                format!("input {:?}, d_model {}", x.shape(), self.d_model()),
            ));
        }
        Ok(())
    }

    /// Encodes already-normalised rows: `f = ReLU(x W_E^T + b_E)`, dead
    /// features zeroed.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x)?;
        let mut f = kernels::matmul_nt(x, &self.w_e)?;
        let ds = self.d_sae();
        for row in f.data_mut().chunks_mut(ds) {
            for ((v, &b), &alive) in row.iter_mut().zip(self.b_e.data()).zip(&self.alive) {
                *v = if alive { (*v + b).max(0.0) } else { 0.0 };
            }
        }
        Ok(f)
    }

    /// `recon = (scaler ⊙ f) W_D^T`.
    pub fn decode(&self, f: &Tensor) -> Result<Tensor> {
        let scalers = self.scalers();
        let mut fs = f.clone();
        for row in fs.data_mut().chunks_mut(self.d_sae()) {
            for (v, s) in row.iter_mut().zip(&scalers) {
                *v *= s;
            }
        }
        kernels::matmul_nt(&fs, &self.w_d)
    }

    /// Encode + decode on normalised rows.
    pub fn forward_normed(&self, x: &Tensor) -> Result<DictOutput> {
        let f = self.encode(x)?;
        let recon = self.decode(&f)?;
        Ok(DictOutput { f, recon })
    }

    /// Normalises raw rows, runs the dictionary and maps the reconstruction
    /// back to raw units. Returns `(output, scales)`; `output.recon` is raw.
    pub fn forward_raw(&self, x: &Tensor) -> Result<(DictOutput, Vec<f32>)> {
        self.check_width(x)?;
        let s = row_scales(x)?;
        let mut out = self.forward_normed(&scale_rows(x, &s))?;
        let inv: Vec<f32> = s.iter().map(|v| 1.0 / v).collect();
        out.recon = scale_rows(&out.recon, &inv);
        Ok((out, s))
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        a.push("w_e", self.w_e.clone());
        a.push("b_e", self.b_e.clone());
        a.push("w_d", self.w_d.clone());
        a.push("log_scaler", self.log_scaler.clone());
        if let Some(st) = &self.stats {
            a.push("stats.max_act", Tensor::from_vec(st.max_act.clone()));
            a.push("stats.fire_count", Tensor::from_vec(st.fire_count.iter().map(|&c| c as f32).collect()));
        }
        a
    }

    /// Writes `path` (tensor archive) and `path.json` (metadata).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)?;
        let side = DictSidecar {
            schema_version: DICT_SCHEMA_VERSION,
            kind: self.kind,
            hook: self.hook,
            d_model: self.d_model(),
            d_sae: self.d_sae(),
            lambda: self.lambda,
            alive_mask: encode_bitset(&self.alive),
            training_config: self.training_config.clone(),
            stats_tokens: self.stats.as_ref().map(|s| s.tokens),
        };
        let p = sidecar_path(path);
        std::fs::write(&p, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p = sidecar_path(path);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let side: DictSidecar = serde_json::from_str(&text)?;
        if side.schema_version != DICT_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported dictionary schema {}", side.schema_version)));
        }
        let mut a = TensorArchive::load(path)?;
        let w_e = a.take("w_e")?;
        let b_e = a.take("b_e")?;
        let w_d = a.take("w_d")?;
        let log_scaler = a.take("log_scaler")?;
        let (d, ds) = (side.d_model, side.d_sae);
        if w_e.shape() != [ds, d] || w_d.shape() != [d, ds] || b_e.shape() != [ds] || log_scaler.shape() != [ds] {
            return Err(Error::Format("dictionary tensor shapes disagree with sidecar".into()));
        }
        let alive = decode_bitset(&side.alive_mask, ds)?;
        let stats = match side.stats_tokens {
            Some(tokens) => Some(FeatureStats {
                tokens,
                max_act: a.take("stats.max_act")?.into_data(),
                fire_count: a.take("stats.fire_count")?.data().iter().map(|&c| c as u64).collect(),
            }),
            None => None,
        };
        Ok(DictionaryModule {
            kind: side.kind,
            hook: side.hook,
            w_e,
            b_e,
            w_d,
            log_scaler,
            alive,
            lambda: side.lambda,
            training_config: side.training_config,
            stats,
        })
    }
}

/// Encodes a mask as a little-endian bitset in base64.
pub fn encode_bitset(mask: &[bool]) -> String {
    let mut bytes = vec![0u8; mask.len().div_ceil(8)];
    for (i, &b) in mask.iter().enumerate() {
        if b {
            bytes[i / 8] |= 1 << (i % 8);
        }
    }
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_bitset(s: &str, len: usize) -> Result<Vec<bool>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Format(format!("alive mask: {e}")))?;
    if bytes.len() != len.div_ceil(8) {
        return Err(Error::Format(format!("alive mask has {} bytes for {len} features", bytes.len())));
    }
    Ok((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DictSidecar {
    schema_version: u32,
    kind: DictKind,
    hook: HookSpec,
    d_model: usize,
    d_sae: usize,
    lambda: f32,
    alive_mask: String,
    training_config: Option<DictTrainConfig>,
    #[serde(default)]
    stats_tokens: Option<u64>,
}

const DICT_SCHEMA_VERSION: u32 = 1;

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// A set of dictionaries keyed by hook.
#[derive(Clone, Debug, Default)]
pub struct DictionarySet {
    pub modules: Vec<DictionaryModule>,
}

impl DictionarySet {
    pub fn new(modules: Vec<DictionaryModule>) -> Self {
        DictionarySet { modules }
    }

    pub fn get(&self, hook: HookSpec) -> Option<&DictionaryModule> {
        self.modules.iter().find(|m| m.hook == hook)
    }

    pub fn get_mut(&mut self, hook: HookSpec) -> Option<&mut DictionaryModule> {
        self.modules.iter_mut().find(|m| m.hook == hook)
    }

    /// Looks up a dictionary that must exist and have alive features.
    pub fn require(&self, hook: HookSpec) -> Result<&DictionaryModule> {
        let m = self.get(hook).ok_or_else(|| Error::MissingDictionary(hook.to_string()))?;
        if m.n_alive() == 0 {
            return Err(Error::DeadDictionary(hook.to_string()));
        }
        Ok(m)
    }

    /// File name used for a hook inside a dictionary directory.
    pub fn file_name(hook: HookSpec) -> String {
        format!("L{}-{}.lcgt", hook.layer, hook.site.as_str())
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for m in &self.modules {
            m.save(&dir.join(Self::file_name(m.hook)))?;
        }
        Ok(())
    }

    /// Loads every `*.lcgt` dictionary in `dir`, ordered by hook.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut modules = Vec::new();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for e in entries {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if p.extension().is_some_and(|x| x == "lcgt") {
                modules.push(DictionaryModule::load(&p)?);
            }
        }
        modules.sort_by_key(|m| m.hook);
        Ok(DictionarySet { modules })
    }
}
