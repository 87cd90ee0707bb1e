use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NetError;
use crate::tensor::{Mat, Scalar};

/// Shape of the two-stream transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Hidden width of the feed-forward block.
    pub d_ff: usize,
    /// Longest input including the BOS sentinel.
    pub max_len: usize,
    pub bos: u32,
    #[serde(default)]
    pub pad: Option<u32>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |msg: String| Err(NetError::Config(msg));
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
        {
            return bad(format!("all dimensions must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} must be at least 2", self.max_len));
        }
        if self.bos as usize >= self.vocab_size {
            return bad(format!("bos id {} outside vocabulary", self.bos));
        }
        if let Some(pad) = self.pad {
            if pad as usize >= self.vocab_size || pad == self.bos {
                return bad(format!("pad id {pad} is invalid"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Ids that are never produced as content tokens.
    pub fn reserved(&self) -> Vec<u32> {
        std::iter::once(self.bos).chain(self.pad).collect()
    }

    /// Longest token sequence a forward pass accepts (BOS excluded).
    pub fn max_tokens(&self) -> usize {
        self.max_len - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Vec<T>,
    pub ln1_bias: Vec<T>,
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
    pub ln2_gain: Vec<T>,
    pub ln2_bias: Vec<T>,
    pub ff_in: Mat<T>,
    pub ff_out: Mat<T>,
}

/// Every learnable array. Both streams share the per-layer weights; the
/// query stream starts from the shared vector `query` plus the position
/// embedding of the position it predicts.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub tok_emb: Mat<T>,
    pub pos_emb: Mat<T>,
    pub query: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: Vec<T>,
    pub lnf_bias: Vec<T>,
    /// `d_model × vocab_size` output projection.
    pub out_proj: Mat<T>,
}

/// Name, shape and contents of one parameter array.
pub struct TensorView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters with the shapes `config` implies.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let layer = LayerParams {
            ln1_gain: vec![T::ZERO; d],
            ln1_bias: vec![T::ZERO; d],
            wq: Mat::zeros(d, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            wo: Mat::zeros(d, d),
            ln2_gain: vec![T::ZERO; d],
            ln2_bias: vec![T::ZERO; d],
            ff_in: Mat::zeros(d, config.d_ff),
            ff_out: Mat::zeros(config.d_ff, d),
        };
        Self {
            config: config.clone(),
            tok_emb: Mat::zeros(config.vocab_size, d),
            pos_emb: Mat::zeros(config.max_len, d),
            query: vec![T::ZERO; d],
            layers: vec![layer; config.n_layers],
            lnf_gain: vec![T::ZERO; d],
            lnf_bias: vec![T::ZERO; d],
            out_proj: Mat::zeros(d, config.vocab_size),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Arrays in canonical order (the checkpoint order).
    pub fn tensors(&self) -> Vec<TensorView<'_, T>> {
        fn mat<'a, T>(name: String, m: &'a Mat<T>) -> TensorView<'a, T> {
            TensorView {
                name,
                shape: vec![m.rows, m.cols],
                data: &m.data,
            }
        }
        fn vector<'a, T>(name: String, v: &'a [T]) -> TensorView<'a, T> {
            TensorView {
                name,
                shape: vec![v.len()],
                data: v,
            }
        }
        let mut out = Vec::with_capacity(7 + 10 * self.layers.len());
        out.push(mat("tok_emb".into(), &self.tok_emb));
        out.push(mat("pos_emb".into(), &self.pos_emb));
        out.push(vector("query".into(), &self.query));
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(vector(format!("layers.{l}.ln1_gain"), &layer.ln1_gain));
            out.push(vector(format!("layers.{l}.ln1_bias"), &layer.ln1_bias));
            out.push(mat(format!("layers.{l}.wq"), &layer.wq));
            out.push(mat(format!("layers.{l}.wk"), &layer.wk));
            out.push(mat(format!("layers.{l}.wv"), &layer.wv));
            out.push(mat(format!("layers.{l}.wo"), &layer.wo));
            out.push(vector(format!("layers.{l}.ln2_gain"), &layer.ln2_gain));
            out.push(vector(format!("layers.{l}.ln2_bias"), &layer.ln2_bias));
            out.push(mat(format!("layers.{l}.ff_in"), &layer.ff_in));
            out.push(mat(format!("layers.{l}.ff_out"), &layer.ff_out));
        }
        out.push(vector("lnf_gain".into(), &self.lnf_gain));
        out.push(vector("lnf_bias".into(), &self.lnf_bias));
        out.push(mat("out_proj".into(), &self.out_proj));
        out
    }

    /// Mutable arrays in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::with_capacity(7 + 10 * self.layers.len());
        out.push(&mut self.tok_emb.data);
        out.push(&mut self.pos_emb.data);
        out.push(&mut self.query);
        for layer in &mut self.layers {
            out.push(&mut layer.ln1_gain);
            out.push(&mut layer.ln1_bias);
            out.push(&mut layer.wq.data);
            out.push(&mut layer.wk.data);
            out.push(&mut layer.wv.data);
            out.push(&mut layer.wo.data);
            out.push(&mut layer.ln2_gain);
            out.push(&mut layer.ln2_bias);
            out.push(&mut layer.ff_in.data);
            out.push(&mut layer.ff_out.data);
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.out_proj.data);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Name of the first array holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|t| t.data.iter().any(|v| !v.is_finite()))
            .map(|t| t.name)
    }

    /// `self += scale * other`, array by array.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        let src: Vec<&[T]> = other.tensors().into_iter().map(|t| t.data).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn convert<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::<U>::zeros(&self.config);
        let src: Vec<&[T]> = self.tensors().into_iter().map(|t| t.data).collect();
        for (dst, src) in out.tensors_mut().into_iter().zip(src) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = U::from_f64(s.to_f64());
            }
        }
        out
    }

    /// Replaces the output projection with random values at the init scale.
    /// Fresh parameters predict uniformly; tests that need a non-trivial
    /// distribution call this.
    pub fn randomize_output<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let std = 1.0 / (self.config.d_model as f64).sqrt();
        self.out_proj = Mat::randn(self.out_proj.rows, self.out_proj.cols, std, rng);
    }
}

/// Sine/cosine position table with per-entry RMS `rms`.
fn sinusoid_table<T: Scalar>(rows: usize, d: usize, rms: f64) -> Mat<T> {
    let amp = rms * std::f64::consts::SQRT_2;
    let mut data = Vec::with_capacity(rows * d);
    for pos in 0..rows {
        for j in 0..d {
            let freq = 10000f64.powf(-((j / 2 * 2) as f64) / d as f64);
            let angle = pos as f64 * freq;
            data.push(T::from_f64(
                amp * if j % 2 == 0 { angle.sin() } else { angle.cos() },
            ));
        }
    }
    Mat::from_vec(rows, d, data)
}

/// Zero-mean normal weights with standard deviation `1/√d_model`, unit layer
/// norm gains, zero biases and a zero output projection, so a fresh model
/// predicts the uniform distribution. Position embeddings start as a
/// sinusoid table of the same scale and are trained like everything else.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<ModelParams<T>, NetError> {
    cfg.validate()?;
    let d = cfg.d_model;
    let std = 1.0 / (d as f64).sqrt();
    let tok_emb = Mat::randn(cfg.vocab_size, d, std, rng);
    let pos_emb = sinusoid_table(cfg.max_len, d, std);
    let query = Mat::<T>::randn(1, d, std, rng).data;
    let layers = (0..cfg.n_layers)
        .map(|_| LayerParams {
            ln1_gain: vec![T::ONE; d],
            ln1_bias: vec![T::ZERO; d],
            wq: Mat::randn(d, d, std, rng),
            wk: Mat::randn(d, d, std, rng),
            wv: Mat::randn(d, d, std, rng),
            wo: Mat::randn(d, d, std, rng),
            ln2_gain: vec![T::ONE; d],
            ln2_bias: vec![T::ZERO; d],
            ff_in: Mat::randn(d, cfg.d_ff, std, rng),
            ff_out: Mat::randn(cfg.d_ff, d, std, rng),
        })
        .collect();
    Ok(ModelParams {
        config: cfg.clone(),
        tok_emb,
        pos_emb,
        query,
        layers,
        lnf_gain: vec![T::ONE; d],
        lnf_bias: vec![T::ZERO; d],
        out_proj: Mat::zeros(d, cfg.vocab_size),
    })
}
