//! Conditional VAE over neighbor features, one per triplet relation.
//!
//! The encoder reads `[x_u ‖ x_v]` (neighbor features, then the target
//! account's features) and emits `(μ, log σ²)`. The decoder reads
//! `[z ‖ x_v]` and reconstructs `x_u`. The prior over `z` is a standard
//! normal, so the KL term has the usual closed form, and the reconstruction
//! likelihood is a unit-variance Gaussian (squared error).

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureVector, FEATURE_DIM};
use crate::heig::TripletRelation;
use crate::params::{glorot, Adam, AdamConfig, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvaeConfig {
    pub input_dim: usize,
    pub condition_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            input_dim: FEATURE_DIM,
            condition_dim: FEATURE_DIM,
            latent_dim: 8,
            hidden: vec![32],
            learning_rate: 0.005,
            epochs: 30,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim != FEATURE_DIM || self.condition_dim != FEATURE_DIM {
            return Err(Error::Config(format!(
                "CVAE input and condition dims must be {FEATURE_DIM}"
            )));
        }
        if self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("CVAE latent and hidden widths must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("CVAE learning rate, epochs and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboTerms {
    /// `kl + reconstruction`; minimizing it maximizes the ELBO.
    pub total: f64,
    pub kl: f64,
    pub reconstruction: f64,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
pub struct TripletCvae {
    pub relation: TripletRelation,
    pub config: CvaeConfig,
    params: ParamStore,
    encoder: Vec<Dense>,
    decoder: Vec<Dense>,
    /// Mean per-pair loss of every training epoch.
    pub history: Vec<ElboTerms>,
}

fn mlp(
    store: &mut ParamStore,
    prefix: &str,
    sizes: &[usize],
    rng: &mut impl Rng,
) -> Vec<Dense> {
    let last = sizes.len() - 2;
    sizes
        .windows(2)
        .enumerate()
        .map(|(i, io)| {
            let tag = if i == last { "out".to_string() } else { format!("h{i}") };
            Dense {
                w: store.push(format!("{prefix}.{tag}.w"), glorot(rng, io[0], io[1])),
                b: store.push(format!("{prefix}.{tag}.b"), Array2::zeros((1, io[1]))),
            }
        })
        .collect()
}

fn run_mlp(tape: &Tape, vars: &[Var], layers: &[Dense], input: Var) -> Var {
    let mut h = input;
    for (i, layer) in layers.iter().enumerate() {
        h = tape.add_row(tape.matmul(h, vars[layer.w]), vars[layer.b]);
        if i + 1 < layers.len() {
            h = tape.tanh(h);
        }
    }
    h
}

fn row(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("1 x n")
}

fn check_len(context: &'static str, expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch { context, expected, actual: v.len() });
    }
    Ok(())
}

/// `z = μ + ε ⊙ σ`
pub fn reparameterize(mu: &[f64], sigma: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    check_len("reparameterize sigma", mu.len(), sigma)?;
    check_len("reparameterize eps", mu.len(), eps)?;
    Ok(mu.iter().zip(sigma).zip(eps).map(|((m, s), e)| m + e * s).collect())
}

/// `KL(N(μ, diag σ²) ‖ N(0, I)) = ½ Σ (μ² + σ² − 1 − ln σ²)`
pub fn gaussian_kl(mu: &[f64], sigma: &[f64]) -> f64 {
    mu.iter()
        .zip(sigma)
        .map(|(m, s)| {
            let var = s * s;
            0.5 * (m * m + var - 1.0 - var.ln())
        })
        .sum()
}

/// Training pairs as row-aligned matrices: row `i` of `target` is the
/// conditioning account `v`, row `i` of `neighbor` is its neighbor `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub target: Array2<f64>,
    pub neighbor: Array2<f64>,
}

impl PairSet {
    pub fn from_pairs(pairs: &[(FeatureVector, FeatureVector)]) -> Self {
        let n = pairs.len();
        let target = Array2::from_shape_fn((n, FEATURE_DIM), |(i, j)| pairs[i].0 .0[j]);
        let neighbor = Array2::from_shape_fn((n, FEATURE_DIM), |(i, j)| pairs[i].1 .0[j]);
        PairSet { target, neighbor }
    }

    pub fn len(&self) -> usize {
        self.target.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TripletCvae {
    pub fn new(relation: TripletRelation, config: CvaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut enc = vec![config.input_dim + config.condition_dim];
        enc.extend(&config.hidden);
        enc.push(2 * config.latent_dim);
        let mut dec = vec![config.latent_dim + config.condition_dim];
        dec.extend(&config.hidden);
        dec.push(config.input_dim);
        let encoder = mlp(&mut params, "enc", &enc, &mut rng);
        let decoder = mlp(&mut params, "dec", &dec, &mut rng);
        Ok(TripletCvae { relation, config, params, encoder, decoder, history: Vec::new() })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn encode_vars(&self, tape: &Tape, vars: &[Var], xu: Var, xv: Var) -> (Var, Var) {
        let input = tape.concat_cols(&[xu, xv]);
        let out = run_mlp(tape, vars, &self.encoder, input);
        let l = self.config.latent_dim;
        (tape.slice_cols(out, 0, l), tape.slice_cols(out, l, 2 * l))
    }

    fn decode_vars(&self, tape: &Tape, vars: &[Var], z: Var, xv: Var) -> Var {
        let input = tape.concat_cols(&[z, xv]);
        run_mlp(tape, vars, &self.decoder, input)
    }

    /// Batch ELBO terms (means over rows) recorded on `tape`.
    fn elbo_vars(
        &self,
        tape: &Tape,
        vars: &[Var],
        xu: &Array2<f64>,
        xv: &Array2<f64>,
        eps: &Array2<f64>,
    ) -> (Var, Var, Var) {
        let b = xu.nrows() as f64;
        let xu_v = tape.leaf(xu.clone());
        let xv_v = tape.leaf(xv.clone());
        let (mu, logvar) = self.encode_vars(tape, vars, xu_v, xv_v);
        let sigma = tape.exp(tape.scale(logvar, 0.5));
        let z = tape.add(mu, tape.mul(tape.leaf(eps.clone()), sigma));
        let recon = self.decode_vars(tape, vars, z, xv_v);

        let kl_terms = tape.add(tape.mul(mu, mu), tape.sub(tape.exp(logvar), logvar));
        let kl_sum = tape.sub(tape.sum(kl_terms), tape.leaf(Array2::from_elem((1, 1), b * self.config.latent_dim as f64)));
        let kl = tape.scale(kl_sum, 0.5 / b);
        let diff = tape.sub(recon, xu_v);
        let rec = tape.scale(tape.sum(tape.mul(diff, diff)), 1.0 / b);
        (tape.add(kl, rec), kl, rec)
    }

    fn check_batch(&self, xu: &Array2<f64>, xv: &Array2<f64>, eps: &Array2<f64>) -> Result<()> {
        let n = xu.nrows();
        for (context, m, cols) in [
            ("elbo neighbor features", xu, self.config.input_dim),
            ("elbo target features", xv, self.config.condition_dim),
            ("elbo noise", eps, self.config.latent_dim),
        ] {
            if m.dim() != (n, cols) {
                return Err(Error::ShapeMismatch { context, expected: (n, cols), actual: m.dim() });
            }
        }
        Ok(())
    }

    /// Mean ELBO terms over a batch of pairs with caller-supplied noise.
    pub fn batch_elbo(&self, xu: &Array2<f64>, xv: &Array2<f64>, eps: &Array2<f64>) -> Result<ElboTerms> {
        Ok(self.batch_elbo_with_grads(xu, xv, eps)?.0)
    }

    /// Mean ELBO terms and the gradient of `total` w.r.t. every parameter,
    /// in [`ParamStore`] order.
    pub fn batch_elbo_with_grads(
        &self,
        xu: &Array2<f64>,
        xv: &Array2<f64>,
        eps: &Array2<f64>,
    ) -> Result<(ElboTerms, Vec<Array2<f64>>)> {
        self.check_batch(xu, xv, eps)?;
        if xu.nrows() == 0 {
            return Err(Error::EmptyInput("elbo batch"));
        }
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let (total, kl, rec) = self.elbo_vars(&tape, &vars, xu, xv, eps);
        let terms = ElboTerms {
            total: tape.scalar(total),
            kl: tape.scalar(kl),
            reconstruction: tape.scalar(rec),
        };
        if !(terms.total.is_finite() && terms.kl.is_finite() && terms.reconstruction.is_finite()) {
            return Err(Error::NonFinite("elbo loss"));
        }
        let grads = self.params.collect_grads(&tape.backward(total), &vars);
        Ok((terms, grads))
    }

    pub fn encode(&self, x_u: &[f64], x_v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("encode x_u", self.config.input_dim, x_u)?;
        check_len("encode x_v", self.config.condition_dim, x_v)?;
        if x_u.iter().chain(x_v).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("encoder input"));
        }
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let (mu, logvar) = self.encode_vars(&tape, &vars, tape.leaf(row(x_u)), tape.leaf(row(x_v)));
        let mu = tape.value(mu).row(0).to_vec();
        let sigma = tape.value(logvar).row(0).iter().map(|lv| (0.5 * lv).exp()).collect();
        Ok((mu, sigma))
    }

    pub fn decode(&self, z: &[f64], x_v: &[f64]) -> Result<FeatureVector> {
        check_len("decode z", self.config.latent_dim, z)?;
        check_len("decode x_v", self.config.condition_dim, x_v)?;
        let out = self.decode_batch(&row(z), &row(x_v))?;
        FeatureVector::from_slice(out.row(0).as_slice().expect("contiguous"))
    }

    /// Decodes a batch: rows of `z` paired with rows of `x_v`.
    pub fn decode_batch(&self, z: &Array2<f64>, x_v: &Array2<f64>) -> Result<Array2<f64>> {
        if z.nrows() != x_v.nrows() || z.ncols() != self.config.latent_dim || x_v.ncols() != self.config.condition_dim {
            return Err(Error::ShapeMismatch {
                context: "decode batch",
                expected: (x_v.nrows(), self.config.latent_dim),
                actual: z.dim(),
            });
        }
        let tape = Tape::new();
        let vars = self.params.bind(&tape);
        let out = self.decode_vars(&tape, &vars, tape.leaf(z.clone()), tape.leaf(x_v.clone()));
        Ok((*tape.value(out)).clone())
    }

    pub fn elbo_loss(&self, x_u: &[f64], x_v: &[f64], eps: &[f64]) -> Result<ElboTerms> {
        check_len("elbo x_u", self.config.input_dim, x_u)?;
        check_len("elbo x_v", self.config.condition_dim, x_v)?;
        check_len("elbo eps", self.config.latent_dim, eps)?;
        self.batch_elbo(&row(x_u), &row(x_v), &row(eps))
    }

    /// Samples `z ~ N(0, I)` and decodes it against `x_v`.
    pub fn generate<R: Rng + ?Sized>(&self, x_v: &[f64], rng: &mut R) -> Result<FeatureVector> {
        let z: Vec<f64> = (0..self.config.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
        self.decode(&z, x_v)
    }

    /// One generated row per row of `x_v`, latents drawn from `latents`.
    pub fn generate_batch(&self, x_v: &Array2<f64>, latents: &mut dyn LatentSource) -> Result<Array2<f64>> {
        let z = latents.sample(x_v.nrows(), self.config.latent_dim);
        self.decode_batch(&z, x_v)
    }
}

/// Where generation draws latent codes from.
pub trait LatentSource {
    fn sample(&mut self, rows: usize, dim: usize) -> Array2<f64>;
}

/// Standard-normal latents from a seeded generator.
pub struct GaussianLatents<R>(pub R);

impl<R: Rng> LatentSource for GaussianLatents<R> {
    fn sample(&mut self, rows: usize, dim: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, dim), || self.0.sample(StandardNormal))
    }
}

/// Always `z = 0`: generation collapses to the decoder mean path.
pub struct ZeroLatents;

impl LatentSource for ZeroLatents {
    fn sample(&mut self, rows: usize, dim: usize) -> Array2<f64> {
        Array2::zeros((rows, dim))
    }
}

pub fn pretrain(
    relation: TripletRelation,
    pairs: &[(FeatureVector, FeatureVector)],
    config: &CvaeConfig,
) -> Result<TripletCvae> {
    pretrain_pairs(relation, &PairSet::from_pairs(pairs), config)
}

pub fn pretrain_pairs(relation: TripletRelation, pairs: &PairSet, config: &CvaeConfig) -> Result<TripletCvae> {
    if pairs.is_empty() {
        return Err(Error::EmptyTrainingSet(relation.to_string()));
    }
    let mut model = TripletCvae::new(relation, config.clone())?;
    let mut opt = Adam::new(AdamConfig::with_lr(config.learning_rate), &model.params);
    // separate stream from the one used for initialization
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = pairs.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch = ElboTerms::default();
        for chunk in order.chunks(config.batch_size) {
            let xu = pairs.neighbor.select(Axis(0), chunk);
            let xv = pairs.target.select(Axis(0), chunk);
            let eps = Array2::from_shape_simple_fn((chunk.len(), config.latent_dim), || rng.sample(StandardNormal));
            let (terms, grads) = model.batch_elbo_with_grads(&xu, &xv, &eps)?;
            opt.step(&mut model.params, &grads);
            let w = chunk.len() as f64 / n as f64;
            epoch.total += terms.total * w;
            epoch.kl += terms.kl * w;
            epoch.reconstruction += terms.reconstruction * w;
        }
        if !model.params.all_finite() {
            return Err(Error::NonFinite("CVAE parameters"));
        }
        model.history.push(epoch);
    }
    Ok(model)
}
