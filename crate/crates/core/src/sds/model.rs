use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::msm::{raw_from_var, var_from_raw, MsmArchitecture, MsmGradient, MsmModel, ParamGroup, Trajectory};
use crate::nnet::{axpy, Activation, Mlp, MlpGradients};

/// Encoder variances are clamped from below at this value.
pub const MIN_ENCODER_VAR: f64 = 1e-8;
const MAX_ENCODER_LOGVAR: f64 = 20.0;

/// Parameter groups of a full SDS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdsParamGroup {
    Prior(ParamGroup),
    Decoder,
    ObsNoise,
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdsArchitecture {
    pub prior: MsmArchitecture,
    pub obs_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub leaky_slope: f64,
}

impl SdsArchitecture {
    pub fn new(prior: MsmArchitecture, obs_dim: usize) -> Self {
        SdsArchitecture { prior, obs_dim, encoder_hidden: vec![128], decoder_hidden: vec![128], leaky_slope: 0.2 }
    }

    fn dims(&self, from: usize, hidden: &[usize], to: usize) -> Vec<usize> {
        let mut d = vec![from];
        d.extend(hidden);
        d.push(to);
        d
    }
}

/// MSM prior over `z_{1:T}`, emission `x_t = f(z_t) + eps_t` with diagonal
/// Gaussian noise, and a per-timestep diagonal Gaussian encoder `q(z_t | x_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdsModel {
    pub prior: MsmModel,
    pub decoder: Mlp,
    /// Softplus parameters of the observation noise variances.
    pub obs_noise_raw: Vec<f64>,
    pub encoder_mean: Mlp,
    pub encoder_logvar: Mlp,
}

/// `mean + sqrt(var) * noise`, elementwise.
pub fn reparameterized_sample(mean: &[f64], var: &[f64], noise: &[f64]) -> Vec<f64> {
    mean.iter().zip(var).zip(noise).map(|((m, v), e)| m + v.max(0.0).sqrt() * e).collect()
}

impl SdsModel {
    pub fn random<R: Rng + ?Sized>(arch: &SdsArchitecture, rng: &mut R) -> Result<Self> {
        let prior = MsmModel::random(&arch.prior, rng)?;
        let (m, n) = (arch.prior.dim, arch.obs_dim);
        let act = Activation::LeakyRelu(arch.leaky_slope);
        let decoder = Mlp::with_rng(&arch.dims(m, &arch.decoder_hidden, n), act, rng)?;
        let encoder_mean = Mlp::with_rng(&arch.dims(n, &arch.encoder_hidden, m), act, rng)?;
        let mut encoder_logvar = Mlp::with_rng(&arch.dims(n, &arch.encoder_hidden, m), act, rng)?;
        let last = encoder_logvar.num_layers() - 1;
        encoder_logvar.weights_mut(last).iter_mut().for_each(|w| *w *= 0.1);
        encoder_logvar.biases_mut(last).iter_mut().for_each(|b| *b = (0.01f64).ln());
        let model = SdsModel { prior, decoder, obs_noise_raw: vec![raw_from_var(0.1); n], encoder_mean, encoder_logvar };
        model.validate()?;
        Ok(model)
    }

    pub fn latent_dim(&self) -> usize {
        self.prior.dim
    }

    pub fn obs_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.validate()?;
        let (m, n) = (self.latent_dim(), self.obs_dim());
        if n < m {
            return Err(Error::InvalidModel(format!("observation dim {n} must be at least latent dim {m}")));
        }
        if !matches!(self.decoder.activation(), Activation::LeakyRelu(a) if a > 0.0 && a != 1.0) {
            return Err(Error::InvalidModel("decoder must use a leaky ReLU activation".into()));
        }
        if self.decoder.input_dim() != m || self.obs_noise_raw.len() != n {
            return Err(Error::shape("decoder must map R^m to R^n with n noise variances"));
        }
        for enc in [&self.encoder_mean, &self.encoder_logvar] {
            if enc.input_dim() != n || enc.output_dim() != m {
                return Err(Error::shape("encoder nets must map R^n to R^m"));
            }
        }
        if self.obs_noise_raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite observation noise parameter".into()));
        }
        Ok(())
    }

    pub fn obs_noise_diag(&self) -> Vec<f64> {
        self.obs_noise_raw.iter().map(|&r| var_from_raw(r)).collect()
    }

    pub fn set_obs_noise_diag(&mut self, var: &[f64]) {
        self.obs_noise_raw = var.iter().map(|&v| raw_from_var(v)).collect();
    }

    /// Mean and variance of `q(z_t | x_t)`.
    pub fn encode(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mean = self.encoder_mean.forward(x)?;
        let lv = self.encoder_logvar.forward(x)?;
        Ok((mean, lv.iter().map(|&l| encoder_var(l)).collect()))
    }

    /// Posterior means of every timestep.
    pub fn encode_trajectory(&self, x: &Trajectory) -> Result<Trajectory> {
        if x.dim() != self.obs_dim() {
            return Err(Error::shape(format!("observation dim {} != {}", x.dim(), self.obs_dim())));
        }
        x.map_rows(self.latent_dim(), |row| self.encoder_mean.forward_unchecked(row))
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.decoder.forward(z)
    }

    /// Applies the decoder to every row.
    pub fn decode_trajectory(&self, z: &Trajectory) -> Result<Trajectory> {
        if z.dim() != self.latent_dim() {
            return Err(Error::shape(format!("latent dim {} != {}", z.dim(), self.latent_dim())));
        }
        z.map_rows(self.obs_dim(), |row| self.decoder.forward_unchecked(row))
    }

    /// Trainable blocks in the order of [`SdsGradient::param_slices`].
    pub fn param_slices_mut(&mut self) -> Vec<(SdsParamGroup, &mut [f64])> {
        let mut out: Vec<(SdsParamGroup, &mut [f64])> =
            self.prior.param_slices_mut().into_iter().map(|(g, s)| (SdsParamGroup::Prior(g), s)).collect();
        out.extend(self.decoder.param_slices_mut().into_iter().map(|s| (SdsParamGroup::Decoder, s)));
        out.push((SdsParamGroup::ObsNoise, self.obs_noise_raw.as_mut_slice()));
        out.extend(self.encoder_mean.param_slices_mut().into_iter().map(|s| (SdsParamGroup::Encoder, s)));
        out.extend(self.encoder_logvar.param_slices_mut().into_iter().map(|s| (SdsParamGroup::Encoder, s)));
        out
    }

    /// Relabels prior regimes: new regime `j` is old regime `perm[j]`.
    pub fn permute_regimes(&self, perm: &[usize]) -> Result<SdsModel> {
        Ok(SdsModel { prior: self.prior.permute_regimes(perm)?, ..self.clone() })
    }
}

#[inline]
pub(crate) fn encoder_var(logvar: f64) -> f64 {
    logvar.min(MAX_ENCODER_LOGVAR).exp().max(MIN_ENCODER_VAR)
}

/// `d var / d logvar`, zero where the clamps are active.
#[inline]
pub(crate) fn encoder_var_derivative(logvar: f64) -> f64 {
    let v = logvar.exp();
    if logvar > MAX_ENCODER_LOGVAR || v < MIN_ENCODER_VAR {
        0.0
    } else {
        v
    }
}

/// Gradient with the layout of an [`SdsModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct SdsGradient {
    pub prior: MsmGradient,
    pub decoder: MlpGradients,
    pub obs_noise_raw: Vec<f64>,
    pub encoder_mean: MlpGradients,
    pub encoder_logvar: MlpGradients,
}

impl SdsGradient {
    pub fn zeros_like(model: &SdsModel) -> Self {
        SdsGradient {
            prior: MsmGradient::zeros_like(&model.prior),
            decoder: MlpGradients::zeros_like(&model.decoder),
            obs_noise_raw: vec![0.0; model.obs_noise_raw.len()],
            encoder_mean: MlpGradients::zeros_like(&model.encoder_mean),
            encoder_logvar: MlpGradients::zeros_like(&model.encoder_logvar),
        }
    }

    pub fn add_scaled(&mut self, other: &SdsGradient, s: f64) {
        self.prior.add_scaled(&other.prior, s);
        self.decoder.add_scaled(&other.decoder, s);
        axpy(&mut self.obs_noise_raw, &other.obs_noise_raw, s);
        self.encoder_mean.add_scaled(&other.encoder_mean, s);
        self.encoder_logvar.add_scaled(&other.encoder_logvar, s);
    }

    pub fn param_slices(&self) -> Vec<(SdsParamGroup, &[f64])> {
        let mut out: Vec<(SdsParamGroup, &[f64])> =
            self.prior.param_slices().into_iter().map(|(g, s)| (SdsParamGroup::Prior(g), s)).collect();
        out.extend(self.decoder.param_slices().into_iter().map(|s| (SdsParamGroup::Decoder, s)));
        out.push((SdsParamGroup::ObsNoise, self.obs_noise_raw.as_slice()));
        out.extend(self.encoder_mean.param_slices().into_iter().map(|s| (SdsParamGroup::Encoder, s)));
        out.extend(self.encoder_logvar.param_slices().into_iter().map(|s| (SdsParamGroup::Encoder, s)));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> SdsModel {
        let arch = SdsArchitecture { encoder_hidden: vec![8], decoder_hidden: vec![8], ..SdsArchitecture::new(MsmArchitecture::new(2, 1, 2), 4) };
        SdsModel::random(&arch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn zero_encoder_gives_standard_normal() {
        let mut m = model();
        m.encoder_mean = Mlp::zeros(m.encoder_mean.dims(), m.encoder_mean.activation()).unwrap();
        m.encoder_logvar = Mlp::zeros(m.encoder_logvar.dims(), m.encoder_logvar.activation()).unwrap();
        let (mean, var) = m.encode(&[0.3, -1.0, 2.0, 0.5]).unwrap();
        assert_eq!(mean, vec![0.0, 0.0]);
        assert_eq!(var, vec![1.0, 1.0]);
    }

    #[test]
    fn sampling_limits() {
        assert_eq!(reparameterized_sample(&[1.0, 2.0], &[0.5, 3.0], &[0.0, 0.0]), vec![1.0, 2.0]);
        let z = reparameterized_sample(&[1.0], &[MIN_ENCODER_VAR], &[1.0]);
        assert!((z[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_shapes_and_activations() {
        let mut m = model();
        assert!(m.validate().is_ok());
        assert!(m.encode(&[1.0]).is_err());
        m.decoder = Mlp::new(&[2, 8, 4], Activation::Gelu, 0).unwrap();
        assert!(m.validate().is_err());
        let arch = SdsArchitecture::new(MsmArchitecture::new(2, 1, 3), 2);
        assert!(SdsModel::random(&arch, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn batch_decoding_is_per_timestep() {
        let m = model();
        let z = Trajectory::from_rows(&[vec![0.1, 0.2], vec![-1.0, 3.0], vec![0.0, 0.0]]).unwrap();
        let x = m.decode_trajectory(&z).unwrap();
        for t in 0..3 {
            assert_eq!(x.row(t), m.decode(z.row(t)).unwrap().as_slice());
        }
    }
}
