//! Quantization helpers shared by the latent paths.

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::error::Result;
use crate::nn::uniform_noise;

/// Rounds half away from zero, matching `Tensor::round`.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Rounding in the forward pass, identity gradient in the backward pass.
pub fn ste_round(x: &Tensor) -> Result<Tensor> {
    let delta = (x.round()? - x)?.detach();
    Ok((x + delta)?)
}

/// Rounds and canonicalizes signed zeros, so encoder-side latents are
/// bit-identical to latents rebuilt from decoded integers.
pub fn round_canonical(x: &Tensor) -> Result<Tensor> {
    let v: Vec<f64> = x.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let v: Vec<f64> = v.into_iter().map(|a| a.round() as i64 as f64).collect();
    Ok(Tensor::from_vec(v, x.dims(), x.device())?.to_dtype(x.dtype())?)
}

/// `x + u`, `u ~ U(-1/2, 1/2)`.
pub fn add_noise(x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    Ok((x + uniform_noise(x, rng)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn ste_rounds_forward_and_passes_gradient() {
        let v = Var::from_vec(vec![0.4f64, -1.5, 2.5, 3.49], 4, &Device::Cpu).unwrap();
        let y = ste_round(v.as_tensor()).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![0.0, -2.0, 3.0, 3.0]);
        let g = (y * 3.0).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(&v).unwrap().to_vec1::<f64>().unwrap(), vec![3.0; 4]);
    }

    #[test]
    fn canonical_rounding_clears_negative_zero() {
        let t = Tensor::new(&[-0.3f32, -0.5, 0.5, 1.7], &Device::Cpu).unwrap();
        let r: Vec<f32> = round_canonical(&t).unwrap().to_vec1().unwrap();
        assert_eq!(r, vec![0.0, -1.0, 1.0, 2.0]);
        assert!(r[0].is_sign_positive());
    }
}
