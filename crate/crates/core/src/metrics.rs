//! Quality metrics, BD-rate and the residue-vs-conditional entropy demonstrator.

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video_io::FrameTensor;

pub const PSNR_CAP: f64 = 100.0;
/// Smallest side accepted by MS-SSIM (5 dyadic scales, 11-tap window).
pub const MS_SSIM_MIN_SIDE: usize = 160;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn check_dims(a: &FrameTensor, b: &FrameTensor) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::Argument(format!(
            "frame dimensions differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

pub fn mse(a: &FrameTensor, b: &FrameTensor) -> Result<f64> {
    check_dims(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.data().len() as f64)
}

/// PSNR in dB over RGB in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr(a: &FrameTensor, b: &FrameTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

/// Gaussian taps, truncated to `len` when a scale is narrower than the window.
fn gaussian_window(len: usize) -> Vec<f64> {
    let len = len.min(SSIM_WINDOW);
    let half = (len - 1) as f64 / 2.0;
    let g: Vec<f64> = (0..len).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of a `w x h` plane.
fn filter_valid(p: &[f64], w: usize, h: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// `(ssim, cs)` means over one plane.
fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, g: &[f64]) -> (f64, f64) {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let (ma, ow, oh) = filter_valid(a, w, h, g);
    let (mb, _, _) = filter_valid(b, w, h, g);
    let (aa, _, _) = filter_valid(&prod(a, a), w, h, g);
    let (bb, _, _) = filter_valid(&prod(b, b), w, h, g);
    let (ab, _, _) = filter_valid(&prod(a, b), w, h, g);
    let n = (ow * oh) as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..ow * oh {
        let va = aa[i] - ma[i] * ma[i];
        let vb = bb[i] - mb[i] * mb[i];
        let cov = ab[i] - ma[i] * mb[i];
        let c = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma[i] * mb[i] + c1) / (ma[i] * ma[i] + mb[i] * mb[i] + c1);
        ssim += l * c;
        cs += c;
    }
    (ssim / n, cs / n)
}

fn downsample2(p: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (ow, oh) = (w / 2, h / 2);
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out[y * ow + x] = 0.25 * (p[i] + p[i + 1] + p[i + w] + p[i + w + 1]);
        }
    }
    (out, ow, oh)
}

/// Five-scale MS-SSIM on RGB in [0, 1], averaged over channels.
pub fn ms_ssim(a: &FrameTensor, b: &FrameTensor) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w.min(h) < MS_SSIM_MIN_SIDE {
        return Err(Error::Argument(format!("MS-SSIM needs frames of at least {MS_SSIM_MIN_SIDE}x{MS_SSIM_MIN_SIDE}, got {w}x{h}")));
    }
    let mut total = 0.0;
    for c in 0..3 {
        let mut pa: Vec<f64> = a.plane(c).iter().map(|&v| v as f64).collect();
        let mut pb: Vec<f64> = b.plane(c).iter().map(|&v| v as f64).collect();
        let (mut cw, mut ch) = (w, h);
        let mut score = 1.0;
        for (s, &wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (ssim, cs) = ssim_plane(&pa, &pb, cw, ch, &gaussian_window(cw.min(ch)));
            let v = if s == MS_SSIM_WEIGHTS.len() - 1 { ssim } else { cs };
            score *= v.max(0.0).powf(wt);
            if s + 1 < MS_SSIM_WEIGHTS.len() {
                (pa, _, _) = downsample2(&pa, cw, ch);
                (pb, cw, ch) = downsample2(&pb, cw, ch);
            }
        }
        total += score;
    }
    Ok(total / 3.0)
}

/// Differentiable MS-SSIM of `[N, 3, H, W]` batches, averaged over batch and channels.
pub fn ms_ssim_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = a.dims4()?;
    if a.dims() != b.dims() {
        return Err(Error::Argument("MS-SSIM operands differ in shape".into()));
    }
    if w.min(h) < MS_SSIM_MIN_SIDE {
        return Err(Error::Argument(format!("MS-SSIM needs frames of at least {MS_SSIM_MIN_SIDE}x{MS_SSIM_MIN_SIDE}, got {w}x{h}")));
    }
    let blur = |t: &Tensor| -> Result<Tensor> {
        let (_, _, th, tw) = t.dims4()?;
        let g = gaussian_window(th.min(tw));
        let k = g.len();
        let gx = Tensor::from_vec(g.clone(), (1, 1, 1, k), t.device())?.to_dtype(t.dtype())?;
        let gy = Tensor::from_vec(g, (1, 1, k, 1), t.device())?.to_dtype(t.dtype())?;
        Ok(t.conv2d(&gx, 0, 1, 1, 1)?.conv2d(&gy, 0, 1, 1, 1)?)
    };
    let mut pa = a.reshape((n * c, 1, h, w))?;
    let mut pb = b.reshape((n * c, 1, h, w))?;
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut score: Option<Tensor> = None;
    for (s, &wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let ma = blur(&pa)?;
        let mb = blur(&pb)?;
        let va = (blur(&pa.sqr()?)? - ma.sqr()?)?;
        let vb = (blur(&pb.sqr()?)? - mb.sqr()?)?;
        let cov = (blur(&(&pa * &pb)?)? - (&ma * &mb)?)?;
        let cs = ((cov * 2.0)? + c2)?.div(&((va + vb)? + c2)?)?;
        let v = if s == MS_SSIM_WEIGHTS.len() - 1 {
            let l = (((&ma * &mb)? * 2.0)? + c1)?.div(&((ma.sqr()? + mb.sqr()?)? + c1)?)?;
            (l * cs)?
        } else {
            cs
        };
        // Per-plane mean, clamped positive, raised to the scale weight.
        let m = v.flatten_from(1)?.mean(1)?.relu()?;
        let m = (m + 1e-12)?.powf(wt)?;
        score = Some(match score {
            Some(sc) => (sc * m)?,
            None => m,
        });
        if s + 1 < MS_SSIM_WEIGHTS.len() {
            pa = pa.avg_pool2d(2)?;
            pb = pb.avg_pool2d(2)?;
        }
    }
    Ok(score.expect("five scales").mean_all()?)
}

/// One rate-distortion point; `quality` is PSNR in dB or MS-SSIM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub bpp: f64,
    pub quality: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDCurve {
    pub codec: String,
    pub sequence: String,
    pub points: Vec<RDPoint>,
}

impl RDCurve {
    /// Sorts by bpp and checks the curve invariants.
    pub fn new(codec: impl Into<String>, sequence: impl Into<String>, mut points: Vec<RDPoint>) -> Result<Self> {
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        for p in &points {
            if !(p.bpp > 0.0 && p.bpp.is_finite() && p.quality.is_finite()) {
                return Err(Error::Argument(format!("invalid RD point {p:?}")));
            }
        }
        if points.windows(2).any(|w| w[1].bpp <= w[0].bpp) {
            return Err(Error::Argument("RD curve bpp must be strictly increasing".into()));
        }
        Ok(Self { codec: codec.into(), sequence: sequence.into(), points })
    }
}

/// Least-squares polynomial coefficients (lowest degree first).
fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    let a = DMatrix::from_fn(x.len(), degree + 1, |i, j| x[i].powi(j as i32));
    let b = DVector::from_column_slice(y);
    let sol = a.svd(true, true).solve(&b, 1e-14).map_err(|e| Error::Argument(format!("polynomial fit failed: {e}")))?;
    Ok(sol.iter().copied().collect())
}

fn poly_integral(c: &[f64], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| c.iter().enumerate().map(|(j, &cj)| cj * x.powi(j as i32 + 1) / (j as f64 + 1.0)).sum::<f64>();
    prim(hi) - prim(lo)
}

/// True if the cubic's derivative keeps one sign on `[lo, hi]`.
fn cubic_monotone(c: &[f64], lo: f64, hi: f64) -> bool {
    let d = |x: f64| c[1] + 2.0 * c[2] * x + 3.0 * c[3] * x * x;
    let mut pts = vec![lo, hi];
    if c[3] != 0.0 {
        let v = -c[2] / (3.0 * c[3]);
        if v > lo && v < hi {
            pts.push(v);
        }
    }
    let vals: Vec<f64> = pts.iter().map(|&x| d(x)).collect();
    vals.iter().all(|&v| v >= 0.0) || vals.iter().all(|&v| v <= 0.0)
}

/// Monotone piecewise-cubic Hermite slopes (Fritsch-Carlson).
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let del: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        if del[i - 1] * del[i] > 0.0 {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / del[i - 1] + w2 / del[i]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s.signum() != d0.signum() {
            0.0
        } else if d0.signum() != d1.signum() && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    if n == 2 {
        d[0] = del[0];
        d[1] = del[0];
    } else {
        d[0] = end(h[0], h[1], del[0], del[1]);
        d[n - 1] = end(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
    }
    d
}

/// Exact integral of the PCHIP interpolant over `[lo, hi]` (inside the knots).
fn pchip_integral(x: &[f64], y: &[f64], lo: f64, hi: f64) -> f64 {
    let d = pchip_slopes(x, y);
    let mut total = 0.0;
    for i in 0..x.len() - 1 {
        let (a, b) = (x[i].max(lo), x[i + 1].min(hi));
        if b <= a {
            continue;
        }
        let h = x[i + 1] - x[i];
        // Hermite basis in t in [0, 1], integrated with Simpson on cubic: exact.
        let f = |q: f64| {
            let t = (q - x[i]) / h;
            let (t2, t3) = (t * t, t * t * t);
            (2.0 * t3 - 3.0 * t2 + 1.0) * y[i]
                + (t3 - 2.0 * t2 + t) * h * d[i]
                + (-2.0 * t3 + 3.0 * t2) * y[i + 1]
                + (t3 - t2) * h * d[i + 1]
        };
        total += (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b));
    }
    total
}

/// Integral of log-rate over quality on `[lo, hi]`.
fn log_rate_integral(curve: &RDCurve, lo: f64, hi: f64) -> Result<f64> {
    let mut pts = curve.points.clone();
    pts.sort_by(|a, b| a.quality.total_cmp(&b.quality));
    let q: Vec<f64> = pts.iter().map(|p| p.quality).collect();
    let r: Vec<f64> = pts.iter().map(|p| p.bpp.ln()).collect();
    if q.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Argument(format!("curve {} has repeated quality values", curve.codec)));
    }
    let (q0, qs) = (q[0], q[q.len() - 1] - q[0]);
    let qn: Vec<f64> = q.iter().map(|v| (v - q0) / qs).collect();
    let (ln, hn) = ((lo - q0) / qs, (hi - q0) / qs);
    let c = polyfit(&qn, &r, 3)?;
    let integral = if cubic_monotone(&c, ln, hn) { poly_integral(&c, ln, hn) } else { pchip_integral(&qn, &r, ln, hn) };
    Ok(integral * qs)
}

/// Average bitrate difference in percent of `test` against `anchor` at
/// equal quality; negative means `test` saves bits.
pub fn bd_rate(anchor: &RDCurve, test: &RDCurve) -> Result<f64> {
    for c in [anchor, test] {
        if c.points.len() < 4 {
            return Err(Error::Argument(format!("curve {} has {} points; BD-rate needs 4", c.codec, c.points.len())));
        }
    }
    let range = |c: &RDCurve| {
        let q = c.points.iter().map(|p| p.quality);
        (q.clone().fold(f64::INFINITY, f64::min), q.fold(f64::NEG_INFINITY, f64::max))
    };
    let (a_lo, a_hi) = range(anchor);
    let (t_lo, t_hi) = range(test);
    let (lo, hi) = (a_lo.max(t_lo), a_hi.min(t_hi));
    if hi <= lo {
        return Err(Error::Overlap);
    }
    let avg = (log_rate_integral(test, lo, hi)? - log_rate_integral(anchor, lo, hi)?) / (hi - lo);
    Ok((avg.exp() - 1.0) * 100.0)
}

/// Joint pmf of `(x, x_tilde)` on `{0..n}^2`, row-major in `x`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointPmf {
    n: usize,
    p: Vec<f64>,
}

impl JointPmf {
    pub fn new(n: usize, p: Vec<f64>) -> Result<Self> {
        if n == 0 || p.len() != n * n {
            return Err(Error::Argument(format!("joint pmf needs {} entries", n * n)));
        }
        if p.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Argument("joint pmf has a negative or non-finite entry".into()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::Argument(format!("joint pmf sums to {s}")));
        }
        Ok(Self { n, p })
    }

    pub fn independent_uniform(n: usize) -> Self {
        Self { n, p: vec![1.0 / (n * n) as f64; n * n] }
    }

    /// Dirichlet(1) draw, renormalized to sum to one.
    pub fn random(n: usize, rng: &mut impl Rng) -> Self {
        let mut p: Vec<f64> = (0..n * n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        Self { n, p }
    }

    pub fn alphabet(&self) -> usize {
        self.n
    }

    pub fn get(&self, x: usize, x_tilde: usize) -> f64 {
        self.p[x * self.n + x_tilde]
    }
}

fn entropy_bits(p: impl IntoIterator<Item = f64>) -> f64 {
    p.into_iter().filter(|&v| v > 0.0).map(|v| -v * v.log2()).sum()
}

/// `(H(x - x_tilde), H(x | x_tilde))` in bits, by enumeration.
pub fn entropy_gap(joint: &JointPmf) -> (f64, f64) {
    let n = joint.n;
    let mut diff = vec![0.0; 2 * n - 1];
    for x in 0..n {
        for t in 0..n {
            diff[x + n - 1 - t] += joint.get(x, t);
        }
    }
    let mut h_cond = 0.0;
    for t in 0..n {
        let pt: f64 = (0..n).map(|x| joint.get(x, t)).sum();
        if pt > 0.0 {
            h_cond += pt * entropy_bits((0..n).map(|x| joint.get(x, t) / pt));
        }
    }
    (entropy_bits(diff), h_cond)
}

/// Sweep for the demonstrator: returns the number of violations of
/// `H_res >= H_cond` (with a 1e-12 slack) and the minimum gap seen.
pub fn entropy_sweep(alphabet: usize, trials: usize, rng: &mut impl Rng) -> (usize, f64) {
    let mut violations = 0;
    let mut min_gap = f64::INFINITY;
    for _ in 0..trials {
        let (hr, hc) = entropy_gap(&JointPmf::random(alphabet, rng));
        if hr < hc - 1e-12 {
            violations += 1;
        }
        min_gap = min_gap.min(hr - hc);
    }
    (violations, min_gap)
}

pub fn mse_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

pub fn tensor_scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;

    fn pattern(w: usize, h: usize) -> FrameTensor {
        FrameTensor::from_fn(w, h, |c, y, x| (0.5 + 0.3 * ((x as f32 * 0.21 + c as f32).sin() * (y as f32 * 0.13).cos())).clamp(0.0, 1.0))
    }

    #[test]
    fn psnr_closed_forms() {
        let a = FrameTensor::filled(8, 8, 0.5);
        let b = FrameTensor::filled(8, 8, 0.5 + 1.0 / 255.0);
        assert!((psnr(&a, &b).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(matches!(psnr(&a, &FrameTensor::filled(8, 9, 0.0)), Err(Error::Argument(_))));
    }

    #[test]
    fn ms_ssim_identity_and_bounds() {
        let a = pattern(160, 176);
        assert_eq!(ms_ssim(&a, &a).unwrap(), 1.0);
        let inv = FrameTensor::from_fn(160, 176, |c, y, x| 1.0 - a.get(c, y, x));
        assert!(ms_ssim(&a, &inv).unwrap() < 0.5);
        let small = pattern(159, 159);
        let err = ms_ssim(&small, &small).unwrap_err();
        assert!(err.to_string().contains("160"));
    }

    #[test]
    fn ms_ssim_tensor_agrees_with_host() {
        let a = pattern(160, 160);
        let b = FrameTensor::from_fn(160, 160, |c, y, x| (a.get(c, y, x) + 0.05 * ((x * y) % 7) as f32 / 7.0).min(1.0));
        let host = ms_ssim(&a, &b).unwrap();
        let ta = a.to_tensor(DType::F64, &Device::Cpu).unwrap();
        let tb = b.to_tensor(DType::F64, &Device::Cpu).unwrap();
        let dev = tensor_scalar(&ms_ssim_tensor(&ta, &tb).unwrap()).unwrap();
        assert!((host - dev).abs() < 1e-6, "{host} vs {dev}");
    }

    fn curve(points: &[(f64, f64)]) -> RDCurve {
        RDCurve::new("c", "s", points.iter().map(|&(bpp, quality)| RDPoint { bpp, quality }).collect()).unwrap()
    }

    #[test]
    fn bd_rate_identities() {
        let a = curve(&[(0.05, 30.0), (0.1, 32.5), (0.2, 35.0), (0.4, 37.2)]);
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
        let b = curve(&[(0.1, 30.0), (0.2, 32.5), (0.4, 35.0), (0.8, 37.2)]);
        assert!((bd_rate(&a, &b).unwrap() - 100.0).abs() < 1e-6);
        assert!((bd_rate(&b, &a).unwrap() + 50.0).abs() < 1e-6);
        let short = curve(&[(0.1, 30.0), (0.2, 31.0), (0.3, 32.0)]);
        assert!(matches!(bd_rate(&a, &short), Err(Error::Argument(_))));
        let far = curve(&[(0.05, 40.0), (0.1, 41.0), (0.2, 42.0), (0.4, 43.0)]);
        assert!(matches!(bd_rate(&a, &far), Err(Error::Overlap)));
    }

    #[test]
    fn pchip_integrates_lines_exactly() {
        let x = [0.0, 0.3, 0.5, 1.0];
        let y = [1.0, 1.6, 2.0, 3.0];
        assert!((pchip_integral(&x, &y, 0.1, 0.9) - 1.6).abs() < 1e-12);
    }

    #[test]
    fn entropy_gap_examples() {
        let (hr, hc) = entropy_gap(&JointPmf::independent_uniform(4));
        assert!((hc - 2.0).abs() < 1e-12);
        // Triangular difference distribution: masses 1..4..1 over 16.
        let oracle: f64 = [1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0].iter().map(|&k: &f64| -(k / 16.0) * (k / 16.0).log2()).sum();
        assert!((hr - oracle).abs() < 1e-12);
        assert!((hr - 2.6556).abs() < 1e-3);
        let mut det = vec![0.0; 9];
        det[4] = 1.0;
        assert_eq!(entropy_gap(&JointPmf::new(3, det).unwrap()), (0.0, 0.0));
        assert!(JointPmf::new(2, vec![0.5, 0.5, 0.5, -0.5]).is_err());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        assert_eq!(entropy_sweep(4, 200, &mut rng).0, 0);
    }
}
