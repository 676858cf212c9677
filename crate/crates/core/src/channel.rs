//! Sparse multipath channel generation in the frequency-spatial domain,
//! the 2D transform to the angular-delay domain with row cropping, and the
//! first-order temporal evolution that turns a snapshot into a correlated
//! sequence.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::arch::ModelDims;
use crate::error::CsiError;
use crate::rng::Prng;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Self {
        Complex { re, im }
    }

    /// e^{j phase}.
    pub fn cis(phase: f64) -> Self {
        Complex {
            re: libm::cos(phase),
            im: libm::sin(phase),
        }
    }

    pub fn mul(self, o: Complex) -> Complex {
        Complex {
            re: self.re * o.re - self.im * o.im,
            im: self.re * o.im + self.im * o.re,
        }
    }

    pub fn add_assign(&mut self, o: Complex) {
        self.re += o.re;
        self.im += o.im;
    }

    pub fn abs2(self) -> f64 {
        self.re * self.re + self.im * self.im
    }
}

/// Multipath generator settings. Delay taps stay below the retained row
/// count, so cropping loses no path energy by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    pub min_paths: usize,
    pub max_paths: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            min_paths: 3,
            max_paths: 8,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_paths == 0 || self.min_paths > self.max_paths {
            return Err(CsiError::Config(format!(
                "invalid path count range {}..={}",
                self.min_paths, self.max_paths
            )));
        }
        Ok(())
    }
}

/// One propagation path in closed form.
#[derive(Debug, Clone, Copy)]
pub struct Path {
    /// Integer delay tap in [0, delay_rows).
    pub tap: usize,
    /// Angular frequency of the antenna phase ramp, in [0, 2 pi).
    pub omega: f64,
    pub gain: Complex,
}

/// Draw the path set for one channel realization.
pub fn draw_paths(cfg: &GeneratorConfig, delay_rows: usize, rng: &mut Prng) -> Result<Vec<Path>> {
    cfg.validate()?;
    let span = (cfg.max_paths - cfg.min_paths + 1) as u64;
    let count = cfg.min_paths + rng.below(span) as usize;
    let mut paths = Vec::with_capacity(count);
    for _ in 0..count {
        let tap = rng.below(delay_rows as u64) as usize;
        let omega = rng.uniform(0.0, 2.0 * core::f64::consts::PI);
        // Circularly symmetric unit-variance complex Gaussian gain.
        let gain = Complex::new(
            rng.next_gaussian() / core::f64::consts::SQRT_2,
            rng.next_gaussian() / core::f64::consts::SQRT_2,
        );
        paths.push(Path { tap, omega, gain });
    }
    Ok(paths)
}

/// Frequency-spatial channel [subcarriers x antennas] as a sum of paths,
/// each a gain times the outer product of a delay steering vector
/// e^{-j 2 pi f tap / N_c} and an antenna steering vector e^{j n omega}.
pub fn synthesize(paths: &[Path], subcarriers: usize, antennas: usize) -> Vec<Complex> {
    let mut h = vec![Complex::ZERO; subcarriers * antennas];
    let mut delay = vec![Complex::ZERO; subcarriers];
    let mut steer = vec![Complex::ZERO; antennas];
    for p in paths {
        for (f, d) in delay.iter_mut().enumerate() {
            let phase = -2.0 * core::f64::consts::PI * (f * p.tap) as f64 / subcarriers as f64;
            *d = p.gain.mul(Complex::cis(phase));
        }
        for (n, s) in steer.iter_mut().enumerate() {
            *s = Complex::cis(n as f64 * p.omega);
        }
        for (f, d) in delay.iter().enumerate() {
            let row = &mut h[f * antennas..(f + 1) * antennas];
            for (dst, s) in row.iter_mut().zip(&steer) {
                dst.add_assign(d.mul(*s));
            }
        }
    }
    h
}

/// Convenience: draw paths and synthesize in one call.
pub fn generate_base_channel(
    cfg: &GeneratorConfig,
    dims: &ModelDims,
    rng: &mut Prng,
) -> Result<Vec<Complex>> {
    let paths = draw_paths(cfg, dims.delay_rows, rng)?;
    Ok(synthesize(&paths, dims.subcarriers, dims.antennas))
}

/// 2D unitary transform of the frequency-spatial channel into the
/// angular-delay domain, keeping the first `keep_rows` delay rows, split
/// into real and imaginary planes: output [2 x keep_rows x antennas].
///
/// The delay axis uses the conjugate kernel so an integer-tap path lands
/// exactly on its row; the angle axis uses the forward kernel.
pub fn to_angular_delay(
    h_freq: &[Complex],
    subcarriers: usize,
    antennas: usize,
    keep_rows: usize,
) -> Result<Tensor<f64>> {
    if h_freq.len() != subcarriers * antennas {
        return Err(CsiError::Dimension(format!(
            "expected {} entries ({subcarriers} x {antennas}), got {}",
            subcarriers * antennas,
            h_freq.len()
        )));
    }
    if keep_rows > subcarriers {
        return Err(CsiError::Dimension(format!(
            "cannot keep {keep_rows} rows of a {subcarriers}-row transform"
        )));
    }
    let delay_scale = 1.0 / libm::sqrt(subcarriers as f64);
    let angle_scale = 1.0 / libm::sqrt(antennas as f64);

    // Delay transform: rows d = sum_f H[f, a] e^{+j 2 pi f d / N_c}.
    let mut kernel = vec![Complex::ZERO; subcarriers];
    let mut delay_rows = vec![Complex::ZERO; keep_rows * antennas];
    for d in 0..keep_rows {
        for (f, k) in kernel.iter_mut().enumerate() {
            // f * d mod N_c keeps the phase argument small.
            let idx = (f * d) % subcarriers;
            *k = Complex::cis(2.0 * core::f64::consts::PI * idx as f64 / subcarriers as f64);
        }
        let out = &mut delay_rows[d * antennas..(d + 1) * antennas];
        for (f, k) in kernel.iter().enumerate() {
            let row = &h_freq[f * antennas..(f + 1) * antennas];
            for (dst, src) in out.iter_mut().zip(row) {
                dst.add_assign(k.mul(*src));
            }
        }
        for v in out.iter_mut() {
            v.re *= delay_scale;
            v.im *= delay_scale;
        }
    }

    // Angle transform per row: a' = sum_n row[n] e^{-j 2 pi n a' / N_t}.
    let mut planes = vec![0.0f64; 2 * keep_rows * antennas];
    let mut acc_row = vec![Complex::ZERO; antennas];
    for d in 0..keep_rows {
        let row = &delay_rows[d * antennas..(d + 1) * antennas];
        for (ap, acc) in acc_row.iter_mut().enumerate() {
            let mut sum = Complex::ZERO;
            for (n, v) in row.iter().enumerate() {
                let idx = (n * ap) % antennas;
                let phase = -2.0 * core::f64::consts::PI * idx as f64 / antennas as f64;
                sum.add_assign(v.mul(Complex::cis(phase)));
            }
            sum.re *= angle_scale;
            sum.im *= angle_scale;
            *acc = sum;
        }
        for (ap, v) in acc_row.iter().enumerate() {
            planes[d * antennas + ap] = v.re;
            planes[keep_rows * antennas + d * antennas + ap] = v.im;
        }
    }
    Tensor::from_vec(vec![2, keep_rows, antennas], planes)
}

/// Evolve a cropped snapshot into T temporally correlated snapshots:
/// snapshot 1 is the input itself, then each real-representation entry does
/// `h <- h + alpha * |h| * e` with a fresh standard Gaussian `e` per entry
/// per step.
pub fn evolve_sequence(
    h0: &Tensor<f64>,
    alpha: f64,
    steps: usize,
    rng: &mut Prng,
) -> Result<Vec<Tensor<f64>>> {
    if alpha < 0.0 {
        return Err(CsiError::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    if steps == 0 {
        return Err(CsiError::Config("sequence needs at least one step".into()));
    }
    let mut out = Vec::with_capacity(steps);
    out.push(h0.clone());
    for _ in 1..steps {
        let prev = out.last().expect("non-empty");
        let data: Vec<f64> = prev
            .data()
            .iter()
            .map(|&v| v + alpha * libm::fabs(v) * rng.next_gaussian())
            .collect();
        out.push(Tensor::from_vec(prev.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// Min and max over a slice; the affine map built from them sends the
/// training split into [0, 1].
pub fn min_max(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

pub fn normalize(v: f64, lo: f64, hi: f64) -> f64 {
    (v - lo) / (hi - lo)
}

pub fn denormalize(v: f64, lo: f64, hi: f64) -> f64 {
    lo + v * (hi - lo)
}

/// Clamp into [0, 1], reporting whether clamping occurred.
pub fn clamp01(v: f64) -> (f64, bool) {
    if v < 0.0 {
        (0.0, true)
    } else if v > 1.0 {
        (1.0, true)
    } else {
        (v, false)
    }
}
