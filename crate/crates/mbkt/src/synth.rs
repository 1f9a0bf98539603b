//! Synthetic multimodal data with a known latent structure.
//!
//! Each sample draws a latent `z ~ N(0, I_k)`. Vision and language are noisy
//! linear views of `z` repeated over time; audio is a fixed linear mix of
//! the (length-resampled) vision and language frames plus Gaussian noise:
//!
//! ```text
//! V_t = s_V · z W_V + n_V ε        L_t = s_L · z W_L + n_L ε
//! A_t = c · (V'_t M_V + L'_t M_L) + σ ε
//! ```
//!
//! `W_V`, `W_L` have orthonormal rows and `M_V = W_Vᵀ B_V`, `M_L = W_Lᵀ B_L`,
//! so audio is a low-noise projection of the latent. `c` scales the clean
//! audio to unit standard deviation over the whole dataset, which makes `σ`
//! a noise level relative to the signal. Audio is computed from the stored
//! 32-bit vision and language values, so with `σ = 0` a linear map recovers
//! it up to float rounding.

use mbkt_core::transfer::resample_matrix;
use mbkt_core::{HeadMode, Label, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, Features, Sample};

/// Standard-normal quantiles at i/7, i = 1..6: equiprobable sentiment bins.
pub const SENTIMENT_THRESHOLDS: [f64; 6] = [
    -1.0675705238781414,
    -0.5659488219328631,
    -0.1800123697927051,
    0.1800123697927051,
    0.5659488219328631,
    1.0675705238781414,
];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    /// Feature widths of vision, language and audio.
    pub dims: [usize; 3],
    pub head: HeadMode,
    pub aligned: bool,
    /// Inclusive length ranges of vision, language and audio; aligned data
    /// uses the first for all three.
    pub t_ranges: [(usize, usize); 3],
    pub latent_dim: usize,
    /// Audio noise standard deviation relative to the clean audio std.
    pub sigma: f64,
    pub vision_noise: f64,
    pub language_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 256,
            dims: [20, 24, 8],
            head: HeadMode::SevenClass,
            aligned: false,
            t_ranges: [(8, 14), (6, 10), (10, 16)],
            latent_dim: 4,
            sigma: 0.1,
            vision_noise: 2.0,
            language_noise: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_samples == 0 {
            return Err("n_samples must be positive".into());
        }
        if self.dims.contains(&0) {
            return Err("feature widths must be positive".into());
        }
        let k = self.latent_dim;
        if k == 0 || k > self.dims[0] || k > self.dims[1] {
            return Err(format!("latent_dim {k} must be in 1..=min(d_V, d_L)"));
        }
        if self.head == HeadMode::MultiLabel4 && k < 4 {
            return Err("multilabel4 needs latent_dim >= 4".into());
        }
        for (lo, hi) in self.t_ranges {
            if lo == 0 || lo > hi {
                return Err(format!("bad length range {lo}..={hi}"));
            }
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("vision_noise", self.vision_noise),
            ("language_noise", self.language_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be a nonnegative number"));
            }
        }
        Ok(())
    }
}

/// Fixed random structure shared by every sample of one dataset.
struct Mixing {
    w_v: Vec<Vec<f64>>,
    w_l: Vec<Vec<f64>>,
    m_v: Tensor,
    m_l: Tensor,
    label_dir: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `k` orthonormal rows of length `d` by Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    while rows.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows
}

impl Mixing {
    fn draw(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let [d_v, d_l, d_a] = spec.dims;
        let k = spec.latent_dim;
        let w_v = orthonormal_rows(rng, k, d_v);
        let w_l = orthonormal_rows(rng, k, d_l);
        let scale = 1.0 / (k as f64).sqrt();
        let b_v: Vec<f64> = (0..k * d_a).map(|_| gaussian(rng) * scale).collect();
        let b_l: Vec<f64> = (0..k * d_a).map(|_| gaussian(rng) * scale).collect();
        // M = Wᵀ B
        let mix = |w: &[Vec<f64>], b: &[f64], d: usize| {
            Tensor::from_fn(&[d, d_a], |i| {
                let (row, col) = (i / d_a, i % d_a);
                (0..k).map(|j| w[j][row] * b[j * d_a + col]).sum()
            })
        };
        let m_v = mix(&w_v, &b_v, d_v);
        let m_l = mix(&w_l, &b_l, d_l);
        let mut label_dir: Vec<f64> = (0..k).map(|_| gaussian(rng)).collect();
        let norm = label_dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        label_dir.iter_mut().for_each(|x| *x /= norm);
        Self {
            w_v,
            w_l,
            m_v,
            m_l,
            label_dir,
        }
    }
}

/// Noisy view `s · z W + n ε` over `t` steps, rounded to storage precision.
fn view(rng: &mut ChaCha8Rng, z: &[f64], w: &[Vec<f64>], t: usize, noise: f64) -> Features {
    let d = w[0].len();
    let s = (d as f64 / z.len() as f64).sqrt();
    let clean: Vec<f64> = (0..d)
        .map(|c| s * z.iter().zip(w).map(|(zj, wj)| zj * wj[c]).sum::<f64>())
        .collect();
    let mut data = Vec::with_capacity(t * d);
    for _ in 0..t {
        for c in &clean {
            data.push((c + noise * gaussian(rng)) as f32);
        }
    }
    Features::new(t, d, data)
}

pub fn label_of(z: &[f64], dir: &[f64], head: HeadMode) -> Label {
    match head {
        HeadMode::SevenClass => {
            let score: f64 = z.iter().zip(dir).map(|(a, b)| a * b).sum();
            Label::Sentiment(SENTIMENT_THRESHOLDS.iter().filter(|&&t| score > t).count() as u8)
        }
        HeadMode::MultiLabel4 => Label::Emotion([z[0] > 0.0, z[1] > 0.0, z[2] > 0.0, z[3] > 0.0]),
    }
}

/// Clean audio `V' M_V + L' M_L` at length `t_a`.
fn clean_audio(v: &Features, l: &Features, t_a: usize, mix: &Mixing) -> Tensor {
    let rv = resample_matrix(v.t, t_a);
    let rl = resample_matrix(l.t, t_a);
    let vv = mbkt_core::tensor::matmul(&rv, &v.to_tensor()).expect("resample shapes agree");
    let ll = mbkt_core::tensor::matmul(&rl, &l.to_tensor()).expect("resample shapes agree");
    let a = mbkt_core::tensor::matmul(&vv, &mix.m_v).expect("mixing shapes agree");
    let b = mbkt_core::tensor::matmul(&ll, &mix.m_l).expect("mixing shapes agree");
    Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i])
}

fn all_classes_present(samples: &[(Vec<f64>, Sample)], head: HeadMode) -> bool {
    let mut seen = [false; 7];
    let mut off = [false; 4];
    for (_, s) in samples {
        match s.label {
            Label::Sentiment(c) => seen[c as usize] = true,
            Label::Emotion(f) => {
                for c in 0..4 {
                    seen[c] |= f[c];
                    off[c] |= !f[c];
                }
            }
        }
    }
    match head {
        HeadMode::SevenClass => samples.len() < 7 || seen.iter().all(|&x| x),
        HeadMode::MultiLabel4 => samples.len() < 2 || (seen[..4].iter().all(|&x| x) && off.iter().all(|&x| x)),
    }
}

const MAX_REDRAWS: usize = 1000;

/// Deterministic in `(spec, seed)`. When every class can appear (n ≥ number
/// of classes) the whole sample set is redrawn until each one does.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset, String> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mix = Mixing::draw(spec, &mut rng);
    let mut draws = Vec::new();
    for _ in 0..MAX_REDRAWS {
        draws = (0..spec.n_samples)
            .map(|i| draw_sample(spec, &mix, &mut rng, i))
            .collect();
        if all_classes_present(&draws, spec.head) {
            break;
        }
    }
    let mut cleans: Vec<Tensor> = draws
        .iter()
        .map(|(_, s)| {
            let t_a = s.audio.as_ref().map_or(0, |a| a.t);
            clean_audio(&s.vision, &s.language, t_a, &mix)
        })
        .collect();
    let count: usize = cleans.iter().map(|c| c.len()).sum();
    let mean = cleans.iter().flat_map(|c| c.data()).sum::<f64>() / count as f64;
    let var = cleans
        .iter()
        .flat_map(|c| c.data())
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / count as f64;
    let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
    let mut samples = Vec::with_capacity(draws.len());
    for ((_, mut s), clean) in draws.into_iter().zip(cleans.iter_mut()) {
        let data = clean
            .data()
            .iter()
            .map(|v| (v * scale + spec.sigma * gaussian(&mut rng)) as f32)
            .collect();
        s.audio = Some(Features::new(clean.rows(), clean.cols(), data));
        samples.push(s);
    }
    Ok(Dataset {
        dims: spec.dims,
        head: spec.head,
        aligned: spec.aligned,
        samples,
    })
}

/// Latent and a sample whose audio field only records the drawn length.
fn draw_sample(spec: &SyntheticSpec, mix: &Mixing, rng: &mut ChaCha8Rng, i: usize) -> (Vec<f64>, Sample) {
    let z: Vec<f64> = (0..spec.latent_dim).map(|_| gaussian(rng)).collect();
    let mut len = |r: (usize, usize)| rng.random_range(r.0..=r.1);
    let [t_v, t_l, t_a] = if spec.aligned {
        let t = len(spec.t_ranges[0]);
        [t; 3]
    } else {
        [len(spec.t_ranges[0]), len(spec.t_ranges[1]), len(spec.t_ranges[2])]
    };
    let vision = view(rng, &z, &mix.w_v, t_v, spec.vision_noise);
    let language = view(rng, &z, &mix.w_l, t_l, spec.language_noise);
    let label = label_of(&z, &mix.label_dir, spec.head);
    let sample = Sample {
        id: format!("syn{i:05}"),
        label,
        vision,
        language,
        audio: Some(Features::new(t_a, 1, vec![0.0; t_a])),
    };
    (z, sample)
}
