//! Spectral read-out of a trained modular-addition model.
//!
//! `W_L` maps each MLP neuron to its contribution over the `p` numeric output
//! classes. Its per-frequency energy, a logit ablation that keeps only chosen
//! frequencies, and the share of activation variance explained by ideal
//! `cos/sin(ω_k(a+b))` directions together describe the learned circuit.

use std::f64::consts::TAU;
use std::io::Write;

use log::warn;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{forward, mlp_activations, ModelConfig, ModelError, Params, UnembedMode};
use crate::tasks::{Split, Task, TaskDataset};
use crate::tensor::{Scalar, Tensor};
use crate::training::argmax;

/// Examples per forward pass when sweeping a dataset.
const CHUNK: usize = 2048;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("spectral analysis needs a modular-addition task, got {0:?}")]
    UnsupportedTask(Task),
    #[error("task vocab {task} does not match model vocab {model}")]
    Vocab { task: usize, model: usize },
    #[error("modulus {0} too small for spectral analysis (need p ≥ 3)")]
    Modulus(usize),
    #[error("invalid frequency selection: {0}")]
    Frequencies(String),
    #[error("expected a {expected} matrix, got {got:?}")]
    Shape { expected: String, got: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Modulus of a modular-addition task that matches `config`.
pub fn modulus(task: &Task, config: &ModelConfig) -> Result<usize, AnalysisError> {
    let Task::ModAdd { p } = *task else {
        return Err(AnalysisError::UnsupportedTask(*task));
    };
    if task.vocab_size() != config.vocab_size {
        return Err(AnalysisError::Vocab {
            task: task.vocab_size(),
            model: config.vocab_size,
        });
    }
    if p < 3 {
        return Err(AnalysisError::Modulus(p));
    }
    Ok(p)
}

/// `W_L`: the unembedding restricted to the numeric classes and composed with
/// `W_out`, shaped `[p × d_mlp]`. With the bounded cosine read-out the
/// unit-normalized unembedding columns are used.
pub fn effective_logit_map<T: Scalar>(params: &Params<T>, config: &ModelConfig, task: &Task) -> Result<Tensor<f64>, AnalysisError> {
    let p = modulus(task, config)?;
    let w_out = params.w_out.to_f64_vec();
    let u = params.w_unembed.to_f64_vec();
    let (d_mlp, d_model, vocab) = (config.d_mlp, config.d_model, config.vocab_size);
    let col_scale: Vec<f64> = (0..p)
        .map(|c| match config.unembed_mode {
            UnembedMode::Standard => 1.0,
            UnembedMode::BoundedCosine { .. } => {
                let norm = (0..d_model).map(|d| u[d * vocab + c].powi(2)).sum::<f64>().sqrt();
                if norm > 0.0 { 1.0 / norm } else { 0.0 }
            }
        })
        .collect();
    let mut out = vec![0.0; p * d_mlp];
    for c in 0..p {
        for n in 0..d_mlp {
            let s: f64 = (0..d_model).map(|d| w_out[n * d_model + d] * u[d * vocab + c]).sum();
            out[c * d_mlp + n] = s * col_scale[c];
        }
    }
    Ok(Tensor::new(vec![p, d_mlp], out).expect("nonempty map"))
}

/// Energy per frequency `k = 0..=floor(p/2)` of a `[p × n]` map, transformed
/// along the class axis and summed over columns. Conjugate bins `k` and
/// `p − k` are merged, so the total equals `p · ‖W‖²_F`.
pub fn energy_spectrum(w_l: &Tensor<f64>) -> Result<Vec<f64>, AnalysisError> {
    let shape = w_l.shape();
    if shape.len() != 2 {
        return Err(AnalysisError::Shape {
            expected: "[p × neurons]".into(),
            got: shape.to_vec(),
        });
    }
    let (p, n) = (shape[0], shape[1]);
    if p < 3 {
        return Err(AnalysisError::Modulus(p));
    }
    let fft = FftPlanner::<f64>::new().plan_fft_forward(p);
    let mut buf = vec![Complex::new(0.0, 0.0); p];
    let mut energy = vec![0.0; p / 2 + 1];
    for col in 0..n {
        for (c, z) in buf.iter_mut().enumerate() {
            *z = Complex::new(w_l.data()[c * n + col], 0.0);
        }
        fft.process(&mut buf);
        for (k, z) in buf.iter().enumerate() {
            energy[k.min(p - k)] += z.norm_sqr();
        }
    }
    Ok(energy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEnergy {
    pub k: usize,
    pub energy: f64,
}

/// The `n` non-DC frequencies with the most energy, strongest first.
pub fn top_frequencies(w_l: &Tensor<f64>, n: usize) -> Result<Vec<FrequencyEnergy>, AnalysisError> {
    let spectrum = energy_spectrum(w_l)?;
    let available = spectrum.len() - 1;
    if n == 0 || n > available {
        return Err(AnalysisError::Frequencies(format!("asked for {n} of {available} frequencies")));
    }
    let mut ranked: Vec<FrequencyEnergy> = spectrum
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, &energy)| FrequencyEnergy { k, energy })
        .collect();
    // ties keep the lower frequency first
    ranked.sort_by(|a, b| b.energy.total_cmp(&a.energy).then(a.k.cmp(&b.k)));
    ranked.truncate(n);
    Ok(ranked)
}

fn check_freqs(freqs: &[usize], p: usize) -> Result<Vec<usize>, AnalysisError> {
    if freqs.is_empty() {
        return Err(AnalysisError::Frequencies("empty selection".into()));
    }
    if let Some(&k) = freqs.iter().find(|&&k| k == 0 || k > p / 2) {
        return Err(AnalysisError::Frequencies(format!("{k} outside 1..={}", p / 2)));
    }
    let mut out = freqs.to_vec();
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Least-squares projection of `x` (length `p`) onto the constant plus the
/// cosine and sine at each selected frequency. The basis is orthogonal over
/// the full period, so each coefficient is an independent inner product.
pub fn project_onto_frequencies(x: &[f64], freqs: &[usize]) -> Vec<f64> {
    let p = x.len();
    let pf = p as f64;
    let mean = x.iter().sum::<f64>() / pf;
    let mut out = vec![mean; p];
    for &k in freqs {
        let (cos, sin): (Vec<f64>, Vec<f64>) = (0..p)
            .map(|c| {
                let t = TAU * (k * c % p) as f64 / pf;
                (t.cos(), t.sin())
            })
            .unzip();
        let cc: f64 = cos.iter().map(|v| v * v).sum();
        let ss: f64 = sin.iter().map(|v| v * v).sum();
        let a = x.iter().zip(&cos).map(|(v, w)| v * w).sum::<f64>() / cc;
        // at the Nyquist frequency of an even period the sine vanishes
        let b = if ss > 1e-9 { x.iter().zip(&sin).map(|(v, w)| v * w).sum::<f64>() / ss } else { 0.0 };
        for c in 0..p {
            out[c] += a * cos[c] + b * sin[c];
        }
    }
    out
}

fn chunked_rows<T: Scalar>(
    dataset: &TaskDataset,
    idx: &[usize],
    mut f: impl FnMut(&[usize]) -> Result<Tensor<T>, ModelError>,
) -> Result<Vec<f64>, AnalysisError> {
    let mut out = Vec::new();
    for chunk in idx.chunks(CHUNK) {
        let (tokens, _) = dataset.batch(chunk);
        out.extend(f(&tokens)?.to_f64_vec());
    }
    Ok(out)
}

/// Test accuracy with every example's numeric-class logits replaced by their
/// projection onto DC plus `freqs`. Logits for non-numeric tokens are kept and
/// still compete in the argmax.
pub fn frequency_ablation_accuracy<T: Scalar>(
    params: &Params<T>,
    config: &ModelConfig,
    dataset: &TaskDataset,
    freqs: &[usize],
) -> Result<f64, AnalysisError> {
    let p = modulus(&dataset.task, config)?;
    let freqs = check_freqs(freqs, p)?;
    let idx = dataset.indices(Split::Test);
    let logits = chunked_rows(dataset, idx, |t| forward(params, config, t))?;
    let vocab = config.vocab_size;
    let correct = idx
        .iter()
        .zip(logits.chunks(vocab))
        .filter(|(&i, row)| {
            let mut row = row.to_vec();
            let projected = project_onto_frequencies(&row[..p], &freqs);
            row[..p].copy_from_slice(&projected);
            argmax(&row) == dataset.labels[i]
        })
        .count();
    Ok(correct as f64 / idx.len() as f64)
}

/// Centered and unit-normalized `cos` and `sin` of `ω_k(a + b)` over the
/// given `(a, b)` pairs.
pub fn ideal_directions(pairs: &[(usize, usize)], p: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let unit = |mut v: Vec<f64>| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    };
    let angle = |a: usize, b: usize| TAU * (k * ((a + b) % p) % p) as f64 / p as f64;
    let u = unit(pairs.iter().map(|&(a, b)| angle(a, b).cos()).collect());
    let v = unit(pairs.iter().map(|&(a, b)| angle(a, b).sin()).collect());
    (u, v)
}

/// Neuron-centered activations `[rows × cols]` with their squared Frobenius norm.
pub struct CenteredActivations {
    data: Vec<f64>,
    cols: usize,
    total: f64,
}

impl CenteredActivations {
    pub fn new(mut data: Vec<f64>, cols: usize) -> Self {
        assert!(cols > 0 && data.len() % cols == 0, "ragged activations");
        let rows = data.len() / cols;
        let mut mean = vec![0.0; cols];
        for row in data.chunks(cols) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        for row in data.chunks_mut(cols) {
            row.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
        }
        let total = data.iter().map(|v| v * v).sum();
        CenteredActivations { data, cols, total }
    }

    /// `‖Aᵀd‖² / ‖A‖²_F` for a unit direction `d` over the rows; 0 when the
    /// activations carry no variance.
    pub fn explained(&self, direction: &[f64]) -> f64 {
        if self.total <= 0.0 {
            return 0.0;
        }
        let mut proj = vec![0.0; self.cols];
        for (row, &w) in self.data.chunks(self.cols).zip(direction) {
            proj.iter_mut().zip(row).for_each(|(acc, v)| *acc += w * v);
        }
        (proj.iter().map(|v| v * v).sum::<f64>() / self.total).clamp(0.0, 1.0)
    }

    pub fn is_degenerate(&self) -> bool {
        self.total <= 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyFve {
    pub k: usize,
    pub fve_u: f64,
    pub fve_v: f64,
}

fn all_pairs(dataset: &TaskDataset) -> (Vec<usize>, Vec<(usize, usize)>) {
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let pairs = dataset.sequences.iter().map(|s| (s[0], s[1])).collect();
    (idx, pairs)
}

fn centered_mlp<T: Scalar>(params: &Params<T>, config: &ModelConfig, dataset: &TaskDataset) -> Result<CenteredActivations, AnalysisError> {
    let (idx, _) = all_pairs(dataset);
    let acts = chunked_rows(dataset, &idx, |t| mlp_activations(params, config, t))?;
    let centered = CenteredActivations::new(acts, config.d_mlp);
    if centered.is_degenerate() {
        warn!("MLP activations have zero variance; reporting FVE as 0");
    }
    Ok(centered)
}

/// Fractions of centered final-position MLP activation variance, over every
/// `(a, b)` pair, explained by `cos(ω_k(a+b))` and `sin(ω_k(a+b))`.
pub fn fve<T: Scalar>(params: &Params<T>, config: &ModelConfig, dataset: &TaskDataset, k: usize) -> Result<(f64, f64), AnalysisError> {
    let p = modulus(&dataset.task, config)?;
    check_freqs(&[k], p)?;
    let acts = centered_mlp(params, config, dataset)?;
    let (_, pairs) = all_pairs(dataset);
    let (u, v) = ideal_directions(&pairs, p, k);
    Ok((acts.explained(&u), acts.explained(&v)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub p: usize,
    pub top_frequencies: Vec<FrequencyEnergy>,
    pub ablation_accuracy: f64,
    pub test_accuracy: f64,
    /// Test accuracy reached `grok_threshold`; analysis of other models is
    /// allowed but flagged here.
    pub grokked: bool,
    pub grok_threshold: f64,
    /// Every frequency `1..=floor(p/2)`, in order.
    pub fve: Vec<FrequencyFve>,
    pub max_fve: f64,
    /// `[k, energy]` for `k = 0..=floor(p/2)`, DC included.
    pub spectrum: Vec<f64>,
}

impl SpectralReport {
    pub fn write_spectrum_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "k,energy")?;
        for (k, e) in self.spectrum.iter().enumerate() {
            writeln!(out, "{k},{e}")?;
        }
        Ok(())
    }
}

/// Full spectral read-out: top-`n_top` frequencies of `W_L`, the ablation
/// restricted to them, and per-frequency FVE.
pub fn analyze<T: Scalar>(
    params: &Params<T>,
    config: &ModelConfig,
    dataset: &TaskDataset,
    n_top: usize,
    grok_threshold: f64,
) -> Result<SpectralReport, AnalysisError> {
    let p = modulus(&dataset.task, config)?;
    let w_l = effective_logit_map(params, config, &dataset.task)?;
    let spectrum = energy_spectrum(&w_l)?;
    let top = top_frequencies(&w_l, n_top)?;
    let freqs: Vec<usize> = top.iter().map(|f| f.k).collect();
    let ablation_accuracy = frequency_ablation_accuracy(params, config, dataset, &freqs)?;

    let idx = dataset.indices(Split::Test);
    let logits = chunked_rows(dataset, idx, |t| forward(params, config, t))?;
    let correct = idx
        .iter()
        .zip(logits.chunks(config.vocab_size))
        .filter(|(&i, row)| argmax(row) == dataset.labels[i])
        .count();
    let test_accuracy = correct as f64 / idx.len() as f64;

    let acts = centered_mlp(params, config, dataset)?;
    let (_, pairs) = all_pairs(dataset);
    let fve: Vec<FrequencyFve> = (1..=p / 2)
        .map(|k| {
            let (u, v) = ideal_directions(&pairs, p, k);
            FrequencyFve {
                k,
                fve_u: acts.explained(&u),
                fve_v: acts.explained(&v),
            }
        })
        .collect();
    let max_fve = fve.iter().map(|f| f.fve_u.max(f.fve_v)).fold(0.0, f64::max);
    Ok(SpectralReport {
        p,
        top_frequencies: top,
        ablation_accuracy,
        test_accuracy,
        grokked: test_accuracy >= grok_threshold,
        grok_threshold,
        fve,
        max_fve,
        spectrum,
    })
}
