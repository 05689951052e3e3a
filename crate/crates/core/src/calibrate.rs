//! Offline calibration: from a corpus of `(deviation, primary rejected?)`
//! pairs to a fitted rejection model, a deviation scale and a threshold that
//! achieves a target transmission rate.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{ModelForm, RejectionModel};

/// Artifact format version.
pub const ARTIFACT_VERSION: u32 = 1;
pub const DEFAULT_BINS: usize = 20;
pub const DEFAULT_MIN_SAMPLES: usize = 50_000;
/// Number of log-spaced kappa candidates in [KAPPA_MIN, KAPPA_MAX].
pub const KAPPA_GRID: usize = 64;
pub const KAPPA_MIN: f64 = 0.01;
pub const KAPPA_MAX: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSample {
    pub delta_net: f64,
    pub primary_rejected: bool,
    pub delta: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationCorpus {
    pub samples: Vec<CorpusSample>,
}

impl CalibrationCorpus {
    /// Builds a corpus from raw net deviations; normalized deviations are
    /// filled in by [`CalibrationCorpus::normalize`].
    pub fn from_raw(raw: impl IntoIterator<Item = (f64, bool)>) -> Result<Self> {
        let samples: Vec<CorpusSample> = raw
            .into_iter()
            .map(|(delta_net, primary_rejected)| CorpusSample {
                delta_net,
                primary_rejected,
                delta: f64::NAN,
            })
            .collect();
        if samples
            .iter()
            .any(|s| !(s.delta_net >= 0.0 && s.delta_net.is_finite()))
        {
            return Err(Error::Calibration(
                "net deviations must be finite and non-negative".into(),
            ));
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn net_deviations(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.delta_net).collect()
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.delta).collect()
    }

    pub fn normalize(&mut self, sigma: f64) {
        for s in &mut self.samples {
            s.delta = s.delta_net / sigma;
        }
    }

    pub fn rejection_rate(&self) -> f64 {
        self.samples.iter().filter(|s| s.primary_rejected).count() as f64
            / self.samples.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub mean_delta: f64,
    pub rejection_rate: f64,
    pub size: usize,
}

/// Sorts by normalized deviation (stable on sample order) and splits into
/// `n_bins` contiguous groups whose sizes differ by at most one.
pub fn bin_equal_count(corpus: &CalibrationCorpus, n_bins: usize) -> Result<Vec<Bin>> {
    if n_bins < 2 {
        return Err(Error::Calibration(format!(
            "need at least 2 bins, got {n_bins}"
        )));
    }
    let total = corpus.len();
    if total < n_bins {
        return Err(Error::Calibration(format!(
            "corpus has {total} samples, fewer than {n_bins} bins"
        )));
    }
    if corpus.samples.iter().any(|s| s.delta.is_nan()) {
        return Err(Error::Calibration("corpus is not normalized".into()));
    }
    let mut order: Vec<&CorpusSample> = corpus.samples.iter().collect();
    order.sort_by(|a, b| a.delta.total_cmp(&b.delta));
    let base = total / n_bins;
    let extra = total % n_bins;
    let mut bins = Vec::with_capacity(n_bins);
    let mut start = 0;
    for i in 0..n_bins {
        let size = base + usize::from(i < extra);
        let chunk = &order[start..start + size];
        start += size;
        bins.push(Bin {
            mean_delta: chunk.iter().map(|s| s.delta).sum::<f64>() / size as f64,
            rejection_rate: chunk.iter().filter(|s| s.primary_rejected).count() as f64
                / size as f64,
            size,
        });
    }
    Ok(bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub linear: RejectionModel,
    pub logarithmic: RejectionModel,
    pub linear_r: f64,
    pub logarithmic_r: f64,
}

impl FitResult {
    /// The form with the larger absolute correlation; ties favour linear.
    pub fn best(&self) -> (RejectionModel, f64) {
        if self.logarithmic_r.abs() > self.linear_r.abs() {
            (self.logarithmic, self.logarithmic_r)
        } else {
            (self.linear, self.linear_r)
        }
    }
}

/// Log-spaced kappa candidates.
pub fn kappa_grid() -> Vec<f64> {
    let (lo, hi) = (KAPPA_MIN.log10(), KAPPA_MAX.log10());
    (0..KAPPA_GRID)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (KAPPA_GRID - 1) as f64))
        .collect()
}

/// Least squares `y = m x + b`; returns `(m, b, rss)`.
fn ols(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64)> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx <= f64::EPSILON * mx.abs().max(1.0) * n {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let m = sxy / sxx;
    let b = my - m * mx;
    let rss = x.iter().zip(y).map(|(a, v)| (v - m * a - b).powi(2)).sum();
    Some((m, b, rss))
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Fits both model forms to binned points.
pub fn fit_models(bins: &[Bin]) -> Result<FitResult> {
    if bins.len() < 3 {
        return Err(Error::Calibration(format!(
            "need at least 3 bins to fit, got {}",
            bins.len()
        )));
    }
    let x: Vec<f64> = bins.iter().map(|b| b.mean_delta).collect();
    let y: Vec<f64> = bins.iter().map(|b| b.rejection_rate).collect();
    let (m, b, _) = ols(&x, &y)
        .ok_or_else(|| Error::Calibration("all bins share one deviation value".into()))?;
    let linear = RejectionModel::linear(m, b);

    let mut best: Option<(f64, RejectionModel)> = None;
    for kappa in kappa_grid() {
        let feat: Vec<f64> = x.iter().map(|d| (kappa * d).ln_1p()).collect();
        if let Some((m, b, rss)) = ols(&feat, &y) {
            if best.as_ref().is_none_or(|(r, _)| rss < *r) {
                best = Some((rss, RejectionModel::logarithmic(m, kappa, b)?));
            }
        }
    }
    let logarithmic = best
        .ok_or_else(|| Error::Calibration("logarithmic fit is degenerate for every kappa".into()))?
        .1;
    let fitted = |model: &RejectionModel| {
        x.iter()
            .map(|&d| model.predict_unclamped(d))
            .collect::<Vec<_>>()
    };
    Ok(FitResult {
        linear_r: pearson(&fitted(&linear), &y),
        logarithmic_r: pearson(&fitted(&logarithmic), &y),
        linear,
        logarithmic,
    })
}

/// Deviation at which the model predicts rejection probability `tau`.
pub fn invert_threshold(model: &RejectionModel, tau: f64) -> Result<f64> {
    if !(model.m > 0.0) {
        return Err(Error::Inversion(format!(
            "slope m = {} is not positive",
            model.m
        )));
    }
    if !(tau >= model.b) {
        return Err(Error::Inversion(format!(
            "tau = {tau} is below the intercept b = {}; no deviation reaches it",
            model.b
        )));
    }
    Ok(match model.form {
        ModelForm::Linear => (tau - model.b) / model.m,
        ModelForm::Logarithmic => ((tau - model.b) / model.m).exp_m1() / model.kappa,
    })
}

/// Lower-interpolation empirical quantile of a sorted sample.
pub fn lower_quantile(sorted: &[f64], level: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * level).floor() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Rejection-probability threshold whose exceedance rate over the corpus is
/// `target_tr`: the `(1 - TR)` lower quantile of the predicted probabilities.
pub fn tau_for_tr(
    corpus: &CalibrationCorpus,
    model: &RejectionModel,
    target_tr: f64,
) -> Result<f64> {
    if !(target_tr > 0.0 && target_tr < 1.0) {
        return Err(Error::Config(format!(
            "target transmission rate must lie in (0, 1), got {target_tr}"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Calibration("empty corpus".into()));
    }
    let mut preds: Vec<f64> = corpus
        .samples
        .iter()
        .map(|s| model.predict(s.delta))
        .collect();
    preds.sort_by(f64::total_cmp);
    Ok(lower_quantile(&preds, 1.0 - target_tr))
}

/// Population standard deviation (divides by N).
pub fn compute_sigma(raw: &[f64]) -> Result<f64> {
    if raw.len() < 2 {
        return Err(Error::Calibration(
            "need at least two net deviations".into(),
        ));
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::Calibration(
            "net deviations are all equal; sigma would be zero".into(),
        ));
    }
    Ok(var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSettings {
    pub bins: usize,
    pub min_samples: usize,
    pub target_tr: f64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            min_samples: DEFAULT_MIN_SAMPLES,
            target_tr: 0.6,
        }
    }
}

/// Everything the gate needs, plus enough provenance to audit a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub version: u32,
    pub env: String,
    pub alpha: f64,
    pub sigma: f64,
    pub form: ModelForm,
    pub m: f64,
    pub b: f64,
    pub kappa: f64,
    pub linear_r: f64,
    pub logarithmic_r: f64,
    pub delta_th: f64,
    pub tau_star: f64,
    pub target_tr: f64,
    pub bin_count: usize,
    pub samples: usize,
    pub config_hash: String,
    pub seed: u64,
    pub codebook_checksum: String,
    #[serde(skip)]
    pub bins: Vec<Bin>,
}

impl CalibrationArtifact {
    pub fn model(&self) -> RejectionModel {
        RejectionModel {
            form: self.form,
            m: self.m,
            b: self.b,
            kappa: self.kappa,
        }
    }

    /// TOML key/value header followed by the bin table as a CSV string.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# adahi calibration artifact");
        let _ = writeln!(s, "version = {}", self.version);
        let _ = writeln!(s, "env = {:?}", self.env);
        for (k, v) in [("alpha", self.alpha), ("sigma", self.sigma)] {
            let _ = writeln!(s, "{k} = {}", toml_float(v));
        }
        let _ = writeln!(s, "form = \"{}\"", self.form);
        for (k, v) in [
            ("m", self.m),
            ("b", self.b),
            ("kappa", self.kappa),
            ("linear_r", self.linear_r),
            ("logarithmic_r", self.logarithmic_r),
            ("delta_th", self.delta_th),
            ("tau_star", self.tau_star),
            ("target_tr", self.target_tr),
        ] {
            let _ = writeln!(s, "{k} = {}", toml_float(v));
        }
        let _ = writeln!(s, "bin_count = {}", self.bin_count);
        let _ = writeln!(s, "samples = {}", self.samples);
        let _ = writeln!(s, "config_hash = {:?}", self.config_hash);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "codebook_checksum = {:?}", self.codebook_checksum);
        let _ = writeln!(s, "bins_csv = \"\"\"");
        let _ = writeln!(s, "mean_delta,rejection_rate,size");
        for b in &self.bins {
            let _ = writeln!(s, "{},{},{}", b.mean_delta, b.rejection_rate, b.size);
        }
        let _ = writeln!(s, "\"\"\"");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Raw {
            #[serde(flatten)]
            artifact: CalibrationArtifact,
            bins_csv: String,
        }
        let raw: Raw = toml::from_str(text).map_err(|e| Error::Artifact(e.to_string()))?;
        let mut artifact = raw.artifact;
        if artifact.version != ARTIFACT_VERSION {
            return Err(Error::Artifact(format!(
                "unsupported artifact version {}",
                artifact.version
            )));
        }
        let mut reader = csv::Reader::from_reader(raw.bins_csv.as_bytes());
        artifact.bins = reader
            .deserialize::<Bin>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Artifact(format!("bin table: {e}")))?;
        Ok(artifact)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Artifact(format!(
                "cannot read calibration artifact {}: {e}",
                path.display()
            ))
        })?;
        Self::from_text(&text)
    }
}

fn toml_float(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else if v.is_nan() {
        "nan".into()
    } else {
        // `{:?}` always includes a decimal point or exponent, as TOML requires
        format!("{v:?}")
    }
}

/// Provenance that [`calibrate_corpus`] copies into the artifact.
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    pub env: String,
    pub config_hash: String,
    pub seed: u64,
    pub codebook_checksum: String,
}

/// The whole pipeline: sigma, normalization, binning, fitting, model
/// selection and TR-targeted threshold.
pub fn calibrate_corpus(
    corpus: &mut CalibrationCorpus,
    settings: &CalibrationSettings,
    alpha: f64,
    provenance: Provenance,
) -> Result<CalibrationArtifact> {
    if corpus.len() < settings.min_samples {
        return Err(Error::Calibration(format!(
            "corpus has {} samples, minimum is {}",
            corpus.len(),
            settings.min_samples
        )));
    }
    let sigma = compute_sigma(&corpus.net_deviations())?;
    corpus.normalize(sigma);
    let bins = bin_equal_count(corpus, settings.bins)?;
    let fit = fit_models(&bins)?;
    let (model, _) = fit.best();
    let tau_star = tau_for_tr(corpus, &model, settings.target_tr)?;
    let delta_th = invert_threshold(&model, tau_star)?;
    Ok(CalibrationArtifact {
        version: ARTIFACT_VERSION,
        env: provenance.env,
        alpha,
        sigma,
        form: model.form,
        m: model.m,
        b: model.b,
        kappa: model.kappa,
        linear_r: fit.linear_r,
        logarithmic_r: fit.logarithmic_r,
        delta_th,
        tau_star,
        target_tr: settings.target_tr,
        bin_count: bins.len(),
        samples: corpus.len(),
        config_hash: provenance.config_hash,
        seed: provenance.seed,
        codebook_checksum: provenance.codebook_checksum,
        bins,
    })
}

/// Fraction of samples whose normalized deviation exceeds `delta_th`.
pub fn realized_tr(deltas: &[f64], delta_th: f64) -> f64 {
    deltas.iter().filter(|&&d| d > delta_th).count() as f64 / deltas.len().max(1) as f64
}
