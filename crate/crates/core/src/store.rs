//! Persistence and tabular export.
//!
//! A certificate is stored as one JSON document holding every array of the
//! flow (masks and degrees included), the prior box, the target reward, the
//! run configuration and per-round diagnostics. Numbers are written in
//! shortest round-trip form, so loading reproduces the flow bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::flow::{degrees, masks, FlowConfig, FlowModel, MadeLayer, RewardNorm};
use crate::inference::{DiscoverConfig, PosteriorCertificate, RoundSummary};
use crate::priors::{ParamVector, PriorSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeEntry {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerFile {
    pub input_degrees: Vec<usize>,
    pub hidden_degrees: Vec<Vec<usize>>,
    pub hidden_weights: Vec<Vec<Vec<f64>>>,
    pub hidden_biases: Vec<Vec<Vec<f64>>>,
    pub hidden_cond: Vec<Vec<Vec<f64>>>,
    pub hidden_masks: Vec<Vec<Vec<f64>>>,
    pub shift_weights: Vec<Vec<f64>>,
    pub log_scale_weights: Vec<Vec<f64>>,
    pub shift_cond: Vec<Vec<f64>>,
    pub log_scale_cond: Vec<Vec<f64>>,
    pub shift_bias: Vec<Vec<f64>>,
    pub log_scale_bias: Vec<Vec<f64>>,
    pub output_mask: Vec<Vec<f64>>,
}

/// On-disk form of a [`PosteriorCertificate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateFile {
    pub format_version: u32,
    pub env_id: String,
    pub policy_id: String,
    pub prior: Vec<RangeEntry>,
    pub epsilon_clip: f64,
    pub flow: FlowConfig,
    pub layers: Vec<LayerFile>,
    pub permutations: Vec<Vec<usize>>,
    pub reward_norm: RewardNorm,
    pub r_star: f64,
    pub seed: u64,
    pub config: DiscoverConfig,
    pub diagnostics: Vec<RoundSummary>,
    pub complete: bool,
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], shape: (usize, usize), field: &str) -> Result<Matrix> {
    let bad = || Error::Parse {
        location: field.to_string(),
        message: format!("expected a {}x{} array", shape.0, shape.1),
    };
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(bad());
    }
    Matrix::from_shape_vec(shape, rows.concat()).map_err(|_| bad())
}

impl CertificateFile {
    pub fn from_certificate(cert: &PosteriorCertificate) -> Self {
        let spec = &cert.spec;
        let layers = cert
            .flow
            .layers
            .iter()
            .map(|l| LayerFile {
                input_degrees: l.input_degrees.clone(),
                hidden_degrees: l.hidden_degrees.clone(),
                hidden_weights: l.hidden_weights.iter().map(to_rows).collect(),
                hidden_biases: l.hidden_biases.iter().map(to_rows).collect(),
                hidden_cond: l.hidden_cond.iter().map(to_rows).collect(),
                hidden_masks: l.hidden_masks.iter().map(to_rows).collect(),
                shift_weights: to_rows(&l.shift_weights),
                log_scale_weights: to_rows(&l.log_scale_weights),
                shift_cond: to_rows(&l.shift_cond),
                log_scale_cond: to_rows(&l.log_scale_cond),
                shift_bias: to_rows(&l.shift_bias),
                log_scale_bias: to_rows(&l.log_scale_bias),
                output_mask: to_rows(&l.output_mask),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            env_id: cert.env_id.clone(),
            policy_id: cert.policy_id.clone(),
            prior: (0..spec.dim())
                .map(|i| RangeEntry {
                    name: spec.names[i].clone(),
                    lo: spec.lo[i],
                    hi: spec.hi[i],
                })
                .collect(),
            epsilon_clip: spec.epsilon_clip,
            flow: cert.flow.config.clone(),
            layers,
            permutations: cert.flow.permutations.clone(),
            reward_norm: cert.flow.reward_norm,
            r_star: cert.r_star,
            seed: cert.config.seed,
            config: cert.config.clone(),
            diagnostics: cert.history.clone(),
            complete: cert.complete,
        }
    }

    /// Rebuild the certificate, checking every shape and that the stored
    /// masks agree with the stored degrees.
    pub fn into_certificate(self) -> Result<PosteriorCertificate> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: self.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let mut spec = PriorSpec::new(self.prior.iter().map(|r| (r.name.clone(), r.lo, r.hi)))?;
        spec.epsilon_clip = self.epsilon_clip;
        spec.validate()?;
        self.flow.validate()?;
        let dim = spec.dim();
        let hidden = &self.flow.hidden;
        if self.layers.len() != self.flow.n_layers {
            return Err(parse_err(
                "layers",
                format!("expected {} layers", self.flow.n_layers),
            ));
        }
        let (want_in, want_hidden) = degrees(dim, hidden);
        let (want_masks, want_out) = masks(&want_in, &want_hidden);
        let mut layers = Vec::with_capacity(self.layers.len());
        for (li, l) in self.layers.into_iter().enumerate() {
            let at = |f: &str| format!("layers[{li}].{f}");
            if l.input_degrees != want_in || l.hidden_degrees != want_hidden {
                return Err(parse_err(
                    &at("hidden_degrees"),
                    "degrees do not match the flow shape".into(),
                ));
            }
            let nh = hidden.len();
            if l.hidden_weights.len() != nh
                || l.hidden_biases.len() != nh
                || l.hidden_cond.len() != nh
                || l.hidden_masks.len() != nh
            {
                return Err(parse_err(
                    &at("hidden_weights"),
                    format!("expected {nh} hidden layers"),
                ));
            }
            let mut fan_in = dim;
            let (mut hw, mut hb, mut hc, mut hm) = (vec![], vec![], vec![], vec![]);
            for k in 0..nh {
                let h = hidden[k];
                hw.push(from_rows(
                    &l.hidden_weights[k],
                    (fan_in, h),
                    &at(&format!("hidden_weights[{k}]")),
                )?);
                hb.push(from_rows(
                    &l.hidden_biases[k],
                    (1, h),
                    &at(&format!("hidden_biases[{k}]")),
                )?);
                hc.push(from_rows(
                    &l.hidden_cond[k],
                    (1, h),
                    &at(&format!("hidden_cond[{k}]")),
                )?);
                let m = from_rows(
                    &l.hidden_masks[k],
                    (fan_in, h),
                    &at(&format!("hidden_masks[{k}]")),
                )?;
                if m != want_masks[k] {
                    return Err(parse_err(
                        &at(&format!("hidden_masks[{k}]")),
                        "mask disagrees with degrees".into(),
                    ));
                }
                hm.push(m);
                fan_in = h;
            }
            let out = (fan_in, dim);
            let row = (1, dim);
            let output_mask = from_rows(&l.output_mask, out, &at("output_mask"))?;
            if output_mask != want_out {
                return Err(parse_err(
                    &at("output_mask"),
                    "mask disagrees with degrees".into(),
                ));
            }
            layers.push(MadeLayer {
                dim,
                hidden: hidden.clone(),
                input_degrees: l.input_degrees,
                hidden_degrees: l.hidden_degrees,
                hidden_weights: hw,
                hidden_biases: hb,
                hidden_cond: hc,
                hidden_masks: hm,
                shift_weights: from_rows(&l.shift_weights, out, &at("shift_weights"))?,
                log_scale_weights: from_rows(&l.log_scale_weights, out, &at("log_scale_weights"))?,
                shift_cond: from_rows(&l.shift_cond, row, &at("shift_cond"))?,
                log_scale_cond: from_rows(&l.log_scale_cond, row, &at("log_scale_cond"))?,
                shift_bias: from_rows(&l.shift_bias, row, &at("shift_bias"))?,
                log_scale_bias: from_rows(&l.log_scale_bias, row, &at("log_scale_bias"))?,
                output_mask,
            });
        }
        if self.permutations.len() + 1 != self.flow.n_layers
            || self.permutations.iter().any(|p| !is_permutation(p, dim))
        {
            return Err(parse_err(
                "permutations",
                format!(
                    "expected {} permutations of 0..{dim}",
                    self.flow.n_layers - 1
                ),
            ));
        }
        if !(self.reward_norm.std > 0.0
            && self.reward_norm.std.is_finite()
            && self.reward_norm.mean.is_finite())
        {
            return Err(parse_err(
                "reward_norm",
                "needs a finite mean and positive std".into(),
            ));
        }
        if !self.r_star.is_finite() {
            return Err(parse_err("r_star", "must be finite".into()));
        }
        let flow = FlowModel {
            dim,
            config: self.flow,
            layers,
            permutations: self.permutations,
            reward_norm: self.reward_norm,
        };
        let mut config = self.config;
        config.seed = self.seed;
        Ok(PosteriorCertificate {
            env_id: self.env_id,
            policy_id: self.policy_id,
            spec,
            flow,
            r_star: self.r_star,
            config,
            history: self.diagnostics,
            complete: self.complete,
        })
    }
}

fn is_permutation(p: &[usize], dim: usize) -> bool {
    let mut seen = vec![false; dim];
    p.len() == dim
        && p.iter()
            .all(|&i| i < dim && !std::mem::replace(&mut seen[i], true))
}

fn parse_err(location: &str, message: String) -> Error {
    Error::Parse {
        location: location.to_string(),
        message,
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Parse {
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    }
}

pub fn certificate_to_string(cert: &PosteriorCertificate) -> Result<String> {
    let mut s = serde_json::to_string_pretty(&CertificateFile::from_certificate(cert))
        .map_err(|e| Error::invalid(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn certificate_from_str(text: &str) -> Result<PosteriorCertificate> {
    #[derive(Deserialize)]
    struct Version {
        format_version: Option<u32>,
    }
    let v: Version = serde_json::from_str(text).map_err(json_err)?;
    match v.format_version {
        Some(FORMAT_VERSION) => {}
        Some(found) => {
            return Err(Error::UnsupportedVersion {
                found,
                expected: FORMAT_VERSION,
            })
        }
        None => return Err(parse_err("format_version", "missing".into())),
    }
    let file: CertificateFile = serde_json::from_str(text).map_err(json_err)?;
    file.into_certificate()
}

pub fn save_certificate(cert: &PosteriorCertificate, path: &Path) -> Result<()> {
    fs::write(path, certificate_to_string(cert)?)?;
    Ok(())
}

pub fn load_certificate(path: &Path) -> Result<PosteriorCertificate> {
    certificate_from_str(&fs::read_to_string(path)?)
}

/// Parse a run configuration from TOML. Missing keys take their defaults;
/// unknown keys are errors.
pub fn config_from_str(text: &str) -> Result<DiscoverConfig> {
    let config: DiscoverConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<DiscoverConfig> {
    config_from_str(&fs::read_to_string(path)?)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.into())
}

/// Header of dimension names, then one row per sample.
pub fn write_samples_csv<W: Write>(
    spec: &PriorSpec,
    samples: &[ParamVector],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&spec.names).map_err(csv_err)?;
    for x in samples {
        w.write_record(x.iter().map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One cell of a marginal histogram (`dim_b` empty) or pairwise grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub dim_a: String,
    pub dim_b: Option<String>,
    pub bin_a: usize,
    pub bin_b: Option<usize>,
    pub center_a: f64,
    pub center_b: Option<f64>,
    /// Fraction of samples in the cell divided by the cell's area in
    /// original units.
    pub density: f64,
}

fn bin_of(spec: &PriorSpec, i: usize, v: f64, bins: usize) -> usize {
    let u = (v - spec.lo[i]) / spec.width(i);
    ((u * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

fn center(spec: &PriorSpec, i: usize, b: usize, bins: usize) -> f64 {
    spec.lo[i] + spec.width(i) * (b as f64 + 0.5) / bins as f64
}

/// Histogram density estimates for every dimension and every pair `a < b`
/// over an equal-width grid spanning the prior box.
pub fn pairgrid(spec: &PriorSpec, samples: &[ParamVector], bins: usize) -> Result<Vec<GridCell>> {
    if bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    if samples.is_empty() {
        return Err(Error::invalid("need at least one sample"));
    }
    let d = spec.dim();
    if let Some(x) = samples.iter().find(|x| x.len() != d) {
        return Err(Error::invalid(format!(
            "sample has {} dimensions, expected {d}",
            x.len()
        )));
    }
    let n = samples.len() as f64;
    let idx: Vec<Vec<usize>> = samples
        .iter()
        .map(|x| (0..d).map(|i| bin_of(spec, i, x[i], bins)).collect())
        .collect();
    let cell = |i: usize| spec.width(i) / bins as f64;
    let mut out = Vec::new();
    for a in 0..d {
        let mut counts = vec![0usize; bins];
        for b in &idx {
            counts[b[a]] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            out.push(GridCell {
                dim_a: spec.names[a].clone(),
                dim_b: None,
                bin_a: k,
                bin_b: None,
                center_a: center(spec, a, k, bins),
                center_b: None,
                density: c as f64 / n / cell(a),
            });
        }
    }
    for a in 0..d {
        for b in a + 1..d {
            let mut counts = vec![0usize; bins * bins];
            for s in &idx {
                counts[s[a] * bins + s[b]] += 1;
            }
            for ka in 0..bins {
                for kb in 0..bins {
                    out.push(GridCell {
                        dim_a: spec.names[a].clone(),
                        dim_b: Some(spec.names[b].clone()),
                        bin_a: ka,
                        bin_b: Some(kb),
                        center_a: center(spec, a, ka, bins),
                        center_b: Some(center(spec, b, kb, bins)),
                        density: counts[ka * bins + kb] as f64 / n / (cell(a) * cell(b)),
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn write_pairgrid_csv<W: Write>(cells: &[GridCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        w.serialize(c).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Serde adapter writing non-finite floats as the strings `NaN`, `inf` and
/// `-inf`, which plain JSON numbers cannot hold.
pub(crate) mod lossy_f64 {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("NaN")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "NaN" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(de::Error::custom(format!(
                    "expected a number, got {other:?}"
                ))),
            },
        }
    }
}
