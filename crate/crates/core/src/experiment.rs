//! Cross-domain evaluation: every target site is segmented by the frozen
//! source segmenter without harmonization, after the pretrained harmonizer
//! and after the per-site adapted harmonizer.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonizer::Harmonizer;
use crate::image::ImageBatch;
use crate::scalar::Scalar;
use crate::seg::{score_masks, ImageScore, Segmenter};
use crate::synth::{DomainDataset, Split};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Pretrained,
    Adapted,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Baseline, Method::Pretrained, Method::Adapted];

    pub fn label(self) -> &'static str {
        match self {
            Method::Baseline => "Without harmonization",
            Method::Pretrained => "Pre-trained harmonizer",
            Method::Adapted => "Adapting using NF",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation; zero for fewer than two values.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

/// One method on one target site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub domain: String,
    pub dsc: MeanStd,
    pub hd: MeanStd,
    /// Mean Dice (%) per foreground class.
    pub class_dsc: Vec<f64>,
    pub images: Vec<ImageScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub source: String,
    pub targets: Vec<String>,
    pub cells: Vec<CellResult>,
    /// Per method, pooled over every target test image.
    pub overall: BTreeMap<Method, (MeanStd, MeanStd)>,
    pub segmenter_checksum: String,
}

impl MetricsReport {
    pub fn cell(&self, method: Method, domain: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.method == method && c.domain == domain)
    }

    pub fn mean_dsc(&self, method: Method) -> Option<f64> {
        self.overall.get(&method).map(|(d, _)| d.mean)
    }

    pub fn mean_hd(&self, method: Method) -> Option<f64> {
        self.overall.get(&method).map(|(_, h)| h.mean)
    }

    /// Methods as rows, target sites as columns; DSC block then HD block.
    pub fn table(&self) -> String {
        let methods: Vec<Method> = Method::ALL.into_iter().filter(|m| self.overall.contains_key(m)).collect();
        let mut s = String::new();
        let head = |s: &mut String, title: &str| {
            let _ = write!(s, "{title:<24}");
            for t in &self.targets {
                let _ = write!(s, " | {:>15}", format!("{}→{t}", self.source));
            }
            let _ = writeln!(s, " | {:>15}", "mean");
        };
        for (title, pick) in [("DSC (%)", true), ("HD (px)", false)] {
            head(&mut s, title);
            for &m in &methods {
                let _ = write!(s, "{:<24}", m.label());
                for t in &self.targets {
                    let v = self.cell(m, t).map(|c| if pick { c.dsc } else { c.hd });
                    let txt = v.map_or("-".to_string(), |v| format!("{:.2} ± {:.2}", v.mean, v.std));
                    let _ = write!(s, " | {txt:>15}");
                }
                let (d, h) = self.overall[&m];
                let v = if pick { d } else { h };
                let _ = writeln!(s, " | {:>15}", format!("{:.2} ± {:.2}", v.mean, v.std));
            }
            s.push('\n');
        }
        s
    }
}

/// Models under evaluation. `adapted` maps a target domain id to its
/// adapted harmonizer.
pub struct ExperimentModels<'a, T> {
    pub segmenter: &'a Segmenter<T>,
    pub pretrained: Option<&'a Harmonizer<T>>,
    pub adapted: BTreeMap<String, &'a Harmonizer<T>>,
}

/// Test images of `site` after `method`, ready for segmentation.
pub fn prepare_inputs<T: Scalar>(
    site: &DomainDataset,
    method: Method,
    models: &ExperimentModels<'_, T>,
) -> Result<ImageBatch<T>> {
    let x = site.split_batch::<T>(Split::Test).to_continuous();
    match method {
        Method::Baseline => Ok(x),
        Method::Pretrained => {
            let h = models.pretrained.ok_or_else(|| Error::MissingArtifact("pretrained harmonizer".into()))?;
            Ok(h.harmonize(&x)?.images)
        }
        Method::Adapted => {
            let h = models
                .adapted
                .get(&site.domain_id)
                .ok_or_else(|| Error::MissingArtifact(format!("adapted harmonizer for site {}", site.domain_id)))?;
            Ok(h.harmonize(&x)?.images)
        }
    }
}

/// Evaluates `methods` on the test split of every target site.
pub fn run_experiment<T: Scalar>(
    source: &DomainDataset,
    targets: &[DomainDataset],
    methods: &[Method],
    models: &ExperimentModels<'_, T>,
) -> Result<MetricsReport> {
    let before = models.segmenter.params().checksum();
    let mut cells = Vec::new();
    let mut pooled: BTreeMap<Method, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for site in targets {
        let masks = site.split_masks(Split::Test);
        if masks.is_empty() {
            return Err(Error::invalid(format!("site {} has no test images", site.domain_id)));
        }
        for &m in methods {
            let x = prepare_inputs(site, m, models)?;
            let scores = score_masks(&models.segmenter.segment(&x)?, &masks)?;
            let dsc: Vec<f64> = scores.iter().map(|s| s.dsc).collect();
            let hd: Vec<f64> = scores.iter().map(|s| s.hd).collect();
            let k = scores[0].class_dice.len();
            let class_dsc =
                (0..k).map(|c| 100.0 * scores.iter().map(|s| s.class_dice[c]).sum::<f64>() / scores.len() as f64).collect();
            let e = pooled.entry(m).or_default();
            e.0.extend(&dsc);
            e.1.extend(&hd);
            cells.push(CellResult {
                method: m,
                domain: site.domain_id.clone(),
                dsc: MeanStd::of(&dsc),
                hd: MeanStd::of(&hd),
                class_dsc,
                images: scores,
            });
        }
    }
    let after = models.segmenter.params().checksum();
    if before != after {
        return Err(Error::Integrity("segmenter parameters changed during evaluation".into()));
    }
    Ok(MetricsReport {
        source: source.domain_id.clone(),
        targets: targets.iter().map(|t| t.domain_id.clone()).collect(),
        cells,
        overall: pooled.into_iter().map(|(m, (d, h))| (m, (MeanStd::of(&d), MeanStd::of(&h)))).collect(),
        segmenter_checksum: after,
    })
}
