use nalgebra::{DMatrix, SymmetricEigen};

use crate::corpus::DatasetSplit;
use crate::encoder::{encode, Graph, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::objective::{cosine_distance, Lang, Vocabulary};

/// Expert outputs, gating weights and true languages for every frame of a split.
#[derive(Clone, Debug, Default)]
pub struct SplitAnalysis {
    pub split: String,
    /// `utterance_id:frame` per frame.
    pub frame_ids: Vec<String>,
    pub true_langs: Vec<Lang>,
    pub h_a: Vec<Vec<f64>>,
    pub h_b: Vec<Vec<f64>>,
    /// Weight on expert A per frame (MoE systems only).
    pub g_a: Vec<f64>,
}

/// Runs the encoder over `split`; the model must have language experts.
pub fn analyze_split(
    params: &Parameters,
    cfg: &ModelConfig,
    split: &DatasetSplit,
    vocab: &Vocabulary,
) -> Result<SplitAnalysis> {
    if !cfg.system.has_experts() {
        return Err(Error::Config(format!("{} has no language experts", cfg.system)));
    }
    let mut out = SplitAnalysis {
        split: split.name.clone(),
        ..SplitAnalysis::default()
    };
    for u in &split.utterances {
        let mut g = Graph::new(params);
        let enc = encode(&mut g, &u.features, cfg)?;
        let (a, b) = enc.experts.expect("checked above");
        let (ha, hb) = (g.value(a.node), g.value(b.node));
        let langs = u.frame_langs(vocab)?;
        for (j, &lang) in langs.iter().enumerate() {
            out.frame_ids.push(format!("{}:{j}", u.id));
            out.true_langs.push(lang);
            out.h_a.push(ha.row(j).to_vec());
            out.h_b.push(hb.row(j).to_vec());
        }
        if let Some(w) = enc.gating {
            let w = g.value(w.node);
            out.g_a.extend((0..u.len()).map(|j| w.at(j, 0)));
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GatingReport {
    /// Mean weight on expert A over frames whose true language is A.
    pub mean_g_a_on_a: f64,
    /// Mean weight on expert A over frames whose true language is B.
    pub mean_g_a_on_b: f64,
    pub frames_a: usize,
    pub frames_b: usize,
}

pub fn gating_report(analysis: &SplitAnalysis) -> Result<GatingReport> {
    if analysis.g_a.len() != analysis.true_langs.len() {
        return Err(Error::Config("gating report needs a gated (MoE) model".into()));
    }
    let (mut sa, mut na, mut sb, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (&g, &lang) in analysis.g_a.iter().zip(&analysis.true_langs) {
        match lang {
            Lang::A => {
                sa += g;
                na += 1;
            }
            Lang::B => {
                sb += g;
                nb += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok(GatingReport {
        mean_g_a_on_a: mean(sa, na),
        mean_g_a_on_b: mean(sb, nb),
        frames_a: na,
        frames_b: nb,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionPoint {
    pub frame_id: String,
    pub expert: Lang,
    pub x: f64,
    pub y: f64,
    pub true_lang: Lang,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparationReport {
    pub mean_cd: f64,
    pub p10_cd: f64,
    pub p50_cd: f64,
    pub p90_cd: f64,
    /// Frames skipped because an expert output had zero norm.
    pub zero_frames: usize,
    /// `None` when the pooled outputs have fewer than three distinct rows.
    pub points: Option<Vec<ProjectionPoint>>,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn separation_stats(analysis: &SplitAnalysis) -> SeparationReport {
    let mut cds: Vec<f64> = Vec::with_capacity(analysis.h_a.len());
    let mut zero_frames = 0;
    for (a, b) in analysis.h_a.iter().zip(&analysis.h_b) {
        match cosine_distance(a, b) {
            Some(cd) => cds.push(cd),
            None => zero_frames += 1,
        }
    }
    let mean_cd = if cds.is_empty() {
        f64::NAN
    } else {
        cds.iter().sum::<f64>() / cds.len() as f64
    };
    let mut sorted = cds.clone();
    sorted.sort_by(f64::total_cmp);

    let pooled: Vec<&[f64]> = analysis
        .h_a
        .iter()
        .chain(&analysis.h_b)
        .map(Vec::as_slice)
        .collect();
    let points = pca_2d(&pooled).map(|proj| {
        let n = analysis.h_a.len();
        proj.into_iter()
            .enumerate()
            .map(|(i, [x, y])| ProjectionPoint {
                frame_id: analysis.frame_ids[i % n].clone(),
                expert: if i < n { Lang::A } else { Lang::B },
                x,
                y,
                true_lang: analysis.true_langs[i % n],
            })
            .collect()
    });
    SeparationReport {
        mean_cd,
        p10_cd: percentile(&sorted, 0.1),
        p50_cd: percentile(&sorted, 0.5),
        p90_cd: percentile(&sorted, 0.9),
        zero_frames,
        points,
    }
}

/// Projects rows onto the top two principal axes. Each axis is oriented so
/// its largest-magnitude loading is positive. Returns `None` with fewer than
/// three distinct rows.
pub fn pca_2d(rows: &[&[f64]]) -> Option<Vec<[f64; 2]>> {
    let mut distinct: Vec<&[f64]> = rows.to_vec();
    distinct.sort_by(|a, b| a.iter().zip(*b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    distinct.dedup();
    if distinct.len() < 3 {
        return None;
    }
    let d = rows[0].len();
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(*r) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, k| rows[i][k] - mean[k]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(2)
        .map(|&c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let lead = v
                .iter()
                .enumerate()
                .fold(0, |best, (k, x)| if x.abs() > v[best].abs() { k } else { best });
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let coord = |i: usize, axis: &[f64]| (0..d).map(|k| centered[(i, k)] * axis[k]).sum::<f64>();
    Some(
        (0..n)
            .map(|i| [coord(i, &axes[0]), axes.get(1).map_or(0.0, |a| coord(i, a))])
            .collect(),
    )
}
