//! Error-rate scoring and the expert analyses (gating weights, separation).
//!
//! CSV outputs and their fixed headers:
//!
//! | file | columns |
//! |---|---|
//! | `score_report.csv` | `system,seed,split,decoder,utterances,ref_len,subs,ins,dels,mer,ref_a,errors_a,rate_a,ref_b,errors_b,rate_b` |
//! | `gating_report.csv` | `system,seed,split,frames_a,frames_b,mean_g_a_on_a,mean_g_a_on_b` |
//! | `separation_report.csv` | `system,seed,split,mean_cd,p10_cd,p50_cd,p90_cd,zero_frames` |
//! | `projection_points.csv` | `frame_id,expert,x,y,true_lang` |

mod analysis;
mod score;

use std::io::Write;

pub use analysis::{
    analyze_split, gating_report, pca_2d, separation_stats, GatingReport, ProjectionPoint, SeparationReport,
    SplitAnalysis,
};
pub use score::{compute_mer, edit_distance, Alignment, EditOp, ErrorCounts, ScoreReport};

pub const SCORE_HEADER: [&str; 16] = [
    "system", "seed", "split", "decoder", "utterances", "ref_len", "subs", "ins", "dels", "mer", "ref_a", "errors_a",
    "rate_a", "ref_b", "errors_b", "rate_b",
];
pub const GATING_HEADER: [&str; 7] = ["system", "seed", "split", "frames_a", "frames_b", "mean_g_a_on_a", "mean_g_a_on_b"];
pub const SEPARATION_HEADER: [&str; 8] = ["system", "seed", "split", "mean_cd", "p10_cd", "p50_cd", "p90_cd", "zero_frames"];
pub const PROJECTION_HEADER: [&str; 5] = ["frame_id", "expert", "x", "y", "true_lang"];

/// Identifies which run a report row belongs to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowKey {
    pub system: String,
    pub seed: u64,
    pub split: String,
}

impl RowKey {
    fn fields(&self) -> [String; 3] {
        [self.system.clone(), self.seed.to_string(), self.split.clone()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub key: RowKey,
    pub decoder: String,
    pub report: ScoreReport,
}

fn writer<W: Write>(w: W, header: &[&str]) -> csv::Result<csv::Writer<W>> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    Ok(out)
}

pub fn write_score_csv<W: Write>(w: W, rows: &[ScoreRow]) -> csv::Result<()> {
    let mut out = writer(w, &SCORE_HEADER)?;
    for r in rows {
        let rep = &r.report;
        let mut rec: Vec<String> = r.key.fields().into();
        rec.extend([
            r.decoder.clone(),
            rep.utterances.to_string(),
            rep.mixed.ref_len.to_string(),
            rep.mixed.subs.to_string(),
            rep.mixed.ins.to_string(),
            rep.mixed.dels.to_string(),
            rep.mer().to_string(),
            rep.lang_a.ref_len.to_string(),
            rep.lang_a.errors().to_string(),
            rep.lang_a.rate().to_string(),
            rep.lang_b.ref_len.to_string(),
            rep.lang_b.errors().to_string(),
            rep.lang_b.rate().to_string(),
        ]);
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_gating_csv<W: Write>(w: W, rows: &[(RowKey, GatingReport)]) -> csv::Result<()> {
    let mut out = writer(w, &GATING_HEADER)?;
    for (key, g) in rows {
        let mut rec: Vec<String> = key.fields().into();
        rec.extend([
            g.frames_a.to_string(),
            g.frames_b.to_string(),
            g.mean_g_a_on_a.to_string(),
            g.mean_g_a_on_b.to_string(),
        ]);
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_separation_csv<W: Write>(w: W, rows: &[(RowKey, SeparationReport)]) -> csv::Result<()> {
    let mut out = writer(w, &SEPARATION_HEADER)?;
    for (key, s) in rows {
        let mut rec: Vec<String> = key.fields().into();
        rec.extend([
            s.mean_cd.to_string(),
            s.p10_cd.to_string(),
            s.p50_cd.to_string(),
            s.p90_cd.to_string(),
            s.zero_frames.to_string(),
        ]);
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_projection_csv<W: Write>(w: W, points: &[ProjectionPoint]) -> csv::Result<()> {
    let mut out = writer(w, &PROJECTION_HEADER)?;
    for p in points {
        out.write_record([
            p.frame_id.clone(),
            p.expert.to_string(),
            p.x.to_string(),
            p.y.to_string(),
            p.true_lang.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_csv_layout() {
        let rows = vec![ScoreRow {
            key: RowKey {
                system: "moe_lae+cd".into(),
                seed: 1,
                split: "dev_B_heavy".into(),
            },
            decoder: "greedy".into(),
            report: ScoreReport::default(),
        }];
        let mut buf = Vec::new();
        write_score_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), SCORE_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "moe_lae+cd,1,dev_B_heavy,greedy,0,0,0,0,0,0,0,0,0,0,0,0");
    }

    #[test]
    fn projection_csv_layout() {
        let mut buf = Vec::new();
        let p = ProjectionPoint {
            frame_id: "u:0".into(),
            expert: crate::objective::Lang::B,
            x: 0.5,
            y: -1.0,
            true_lang: crate::objective::Lang::A,
        };
        write_projection_csv(&mut buf, &[p]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "frame_id,expert,x,y,true_lang\nu:0,B,0.5,-1,A\n");
    }
}
