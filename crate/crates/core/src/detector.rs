//! Judge scores and the threshold rule.
//!
//! The prototype path scores a graph by its largest FGW similarity to any
//! prototype and never touches the diffusion model. The reconstruction
//! baseline denoises the graph and compares encoder embeddings of input and
//! output.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;
use std::time::{Duration, Instant};

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{reconstruct, ScoreNetParams, SdeConfig};
use crate::encoder::{cosine_similarity, encode, EncoderParams};
use crate::error::{Error, Result};
use crate::fgw::{fgw_distance, similarity_from_distance, FgwConfig};
use crate::graph::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pgr,
    GrBaseline,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Pgr => "pgr",
            Method::GrBaseline => "gr_baseline",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgr" => Ok(Method::Pgr),
            "gr_baseline" => Ok(Method::GrBaseline),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct JudgeScore {
    pub graph_id: String,
    pub score: f64,
    pub method: Method,
    pub elapsed: Duration,
    pub reverse_steps_used: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Id,
    Ood,
}

/// `Id` iff `score > tau`; a score equal to the threshold is `Ood`.
pub fn detect(j: &JudgeScore, tau: f64) -> Decision {
    if j.score > tau {
        Decision::Id
    } else {
        Decision::Ood
    }
}

/// Mean ID score minus mean OOD score.
pub fn score_gap(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::Empty("score gap needs scores on both sides".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(id_scores) - mean(ood_scores))
}

/// Options for the prototype path.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct PgrOptions {
    /// Stop scanning once a similarity reaches this value. Off by default so
    /// every prototype is compared.
    pub early_exit: Option<f64>,
}

/// Largest similarity to any prototype; no diffusion is run.
pub fn judge_score_pgr(
    g_test: &Graph,
    prototypes: &[Graph],
    fgw: &FgwConfig,
) -> Result<JudgeScore> {
    judge_score_pgr_with(g_test, prototypes, fgw, PgrOptions::default())
}

pub fn judge_score_pgr_with(
    g_test: &Graph,
    prototypes: &[Graph],
    fgw: &FgwConfig,
    opts: PgrOptions,
) -> Result<JudgeScore> {
    if prototypes.is_empty() {
        return Err(Error::Empty("prototype list is empty".into()));
    }
    let start = Instant::now();
    let mut best = f64::NEG_INFINITY;
    for p in prototypes {
        let d = fgw_distance(p, g_test, fgw)?.value;
        best = best.max(similarity_from_distance(d));
        if opts.early_exit.is_some_and(|b| best >= b) {
            break;
        }
    }
    Ok(JudgeScore {
        graph_id: g_test.id().to_string(),
        score: best,
        method: Method::Pgr,
        elapsed: start.elapsed(),
        reverse_steps_used: 0,
    })
}

/// Largest cosine similarity between the encoder embedding of `g_test` and
/// precomputed prototype embeddings. Used to compare the FGW similarity
/// against an embedding similarity over the same prototypes.
pub fn judge_score_embedding(
    g_test: &Graph,
    prototype_embeddings: &[Array1<f64>],
    encoder: &EncoderParams,
) -> Result<f64> {
    if prototype_embeddings.is_empty() {
        return Err(Error::Empty("prototype list is empty".into()));
    }
    let z = encode(g_test, encoder)?;
    let mut best = f64::NEG_INFINITY;
    for p in prototype_embeddings {
        best = best.max(cosine_similarity(&z, p)?.value);
    }
    Ok(best)
}

/// Reconstruction baseline: cosine similarity between the encodings of the
/// graph and its reconstruction from `t_perturb`.
pub fn judge_score_gr<R: Rng + ?Sized>(
    g_test: &Graph,
    params: &ScoreNetParams,
    encoder: &EncoderParams,
    sde: &SdeConfig,
    t_perturb: f64,
    rng: &mut R,
) -> Result<JudgeScore> {
    let start = Instant::now();
    let rebuilt = reconstruct(g_test, params, sde, t_perturb, rng)?;
    let score = cosine_similarity(&encode(g_test, encoder)?, &encode(&rebuilt, encoder)?)?.value;
    Ok(JudgeScore {
        graph_id: g_test.id().to_string(),
        score,
        method: Method::GrBaseline,
        elapsed: start.elapsed(),
        reverse_steps_used: if t_perturb > 0.0 {
            sde.num_steps as u64
        } else {
            0
        },
    })
}

pub const SCORES_HEADER: &str = "graph_id,score,method,elapsed_ms,reverse_steps";

/// Writes the scores CSV. Scores use the shortest round-trip float format.
pub fn write_scores<W: Write>(mut w: W, scores: &[JudgeScore]) -> Result<()> {
    writeln!(w, "{SCORES_HEADER}")?;
    for s in scores {
        if s.graph_id.contains([',', '\n', '\r']) {
            return Err(Error::InvalidArgument(format!(
                "graph id `{}` cannot be written to a CSV field",
                s.graph_id
            )));
        }
        writeln!(
            w,
            "{},{},{},{},{}",
            s.graph_id,
            s.score,
            s.method,
            s.elapsed.as_secs_f64() * 1e3,
            s.reverse_steps_used
        )?;
    }
    Ok(())
}

pub fn read_scores<R: Read>(r: R) -> Result<Vec<JudgeScore>> {
    let mut lines = BufReader::new(r).lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim_end() != SCORES_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{SCORES_HEADER}`"),
        });
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            line: k + 2,
            message,
        };
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        let [id, score, method, ms, steps] = fields[..] else {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        };
        let ms: f64 = ms.parse().map_err(|e| bad(format!("elapsed_ms: {e}")))?;
        if !(ms >= 0.0 && ms.is_finite()) {
            return Err(bad("elapsed_ms must be finite and nonnegative".into()));
        }
        out.push(JudgeScore {
            graph_id: id.to_string(),
            score: score.parse().map_err(|e| bad(format!("score: {e}")))?,
            method: method.parse().map_err(|e: Error| bad(e.to_string()))?,
            elapsed: Duration::from_secs_f64(ms / 1e3),
            reverse_steps_used: steps
                .parse()
                .map_err(|e| bad(format!("reverse_steps: {e}")))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn js(score: f64) -> JudgeScore {
        JudgeScore {
            graph_id: "g".into(),
            score,
            method: Method::Pgr,
            elapsed: Duration::ZERO,
            reverse_steps_used: 0,
        }
    }

    #[test]
    fn threshold_rule() {
        assert_eq!(detect(&js(0.9), 0.5), Decision::Id);
        assert_eq!(detect(&js(0.5), 0.5), Decision::Ood);
        assert_eq!(detect(&js(0.1), 0.5), Decision::Ood);
    }

    #[test]
    fn gap_arithmetic() {
        assert_eq!(score_gap(&[1.0, 1.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(score_gap(&[0.3, 0.6], &[0.3, 0.6]).unwrap(), 0.0);
        assert!((score_gap(&[0.9, 0.7], &[0.4, 0.2]).unwrap() - 0.5).abs() < 1e-15);
        assert!(score_gap(&[], &[1.0]).is_err());
    }

    #[test]
    fn pgr_max_over_prototypes() {
        let fgw = FgwConfig::with_alpha(0.0);
        let g = Graph::from_edges("g", 1, &[], array![[0.0]]).unwrap();
        // feature-only distances 4.5 and 1.0
        let p1 = Graph::from_edges("p1", 1, &[], array![[4.5f64.sqrt()]]).unwrap();
        let p2 = Graph::from_edges("p2", 1, &[], array![[1.0]]).unwrap();
        let j = judge_score_pgr(&g, &[p1.clone(), p2], &fgw).unwrap();
        assert!((j.score - 0.5).abs() < 1e-12);
        assert_eq!(j.reverse_steps_used, 0);
        let single = judge_score_pgr(&g, &[p1], &fgw).unwrap();
        assert!((single.score - 1.0 / 5.5).abs() < 1e-12);
        let own = judge_score_pgr(&g, std::slice::from_ref(&g), &fgw).unwrap();
        assert!((own.score - 1.0).abs() < 1e-9);
        assert!(judge_score_pgr(&g, &[], &fgw).is_err());
    }

    #[test]
    fn scores_csv_round_trip() {
        let mut a = js(0.123456789012345);
        a.elapsed = Duration::from_micros(1500);
        let mut b = js(0.5);
        b.graph_id = "h".into();
        b.method = Method::GrBaseline;
        b.reverse_steps_used = 100;
        let mut buf = Vec::new();
        write_scores(&mut buf, &[a.clone(), b.clone()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(
            "graph_id,score,method,elapsed_ms,reverse_steps\ng,0.123456789012345,pgr,1.5,0\n"
        ));
        let back = read_scores(text.as_bytes()).unwrap();
        assert_eq!(back[0].score, a.score);
        assert_eq!(back[1].method, Method::GrBaseline);
        assert_eq!(back[1].reverse_steps_used, 100);
        assert!(read_scores("x,y\n".as_bytes()).is_err());
        assert!(read_scores(format!("{SCORES_HEADER}\ng,0.5,pgr,1\n").as_bytes()).is_err());
    }
}
