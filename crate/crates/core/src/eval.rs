//! WER, oracle WER, lattice density, RTF and the MAPSSWE paired test.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::TokenId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOps {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

impl EditOps {
    pub fn errors(&self) -> usize {
        self.sub + self.del + self.ins
    }
}

/// Minimal Levenshtein alignment of `hyp` against `reference`. Among
/// alignments with the fewest edits the one with the fewest insertions and
/// deletions wins, which fixes `(S, D, I)` uniquely.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hyp.len());
    // cost = (edits, indels); dp[i][j] aligns reference[..i] with hyp[..j]
    let mut dp = vec![vec![(0usize, 0usize); m + 1]; n + 1];
    for i in 0..=n {
        dp[i][0] = (i, i);
    }
    for j in 0..=m {
        dp[0][j] = (j, j);
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dp[i - 1][j - 1];
            let diag = if reference[i - 1] == hyp[j - 1] {
                diag
            } else {
                (diag.0 + 1, diag.1)
            };
            let del = (dp[i - 1][j].0 + 1, dp[i - 1][j].1 + 1);
            let ins = (dp[i][j - 1].0 + 1, dp[i][j - 1].1 + 1);
            dp[i][j] = diag.min(del).min(ins);
        }
    }
    let (edits, indels) = dp[n][m];
    // D − I = n − m and D + I = indels
    let del = ((indels as i64 + n as i64 - m as i64) / 2) as usize;
    let ins = indels - del;
    EditOps {
        sub: edits - indels,
        del,
        ins,
    }
}

/// Per-utterance scoring of one hypothesis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UttScore {
    pub id: u32,
    pub ops: EditOps,
    pub n_ref: usize,
}

/// Corpus WER in percent.
pub fn wer(scores: &[UttScore]) -> Result<f64> {
    let n: usize = scores.iter().map(|s| s.n_ref).sum();
    if n == 0 {
        return Err(Error::invalid("WER needs at least one reference token"));
    }
    let e: usize = scores.iter().map(|s| s.ops.errors()).sum();
    Ok(100.0 * e as f64 / n as f64)
}

/// WER of the first hypothesis of each list.
pub fn one_best_wer(lists: &[Vec<Vec<TokenId>>], refs: &[Vec<TokenId>]) -> Result<f64> {
    check_lists(lists, refs)?;
    let scores: Vec<UttScore> = lists
        .iter()
        .zip(refs)
        .enumerate()
        .map(|(i, (l, r))| UttScore {
            id: i as u32,
            ops: edit_distance(r, &l[0]),
            n_ref: r.len(),
        })
        .collect();
    wer(&scores)
}

fn check_lists(lists: &[Vec<Vec<TokenId>>], refs: &[Vec<TokenId>]) -> Result<()> {
    if lists.len() != refs.len() {
        return Err(Error::invalid("one N-best list per reference is required"));
    }
    if lists.iter().any(|l| l.is_empty()) {
        return Err(Error::invalid("empty N-best list"));
    }
    Ok(())
}

/// WER when every utterance picks its lowest-error hypothesis.
pub fn oracle_wer(lists: &[Vec<Vec<TokenId>>], refs: &[Vec<TokenId>]) -> Result<f64> {
    check_lists(lists, refs)?;
    let scores: Vec<UttScore> = lists
        .iter()
        .zip(refs)
        .enumerate()
        .map(|(i, (l, r))| {
            let ops = l
                .iter()
                .map(|h| edit_distance(r, h))
                .min_by_key(|o| o.errors())
                .expect("non-empty list");
            UttScore {
                id: i as u32,
                ops,
                n_ref: r.len(),
            }
        })
        .collect();
    wer(&scores)
}

/// `Σ_utt |distinct token types in the list| / Σ_utt N_ref`.
pub fn lattice_density(lists: &[Vec<Vec<TokenId>>], refs: &[Vec<TokenId>]) -> Result<f64> {
    check_lists(lists, refs)?;
    let n: usize = refs.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::invalid(
            "lattice density needs at least one reference token",
        ));
    }
    let types: usize = lists
        .iter()
        .map(|l| l.iter().flatten().collect::<BTreeSet<_>>().len())
        .sum();
    Ok(types as f64 / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mapsswe {
    pub z: f64,
    pub significant: bool,
}

/// Two-sided matched-pairs test at α = 0.05 with one segment per
/// utterance. `d_i = err_a_i − err_b_i`, `z = mean(d) / (sd(d)/√n)` with
/// the sample standard deviation. All-zero differences give `z = 0`; a
/// constant nonzero difference gives an infinite, significant `z`.
pub fn mapsswe(err_a: &[f64], err_b: &[f64]) -> Result<Mapsswe> {
    if err_a.len() != err_b.len() {
        return Err(Error::invalid(
            "systems must be scored on the same segments",
        ));
    }
    let n = err_a.len();
    if n < 2 {
        return Err(Error::invalid("at least two segments are required"));
    }
    let d: Vec<f64> = err_a.iter().zip(err_b).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let z = if sd == 0.0 {
        if mean == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(mean)
        }
    } else {
        mean / (sd / (n as f64).sqrt())
    };
    Ok(Mapsswe {
        z,
        significant: z.abs() > 1.96,
    })
}

/// Decode seconds per audio second.
pub fn rtf(decode_s: f64, audio_s: f64) -> Result<f64> {
    if !(audio_s > 0.0) {
        return Err(Error::invalid("audio duration must be positive"));
    }
    Ok(decode_s / audio_s)
}

/// `(rtf, baseline_rtf / rtf)`.
pub fn rtf_and_speedup(decode_s: f64, audio_s: f64, baseline_rtf: f64) -> Result<(f64, f64)> {
    let r = rtf(decode_s, audio_s)?;
    Ok((r, baseline_rtf / r))
}

/// Two-decimal rendering, e.g. `1.44`.
pub fn format_speedup(s: f64) -> String {
    format!("{s:.2}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub utts: Vec<UttScore>,
    pub wer: f64,
    pub oracle_wer: f64,
    pub lattice_density: f64,
    pub rtf: Option<f64>,
}

/// Scores N-best lists (best first) against references paired by index.
pub fn evaluate(
    ids: &[u32],
    lists: &[Vec<Vec<TokenId>>],
    refs: &[Vec<TokenId>],
    timing: Option<(f64, f64)>,
) -> Result<EvalReport> {
    check_lists(lists, refs)?;
    if ids.len() != refs.len() {
        return Err(Error::invalid("one id per reference is required"));
    }
    let utts: Vec<UttScore> = ids
        .iter()
        .zip(lists.iter().zip(refs))
        .map(|(&id, (l, r))| UttScore {
            id,
            ops: edit_distance(r, &l[0]),
            n_ref: r.len(),
        })
        .collect();
    Ok(EvalReport {
        wer: wer(&utts)?,
        oracle_wer: oracle_wer(lists, refs)?,
        lattice_density: lattice_density(lists, refs)?,
        rtf: timing.map(|(d, a)| rtf(d, a)).transpose()?,
        utts,
    })
}

/// One point on a WER/RTF trade-off curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub label: String,
    pub rtf: f64,
    pub wer: f64,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Static SVG scatter of WER against RTF, points joined in input order.
pub fn tradeoff_svg(points: &[TradeoffPoint]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const PAD: f64 = 60.0;
    let range = |f: &dyn Fn(&TradeoffPoint) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5 * lo.abs().max(1e-3), hi + 0.5 * hi.abs().max(1e-3))
        } else {
            let m = 0.08 * (hi - lo);
            (lo - m, hi + m)
        }
    };
    let (x0, x1) = range(&|p| p.rtf);
    let (y0, y1) = range(&|p| p.wer);
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.4}</text>"#,
            sx(xv),
            H - PAD + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.2}</text>"#,
            PAD - 6.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">RTF</text>"#,
        W / 2.0,
        H - 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">WER (%)</text>"#,
        H / 2.0,
        H / 2.0
    );
    if points.len() > 1 {
        let path: Vec<String> = points
            .iter()
            .map(|p| format!("{:.1},{:.1}", sx(p.rtf), sy(p.wer)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="steelblue"/>"#,
            path.join(" ")
        );
    }
    for p in points {
        let (x, y) = (sx(p.rtf), sy(p.wer));
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.1}" cy="{y:.1}" r="4" fill="steelblue"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            x + 6.0,
            y - 6.0,
            escape(&p.label)
        );
    }
    s.push_str("</svg>\n");
    s
}
