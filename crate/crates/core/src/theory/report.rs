use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bounded_block, preln_block, Block, TheoryCase, IDENTITY_TOLERANCE};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub n_cases: usize,
    pub dim: usize,
    pub hidden: usize,
    pub scales: Vec<f64>,
    pub seed: u64,
    /// Multiplies every bound before comparison. Anything below 1 is a
    /// deliberately corrupted bound, used to check the detector.
    pub bound_scale: f64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            n_cases: 1000,
            dim: 8,
            hidden: 32,
            scales: vec![1.0, 10.0, 100.0, 1000.0],
            seed: 0,
            bound_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case: usize,
    pub scale: f64,
    pub block: Block,
    pub label: usize,
    pub loss: f64,
    pub max_entry: f64,
    /// Peri-LN and Post-LN only.
    pub bound: Option<f64>,
    /// Pre-LN only: worst gap between autodiff and the closed form.
    pub identity_error: Option<f64>,
    pub violated: bool,
}

/// Aggregate over all cases of one (scale, block).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub scale: f64,
    pub block: Block,
    pub cases: usize,
    pub max_entry: f64,
    pub median_max_entry: f64,
    pub max_bound: Option<f64>,
    /// Largest `max_entry / bound` seen; at most 1 when the bound holds.
    pub max_bound_usage: Option<f64>,
    pub max_identity_error: Option<f64>,
    pub violations: usize,
    /// Cases skipped because the bound was undefined.
    pub undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropositionReport {
    pub options: ReportOptions,
    pub rows: Vec<ScaleRow>,
    pub cases: Vec<CaseRecord>,
    pub violations: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs every block on `n_cases` random cases at every scale injection.
///
/// Case `i` shares its weights across scales; labels are chosen per block as
/// the smallest logit so `p^ - y` stays of order one as `h` grows.
pub fn proposition_report(options: &ReportOptions) -> Result<PropositionReport> {
    let mut cases = Vec::new();
    let mut rows = Vec::new();
    let base: Vec<TheoryCase> = (0..options.n_cases)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            rng.set_stream(i as u64);
            TheoryCase::random(&mut rng, options.dim, options.hidden)
        })
        .collect();
    for &scale in &options.scales {
        for block in Block::ALL {
            let mut recs = Vec::with_capacity(base.len());
            let mut undefined = 0;
            for (i, c) in base.iter().enumerate() {
                let c = c.clone().with_scale(scale).with_adversarial_label(block)?;
                let rec = match block {
                    Block::PreLn => {
                        let r = preln_block(&c)?;
                        let max_entry = r.autodiff.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                        CaseRecord {
                            case: i,
                            scale,
                            block,
                            label: c.label,
                            loss: r.loss,
                            max_entry,
                            bound: None,
                            identity_error: Some(r.max_abs_error),
                            violated: !(r.max_abs_error < IDENTITY_TOLERANCE),
                        }
                    }
                    _ => match bounded_block(&c, block, options.bound_scale) {
                        Ok(r) => CaseRecord {
                            case: i,
                            scale,
                            block,
                            label: c.label,
                            loss: r.loss,
                            max_entry: r.max_entry,
                            bound: Some(r.bound),
                            identity_error: None,
                            violated: r.violations > 0,
                        },
                        Err(crate::Error::UndefinedBound(_)) => {
                            undefined += 1;
                            continue;
                        }
                        Err(e) => return Err(e),
                    },
                };
                recs.push(rec);
            }
            let usage = recs
                .iter()
                .filter_map(|r| r.bound.filter(|&b| b > 0.0).map(|b| r.max_entry / b))
                .fold(None, |m: Option<f64>, u| Some(m.map_or(u, |m| m.max(u))));
            rows.push(ScaleRow {
                scale,
                block,
                cases: recs.len(),
                max_entry: recs.iter().fold(0.0, |m, r| m.max(r.max_entry)),
                median_max_entry: median(recs.iter().map(|r| r.max_entry).collect()),
                max_bound: recs.iter().filter_map(|r| r.bound).reduce(f64::max),
                max_bound_usage: usage,
                max_identity_error: recs.iter().filter_map(|r| r.identity_error).reduce(f64::max),
                violations: recs.iter().filter(|r| r.violated).count(),
                undefined,
            });
            cases.extend(recs);
        }
    }
    let violations = rows.iter().map(|r| r.violations).sum();
    Ok(PropositionReport {
        options: options.clone(),
        rows,
        cases,
        violations,
    })
}

impl PropositionReport {
    pub fn row(&self, scale: f64, block: Block) -> Option<&ScaleRow> {
        self.rows.iter().find(|r| r.scale == scale && r.block == block)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per (scale, block), then a verdict.
    pub fn to_text(&self) -> String {
        let o = &self.options;
        let mut s = format!(
            "gradient checks: {} cases, D={}, H={}, seed {}\n",
            o.n_cases, o.dim, o.hidden, o.seed
        );
        if o.bound_scale != 1.0 {
            s.push_str(&format!("bounds multiplied by {}\n", o.bound_scale));
        }
        s.push_str(&format!(
            "{:>8}  {:<8} {:>12} {:>12} {:>12} {:>10} {:>10}\n",
            "scale", "block", "max |dW2|", "median", "max bound", "usage", "violations"
        ));
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3e}"));
            let check = match r.block {
                Block::PreLn => format!("id err {}", opt(r.max_identity_error)),
                _ => opt(r.max_bound_usage),
            };
            s.push_str(&format!(
                "{:>8}  {:<8} {:>12.3e} {:>12.3e} {:>12} {:>10} {:>10}\n",
                r.scale,
                r.block.label(),
                r.max_entry,
                r.median_max_entry,
                opt(r.max_bound),
                check,
                r.violations
            ));
        }
        s.push_str(&if self.violations == 0 {
            "PASS: no violations\n".to_string()
        } else {
            format!("FAIL: {} violations\n", self.violations)
        });
        s
    }
}
