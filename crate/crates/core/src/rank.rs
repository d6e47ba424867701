//! Kendall rank correlation, plain and tie-corrected.
//!
//! Both statistics are built from integer pair counts, so the pair
//! enumeration and the merge-sort variant produce bit-identical floats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Three-valued sign: -1, 0 or +1.
pub fn sign3(t: f64) -> i8 {
    if t > 0.0 {
        1
    } else if t < 0.0 {
        -1
    } else {
        0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    /// `2 (N_c - N_d) / (n (n - 1))`.
    pub rho: f64,
    /// `(N_c - N_d) / sqrt((n0 - T_x)(n0 - T_y))` with `n0 = n(n-1)/2`.
    pub rho_tilde: f64,
    pub n_concordant: u64,
    pub n_discordant: u64,
    pub ties_x: u64,
    pub ties_y: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PairCounts {
    n: u64,
    concordant: u64,
    discordant: u64,
    ties_x: u64,
    ties_y: u64,
}

impl PairCounts {
    fn report(self) -> Result<RankReport> {
        let n0 = self.n * (self.n - 1) / 2;
        let dx = n0 - self.ties_x;
        let dy = n0 - self.ties_y;
        if dx == 0 || dy == 0 {
            return Err(Error::Degenerate(
                "all values tied in one variable; tie-corrected coefficient undefined".into(),
            ));
        }
        let s = self.concordant as f64 - self.discordant as f64;
        Ok(RankReport {
            rho: s / n0 as f64,
            rho_tilde: (s / ((dx as u128 * dy as u128) as f64).sqrt()).clamp(-1.0, 1.0),
            n_concordant: self.concordant,
            n_discordant: self.discordant,
            ties_x: self.ties_x,
            ties_y: self.ties_y,
        })
    }
}

fn check_inputs(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Alignment(format!("lengths differ: {} vs {}", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::Validation("Kendall correlation needs at least two observations".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite value in Kendall input".into()));
    }
    Ok(())
}

/// Reference implementation over all unordered pairs, O(n^2).
pub fn kendall(xs: &[f64], ys: &[f64]) -> Result<RankReport> {
    check_inputs(xs, ys)?;
    let n = xs.len();
    let mut c = PairCounts { n: n as u64, concordant: 0, discordant: 0, ties_x: 0, ties_y: 0 };
    for i in 0..n {
        for j in (i + 1)..n {
            let sx = sign3(xs[i] - xs[j]);
            let sy = sign3(ys[i] - ys[j]);
            if sx == 0 {
                c.ties_x += 1;
            }
            if sy == 0 {
                c.ties_y += 1;
            }
            match sx * sy {
                1 => c.concordant += 1,
                -1 => c.discordant += 1,
                _ => {}
            }
        }
    }
    c.report()
}

fn tied_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Counts inversions of `v` by merge sort, sorting it in place.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Knight's O(n log n) algorithm. Produces the same counts, and hence the
/// same floats, as [`kendall`].
pub fn kendall_fast(xs: &[f64], ys: &[f64]) -> Result<RankReport> {
    check_inputs(xs, ys)?;
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]).then(ys[a].total_cmp(&ys[b])));

    let sorted_x: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
    let ties_x = tied_pairs(&sorted_x);
    // pairs tied in both coordinates
    let mut ties_xy = 0u64;
    let mut run = 1u64;
    for w in order.windows(2) {
        if xs[w[0]] == xs[w[1]] && ys[w[0]] == ys[w[1]] {
            run += 1;
        } else {
            ties_xy += run * (run - 1) / 2;
            run = 1;
        }
    }
    ties_xy += run * (run - 1) / 2;

    let mut y_by_x: Vec<f64> = order.iter().map(|&i| ys[i]).collect();
    let mut buf = vec![0.0; n];
    let discordant = merge_count(&mut y_by_x, &mut buf);
    let ties_y = tied_pairs(&y_by_x);

    let n0 = (n as u64) * (n as u64 - 1) / 2;
    let concordant = n0 + ties_xy - ties_x - ties_y - discordant;
    PairCounts { n: n as u64, concordant, discordant, ties_x, ties_y }.report()
}

/// Kendall statistics within equal-count bins of a conditioning variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedRank {
    /// Tie-corrected coefficient per bin; `None` where undefined.
    pub per_bin: Vec<Option<f64>>,
    /// Smallest defined per-bin coefficient.
    pub min_rho_tilde: Option<f64>,
}

/// Approximates the conditional coefficient given `cond` by splitting the
/// rows into `bins` equal-count groups sorted on `cond`.
pub fn binned_kendall(cond: &[f64], xs: &[f64], ys: &[f64], bins: usize) -> Result<BinnedRank> {
    check_inputs(xs, ys)?;
    if cond.len() != xs.len() {
        return Err(Error::Alignment("conditioning variable length differs".into()));
    }
    if bins == 0 || bins > xs.len() {
        return Err(Error::Config(format!("invalid bin count {bins}")));
    }
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cond[a].total_cmp(&cond[b]));
    let mut per_bin = Vec::with_capacity(bins);
    for b in 0..bins {
        let lo = b * n / bins;
        let hi = (b + 1) * n / bins;
        let bx: Vec<f64> = order[lo..hi].iter().map(|&i| xs[i]).collect();
        let by: Vec<f64> = order[lo..hi].iter().map(|&i| ys[i]).collect();
        per_bin.push(if bx.len() < 2 { None } else { kendall_fast(&bx, &by).ok().map(|r| r.rho_tilde) });
    }
    let min_rho_tilde = per_bin.iter().flatten().cloned().reduce(f64::min);
    Ok(BinnedRank { per_bin, min_rho_tilde })
}
