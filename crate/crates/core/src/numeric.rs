//! Reporting arithmetic shared by dataset metrics, benchmark scores and
//! energy reports.

/// Ties within this distance of an exact half are treated as ties, so
/// binary artefacts like `0.7395 -> 739.4999999` still round as halves.
const TIE_TOLERANCE: f64 = 1e-9;

/// Rounds to `dp` decimals with ties going to the even neighbour.
pub fn round_dp(x: f64, dp: u32) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let scale = 10f64.powi(dp as i32);
    let scaled = x * scale;
    let floor = scaled.floor();
    let frac = scaled - floor;
    let rounded = if (frac - 0.5).abs() < TIE_TOLERANCE {
        if floor % 2.0 == 0.0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        scaled.round()
    };
    rounded / scale
}

/// `100 * part / whole`, or 0 when `whole` is 0.
pub fn percent(part: f64, whole: f64) -> f64 {
    if whole == 0.0 {
        0.0
    } else {
        100.0 * part / whole
    }
}

/// Relative change from `base` to `new` in percent.
pub fn percent_change(base: f64, new: f64) -> f64 {
    percent(new - base, base)
}
