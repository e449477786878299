//! Greedy in-order one-to-one matching of event times, shared by the beat
//! hit rate and the synthetic alignment score.

/// Number of `anchors` matched to a distinct `candidates` entry within
/// `tolerance`. Both slices must be sorted ascending. Each anchor takes the
/// earliest unmatched candidate inside its window; for equal-width windows on
/// sorted sequences this is a maximum matching.
pub fn greedy_match_count(anchors: &[f64], candidates: &[f64], tolerance: f64) -> usize {
    let mut matched = 0;
    let mut j = 0;
    for &a in anchors {
        while j < candidates.len() && candidates[j] < a - tolerance {
            j += 1;
        }
        if j < candidates.len() && candidates[j] <= a + tolerance {
            matched += 1;
            j += 1;
        }
    }
    matched
}
