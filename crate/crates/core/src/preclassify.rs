//! Unsupervised pseudo-labelling of a bitemporal pair.
//!
//! The log-ratio difference image is clustered with a two-stage fuzzy c-means
//! into changed / unchanged / intermediate pixels. Changed and unchanged
//! pixels become training patches; intermediate pixels are left out.

use std::io::Write;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{reflect_index, Grid, ImagePair};

/// Stacked input channels per pixel: I1, I2, DI.
pub const INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct DifferenceImage {
    /// Min-max normalized to [0, 1].
    pub values: Grid,
    pub raw_min: f64,
    pub raw_max: f64,
}

/// `|ln((I2 + 1) / (I1 + 1))|`, min-max normalized. A constant raw image
/// normalizes to all zeros.
pub fn log_ratio(pair: &ImagePair) -> Result<DifferenceImage> {
    let (h, w) = pair.dims();
    if pair.t1.dims() != pair.t2.dims() {
        return Err(Error::data("image extents differ"));
    }
    let mut raw = Vec::with_capacity(h * w);
    for (&a, &b) in pair.t1.data.iter().zip(&pair.t2.data) {
        if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::data(format!("intensities must be finite and nonnegative, found {a} / {b}")));
        }
        // ordered so that swapping the epochs gives bit-identical values
        let (small, large) = if a <= b { (a, b) } else { (b, a) };
        raw.push(((large + 1.0) / (small + 1.0)).ln());
    }
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let values =
        if span > 0.0 { raw.iter().map(|v| (v - lo) / span).collect() } else { vec![0.0; raw.len()] };
    Ok(DifferenceImage {
        values: Grid::new(h, w, values)?,
        raw_min: if raw.is_empty() { 0.0 } else { lo },
        raw_max: if raw.is_empty() { 0.0 } else { hi },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcmParams {
    pub fuzzifier: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FcmParams {
    fn default() -> Self {
        FcmParams { fuzzifier: 2.0, tol: 1e-5, max_iter: 100 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcmResult {
    pub clusters: usize,
    pub centroids: Vec<f64>,
    /// Row-major `[n, clusters]`.
    pub memberships: Vec<f64>,
    /// Objective after initialization and after every iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
    /// All inputs identical: everything was put in cluster 0.
    pub degenerate: bool,
}

impl FcmResult {
    pub fn membership(&self, i: usize) -> &[f64] {
        &self.memberships[i * self.clusters..(i + 1) * self.clusters]
    }

    /// Index of the largest membership, first wins on ties.
    pub fn hard_label(&self, i: usize) -> usize {
        let u = self.membership(i);
        let mut best = 0;
        for k in 1..u.len() {
            if u[k] > u[best] {
                best = k;
            }
        }
        best
    }
}

/// `x^e`, exact and cheap for the integer exponents of the default fuzzifier.
fn pow_fast(x: f64, e: f64) -> f64 {
    if e == 1.0 {
        x
    } else if e == 2.0 {
        x * x
    } else {
        x.powf(e)
    }
}

/// Memberships of `x` against `centroids`. Points sitting exactly on one or
/// more centroids split their membership evenly among those.
pub fn fcm_memberships(x: f64, centroids: &[f64], fuzzifier: f64, out: &mut [f64]) {
    let d2: Vec<f64> = centroids.iter().map(|v| (x - v) * (x - v)).collect();
    let zeros = d2.iter().filter(|&&d| d == 0.0).count();
    if zeros > 0 {
        for (o, &d) in out.iter_mut().zip(&d2) {
            *o = if d == 0.0 { 1.0 / zeros as f64 } else { 0.0 };
        }
        return;
    }
    let p = 1.0 / (fuzzifier - 1.0);
    for k in 0..centroids.len() {
        let s: f64 = d2.iter().map(|&dj| pow_fast(d2[k] / dj, p)).sum();
        out[k] = 1.0 / s;
    }
}

fn fcm_objective(values: &[f64], u: &[f64], centroids: &[f64], fuzzifier: f64) -> f64 {
    let c = centroids.len();
    values
        .iter()
        .enumerate()
        .map(|(i, x)| {
            (0..c).map(|k| pow_fast(u[i * c + k], fuzzifier) * (x - centroids[k]).powi(2)).sum::<f64>()
        })
        .sum()
}

fn distinct_count(values: &[f64]) -> usize {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    sorted.len()
}

/// Fuzzy c-means on scalar values.
///
/// Centroids start at the `(k + 0.5) / c` quantiles, so the result is a pure
/// function of the input. Stops when no membership moves by `tol` or more.
pub fn fcm(values: &[f64], clusters: usize, params: &FcmParams) -> Result<FcmResult> {
    if clusters < 2 {
        return Err(Error::invalid("fcm needs at least 2 clusters"));
    }
    if params.fuzzifier <= 1.0 {
        return Err(Error::invalid("fuzzifier must exceed 1"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("fcm input contains non-finite values"));
    }
    let distinct = distinct_count(values);
    if distinct <= 1 {
        let v = values.first().copied().unwrap_or(0.0);
        let mut memberships = vec![0.0; values.len() * clusters];
        for i in 0..values.len() {
            memberships[i * clusters] = 1.0;
        }
        return Ok(FcmResult {
            clusters,
            centroids: vec![v; clusters],
            memberships,
            objective: vec![0.0],
            iterations: 0,
            degenerate: true,
        });
    }
    if distinct < clusters {
        return Err(Error::invalid(format!(
            "fcm with {clusters} clusters needs as many distinct values, found {distinct}"
        )));
    }

    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut centroids: Vec<f64> = (0..clusters)
        .map(|k| {
            let q = (k as f64 + 0.5) / clusters as f64;
            sorted[((q * sorted.len() as f64) as usize).min(sorted.len() - 1)]
        })
        .collect();

    let n = values.len();
    let m = params.fuzzifier;
    let mut u = vec![0.0; n * clusters];
    for (i, &x) in values.iter().enumerate() {
        fcm_memberships(x, &centroids, m, &mut u[i * clusters..(i + 1) * clusters]);
    }
    let mut objective = vec![fcm_objective(values, &u, &centroids, m)];
    let mut next = vec![0.0; n * clusters];
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        for (k, centroid) in centroids.iter_mut().enumerate() {
            let mut num = 0.0;
            let mut den = 0.0;
            for (i, &x) in values.iter().enumerate() {
                let w = pow_fast(u[i * clusters + k], m);
                num += w * x;
                den += w;
            }
            if den > 0.0 {
                *centroid = num / den;
            }
        }
        let mut delta: f64 = 0.0;
        for (i, &x) in values.iter().enumerate() {
            let row = &mut next[i * clusters..(i + 1) * clusters];
            fcm_memberships(x, &centroids, m, row);
            for (a, b) in row.iter().zip(&u[i * clusters..(i + 1) * clusters]) {
                delta = delta.max((a - b).abs());
            }
        }
        std::mem::swap(&mut u, &mut next);
        objective.push(fcm_objective(values, &u, &centroids, m));
        if delta < params.tol {
            break;
        }
    }
    Ok(FcmResult { clusters, centroids, memberships: u, objective, iterations, degenerate: false })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PreclassLabel {
    Unchanged = 0,
    Intermediate = 1,
    Changed = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreclassLabels {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<PreclassLabel>,
    /// Per pixel, indexed by `PreclassLabel as usize`.
    pub memberships: Vec<[f64; 3]>,
    pub degenerate: bool,
}

impl PreclassLabels {
    fn all_unchanged(height: usize, width: usize) -> Self {
        PreclassLabels {
            height,
            width,
            labels: vec![PreclassLabel::Unchanged; height * width],
            memberships: vec![[1.0, 0.0, 0.0]; height * width],
            degenerate: true,
        }
    }

    pub fn count(&self, label: PreclassLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Which preclassifier feeds the sample miner.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preclassifier {
    Hierarchical,
    /// Single two-cluster FCM, no intermediate class.
    Fcm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreclassParams {
    pub coarse_clusters: usize,
    pub fcm: FcmParams,
}

impl Default for PreclassParams {
    fn default() -> Self {
        PreclassParams { coarse_clusters: 5, fcm: FcmParams::default() }
    }
}

fn sorted_order(centroids: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..centroids.len()).collect();
    order.sort_by(|&a, &b| centroids[a].total_cmp(&centroids[b]));
    order
}

/// Two-stage fuzzy c-means.
///
/// Stage one clusters the difference image into `coarse_clusters` groups.
/// Pixels of the highest group are clustered again into three: the top
/// becomes CHANGED, the middle INTERMEDIATE, the bottom UNCHANGED. The
/// second-highest coarse group is INTERMEDIATE; the rest are UNCHANGED.
pub fn hierarchical_fcm(di: &DifferenceImage, params: &PreclassParams) -> Result<PreclassLabels> {
    let (h, w) = di.values.dims();
    let values = &di.values.data;
    if params.coarse_clusters < 3 {
        return Err(Error::invalid("hierarchical fcm needs at least 3 coarse clusters"));
    }
    let stage1 = fcm(values, params.coarse_clusters, &params.fcm)?;
    if stage1.degenerate {
        log::warn!("difference image is constant; labelling every pixel unchanged");
        return Ok(PreclassLabels::all_unchanged(h, w));
    }
    let order = sorted_order(&stage1.centroids);
    let top = order[order.len() - 1];
    let second = order[order.len() - 2];

    let top_idx: Vec<usize> = (0..values.len()).filter(|&i| stage1.hard_label(i) == top).collect();
    let top_vals: Vec<f64> = top_idx.iter().map(|&i| values[i]).collect();
    // stage 2 needs three distinct values; otherwise the whole top group is changed
    let stage2 = if distinct_count(&top_vals) >= 3 {
        Some(fcm(&top_vals, 3, &params.fcm)?)
    } else {
        log::warn!("top cluster too small to split; labelling it changed");
        None
    };

    let mut labels = vec![PreclassLabel::Unchanged; values.len()];
    let mut memberships = vec![[0.0; 3]; values.len()];
    let mut u2 = [0.0; 3];
    let (s2_order, s2_centroids) = match &stage2 {
        Some(r) => (sorted_order(&r.centroids), r.centroids.clone()),
        None => (vec![0, 1, 2], Vec::new()),
    };
    for (i, &x) in values.iter().enumerate() {
        let u1 = stage1.membership(i);
        let (to_changed, to_mid, to_unchanged) = if stage2.is_some() {
            fcm_memberships(x, &s2_centroids, params.fcm.fuzzifier, &mut u2);
            (u2[s2_order[2]], u2[s2_order[1]], u2[s2_order[0]])
        } else {
            (1.0, 0.0, 0.0)
        };
        let rest: f64 = (0..u1.len()).filter(|&k| k != top && k != second).map(|k| u1[k]).sum();
        memberships[i] = [rest + u1[top] * to_unchanged, u1[second] + u1[top] * to_mid, u1[top] * to_changed];
        // top-cluster pixels are relabelled from stage 2 below
        if stage1.hard_label(i) == second {
            labels[i] = PreclassLabel::Intermediate;
        }
    }
    match &stage2 {
        Some(r) => {
            for (j, &i) in top_idx.iter().enumerate() {
                let k = r.hard_label(j);
                labels[i] = if k == s2_order[2] {
                    PreclassLabel::Changed
                } else if k == s2_order[1] {
                    PreclassLabel::Intermediate
                } else {
                    PreclassLabel::Unchanged
                };
            }
        }
        None => {
            for &i in &top_idx {
                labels[i] = PreclassLabel::Changed;
            }
        }
    }
    Ok(PreclassLabels { height: h, width: w, labels, memberships, degenerate: false })
}

/// Plain two-cluster FCM: the higher cluster is CHANGED, the lower UNCHANGED.
pub fn fcm_preclassify(di: &DifferenceImage, params: &PreclassParams) -> Result<PreclassLabels> {
    let (h, w) = di.values.dims();
    let r = fcm(&di.values.data, 2, &params.fcm)?;
    if r.degenerate {
        log::warn!("difference image is constant; labelling every pixel unchanged");
        return Ok(PreclassLabels::all_unchanged(h, w));
    }
    let (lo, hi) = if r.centroids[0] <= r.centroids[1] { (0, 1) } else { (1, 0) };
    let n = di.values.len();
    let mut labels = Vec::with_capacity(n);
    let mut memberships = Vec::with_capacity(n);
    for i in 0..n {
        let u = r.membership(i);
        memberships.push([u[lo], 0.0, u[hi]]);
        labels.push(if r.hard_label(i) == hi { PreclassLabel::Changed } else { PreclassLabel::Unchanged });
    }
    Ok(PreclassLabels { height: h, width: w, labels, memberships, degenerate: false })
}

pub fn preclassify(
    di: &DifferenceImage,
    method: Preclassifier,
    params: &PreclassParams,
) -> Result<PreclassLabels> {
    match method {
        Preclassifier::Hierarchical => hierarchical_fcm(di, params),
        Preclassifier::Fcm => fcm_preclassify(di, params),
    }
}

/// Per-pixel network input: `[3, H, W]` holding log1p-compressed I1 and I2
/// (jointly scaled to [0, 1]) and the normalized difference image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureStack {
    pub fn new(pair: &ImagePair, di: &DifferenceImage) -> Result<Self> {
        let (h, w) = pair.dims();
        if di.values.dims() != (h, w) {
            return Err(Error::data("difference image extent differs from the pair"));
        }
        let scale = pair.t1.data.iter().chain(&pair.t2.data).map(|v| v.ln_1p()).fold(0.0, f64::max);
        let norm = |v: f64| if scale > 0.0 { v.ln_1p() / scale } else { 0.0 };
        let mut data = Vec::with_capacity(INPUT_CHANNELS * h * w);
        data.extend(pair.t1.data.iter().map(|&v| norm(v)));
        data.extend(pair.t2.data.iter().map(|&v| norm(v)));
        data.extend_from_slice(&di.values.data);
        Ok(FeatureStack { height: h, width: w, data })
    }

    pub fn from_pair(pair: &ImagePair) -> Result<Self> {
        FeatureStack::new(pair, &log_ratio(pair)?)
    }

    /// Writes the `[3, 2r+1, 2r+1]` reflect-padded window centred on `(row, col)`.
    pub fn patch_into(&self, radius: usize, row: usize, col: usize, out: &mut Vec<f64>) {
        let r = radius as isize;
        let hw = self.height * self.width;
        for ch in 0..INPUT_CHANNELS {
            for dy in -r..=r {
                let y = reflect_index(row as isize + dy, self.height);
                for dx in -r..=r {
                    let x = reflect_index(col as isize + dx, self.width);
                    out.push(self.data[ch * hw + y * self.width + x]);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningParams {
    pub radius: usize,
    pub cap: usize,
    /// Take the same number of samples from both classes.
    pub balance: bool,
    pub seed: u64,
}

impl Default for MiningParams {
    fn default() -> Self {
        MiningParams { radius: 3, cap: 400, balance: true, seed: 0 }
    }
}

/// Labelled training patches. Label 1 is changed, 0 unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub radius: usize,
    pub channels: usize,
    /// Row-major `[n, channels, 2r+1, 2r+1]`.
    pub patches: Vec<f64>,
    pub labels: Vec<u8>,
    pub centers: Vec<(usize, usize)>,
}

const SAMPLES_MAGIC: &str = "CAMS";

impl SampleSet {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.side() * self.side()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let n = self.patch_len();
        &self.patches[i * n..(i + 1) * n]
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// `CAMS\n<count> <radius> <channels>\n`, then `(row u32, col u32, label u8)`
    /// per sample, then all patches as little-endian f64.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let _ = write!(out, "{SAMPLES_MAGIC}\n{} {} {}\n", self.len(), self.radius, self.channels);
        for (&(r, c), &l) in self.centers.iter().zip(&self.labels) {
            out.extend_from_slice(&(r as u32).to_le_bytes());
            out.extend_from_slice(&(c as u32).to_le_bytes());
            out.push(l);
        }
        for v in &self.patches {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header_end = bytes
            .iter()
            .enumerate()
            .filter(|(_, &b)| b == b'\n')
            .nth(1)
            .map(|(i, _)| i + 1)
            .ok_or_else(|| Error::corrupt("sample archive header"))?;
        let header = std::str::from_utf8(&bytes[..header_end])
            .map_err(|_| Error::corrupt("sample archive header is not text"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(SAMPLES_MAGIC) {
            return Err(Error::Format("missing CAMS magic".into()));
        }
        let mut num = || -> Result<usize> {
            parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::corrupt("sample archive header fields"))
        };
        let (count, radius, channels) = (num()?, num()?, num()?);
        let side = 2 * radius + 1;
        let plen = channels * side * side;
        let body = &bytes[header_end..];
        if body.len() != count * 9 + count * plen * 8 {
            return Err(Error::corrupt(format!(
                "sample archive body has {} bytes, expected {}",
                body.len(),
                count * 9 + count * plen * 8
            )));
        }
        let mut centers = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        for rec in body[..count * 9].chunks_exact(9) {
            let r = u32::from_le_bytes(rec[0..4].try_into().unwrap()) as usize;
            let c = u32::from_le_bytes(rec[4..8].try_into().unwrap()) as usize;
            if rec[8] > 1 {
                return Err(Error::corrupt(format!("sample label {} is not binary", rec[8])));
            }
            centers.push((r, c));
            labels.push(rec[8]);
        }
        let patches =
            body[count * 9..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(SampleSet { radius, channels, patches, labels, centers })
    }
}

/// Extracts labelled patches centred on CHANGED and UNCHANGED pixels.
///
/// Each class is subsampled uniformly (seeded) to at most `cap`; with
/// `balance` both classes get exactly `min(cap, n_changed, n_unchanged)`.
/// Output is in raster order of the centre pixel.
pub fn mine_samples(pair: &ImagePair, labels: &PreclassLabels, params: &MiningParams) -> Result<SampleSet> {
    let (h, w) = pair.dims();
    if (labels.height, labels.width) != (h, w) {
        return Err(Error::data("label map extent differs from the pair"));
    }
    let changed: Vec<usize> = (0..h * w).filter(|&i| labels.labels[i] == PreclassLabel::Changed).collect();
    let unchanged: Vec<usize> =
        (0..h * w).filter(|&i| labels.labels[i] == PreclassLabel::Unchanged).collect();
    if changed.is_empty() || unchanged.is_empty() {
        return Err(Error::data(format!(
            "no {} samples after preclassification ({} changed, {} unchanged); \
             adjust the clustering thresholds or check that the pair differs",
            if changed.is_empty() { "changed" } else { "unchanged" },
            changed.len(),
            unchanged.len()
        )));
    }
    let (take_c, take_u) = if params.balance {
        let n = params.cap.min(changed.len()).min(unchanged.len());
        (n, n)
    } else {
        (params.cap.min(changed.len()), params.cap.min(unchanged.len()))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut pick = |pool: &[usize], amount: usize| -> Vec<usize> {
        let mut chosen: Vec<usize> =
            index::sample(&mut rng, pool.len(), amount).into_iter().map(|j| pool[j]).collect();
        chosen.sort_unstable();
        chosen
    };
    let pc = pick(&changed, take_c);
    let pu = pick(&unchanged, take_u);
    let mut picked: Vec<(usize, u8)> =
        pc.into_iter().map(|i| (i, 1)).chain(pu.into_iter().map(|i| (i, 0))).collect();
    picked.sort_unstable();

    let stack = FeatureStack::from_pair(pair)?;
    let side = 2 * params.radius + 1;
    let mut patches = Vec::with_capacity(picked.len() * INPUT_CHANNELS * side * side);
    let mut out_labels = Vec::with_capacity(picked.len());
    let mut centers = Vec::with_capacity(picked.len());
    for (i, label) in picked {
        let (r, c) = (i / w, i % w);
        stack.patch_into(params.radius, r, c, &mut patches);
        out_labels.push(label);
        centers.push((r, c));
    }
    Ok(SampleSet { radius: params.radius, channels: INPUT_CHANNELS, patches, labels: out_labels, centers })
}
